import logging
import os
from enum import Enum
from typing import Any, Mapping, Optional, Sequence

from dotenv import dotenv_values
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from geometry import IouKind
from graph import PruneConfig
from model import Hierarchy, ModelConfig
from scene import MAX_OBJECTS, MAX_QUESTION_LEN, MAX_TOKENS

logger = logging.getLogger(__name__)

CONFIG_ENV_FILE = "config.env"


class ConfigError(ValueError):
    pass


class Preset(str, Enum):
    DESK = "desk"
    FULL = "full"


PRESETS: dict[Preset, dict[str, Any]] = {
    Preset.DESK: {"d": 32, "heads": 4, "lr": 1e-3, "steps": 2000, "milestones": (1200, 1800), "batch_size": 4},
    Preset.FULL: {"d": 768, "heads": 12, "lr": 1e-4, "steps": 24000, "milestones": (10000, 21000), "batch_size": 128},
}


class TrainConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    steps: int = Field(ge=0)
    batch_size: int = Field(ge=1)
    lr: float = Field(gt=0)
    lr_decay: float = Field(gt=0, le=1)
    milestones: tuple[int, ...]
    lam: float = Field(ge=0)
    eval_every: int = Field(ge=1)
    answer_min_count: int = Field(ge=1)


class RunConfig(BaseModel):
    """Every tunable of a run; serialised flat as key=value lines."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    preset: Preset = Preset.DESK
    seed: int = 0
    data_dir: str = "data"
    out_dir: str = "runs"
    max_objects: int = Field(default=MAX_OBJECTS, ge=1)
    max_tokens: int = Field(default=MAX_TOKENS, ge=1)
    max_question_len: int = Field(default=MAX_QUESTION_LEN, ge=1)
    max_answer_len: int = Field(default=12, ge=1)
    d: int = Field(default=32, ge=1)
    heads: int = Field(default=4, ge=1)
    encoder_layers: int = Field(default=2, ge=0)
    decoder_layers: int = Field(default=4, ge=0)
    hierarchy: Hierarchy = Hierarchy.OTSG_THEN_OSG_TSG
    use_otsg: bool = True
    use_osg: bool = True
    use_tsg: bool = True
    sparsify_otsg: bool = True
    sparsify_osg: bool = True
    sparsify_tsg: bool = True
    # bounds live on PruneConfig and ModelConfig; _consistent checks through them
    theta: float = 0.5
    epsilon: float = 0.3
    alpha: float = 5.0
    beta: float = 0.3
    gamma: float = 2.0
    delta: float = 0.5
    osg_iou_kind: IouKind = IouKind.DIOU
    steps: int = Field(default=2000, ge=0)
    batch_size: int = Field(default=4, ge=1)
    lr: float = Field(default=1e-3, gt=0)
    lr_decay: float = Field(default=0.1, gt=0, le=1)
    milestones: tuple[int, ...] = (1200, 1800)
    lam: float = Field(default=1.0, ge=0)
    eval_every: int = Field(default=100, ge=1)
    answer_min_count: int = Field(default=1, ge=1)

    @field_validator("milestones", mode="before")
    @classmethod
    def _split_milestones(cls, v: Any) -> Any:
        if isinstance(v, str):
            return tuple(int(x) for x in v.replace(" ", "").split(",") if x)
        return v

    @field_validator("milestones")
    @classmethod
    def _increasing(cls, v: tuple[int, ...]) -> tuple[int, ...]:
        if any(b <= a for a, b in zip(v, v[1:])) or any(m < 0 for m in v):
            raise ValueError("milestones must be non-negative and strictly increasing")
        return v

    @model_validator(mode="after")
    def _consistent(self) -> "RunConfig":
        for part in (self.model, self.prune, self.train):
            try:
                part()
            except ValidationError as e:
                raise ValueError(_describe(e)) from e
        return self

    def model(self) -> ModelConfig:
        return ModelConfig(
            d=self.d,
            heads=self.heads,
            encoder_layers=self.encoder_layers,
            decoder_layers=self.decoder_layers,
            hierarchy=self.hierarchy,
            use_otsg=self.use_otsg,
            use_osg=self.use_osg,
            use_tsg=self.use_tsg,
            sparsify_otsg=self.sparsify_otsg,
            sparsify_osg=self.sparsify_osg,
            sparsify_tsg=self.sparsify_tsg,
            max_answer_len=self.max_answer_len,
            max_question_len=self.max_question_len,
        )

    def prune(self) -> PruneConfig:
        return PruneConfig(
            theta=self.theta,
            epsilon=self.epsilon,
            alpha=self.alpha,
            beta=self.beta,
            gamma=self.gamma,
            delta=self.delta,
            osg_iou_kind=self.osg_iou_kind,
        )

    def train(self) -> TrainConfig:
        return TrainConfig(
            steps=self.steps,
            batch_size=self.batch_size,
            lr=self.lr,
            lr_decay=self.lr_decay,
            milestones=self.milestones,
            lam=self.lam,
            eval_every=self.eval_every,
            answer_min_count=self.answer_min_count,
        )

    def caps(self) -> dict[str, int]:
        return {"max_objects": self.max_objects, "max_tokens": self.max_tokens, "max_question_len": self.max_question_len}


def _describe(e: ValidationError) -> str:
    err = e.errors()[0]
    msg = err["msg"].removeprefix("Value error, ")
    where = ".".join(str(p) for p in err["loc"])
    return f"{where}: {msg}" if where else msg


def parse_overrides(pairs: Sequence[str]) -> dict[str, str]:
    out = {}
    for pair in pairs:
        key, sep, value = pair.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"override {pair!r} is not of the form key=value")
        out[key.strip()] = value.strip()
    return out


def build_run_config(
    file_values: Optional[Mapping[str, Any]] = None,
    overrides: Optional[Mapping[str, Any]] = None,
    seed: Optional[int] = None,
) -> RunConfig:
    """Layer defaults < preset < config file < overrides; the seed flag wins over everything."""
    layered: dict[str, Any] = {**(file_values or {}), **(overrides or {})}
    try:
        preset = Preset(layered.get("preset", Preset.DESK.value))
    except ValueError as e:
        raise ConfigError(f"preset: unknown preset {layered.get('preset')!r}") from e
    values: dict[str, Any] = {**PRESETS[preset], **layered}
    if "seed" not in values and os.getenv("SSGN_SEED"):
        values["seed"] = os.getenv("SSGN_SEED")
    if seed is not None:
        values["seed"] = seed
    for key, env in (("data_dir", "SSGN_DATA_DIR"), ("out_dir", "SSGN_OUT_DIR")):
        if key not in values and os.getenv(env):
            values[key] = os.getenv(env)
    try:
        return RunConfig(**values)
    except ValidationError as e:
        raise ConfigError(_describe(e)) from e


def load_run_config(
    path: Optional[str] = None, overrides: Sequence[str] = (), seed: Optional[int] = None
) -> RunConfig:
    file_values: dict[str, Any] = {}
    if path:
        if not os.path.exists(path):
            raise ConfigError(f"config file not found: {path}")
        file_values = {k: v for k, v in dotenv_values(path).items() if v is not None}
    cfg = build_run_config(file_values, parse_overrides(overrides), seed)
    logger.debug("Run config resolved: preset=%s seed=%s", cfg.preset.value, cfg.seed)
    return cfg


def _env_value(v: Any) -> str:
    if isinstance(v, Enum):
        return str(v.value)
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (tuple, list)):
        return ",".join(str(x) for x in v)
    return repr(v) if isinstance(v, float) else str(v)


def to_env_text(cfg: RunConfig) -> str:
    return "".join(f"{k}={_env_value(v)}\n" for k, v in cfg.model_dump().items())


def write_config_env(out_dir: str, cfg: RunConfig) -> str:
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, CONFIG_ENV_FILE)
    with open(path, "w", encoding="utf-8") as f:
        f.write(to_env_text(cfg))
    return path


def config_from_dict(values: Mapping[str, Any]) -> RunConfig:
    try:
        return RunConfig(**values)
    except ValidationError as e:
        raise ConfigError(_describe(e)) from e
