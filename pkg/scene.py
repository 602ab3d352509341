import hashlib
import json
import logging
import math
from collections import Counter
from enum import Enum
from typing import Any, Iterable, List

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, PrivateAttr, ValidationError, field_validator, model_validator

from geometry import BoundingBox, GeometryError, box

logger = logging.getLogger(__name__)

SCENE_VERSION = "1"
MAX_OBJECTS = 100
MAX_TOKENS = 50
MAX_QUESTION_LEN = 20
MAX_GOLD_ANSWERS = 10

PAD, BEGIN, END, UNK = "<pad>", "<begin>", "<end>", "<unk>"
RESERVED = (PAD, BEGIN, END, UNK)


class SceneError(ValueError):
    """A scene document or dataset that cannot be used as given."""


class EntityKind(str, Enum):
    OBJECT = "object"
    TOKEN = "token"


# --- Pydantic Models ---
class Entity(BaseModel):
    model_config = ConfigDict(frozen=True)

    id: int
    kind: EntityKind
    box: BoundingBox
    label: str
    feature: List[float]


class QAExample(BaseModel):
    model_config = ConfigDict(frozen=True)

    question: List[str]
    answers: List[str]

    @field_validator("question")
    @classmethod
    def _question_not_empty(cls, v: List[str]) -> List[str]:
        if not v:
            raise ValueError("question must have at least one word")
        return v

    @field_validator("answers")
    @classmethod
    def _answers_valid(cls, v: List[str]) -> List[str]:
        if not 1 <= len(v) <= MAX_GOLD_ANSWERS:
            raise ValueError(f"expected 1-{MAX_GOLD_ANSWERS} answers, got {len(v)}")
        if any(not a.strip() for a in v):
            raise ValueError("answers must be non-empty")
        return v


class Scene(BaseModel):
    model_config = ConfigDict(frozen=True)

    image_width: float = Field(gt=0)
    image_height: float = Field(gt=0)
    objects: List[Entity] = Field(default_factory=list)
    tokens: List[Entity] = Field(default_factory=list)
    examples: List[QAExample] = Field(default_factory=list)

    @model_validator(mode="after")
    def _unique_ids(self) -> "Scene":
        ids = [e.id for e in (*self.objects, *self.tokens)]
        if len(set(ids)) != len(ids):
            raise ValueError("entity 'id' values must be unique across objects and tokens")
        return self

    @property
    def d_img(self) -> float:
        return math.sqrt(self.image_width ** 2 + self.image_height ** 2)

    def normalized_height(self, entity: Entity) -> float:
        return entity.box.height / self.image_height

    @property
    def entities(self) -> list[Entity]:
        return [*self.objects, *self.tokens]


class Vocabulary(BaseModel):
    """Ordered word list with the four reserved entries first."""

    words: List[str]
    _index: dict[str, int] = PrivateAttr(default_factory=dict)

    @model_validator(mode="after")
    def _build_index(self) -> "Vocabulary":
        if list(self.words[: len(RESERVED)]) != list(RESERVED):
            raise ValueError(f"vocabulary must start with reserved entries {RESERVED}")
        index = {}
        for i, w in enumerate(self.words):
            if w in index:
                raise ValueError(f"duplicate vocabulary word: {w!r}")
            index[w] = i
        self._index = index
        return self

    @classmethod
    def build(cls, words: Iterable[str], min_count: int = 1) -> "Vocabulary":
        counts = Counter(w for w in words if w not in RESERVED)
        kept = sorted(w for w, c in counts.items() if c >= min_count)
        return cls(words=[*RESERVED, *kept])

    def __len__(self) -> int:
        return len(self.words)

    def __contains__(self, word: str) -> bool:
        return word in self._index

    def index(self, word: str) -> int:
        return self._index.get(word, self._index[UNK])

    def word(self, i: int) -> str:
        return self.words[i]

    @property
    def pad(self) -> int:
        return self._index[PAD]

    @property
    def begin(self) -> int:
        return self._index[BEGIN]

    @property
    def end(self) -> int:
        return self._index[END]

    @property
    def unk(self) -> int:
        return self._index[UNK]


# --- Scene file codec ---
def _entity_doc(e: Entity) -> dict[str, Any]:
    return {"id": e.id, "label": e.label, "box": e.box.to_list(), "feature": list(e.feature)}


def scene_to_document(scene: Scene) -> dict[str, Any]:
    return {
        "version": SCENE_VERSION,
        "image": {"w": scene.image_width, "h": scene.image_height},
        "objects": [_entity_doc(e) for e in scene.objects],
        "tokens": [_entity_doc(e) for e in scene.tokens],
        "examples": [{"question": list(x.question), "answers": list(x.answers)} for x in scene.examples],
    }


def save_scene(scene: Scene) -> bytes:
    return (json.dumps(scene_to_document(scene), indent=2, ensure_ascii=False) + "\n").encode("utf-8")


def _parse_entities(
    docs: Any, kind: EntityKind, field: str, width: float, height: float
) -> tuple[list[Entity], int]:
    if not isinstance(docs, list):
        raise SceneError(f"'{field}' must be a list")
    entities: list[Entity] = []
    clamped = 0
    for i, doc in enumerate(docs):
        where = f"{field}[{i}]"
        if not isinstance(doc, dict):
            raise SceneError(f"'{where}' must be an object")
        missing = [k for k in ("id", "label", "box", "feature") if k not in doc]
        if missing:
            raise SceneError(f"'{where}' is missing {', '.join(missing)}")
        try:
            raw = BoundingBox.from_list(doc["box"])
        except (TypeError, ValueError) as e:
            raise SceneError(f"'{where}.box' is invalid: {e}") from e
        fitted = raw.clamp(width, height)
        if fitted != raw:
            clamped += 1
            logger.warning("[scene] %s box %s clamped to image %sx%s", where, raw.to_list(), width, height)
        if fitted.degenerate:
            raise SceneError(f"'{where}.box' has no area inside the image")
        try:
            entities.append(Entity(id=doc["id"], kind=kind, box=fitted, label=doc["label"], feature=doc["feature"]))
        except ValidationError as e:
            raise SceneError(f"'{where}' is invalid: {e.errors()[0]['msg']}") from e
    return entities, clamped


def load_scene(
    data: bytes | str,
    max_objects: int = MAX_OBJECTS,
    max_tokens: int = MAX_TOKENS,
    max_question_len: int = MAX_QUESTION_LEN,
) -> tuple[Scene, int]:
    """Parse a scene document; returns the scene and the number of clamped boxes."""
    try:
        doc = json.loads(data)
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise SceneError(f"malformed scene document: {e}") from e
    if not isinstance(doc, dict):
        raise SceneError("malformed scene document: top level must be an object")
    version = doc.get("version")
    if version != SCENE_VERSION:
        raise SceneError(f"'version' mismatch: expected {SCENE_VERSION!r}, got {version!r}")
    image = doc.get("image")
    if not isinstance(image, dict) or "w" not in image or "h" not in image:
        raise SceneError("'image' must be an object with 'w' and 'h'")
    try:
        width, height = float(image["w"]), float(image["h"])
    except (TypeError, ValueError) as e:
        raise SceneError(f"'image' size is not numeric: {e}") from e
    if not (width > 0 and height > 0):
        raise SceneError(f"'image' size must be positive, got {width}x{height}")

    objects, c1 = _parse_entities(doc.get("objects", []), EntityKind.OBJECT, "objects", width, height)
    tokens, c2 = _parse_entities(doc.get("tokens", []), EntityKind.TOKEN, "tokens", width, height)
    if len(objects) > max_objects:
        raise SceneError(f"'objects' has {len(objects)} entries, cap is {max_objects}")
    if len(tokens) > max_tokens:
        raise SceneError(f"'tokens' has {len(tokens)} entries, cap is {max_tokens}")
    dims = {len(e.feature) for e in (*objects, *tokens)}
    if len(dims) > 1:
        raise SceneError(f"entity 'feature' lengths differ: {sorted(dims)}")

    examples: list[QAExample] = []
    for i, ex in enumerate(doc.get("examples", [])):
        if not isinstance(ex, dict):
            raise SceneError(f"'examples[{i}]' must be an object")
        try:
            examples.append(
                QAExample(question=list(ex.get("question", []))[:max_question_len], answers=list(ex.get("answers", [])))
            )
        except (ValidationError, TypeError) as e:
            msg = e.errors()[0]["msg"] if isinstance(e, ValidationError) else str(e)
            raise SceneError(f"'examples[{i}]' is invalid: {msg}") from e

    clamped = c1 + c2
    try:
        scene = Scene(image_width=width, image_height=height, objects=objects, tokens=tokens, examples=examples)
    except ValidationError as e:
        raise SceneError(e.errors()[0]["msg"]) from e
    return scene, clamped


# --- Synthetic scenes ---
class LayoutFamily(str, Enum):
    SIGNS_GRID = "signs-grid"
    STOREFRONT_ROWS = "storefront-rows"
    DUPLICATE_BOXES = "duplicate-boxes"


DEFAULT_OBJECT_LABELS = [
    "sign", "bus", "shirt", "bottle", "poster", "truck", "banner", "board",
    "can", "book", "cup", "box", "screen", "door", "plate", "jersey",
]
DEFAULT_WORDS = [
    "stop", "exit", "open", "sale", "coffee", "pizza", "taxi", "hotel", "bank", "bar",
    "cafe", "market", "police", "school", "museum", "park", "express", "city", "north",
    "south", "east", "west", "main", "street", "fresh", "juice", "books", "music", "pharmacy",
    "bakery", "garage", "cinema", "library", "station", "airport", "harbor", "bridge",
    "garden", "central", "royal",
]

MIN_TOKEN_PX = 4.0
MIN_DUPLICATE_PX = 60.0


class SynthSpec(BaseModel):
    model_config = ConfigDict(extra="forbid")

    scenes: int = Field(default=10, ge=1)
    image_width: float = Field(default=640.0, gt=0)
    image_height: float = Field(default=480.0, gt=0)
    layouts: dict[LayoutFamily, float] = Field(
        default_factory=lambda: {LayoutFamily.SIGNS_GRID: 1.0, LayoutFamily.STOREFRONT_ROWS: 1.0, LayoutFamily.DUPLICATE_BOXES: 1.0}
    )
    objects_min: int = Field(default=2, ge=1)
    objects_max: int = Field(default=4, ge=1)
    tokens_per_object_min: int = Field(default=1, ge=1)
    tokens_per_object_max: int = Field(default=2, ge=1)
    distractors_min: int = Field(default=1, ge=0)
    distractors_max: int = Field(default=2, ge=0)
    duplicate_jitter: float = Field(default=1.0, ge=0, le=2.0)
    feature_dim: int = Field(default=16, ge=1)
    object_labels: List[str] = Field(default_factory=lambda: list(DEFAULT_OBJECT_LABELS))
    vocabulary: List[str] = Field(default_factory=lambda: list(DEFAULT_WORDS))
    questions_per_scene: int = Field(default=1, ge=1)
    answers_per_example: int = Field(default=10, ge=1, le=MAX_GOLD_ANSWERS)
    annotator_noise: float = Field(default=0.1, ge=0, le=1)
    splits: dict[str, float] = Field(default_factory=lambda: {"train": 0.8, "val": 0.1, "test": 0.1})

    @model_validator(mode="after")
    def _ranges(self) -> "SynthSpec":
        if self.objects_min > self.objects_max:
            raise ValueError("objects_min exceeds objects_max")
        if self.tokens_per_object_min > self.tokens_per_object_max:
            raise ValueError("tokens_per_object_min exceeds tokens_per_object_max")
        if self.distractors_min > self.distractors_max:
            raise ValueError("distractors_min exceeds distractors_max")
        if not self.layouts or any(w < 0 for w in self.layouts.values()) or sum(self.layouts.values()) <= 0:
            raise ValueError("layouts needs at least one positive weight")
        if set(self.splits) - {"train", "val", "test"}:
            raise ValueError("splits may only name train, val and test")
        if abs(sum(self.splits.values()) - 1.0) > 1e-9:
            raise ValueError("split ratios must sum to 1")
        if len(set(self.vocabulary)) < 2:
            raise ValueError("vocabulary needs at least two distinct words")
        return self


def label_feature(label: str, dim: int) -> list[float]:
    """Deterministic pseudo-random feature shared by every entity with this label."""
    seed = int.from_bytes(hashlib.sha256(label.encode("utf-8")).digest()[:8], "little")
    vec = np.random.default_rng(seed).standard_normal(dim)
    return [round(float(v), 6) for v in vec]


def _r(v: float) -> float:
    return round(float(v), 3)


def _token_line(words: list[str], x0: float, x1: float, y0: float, height: float) -> list[tuple[BoundingBox, str]]:
    """Lay words left to right across [x0, x1] on one line of the given height."""
    n = len(words)
    gap = (x1 - x0) * 0.05
    width = ((x1 - x0) - gap * (n - 1)) / n
    if width < MIN_TOKEN_PX or height < MIN_TOKEN_PX:
        raise SceneError(f"spec is unsatisfiable: {n} tokens do not fit in a {x1 - x0:.1f}px line")
    out = []
    for k, w in enumerate(words):
        left = x0 + k * (width + gap)
        out.append((box(_r(left), _r(y0), _r(left + width), _r(y0 + height)), w))
    return out


def _grid(n: int, x0: float, y0: float, w: float, h: float) -> list[tuple[float, float, float, float]]:
    cols = math.ceil(math.sqrt(n))
    rows = math.ceil(n / cols)
    cw, ch = w / cols, h / rows
    return [(x0 + (i % cols) * cw, y0 + (i // cols) * ch, cw, ch) for i in range(n)]


class _Builder:
    def __init__(self, spec: SynthSpec, rng: np.random.Generator):
        self.spec = spec
        self.rng = rng
        self.objects: list[tuple[BoundingBox, str]] = []
        self.tokens: list[tuple[BoundingBox, str]] = []
        # object index -> token indices describing it
        self.readings: dict[int, list[int]] = {}

    def words(self, n: int) -> list[str]:
        return [str(w) for w in self.rng.choice(self.spec.vocabulary, size=n, replace=True)]

    def labels(self, n: int) -> list[str]:
        if n > len(self.spec.object_labels):
            raise SceneError(f"spec is unsatisfiable: {n} objects need distinct labels, only {len(self.spec.object_labels)} given")
        return [str(w) for w in self.rng.choice(self.spec.object_labels, size=n, replace=False)]

    def n_objects(self) -> int:
        return int(self.rng.integers(self.spec.objects_min, self.spec.objects_max + 1))

    def n_words(self) -> int:
        return int(self.rng.integers(self.spec.tokens_per_object_min, self.spec.tokens_per_object_max + 1))

    def add_sign(self, obj: BoundingBox, label: str, line_height: float) -> int:
        oi = len(self.objects)
        self.objects.append((obj, label))
        y0 = obj.y_tl + (obj.height - line_height) / 2
        line = _token_line(self.words(self.n_words()), obj.x_tl + obj.width * 0.05, obj.x_br - obj.width * 0.05, y0, line_height)
        start = len(self.tokens)
        self.tokens.extend(line)
        self.readings[oi] = list(range(start, start + len(line)))
        return oi


def _signs_grid(b: _Builder, spec: SynthSpec) -> None:
    n = b.n_objects()
    for (cx, cy, cw, ch), label in zip(_grid(n, 0, 0, spec.image_width, spec.image_height), b.labels(n)):
        ow, oh = cw * b.rng.uniform(0.5, 0.8), ch * b.rng.uniform(0.4, 0.7)
        ox, oy = cx + b.rng.uniform(0, cw - ow), cy + b.rng.uniform(0, ch - oh)
        obj = box(_r(ox), _r(oy), _r(ox + ow), _r(oy + oh))
        b.add_sign(obj, label, obj.height * b.rng.uniform(0.2, 0.3))


def _storefront_rows(b: _Builder, spec: SynthSpec) -> None:
    # Content stays in the top-left 30% and distractors in the bottom-right 10%,
    # so every content/distractor gap is at least 0.6 * d_img.
    W, H = spec.image_width, spec.image_height
    n = b.n_objects()
    cells = _grid(n, 0, 0, 0.3 * W, 0.3 * H)
    line_height = min(0.05 * H, min(ch for _, _, _, ch in cells) * 0.5) * b.rng.uniform(0.6, 1.0)
    for (cx, cy, cw, ch), label in zip(cells, b.labels(n)):
        # token diagonals stay below 0.1 * d_img
        ow = min(cw * 0.9, 0.1 * W)
        oh = min(ch * 0.9, line_height * 2.0)
        obj = box(_r(cx + (cw - ow) / 2), _r(cy + (ch - oh) / 2), _r(cx + (cw + ow) / 2), _r(cy + (ch + oh) / 2))
        b.add_sign(obj, label, line_height)
    k = int(b.rng.integers(spec.distractors_min, spec.distractors_max + 1))
    if k:
        x0, y0 = 0.9 * W, 0.9 * H
        height = 0.05 * H * b.rng.uniform(0.4, 1.0)
        b.tokens.extend(_token_line(b.words(k), x0, W, y0 + (0.1 * H - height) / 2, height))


def _duplicate_boxes(b: _Builder, spec: SynthSpec) -> None:
    n = b.n_objects()
    j = spec.duplicate_jitter
    for (cx, cy, cw, ch), label in zip(_grid(n, 0, 0, spec.image_width, spec.image_height), b.labels(n)):
        ow, oh = cw * b.rng.uniform(0.6, 0.8), ch * b.rng.uniform(0.6, 0.8)
        if ow < MIN_DUPLICATE_PX or oh < MIN_DUPLICATE_PX:
            raise SceneError(f"spec is unsatisfiable: duplicate-boxes objects need {MIN_DUPLICATE_PX:.0f}px, cell gives {ow:.1f}x{oh:.1f}")
        ox, oy = cx + (cw - ow) / 2, cy + (ch - oh) / 2
        obj = box(_r(ox), _r(oy), _r(ox + ow), _r(oy + oh))
        b.add_sign(obj, label, obj.height * b.rng.uniform(0.2, 0.3))
        shift = b.rng.uniform(-j, j, size=4)
        b.objects.append((box(*(_r(c + s) for c, s in zip(obj.to_list(), shift))), label))


_LAYOUTS = {
    LayoutFamily.SIGNS_GRID: _signs_grid,
    LayoutFamily.STOREFRONT_ROWS: _storefront_rows,
    LayoutFamily.DUPLICATE_BOXES: _duplicate_boxes,
}


def _gold_answers(rng: np.random.Generator, answer: str, spec: SynthSpec) -> list[str]:
    golds = []
    for _ in range(spec.answers_per_example):
        if spec.annotator_noise > 0 and rng.random() < spec.annotator_noise:
            others = [w for w in spec.vocabulary if w != answer]
            golds.append(str(rng.choice(others)))
        else:
            golds.append(answer)
    return golds


def generate_scene(seed: int, index: int, spec: SynthSpec) -> tuple[Scene, LayoutFamily]:
    rng = np.random.default_rng([seed, index])
    families = sorted(spec.layouts, key=lambda f: f.value)
    weights = np.array([spec.layouts[f] for f in families], dtype=np.float64)
    family = families[int(rng.choice(len(families), p=weights / weights.sum()))]

    b = _Builder(spec, rng)
    try:
        _LAYOUTS[family](b, spec)
    except GeometryError as e:
        raise SceneError(f"spec is unsatisfiable: {e}") from e

    objects = [
        Entity(id=i, kind=EntityKind.OBJECT, box=bx, label=label, feature=label_feature(label, spec.feature_dim))
        for i, (bx, label) in enumerate(b.objects)
    ]
    offset = len(objects)
    tokens = [
        Entity(id=offset + i, kind=EntityKind.TOKEN, box=bx, label=w, feature=label_feature(w, spec.feature_dim))
        for i, (bx, w) in enumerate(b.tokens)
    ]

    asked = sorted(b.readings)
    picks = rng.choice(len(asked), size=min(spec.questions_per_scene, len(asked)), replace=False)
    examples = []
    for p in sorted(int(x) for x in picks):
        oi = asked[p]
        answer = " ".join(b.tokens[t][1] for t in b.readings[oi])
        question = ["what", "does", "the", *b.objects[oi][1].split(), "say"][:MAX_QUESTION_LEN]
        examples.append(QAExample(question=question, answers=_gold_answers(rng, answer, spec)))

    scene = Scene(
        image_width=spec.image_width, image_height=spec.image_height, objects=objects, tokens=tokens, examples=examples
    )
    logger.debug("[synth][scene %s] %s: %d objects, %d tokens", index, family.value, len(objects), len(tokens))
    return scene, family


def synth_generate(seed: int, spec: SynthSpec) -> list[Scene]:
    return [generate_scene(seed, i, spec)[0] for i in range(spec.scenes)]
