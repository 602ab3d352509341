from typing import Callable, Mapping, Sequence

import numpy as np
import pytest

from config import RunConfig, build_run_config
from geometry import box
from neural import Tensor, no_grad
from scene import Entity, EntityKind, LayoutFamily, QAExample, Scene, SynthSpec, label_feature
from storage import write_synthetic_dataset

D_IN = 4


def make_scene(
    objects: Sequence[tuple[Sequence[float], str]] = (),
    tokens: Sequence[tuple[Sequence[float], str]] = (),
    width: float = 100.0,
    height: float = 100.0,
    examples: Sequence[tuple[Sequence[str], Sequence[str]]] = (),
    d_in: int = D_IN,
) -> Scene:
    objs = [
        Entity(id=i, kind=EntityKind.OBJECT, box=box(*coords), label=label, feature=label_feature(label, d_in))
        for i, (coords, label) in enumerate(objects)
    ]
    toks = [
        Entity(id=len(objs) + i, kind=EntityKind.TOKEN, box=box(*coords), label=label, feature=label_feature(label, d_in))
        for i, (coords, label) in enumerate(tokens)
    ]
    qa = [QAExample(question=list(q), answers=list(a)) for q, a in examples]
    return Scene(image_width=width, image_height=height, objects=objs, tokens=toks, examples=qa)


@pytest.fixture
def tiny_scene() -> Scene:
    """Two signs, two tokens, one copy question."""
    return make_scene(
        objects=[((5, 5, 45, 45), "sign"), ((55, 55, 95, 95), "bus")],
        tokens=[((10, 20, 30, 30), "stop"), ((60, 70, 80, 80), "taxi")],
        examples=[(["what", "does", "the", "sign", "say"], ["stop"])],
    )


@pytest.fixture
def tiny_config(tmp_path) -> RunConfig:
    return build_run_config(
        {
            "d": "8",
            "heads": "2",
            "encoder_layers": "1",
            "decoder_layers": "1",
            "max_answer_len": "3",
            "steps": "3",
            "batch_size": "2",
            "eval_every": "2",
            "milestones": "",
            "data_dir": str(tmp_path / "data"),
            "out_dir": str(tmp_path / "run"),
        },
        seed=0,
    )


def small_spec(**overrides) -> SynthSpec:
    values = dict(
        scenes=6,
        feature_dim=D_IN,
        objects_min=2,
        objects_max=2,
        tokens_per_object_min=1,
        tokens_per_object_max=1,
        layouts={LayoutFamily.SIGNS_GRID: 1.0},
        splits={"train": 0.5, "val": 0.5, "test": 0.0},
    )
    values.update(overrides)
    return SynthSpec(**values)


@pytest.fixture
def dataset(tiny_config):
    write_synthetic_dataset(tiny_config.data_dir, 0, small_spec())
    return tiny_config.data_dir


def gradient_errors(
    loss_fn: Callable[[], Tensor],
    params: Mapping[str, Tensor],
    eps: float = 1e-4,
    samples: int = 4,
    seed: int = 0,
) -> list[tuple[str, float, float, float]]:
    """Central finite differences against backward() on a random sample of entries per parameter.

    Returns (name, analytic, numeric, relative error) rows.
    """
    for p in params.values():
        p.zero_grad()
    loss_fn().backward()
    analytic = {k: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data)) for k, p in params.items()}

    rng = np.random.default_rng(seed)
    rows = []
    for name, p in params.items():
        flat = p.data.reshape(-1)
        for i in rng.choice(flat.size, size=min(samples, flat.size), replace=False):
            orig = flat[i]
            with no_grad():
                flat[i] = orig + eps
                up = loss_fn().item()
                flat[i] = orig - eps
                down = loss_fn().item()
            flat[i] = orig
            num = (up - down) / (2 * eps)
            a = float(analytic[name].reshape(-1)[i])
            rows.append((name, a, num, abs(a - num) / max(abs(a), abs(num), 1e-3)))
    return rows


@pytest.fixture
def gradcheck():
    def check(loss_fn, params, tol=1e-4, **kw):
        rows = gradient_errors(loss_fn, params, **kw)
        bad = [r for r in rows if r[3] >= tol]
        assert not bad, f"gradient mismatches: {bad[:5]}"
        return rows

    return check
