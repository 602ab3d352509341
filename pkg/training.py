import csv
import json
import logging
import math
import os
from collections import Counter
from dataclasses import dataclass, field
from typing import Any, Mapping, Optional, Sequence

import numpy as np
from pydantic import BaseModel, model_validator

from config import RunConfig, config_from_dict, write_config_env
from decoder import (
    DecodedAnswer,
    answer_targets,
    decoder_context,
    greedy_decode,
    init_params,
    target_matrix,
    teacher_forced_logits,
)
from graph import SceneGraph, build_scene_graph
from metrics import EvalItem, EvalReport, anls, evaluate, normalize_answer
from model import ModelConfig, encode, forward_hierarchy
from neural import (
    AdamState,
    NumericError,
    Params,
    Tensor,
    adam_step,
    bce_with_logits,
    concat,
    decode_checkpoint,
    encode_checkpoint,
    no_grad,
    parameter_count,
    zero_grad,
)
from scene import Scene, SceneError, Vocabulary
from storage import load_split

logger = logging.getLogger(__name__)

METRICS_FILE = "metrics.csv"
METRICS_COLUMNS = ["step", "lr", "bce", "pg", "total", "val_acc", "val_anls"]
LAST_CHECKPOINT = "last.ckpt"
BEST_CHECKPOINT = "best.ckpt"


class LossBreakdown(BaseModel):
    bce: float
    pg: float
    total: float
    lam: float = 1.0

    @model_validator(mode="after")
    def _finite(self) -> "LossBreakdown":
        if not all(math.isfinite(v) for v in (self.bce, self.pg, self.total)):
            raise ValueError(f"non-finite loss: bce={self.bce} pg={self.pg} total={self.total}")
        return self


@dataclass
class Example:
    example_id: str
    scene: Scene
    question: list[str]
    golds: list[str]
    graph: SceneGraph

    @property
    def question_text(self) -> str:
        return " ".join(self.question)


class Vocabs(BaseModel):
    question: Vocabulary
    answer: Vocabulary


def collect_examples(scenes: Sequence[tuple[str, Scene]], cfg: RunConfig) -> list[Example]:
    """Flatten scenes into examples; each scene's graph is pruned once and shared."""
    prune, toggles = cfg.prune(), cfg.model().toggles
    out = []
    for scene_id, scene in scenes:
        if not scene.examples:
            continue
        sg = build_scene_graph(scene, prune, toggles)
        for k, ex in enumerate(scene.examples):
            out.append(Example(f"{scene_id}#{k}", scene, list(ex.question), list(ex.answers), sg))
    return out


def copyable_words(scene: Scene) -> set[str]:
    return {normalize_answer(t.label) for t in scene.tokens}


def build_vocabs(examples: Sequence[Example], answer_min_count: int = 1) -> Vocabs:
    """Question words, plus the target words no scene token can supply.

    Words a token already carries are left to the copy scores, so the vocabulary
    head cannot learn them by heart.
    """
    question = Vocabulary.build(w.lower() for ex in examples for w in ex.question)
    answer = Vocabulary.build(
        (
            w
            for ex in examples
            for w in training_answer(ex.golds).split()
            if w not in copyable_words(ex.scene)
        ),
        min_count=answer_min_count,
    )
    return Vocabs(question=question, answer=answer)


def training_answer(golds: Sequence[str]) -> str:
    """Most frequent normalised gold answer; ties go to the one listed first."""
    normalized = [normalize_answer(g) for g in golds]
    counts = Counter(normalized)
    return max(normalized, key=lambda a: (counts[a], -normalized.index(a)))


def feature_dim(examples: Sequence[Example]) -> int:
    for ex in examples:
        for e in ex.scene.entities:
            return len(e.feature)
    raise SceneError("no entity features found in the training split")


# --- Losses ---
def bce_loss(step_logits: Tensor, step_targets: np.ndarray) -> Tensor:
    return bce_with_logits(step_logits, step_targets)


def pg_loss(decoded: DecodedAnswer, golds: Sequence[str]) -> Tensor:
    reward = max(anls(decoded.text, g) for g in golds) if golds else 0.0
    if reward == 0 or not decoded.selected:
        return Tensor(0.0)
    selected = concat([s.reshape(1) for s in decoded.selected])
    return (-selected).softplus().mean() * reward


def _context(params: Mapping[str, Tensor], ex: Example, vocabs: Vocabs, cfg: ModelConfig):
    question_ids = [vocabs.question.index(w.lower()) for w in ex.question]
    state = encode(ex.scene, question_ids, params, cfg)
    V, T = forward_hierarchy(state, ex.graph.edges, params, cfg)
    return decoder_context(state, V, T, params, cfg)


def example_loss(
    params: Mapping[str, Tensor], ex: Example, vocabs: Vocabs, cfg: ModelConfig, lam: float = 1.0
) -> tuple[Tensor, LossBreakdown]:
    ctx = _context(params, ex, vocabs, cfg)
    targets = answer_targets(training_answer(ex.golds), ex.scene, vocabs.answer, cfg.max_answer_len)
    logits = teacher_forced_logits(ctx, params, cfg, vocabs.answer, targets)
    bce = bce_loss(logits, target_matrix(targets, len(vocabs.answer), len(ex.scene.tokens)))
    if lam > 0:
        pg = pg_loss(greedy_decode(ctx, ex.scene, params, cfg, vocabs.answer), ex.golds)
        total = bce + pg * lam
    else:
        pg, total = Tensor(0.0), bce
    if not (math.isfinite(bce.item()) and math.isfinite(pg.item()) and math.isfinite(total.item())):
        raise NumericError(f"non-finite loss for example {ex.example_id}")
    return total, LossBreakdown(bce=bce.item(), pg=pg.item(), total=total.item(), lam=lam)


def predict(
    params: Mapping[str, Tensor], examples: Sequence[Example], vocabs: Vocabs, cfg: ModelConfig
) -> dict[str, DecodedAnswer]:
    out = {}
    with no_grad():
        for ex in examples:
            ctx = _context(params, ex, vocabs, cfg)
            out[ex.example_id] = greedy_decode(ctx, ex.scene, params, cfg, vocabs.answer)
    return out


def eval_items(examples: Sequence[Example]) -> list[EvalItem]:
    return [EvalItem(example_id=ex.example_id, question=ex.question_text, golds=ex.golds) for ex in examples]


def evaluate_examples(
    params: Mapping[str, Tensor],
    examples: Sequence[Example],
    vocabs: Vocabs,
    cfg: ModelConfig,
    split: Optional[str] = None,
    sparsity: Optional[Mapping[str, float]] = None,
) -> EvalReport:
    decoded = predict(params, examples, vocabs, cfg)
    steps = {
        k: [{"source": s.source.value, "index": s.index, "logit": s.logit} for s in d.steps] for k, d in decoded.items()
    }
    return evaluate({k: d.text for k, d in decoded.items()}, eval_items(examples), sparsity, split, steps)


# --- Checkpoints ---
def write_checkpoint(path: str, params: Params, state: AdamState, metadata: Mapping[str, Any]) -> str:
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "wb") as f:
        f.write(encode_checkpoint(params, state, metadata))
    logger.info("[train] checkpoint written: %s (step %d)", path, state.step)
    return path


@dataclass
class LoadedCheckpoint:
    params: Params
    state: AdamState
    config: RunConfig
    vocabs: Vocabs
    metadata: dict[str, Any]


def read_checkpoint(path: str) -> LoadedCheckpoint:
    if not os.path.exists(path):
        raise FileNotFoundError(f"No checkpoint found at {path}")
    with open(path, "rb") as f:
        params, state, meta = decode_checkpoint(f.read())
    missing = [k for k in ("config", "question_vocab", "answer_vocab") if k not in meta]
    if missing:
        raise SceneError(f"{path}: checkpoint metadata lacks {', '.join(missing)}")
    vocabs = Vocabs(
        question=Vocabulary(words=meta["question_vocab"]),
        answer=Vocabulary(words=meta["answer_vocab"]),
    )
    return LoadedCheckpoint(params, state, config_from_dict(meta["config"]), vocabs, meta)


def _metadata(cfg: RunConfig, vocabs: Vocabs, d_in: int, best: Optional[dict[str, Any]]) -> dict[str, Any]:
    return {
        "config": cfg.model_dump(mode="json"),
        "question_vocab": list(vocabs.question.words),
        "answer_vocab": list(vocabs.answer.words),
        "d_in": d_in,
        "best": best,
    }


# --- Training loop ---
def batch_indices(n: int, batch_size: int, step: int, seed: int, _cache: Optional[dict] = None) -> list[int]:
    """Example indices for 0-based ``step``: consecutive slices of a fresh permutation per epoch."""
    if n <= 0:
        raise SceneError("cannot draw batches from an empty training set")
    out = []
    for p in range(step * batch_size, (step + 1) * batch_size):
        epoch, offset = divmod(p, n)
        if _cache is not None and epoch in _cache:
            perm = _cache[epoch]
        else:
            perm = np.random.default_rng([seed, epoch]).permutation(n)
            if _cache is not None:
                _cache[epoch] = perm
        out.append(int(perm[offset]))
    return out


@dataclass
class TrainResult:
    out_dir: str
    last_checkpoint: str
    best_checkpoint: str
    metrics_path: str
    final_step: int
    best_val_acc: Optional[float]
    losses: list[float] = field(default_factory=list)


def _fmt(v: Optional[float]) -> str:
    return "" if v is None else repr(float(v))


def _truncate_metrics(path: str, step: int) -> bool:
    """Drop log rows past ``step``; False when there is no usable log to append to."""
    if not os.path.exists(path):
        return False
    with open(path, newline="", encoding="utf-8") as f:
        rows = list(csv.reader(f))
    if not rows or rows[0] != METRICS_COLUMNS:
        return False
    kept = rows[:1] + [r for r in rows[1:] if r and int(r[0]) <= step]
    if len(kept) != len(rows):
        logger.info("[train] dropping %d metrics rows past step %d", len(rows) - len(kept), step)
        with open(path, "w", newline="", encoding="utf-8") as f:
            csv.writer(f).writerows(kept)
    return True


def train(cfg: RunConfig, resume: Optional[str] = None) -> TrainResult:
    if resume:
        loaded = read_checkpoint(resume)
        stored = loaded.config.model_dump()
        stored.update(steps=cfg.steps, out_dir=cfg.out_dir, data_dir=cfg.data_dir, eval_every=cfg.eval_every)
        cfg = config_from_dict(stored)
        logger.info("[train] resuming from %s at step %d", resume, loaded.state.step)

    mcfg, tcfg = cfg.model(), cfg.train()
    train_ex = collect_examples(load_split(cfg.data_dir, "train", **cfg.caps()), cfg)
    val_ex = collect_examples(load_split(cfg.data_dir, "val", **cfg.caps()), cfg)
    if not train_ex:
        raise SceneError(f"training split in {cfg.data_dir} has no examples")

    if resume:
        params, state, vocabs = loaded.params, loaded.state, loaded.vocabs
        d_in = int(loaded.metadata.get("d_in", feature_dim(train_ex)))
        best = loaded.metadata.get("best")
    else:
        vocabs = build_vocabs(train_ex, tcfg.answer_min_count)
        d_in = feature_dim(train_ex)
        params = init_params(mcfg, d_in, len(vocabs.question), len(vocabs.answer), cfg.seed)
        state = AdamState(lr=tcfg.lr, milestones=tcfg.milestones, decay=tcfg.lr_decay)
        best = None
    logger.info(
        "[train] %d train / %d val examples, %d parameters, vocab q=%d a=%d",
        len(train_ex),
        len(val_ex),
        parameter_count(params),
        len(vocabs.question),
        len(vocabs.answer),
    )

    os.makedirs(cfg.out_dir, exist_ok=True)
    write_config_env(cfg.out_dir, cfg)
    last_path = os.path.join(cfg.out_dir, LAST_CHECKPOINT)
    best_path = os.path.join(cfg.out_dir, BEST_CHECKPOINT)
    metrics_path = os.path.join(cfg.out_dir, METRICS_FILE)

    append = bool(resume) and _truncate_metrics(metrics_path, state.step)
    if not resume or not os.path.exists(best_path):
        write_checkpoint(best_path, params, state, _metadata(cfg, vocabs, d_in, best))

    losses: list[float] = []
    perms: dict[int, np.ndarray] = {}
    saved_at: Optional[int] = None
    with open(metrics_path, "a" if append else "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        if not append:
            writer.writerow(METRICS_COLUMNS)
        while state.step < tcfg.steps:
            idx = batch_indices(len(train_ex), tcfg.batch_size, state.step, cfg.seed, perms)
            zero_grad(params)
            totals, parts = [], []
            for i in idx:
                total, part = example_loss(params, train_ex[i], vocabs, mcfg, tcfg.lam)
                totals.append(total)
                parts.append(part)
            batch_loss = totals[0]
            for t in totals[1:]:
                batch_loss = batch_loss + t
            batch_loss = batch_loss * (1.0 / len(totals))
            batch_loss.backward()
            lr = adam_step(params, state)

            row = {
                "bce": float(np.mean([p.bce for p in parts])),
                "pg": float(np.mean([p.pg for p in parts])),
                "total": batch_loss.item(),
            }
            losses.append(row["total"])
            val_acc = val_anls = None
            checkpoint_due = state.step % tcfg.eval_every == 0 or state.step == tcfg.steps
            improved = False
            if checkpoint_due:
                improved = not val_ex
                if val_ex:
                    report = evaluate_examples(params, val_ex, vocabs, mcfg, split="val")
                    val_acc, val_anls = report.acc, report.anls
                    if best is None or val_acc > best["val_acc"]:
                        best = {"step": state.step, "val_acc": val_acc, "val_anls": val_anls}
                        improved = True
                logger.info("[train][step %s] val acc=%s anls=%s", state.step, val_acc, val_anls)
            writer.writerow(
                [state.step, _fmt(lr), _fmt(row["bce"]), _fmt(row["pg"]), _fmt(row["total"]), _fmt(val_acc), _fmt(val_anls)]
            )
            f.flush()
            logger.info(
                "[train][step %s] lr=%g bce=%.5f pg=%.5f total=%.5f", state.step, lr, row["bce"], row["pg"], row["total"]
            )
            # checkpoints never run ahead of the flushed log
            if improved:
                write_checkpoint(best_path, params, state, _metadata(cfg, vocabs, d_in, best))
            if checkpoint_due:
                write_checkpoint(last_path, params, state, _metadata(cfg, vocabs, d_in, best))
                saved_at = state.step

    if saved_at != state.step:
        write_checkpoint(last_path, params, state, _metadata(cfg, vocabs, d_in, best))
    return TrainResult(
        out_dir=cfg.out_dir,
        last_checkpoint=last_path,
        best_checkpoint=best_path,
        metrics_path=metrics_path,
        final_step=state.step,
        best_val_acc=best["val_acc"] if best else None,
        losses=losses,
    )


def prediction_records(report: EvalReport) -> list[str]:
    """One JSON line per example for the prediction dump."""
    return [
        json.dumps(
            {
                "id": r.example_id,
                "question": r.question,
                "prediction": r.prediction,
                "sources": r.steps or [],
                "golds": r.golds,
            },
            ensure_ascii=False,
        )
        for r in report.records
    ]
