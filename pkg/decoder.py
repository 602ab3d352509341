import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Mapping, Optional, Sequence

import numpy as np

from metrics import normalize_answer
from model import EncoderState, ModelConfig, init_model_params
from neural import (
    Params,
    Tensor,
    add_param,
    apply_layer_norm,
    apply_linear,
    attention_block,
    concat,
    glorot,
    init_attention_block,
    init_layer_norm,
    init_linear,
)
from scene import RESERVED, Scene, Vocabulary

logger = logging.getLogger(__name__)


class DecoderError(ValueError):
    pass


class Source(str, Enum):
    VOCAB = "vocab"
    TOKEN = "token"


@dataclass(frozen=True)
class DecodeStep:
    source: Source
    index: int
    logit: float


@dataclass
class DecodedAnswer:
    steps: list[DecodeStep]
    text: str
    stopped_at: int
    # 0-d tensors of the selected scores, kept for the policy-gradient loss
    selected: list[Tensor] = field(default_factory=list, repr=False)


@dataclass(frozen=True)
class TargetStep:
    """One teacher-forced step: every correct choice, plus the one fed back next."""

    vocab_index: Optional[int]
    token_indices: tuple[int, ...]
    feedback: tuple[Source, int]


@dataclass
class DecoderContext:
    """Decoder prefix [Q; V; T] evaluated once per example."""

    layers: list[Tensor]
    T_check: Tensor


def init_params(
    cfg: ModelConfig, d_in: int, question_vocab_size: int, answer_vocab_size: int, seed: int
) -> Params:
    """Every trainable parameter of the network, deterministic in ``seed``."""
    rng = np.random.default_rng(seed)
    params = init_model_params(cfg, d_in, question_vocab_size, rng)
    d = cfg.d
    for name in ("dec.q", "dec.v", "dec.t"):
        init_linear(params, name, rng, d, d)
    add_param(params, "dec.answer_embed", glorot(rng, (answer_vocab_size, d)))
    add_param(params, "dec.pos", glorot(rng, (cfg.max_answer_len, d)))
    for i in range(cfg.decoder_layers):
        init_attention_block(params, f"dec.block{i}", rng, d)
    init_layer_norm(params, "dec.ln", d)
    init_linear(params, "dec.vocab_out", rng, answer_vocab_size, d)
    init_linear(params, "dec.token_key", rng, d, d)
    init_linear(params, "dec.token_query", rng, d, d)
    return params


def decoder_context(
    state: EncoderState, V_final: Tensor, T_final: Tensor, params: Mapping[str, Tensor], cfg: ModelConfig
) -> DecoderContext:
    prefix = concat(
        [
            apply_linear(params, "dec.q", state.Q),
            apply_linear(params, "dec.v", V_final),
            apply_linear(params, "dec.t", T_final),
        ]
    )
    layers = [prefix]
    for i in range(cfg.decoder_layers):
        prefix = attention_block(prefix, params, f"dec.block{i}", cfg.heads)
        layers.append(prefix)
    out = apply_layer_norm(params, "dec.ln", prefix)
    m = T_final.shape[0]
    T_check = out[out.shape[0] - m :]
    return DecoderContext(layers=layers, T_check=T_check)


def _suffix(ctx: DecoderContext, inputs: Tensor, params: Mapping[str, Tensor], cfg: ModelConfig) -> Tensor:
    x = inputs
    for i in range(cfg.decoder_layers):
        x = attention_block(x, params, f"dec.block{i}", cfg.heads, causal=True, memory=ctx.layers[i])
    return apply_layer_norm(params, "dec.ln", x)


def _scores(ctx: DecoderContext, o: Tensor, params: Mapping[str, Tensor]) -> tuple[Tensor, Tensor]:
    y_o = apply_linear(params, "dec.vocab_out", o)
    keys = apply_linear(params, "dec.token_key", ctx.T_check)
    y_t = apply_linear(params, "dec.token_query", o) @ keys.T
    return y_o, y_t


def _feedback(ctx: DecoderContext, params: Mapping[str, Tensor], choice: tuple[Source, int]) -> Tensor:
    source, index = choice
    if source is Source.TOKEN:
        return ctx.T_check[index : index + 1]
    return params["dec.answer_embed"][index : index + 1]


def _inputs(
    ctx: DecoderContext, params: Mapping[str, Tensor], vocab: Vocabulary, previous: Sequence[tuple[Source, int]]
) -> Tensor:
    """Decoder inputs for steps 1..len(previous)+1: feedback embedding plus step position."""
    rows = [_feedback(ctx, params, (Source.VOCAB, vocab.begin))]
    rows.extend(_feedback(ctx, params, c) for c in previous)
    n = len(rows)
    return concat(rows) + params["dec.pos"][:n]


def decode_step(
    ctx: DecoderContext,
    params: Mapping[str, Tensor],
    cfg: ModelConfig,
    vocab: Vocabulary,
    previous: Sequence[tuple[Source, int]],
    step: int,
) -> tuple[Tensor, Tensor]:
    """Scores (y_o over the answer vocabulary, y_t over scene tokens) for 1-based ``step``."""
    if not 1 <= step <= cfg.max_answer_len:
        raise DecoderError(f"decode step {step} outside [1, {cfg.max_answer_len}]")
    if len(previous) < step - 1:
        raise DecoderError(f"step {step} needs {step - 1} previous outputs, got {len(previous)}")
    o = _suffix(ctx, _inputs(ctx, params, vocab, previous[: step - 1]), params, cfg)[step - 1]
    return _scores(ctx, o.reshape(1, o.shape[0]), params)


def select(y_o: np.ndarray, y_t: np.ndarray) -> tuple[Source, int]:
    scores = np.concatenate([np.ravel(y_o), np.ravel(y_t)])
    if scores.size == 0:
        raise DecoderError("no scores to select from")
    best = int(np.argmax(scores))
    n_vocab = np.ravel(y_o).size
    return (Source.VOCAB, best) if best < n_vocab else (Source.TOKEN, best - n_vocab)


def realize(choice: tuple[Source, int], scene: Scene, vocab: Vocabulary) -> str:
    source, index = choice
    if source is Source.TOKEN:
        return scene.tokens[index].label
    word = vocab.word(index)
    return "" if word in RESERVED else word


def greedy_decode(
    ctx: DecoderContext, scene: Scene, params: Mapping[str, Tensor], cfg: ModelConfig, vocab: Vocabulary
) -> DecodedAnswer:
    chosen: list[tuple[Source, int]] = []
    steps: list[DecodeStep] = []
    selected: list[Tensor] = []
    stopped_at = cfg.max_answer_len
    for step in range(1, cfg.max_answer_len + 1):
        y_o, y_t = decode_step(ctx, params, cfg, vocab, chosen, step)
        choice = select(y_o.data, y_t.data)
        source, index = choice
        score = y_o[0, index] if source is Source.VOCAB else y_t[0, index]
        steps.append(DecodeStep(source=source, index=index, logit=score.item()))
        selected.append(score)
        chosen.append(choice)
        if source is Source.VOCAB and index == vocab.end:
            stopped_at = step
            break
    words = [realize(c, scene, vocab) for c in chosen]
    text = " ".join(w for w in words if w)
    return DecodedAnswer(steps=steps, text=text, stopped_at=stopped_at, selected=selected)


def answer_targets(answer: str, scene: Scene, vocab: Vocabulary, max_len: int) -> list[TargetStep]:
    """Align a gold answer with copyable tokens and vocabulary words, ending with <end> when room remains."""
    words = normalize_answer(answer).split()
    if not words:
        raise DecoderError(f"empty target answer {answer!r}")
    labels = [normalize_answer(t.label) for t in scene.tokens]
    out: list[TargetStep] = []
    last = -1
    for word in words[:max_len]:
        matches = tuple(j for j, label in enumerate(labels) if label == word)
        vocab_index = vocab.index(word) if word in vocab else None
        if matches:
            after = [j for j in matches if j > last]
            last = after[0] if after else matches[0]
            feedback = (Source.TOKEN, last)
        else:
            if vocab_index is None:
                vocab_index = vocab.unk
            feedback = (Source.VOCAB, vocab_index)
        out.append(TargetStep(vocab_index=vocab_index, token_indices=matches, feedback=feedback))
    if len(out) < max_len:
        out.append(TargetStep(vocab_index=vocab.end, token_indices=(), feedback=(Source.VOCAB, vocab.end)))
    return out


def target_matrix(targets: Sequence[TargetStep], n_vocab: int, n_tokens: int) -> np.ndarray:
    y = np.zeros((len(targets), n_vocab + n_tokens))
    for s, t in enumerate(targets):
        if t.vocab_index is not None:
            y[s, t.vocab_index] = 1.0
        for j in t.token_indices:
            y[s, n_vocab + j] = 1.0
    return y


def teacher_forced_logits(
    ctx: DecoderContext,
    params: Mapping[str, Tensor],
    cfg: ModelConfig,
    vocab: Vocabulary,
    targets: Sequence[TargetStep],
) -> Tensor:
    """Scores for every target step at once, shaped (steps, |vocab| + M)."""
    if not targets:
        raise DecoderError("teacher forcing needs a non-empty target")
    if len(targets) > cfg.max_answer_len:
        raise DecoderError(f"target has {len(targets)} steps, limit is {cfg.max_answer_len}")
    previous = [t.feedback for t in targets[:-1]]
    o = _suffix(ctx, _inputs(ctx, params, vocab, previous), params, cfg)
    y_o, y_t = _scores(ctx, o, params)
    return concat([y_o, y_t], axis=1)


def decode_answer(
    ctx: DecoderContext,
    scene: Scene,
    params: Mapping[str, Tensor],
    cfg: ModelConfig,
    vocab: Vocabulary,
    target: Optional[Sequence[TargetStep]] = None,
) -> DecodedAnswer | Tensor:
    """Greedy decoding, or teacher-forced step logits when ``target`` is given."""
    if target is None:
        return greedy_decode(ctx, scene, params, cfg, vocab)
    return teacher_forced_logits(ctx, params, cfg, vocab, target)
