import logging
from dataclasses import dataclass
from enum import Enum
from typing import Mapping, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from geometry import EDGE_DIM, boxes_to_array
from graph import EdgeSet, SparsityToggles
from neural import (
    Params,
    Tensor,
    add_param,
    apply_layer_norm,
    apply_linear,
    attention_block,
    concat,
    embed,
    glorot,
    init_attention_block,
    init_layer_norm,
    init_linear,
    linear,
    masked_softmax,
)
from scene import MAX_QUESTION_LEN, Scene

logger = logging.getLogger(__name__)


class ModelError(ValueError):
    pass


class Hierarchy(str, Enum):
    OTSG_THEN_OSG_TSG = "otsg_then_osg_tsg"
    PARALLEL = "parallel"
    OSG_TSG_THEN_OTSG = "osg_tsg_then_otsg"


class ModelConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

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
    max_answer_len: int = Field(default=12, ge=1)
    max_question_len: int = Field(default=MAX_QUESTION_LEN, ge=1)

    @model_validator(mode="after")
    def _heads_divide_width(self) -> "ModelConfig":
        if self.d % self.heads:
            raise ValueError(f"d ({self.d}) must be divisible by heads ({self.heads})")
        return self

    @property
    def toggles(self) -> SparsityToggles:
        return SparsityToggles(otsg=self.sparsify_otsg, osg=self.sparsify_osg, tsg=self.sparsify_tsg)


@dataclass
class EncoderState:
    Q: Tensor
    V: Tensor
    T: Tensor


UNIT_PARTIES = {
    # unit: (receivers, senders)
    "tv": ("V", "T"),
    "vt": ("T", "V"),
    "vv": ("V", "V"),
    "tt": ("T", "T"),
}


def init_model_params(cfg: ModelConfig, d_in: int, question_vocab_size: int, rng: np.random.Generator) -> Params:
    d = cfg.d
    params: Params = {}
    init_linear(params, "enc.obj_feat", rng, d, d_in)
    init_linear(params, "enc.obj_box", rng, d, 4)
    init_linear(params, "enc.tok_feat", rng, d, d_in)
    init_linear(params, "enc.tok_box", rng, d, 4)
    add_param(params, "enc.word", glorot(rng, (question_vocab_size, d)))
    add_param(params, "enc.pos", glorot(rng, (cfg.max_question_len, d)))
    for i in range(cfg.encoder_layers):
        init_attention_block(params, f"enc.block{i}", rng, d)
    init_layer_norm(params, "enc.ln", d)

    for unit in UNIT_PARTIES:
        init_linear(params, f"{unit}.pool", rng, 1, d, bias=False)
        init_linear(params, f"{unit}.mp.edge", rng, d, EDGE_DIM, bias=False)
        init_linear(params, f"{unit}.mp.q", rng, d, d, bias=False)
        init_linear(params, f"{unit}.mp.att", rng, 1, d, bias=False)
        init_linear(params, f"{unit}.gin.edge", rng, d, EDGE_DIM, bias=False)
        init_linear(params, f"{unit}.gin.msg", rng, d, d, bias=False)
        init_linear(params, f"{unit}.gin.self", rng, d, d, bias=False)
        init_linear(params, f"{unit}.gin.edge_out", rng, d, d, bias=False)
        init_linear(params, f"{unit}.gin.msg_out", rng, d, d, bias=False)
    if cfg.hierarchy is Hierarchy.PARALLEL:
        init_linear(params, "fuse.v", rng, d, 2 * d)
        init_linear(params, "fuse.t", rng, d, 2 * d)
    return params


def _normalized_boxes(scene: Scene, entities) -> np.ndarray:
    arr = boxes_to_array(e.box for e in entities)
    return arr / np.array([scene.image_width, scene.image_height, scene.image_width, scene.image_height])


def _features(entities, d_in: int) -> np.ndarray:
    return np.asarray([e.feature for e in entities], dtype=np.float64).reshape(len(entities), d_in)


def encode(
    scene: Scene, question_ids: Sequence[int], params: Mapping[str, Tensor], cfg: ModelConfig
) -> EncoderState:
    if not scene.objects and not scene.tokens:
        raise ModelError("scene has neither objects nor tokens to reason over")
    if not question_ids:
        raise ModelError("question is empty")
    k = min(len(question_ids), cfg.max_question_len)
    d_in = params["enc.obj_feat.w"].shape[1]

    words = embed(params["enc.word"], question_ids[:k]) + params["enc.pos"][:k]
    objs = apply_linear(params, "enc.obj_feat", Tensor(_features(scene.objects, d_in))) + apply_linear(
        params, "enc.obj_box", Tensor(_normalized_boxes(scene, scene.objects))
    )
    toks = apply_linear(params, "enc.tok_feat", Tensor(_features(scene.tokens, d_in))) + apply_linear(
        params, "enc.tok_box", Tensor(_normalized_boxes(scene, scene.tokens))
    )

    x = concat([words, objs, toks])
    for i in range(cfg.encoder_layers):
        x = attention_block(x, params, f"enc.block{i}", cfg.heads)
    x = apply_layer_norm(params, "enc.ln", x)
    n = len(scene.objects)
    return EncoderState(Q=x[:k], V=x[k : k + n], T=x[k + n :])


def pool_question(Q: Tensor, params: Mapping[str, Tensor], unit: str) -> Tensor:
    """Attention-pooled question vector used to guide one message-passing unit."""
    k = Q.shape[0]
    scores = linear(Q, params[f"{unit}.pool.w"]).reshape(1, k)
    weights = masked_softmax(scores, np.ones((1, k), dtype=bool))
    return (weights @ Q).reshape(Q.shape[1])


def _receiver_major(edges: EdgeSet) -> Tensor:
    return Tensor(np.ascontiguousarray(edges.features.transpose(1, 0, 2)))


def mp(edges: EdgeSet, q: Tensor, params: Mapping[str, Tensor], unit: str) -> Tensor:
    """Message weights A, shaped (receivers, senders); each row sums to 1 over kept senders."""
    rows, cols = edges.shape
    E = _receiver_major(edges)
    a = (linear(E, params[f"{unit}.mp.edge.w"]) + linear(q, params[f"{unit}.mp.q.w"])).tanh()
    logits = linear(a, params[f"{unit}.mp.att.w"]).reshape(cols, rows)
    return masked_softmax(logits, edges.keep.T)


def gin(
    edges: EdgeSet, A: Tensor, receivers: Tensor, senders: Tensor, params: Mapping[str, Tensor], unit: str
) -> Tensor:
    rows, cols = edges.shape
    d = receivers.shape[1]
    E = _receiver_major(edges)
    edge_msg = (A.reshape(cols, 1, rows) @ linear(E, params[f"{unit}.gin.edge.w"])).reshape(cols, d)
    node_msg = linear(A @ senders, params[f"{unit}.gin.msg.w"])
    return (
        linear(receivers, params[f"{unit}.gin.self.w"])
        + linear(edge_msg, params[f"{unit}.gin.edge_out.w"])
        + linear(node_msg, params[f"{unit}.gin.msg_out.w"])
    )


def run_unit(
    unit: str,
    edges: Mapping[str, EdgeSet],
    receivers: Tensor,
    senders: Tensor,
    Q: Tensor,
    params: Mapping[str, Tensor],
) -> Tensor:
    q = pool_question(Q, params, unit)
    A = mp(edges[unit], q, params, unit)
    return gin(edges[unit], A, receivers, senders, params, unit)


def forward_hierarchy(
    state: EncoderState, edges: Mapping[str, EdgeSet], params: Mapping[str, Tensor], cfg: ModelConfig
) -> tuple[Tensor, Tensor]:
    Q = state.Q

    def otsg(V: Tensor, T: Tensor) -> tuple[Tensor, Tensor]:
        if not cfg.use_otsg:
            return V, T
        return run_unit("tv", edges, V, T, Q, params), run_unit("vt", edges, T, V, Q, params)

    def osg(V: Tensor) -> Tensor:
        return run_unit("vv", edges, V, V, Q, params) if cfg.use_osg else V

    def tsg(T: Tensor) -> Tensor:
        return run_unit("tt", edges, T, T, Q, params) if cfg.use_tsg else T

    if cfg.hierarchy is Hierarchy.OTSG_THEN_OSG_TSG:
        V1, T1 = otsg(state.V, state.T)
        return osg(V1), tsg(T1)
    if cfg.hierarchy is Hierarchy.OSG_TSG_THEN_OTSG:
        return otsg(osg(state.V), tsg(state.T))
    if cfg.hierarchy is Hierarchy.PARALLEL:
        Vo, To = otsg(state.V, state.T)
        V = apply_linear(params, "fuse.v", concat([Vo, osg(state.V)], axis=1))
        T = apply_linear(params, "fuse.t", concat([To, tsg(state.T)], axis=1))
        return V, T
    raise ModelError(f"unknown hierarchy variant: {cfg.hierarchy!r}")
