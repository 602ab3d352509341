import json
import logging
from dataclasses import dataclass, field
from typing import Iterable, Literal, Optional, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from geometry import (
    EDGE_DIM,
    IouKind,
    boxes_to_array,
    pairwise_center_distance,
    pairwise_edge_features,
    pairwise_gap_distance,
    pairwise_iou_family,
    pairwise_overlap_ratio,
)
from scene import Entity, Scene

logger = logging.getLogger(__name__)

UNITS = ("tv", "vt", "vv", "tt")
UNIT_GRAPH = {"tv": "otsg", "vt": "otsg", "vv": "osg", "tt": "tsg"}
GRAPHS = ("otsg", "osg", "tsg")
SWEEP_PARAMS = ("theta", "epsilon", "alpha", "beta", "gamma", "delta", "osg_iou_kind")


class GraphError(ValueError):
    """Inconsistent edge sets or graph export requests."""


class PruneConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    theta: float = Field(default=0.5, ge=0, le=1)
    epsilon: float = Field(default=0.3, ge=0, le=1)
    alpha: float = Field(default=5.0, gt=0)
    beta: float = Field(default=0.3, gt=0)
    gamma: float = Field(default=2.0, gt=0)
    delta: float = Field(default=0.5, ge=0, le=1)
    osg_iou_kind: IouKind = IouKind.DIOU

    @model_validator(mode="after")
    def _height_band(self) -> "PruneConfig":
        if self.beta > self.gamma:
            raise ValueError(f"beta ({self.beta}) must not exceed gamma ({self.gamma})")
        return self


class SparsityToggles(BaseModel):
    model_config = ConfigDict(frozen=True)

    otsg: bool = True
    osg: bool = True
    tsg: bool = True


@dataclass(frozen=True)
class EdgeSet:
    """Directed edges from ``source_ids`` (rows) to ``target_ids`` (cols).

    ``features[i, j]`` is the position of source i relative to target j and is
    exactly zero wherever ``keep[i, j]`` is false.
    """

    source_ids: tuple[int, ...]
    target_ids: tuple[int, ...]
    features: np.ndarray
    keep: np.ndarray

    @property
    def shape(self) -> tuple[int, int]:
        return (len(self.source_ids), len(self.target_ids))

    @property
    def kept(self) -> int:
        return int(self.keep.sum())

    def restrict(self, mask: np.ndarray) -> "EdgeSet":
        if mask.shape != self.keep.shape:
            raise GraphError(f"mask shape {mask.shape} does not match edge set shape {self.keep.shape}")
        keep = self.keep & mask
        return EdgeSet(self.source_ids, self.target_ids, np.where(keep[..., None], self.features, 0.0), keep)


@dataclass(frozen=True)
class SparsityStats:
    pruned: int
    total: int

    @property
    def ratio(self) -> float:
        return self.pruned / self.total if self.total else 0.0

    def __add__(self, other: "SparsityStats") -> "SparsityStats":
        return SparsityStats(self.pruned + other.pruned, self.total + other.total)


def average_ratio(stats: Iterable[SparsityStats]) -> float:
    """Dataset-level SR: mean of per-scene ratios."""
    ratios = [s.ratio for s in stats]
    return float(np.mean(ratios)) if ratios else 0.0


# --- Edge construction and pruning ---
def build_edges(sources: Sequence[Entity], targets: Sequence[Entity]) -> EdgeSet:
    src_ids = tuple(e.id for e in sources)
    dst_ids = tuple(e.id for e in targets)
    src = boxes_to_array(e.box for e in sources)
    dst = boxes_to_array(e.box for e in targets)
    features = pairwise_edge_features(src, dst)
    keep = np.ones((len(src_ids), len(dst_ids)), dtype=bool)
    if sources is targets or src_ids == dst_ids:
        np.fill_diagonal(keep, False)
        features[~keep] = 0.0
    return EdgeSet(src_ids, dst_ids, features, keep)


def _arrange(edges: EdgeSet, entities: Sequence[Entity], ids: tuple[int, ...], what: str) -> np.ndarray:
    by_id = {e.id: e for e in entities}
    try:
        return boxes_to_array(by_id[i].box for i in ids)
    except KeyError as e:
        raise GraphError(f"edge set refers to {what} id {e.args[0]} that was not supplied") from e


def otsg_mask(a: np.ndarray, b: np.ndarray, d_img: float, cfg: PruneConfig) -> np.ndarray:
    near = pairwise_center_distance(a, b) <= cfg.theta * d_img
    return near | (pairwise_iou_family(IouKind.DIOU, a, b) >= cfg.theta)


def osg_mask(a: np.ndarray, b: np.ndarray, d_img: float, cfg: PruneConfig) -> np.ndarray:
    near = pairwise_center_distance(a, b) <= cfg.theta * d_img
    return near & (pairwise_iou_family(cfg.osg_iou_kind, a, b) <= cfg.epsilon)


def tsg_mask(senders: np.ndarray, receivers: np.ndarray, image_height: float, cfg: PruneConfig) -> np.ndarray:
    """keep[j, i] for the edge sender j -> receiver i, judged against the receiver."""
    h_s = (senders[:, 3] - senders[:, 1]) / image_height
    h_r = (receivers[:, 3] - receivers[:, 1]) / image_height
    if np.any(h_s <= 0) or np.any(h_r <= 0):
        raise GraphError("token with zero height cannot be placed in the text graph")
    rw, rh = receivers[:, 2] - receivers[:, 0], receivers[:, 3] - receivers[:, 1]
    diag_r = np.sqrt(rw * rw + rh * rh)
    close = pairwise_gap_distance(senders, receivers) <= cfg.alpha * diag_r[None, :]
    sized = (cfg.beta * h_r[None, :] <= h_s[:, None]) & (h_s[:, None] <= cfg.gamma * h_r[None, :])
    apart = pairwise_overlap_ratio(senders, receivers) <= cfg.delta
    return close & sized & apart


def prune_otsg(
    edges: EdgeSet, tokens: Sequence[Entity], objects: Sequence[Entity], d_img: float, cfg: PruneConfig
) -> EdgeSet:
    if d_img <= 0:
        raise GraphError(f"image diagonal must be positive, got {d_img}")
    pool = [*tokens, *objects]
    a = _arrange(edges, pool, edges.source_ids, "source")
    b = _arrange(edges, pool, edges.target_ids, "target")
    return edges.restrict(otsg_mask(a, b, d_img, cfg))


def prune_osg(edges: EdgeSet, objects: Sequence[Entity], d_img: float, cfg: PruneConfig) -> EdgeSet:
    if edges.source_ids != edges.target_ids:
        raise GraphError("object graph edge set must be square over one object list")
    if d_img <= 0:
        raise GraphError(f"image diagonal must be positive, got {d_img}")
    a = _arrange(edges, objects, edges.source_ids, "object")
    return edges.restrict(osg_mask(a, a, d_img, cfg))


def prune_tsg(edges: EdgeSet, tokens: Sequence[Entity], image_height: float, cfg: PruneConfig) -> EdgeSet:
    if edges.source_ids != edges.target_ids:
        raise GraphError("text graph edge set must be square over one token list")
    a = _arrange(edges, tokens, edges.source_ids, "token")
    return edges.restrict(tsg_mask(a, a, image_height, cfg))


def sparsity_ratio(before: EdgeSet, after: EdgeSet) -> SparsityStats:
    if before.keep.shape != after.keep.shape:
        raise GraphError(f"edge set shapes differ: {before.keep.shape} vs {after.keep.shape}")
    if np.any(after.keep & ~before.keep):
        raise GraphError("pruned edge set keeps edges absent before pruning")
    total = before.kept
    return SparsityStats(pruned=total - after.kept, total=total)


# --- Scene graphs ---
@dataclass(frozen=True)
class SceneGraph:
    """The four pruned edge sets of one scene plus their sparsity statistics."""

    scene: Scene
    edges: dict[str, EdgeSet]
    stats: dict[str, SparsityStats] = field(default_factory=dict)


def build_scene_graph(
    scene: Scene, cfg: Optional[PruneConfig] = None, toggles: Optional[SparsityToggles] = None
) -> SceneGraph:
    cfg = cfg or PruneConfig()
    toggles = toggles or SparsityToggles()
    objs, toks = scene.objects, scene.tokens

    raw = {
        "tv": build_edges(toks, objs),
        "vt": build_edges(objs, toks),
        "vv": build_edges(objs, objs),
        "tt": build_edges(toks, toks),
    }
    pruned = dict(raw)
    if toggles.otsg:
        pruned["tv"] = prune_otsg(raw["tv"], toks, objs, scene.d_img, cfg)
        pruned["vt"] = prune_otsg(raw["vt"], toks, objs, scene.d_img, cfg)
    if toggles.osg:
        pruned["vv"] = prune_osg(raw["vv"], objs, scene.d_img, cfg)
    if toggles.tsg:
        pruned["tt"] = prune_tsg(raw["tt"], toks, scene.image_height, cfg)

    per_unit = {u: sparsity_ratio(raw[u], pruned[u]) for u in UNITS}
    stats = {
        "otsg": per_unit["tv"] + per_unit["vt"],
        "osg": per_unit["vv"],
        "tsg": per_unit["tt"],
    }
    logger.debug(
        "[prune] %d objects, %d tokens: SR otsg=%.3f osg=%.3f tsg=%.3f",
        len(objs),
        len(toks),
        stats["otsg"].ratio,
        stats["osg"].ratio,
        stats["tsg"].ratio,
    )
    return SceneGraph(scene=scene, edges=pruned, stats=stats)


def dataset_sparsity(
    scenes: Iterable[Scene], cfg: Optional[PruneConfig] = None, toggles: Optional[SparsityToggles] = None
) -> dict[str, float]:
    per_graph: dict[str, list[SparsityStats]] = {g: [] for g in GRAPHS}
    for scene in scenes:
        sg = build_scene_graph(scene, cfg, toggles)
        for g in GRAPHS:
            per_graph[g].append(sg.stats[g])
    return {g: average_ratio(v) for g, v in per_graph.items()}


def sweep_sparsity(
    scenes: Sequence[Scene], param: str, values: Sequence, cfg: Optional[PruneConfig] = None
) -> list[tuple[object, dict[str, float]]]:
    """Dataset SR per graph for each value of one pruning threshold."""
    if param not in SWEEP_PARAMS:
        raise GraphError(f"unknown sweep parameter {param!r}; expected one of {', '.join(SWEEP_PARAMS)}")
    base = cfg or PruneConfig()
    rows = []
    for value in values:
        try:
            varied = PruneConfig(**{**base.model_dump(), param: value})
        except ValueError as e:
            raise GraphError(f"invalid value {value!r} for {param}: {e}") from e
        sr = dataset_sparsity(scenes, varied)
        logger.info("[sweep] %s=%s -> otsg=%.4f osg=%.4f tsg=%.4f", param, value, sr["otsg"], sr["osg"], sr["tsg"])
        rows.append((value, sr))
    return rows


def bucket_tsg_sparsity(
    scenes: Sequence[Scene], cutoff: int, cfg: Optional[PruneConfig] = None
) -> dict[str, dict[str, float]]:
    """TSG sparsity split by token count: scenes with at most ``cutoff`` tokens vs the rest."""
    buckets: dict[str, list[SparsityStats]] = {f"<={cutoff}": [], f">{cutoff}": []}
    for scene in scenes:
        key = f"<={cutoff}" if len(scene.tokens) <= cutoff else f">{cutoff}"
        buckets[key].append(build_scene_graph(scene, cfg).stats["tsg"])
    n = len(scenes)
    return {k: {"sr": average_ratio(v), "share": (len(v) / n if n else 0.0), "scenes": float(len(v))} for k, v in buckets.items()}


# --- Export ---
class ExportNode(BaseModel):
    id: int
    kind: Literal["object", "token"]
    label: str
    box: list[float]


class ExportEdge(BaseModel):
    src: int
    dst: int
    graph: Literal["otsg", "osg", "tsg"]
    feature: list[float] = Field(min_length=EDGE_DIM, max_length=EDGE_DIM)


class GraphExport(BaseModel):
    nodes: list[ExportNode]
    edges: list[ExportEdge]


def _selected_units(graphs: Sequence[str]) -> list[str]:
    unknown = [g for g in graphs if g not in GRAPHS]
    if unknown:
        raise GraphError(f"unknown graph {unknown[0]!r}; expected one of {', '.join(GRAPHS)}")
    return [u for u in UNITS if UNIT_GRAPH[u] in graphs]


def _export_model(sg: SceneGraph, graphs: Sequence[str]) -> GraphExport:
    nodes = [
        ExportNode(id=e.id, kind=e.kind.value, label=e.label, box=e.box.to_list()) for e in sg.scene.entities
    ]
    edges = []
    for unit in _selected_units(graphs):
        es = sg.edges[unit]
        for i, j in zip(*np.nonzero(es.keep)):
            edges.append(
                ExportEdge(
                    src=es.source_ids[i],
                    dst=es.target_ids[j],
                    graph=UNIT_GRAPH[unit],
                    feature=[float(v) for v in es.features[i, j]],
                )
            )
    return GraphExport(nodes=nodes, edges=edges)


def _dot_quote(s: str) -> str:
    return '"' + s.replace("\\", "\\\\").replace('"', '\\"') + '"'


def export_graph(sg: SceneGraph, fmt: str = "json", graphs: Sequence[str] = GRAPHS) -> bytes:
    if fmt not in ("json", "dot"):
        raise GraphError(f"unknown export format {fmt!r}; expected json or dot")
    doc = _export_model(sg, graphs)
    if fmt == "json":
        return (json.dumps(doc.model_dump(), indent=2, ensure_ascii=False) + "\n").encode("utf-8")

    lines = ["digraph ssgn {"]
    for n in doc.nodes:
        shape = "box" if n.kind == "object" else "ellipse"
        lines.append(f"  n{n.id} [shape={shape}, label={_dot_quote(n.label)}];")
    for e in doc.edges:
        lines.append(f"  n{e.src} -> n{e.dst} [label={_dot_quote(e.graph)}];")
    lines.append("}")
    return ("\n".join(lines) + "\n").encode("utf-8")


def parse_graph_export(data: bytes | str) -> GraphExport:
    try:
        return GraphExport.model_validate_json(data)
    except ValueError as e:
        raise GraphError(f"malformed graph export: {e}") from e


def keep_masks_from_export(doc: GraphExport) -> dict[str, np.ndarray]:
    """Rebuild the per-unit keep masks encoded in a JSON export."""
    objs = [n.id for n in doc.nodes if n.kind == "object"]
    toks = [n.id for n in doc.nodes if n.kind == "token"]
    layout = {"tv": (toks, objs), "vt": (objs, toks), "vv": (objs, objs), "tt": (toks, toks)}
    pos = {u: ({k: i for i, k in enumerate(r)}, {k: j for j, k in enumerate(c)}) for u, (r, c) in layout.items()}
    masks = {u: np.zeros((len(r), len(c)), dtype=bool) for u, (r, c) in layout.items()}
    kinds = {n.id: n.kind for n in doc.nodes}
    for e in doc.edges:
        if e.src not in kinds or e.dst not in kinds:
            raise GraphError(f"edge {e.src}->{e.dst} refers to an unknown node")
        unit = {("token", "object"): "tv", ("object", "token"): "vt", ("object", "object"): "vv", ("token", "token"): "tt"}[
            (kinds[e.src], kinds[e.dst])
        ]
        rows, cols = pos[unit]
        masks[unit][rows[e.src], cols[e.dst]] = True
    return masks
