import math
import logging
from enum import Enum
from typing import Iterable, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, model_validator

logger = logging.getLogger(__name__)

EDGE_DIM = 5


class GeometryError(ValueError):
    """Invalid entity geometry (degenerate or non-finite box)."""


class IouKind(str, Enum):
    IOU = "iou"
    GIOU = "giou"
    DIOU = "diou"
    CIOU = "ciou"


# --- Boxes ---
class BoundingBox(BaseModel):
    model_config = ConfigDict(frozen=True)

    x_tl: float
    y_tl: float
    x_br: float
    y_br: float

    @model_validator(mode="before")
    @classmethod
    def _canonical_corners(cls, data):
        # Detector output is noisy: swapped corners are reordered, not rejected
        if isinstance(data, dict) and all(k in data for k in ("x_tl", "y_tl", "x_br", "y_br")):
            x1, x2 = float(data["x_tl"]), float(data["x_br"])
            y1, y2 = float(data["y_tl"]), float(data["y_br"])
            for v in (x1, x2, y1, y2):
                if not math.isfinite(v):
                    raise GeometryError(f"box coordinate is not finite: {v}")
            data = {**data, "x_tl": min(x1, x2), "x_br": max(x1, x2), "y_tl": min(y1, y2), "y_br": max(y1, y2)}
        return data

    @classmethod
    def from_corners(cls, x_tl: float, y_tl: float, x_br: float, y_br: float) -> "BoundingBox":
        return cls(x_tl=x_tl, y_tl=y_tl, x_br=x_br, y_br=y_br)

    @classmethod
    def from_list(cls, coords: Sequence[float]) -> "BoundingBox":
        if len(coords) != 4:
            raise GeometryError(f"box needs 4 coordinates, got {len(coords)}")
        return cls.from_corners(*coords)

    def to_list(self) -> list[float]:
        return [self.x_tl, self.y_tl, self.x_br, self.y_br]

    @property
    def width(self) -> float:
        return self.x_br - self.x_tl

    @property
    def height(self) -> float:
        return self.y_br - self.y_tl

    @property
    def center(self) -> tuple[float, float]:
        return ((self.x_tl + self.x_br) / 2, (self.y_tl + self.y_br) / 2)

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def diagonal(self) -> float:
        return math.sqrt(self.width * self.width + self.height * self.height)

    @property
    def degenerate(self) -> bool:
        return self.width <= 0 or self.height <= 0

    def translate(self, dx: float, dy: float) -> "BoundingBox":
        return BoundingBox.from_corners(self.x_tl + dx, self.y_tl + dy, self.x_br + dx, self.y_br + dy)

    def scale(self, s: float) -> "BoundingBox":
        return BoundingBox.from_corners(self.x_tl * s, self.y_tl * s, self.x_br * s, self.y_br * s)

    def clamp(self, width: float, height: float) -> "BoundingBox":
        return BoundingBox.from_corners(
            min(max(self.x_tl, 0.0), width),
            min(max(self.y_tl, 0.0), height),
            min(max(self.x_br, 0.0), width),
            min(max(self.y_br, 0.0), height),
        )


def box(x_tl: float, y_tl: float, x_br: float, y_br: float) -> BoundingBox:
    return BoundingBox.from_corners(x_tl, y_tl, x_br, y_br)


def _sq(v):
    # x * x rather than x ** 2: identical rounding in the scalar and numpy paths
    return v * v


def _require_proper(b: BoundingBox, what: str) -> None:
    if b.degenerate:
        raise GeometryError(f"{what} box is degenerate (w={b.width}, h={b.height})")


# --- Scalar predicates ---
def edge_feature(src: BoundingBox, ref: BoundingBox) -> list[float]:
    """Relative position of ``src`` measured from the reference box ``ref``.

    Every component is normalised by the reference width, height or area, so
    the encoding is invariant to joint translation and uniform scaling.
    """
    _require_proper(ref, "reference")
    xc, yc = ref.center
    w, h = ref.width, ref.height
    return [
        (src.x_tl - xc) / w,
        (src.y_tl - yc) / h,
        (src.x_br - xc) / w,
        (src.y_br - yc) / h,
        (src.width * src.height) / (w * h),
    ]


def _intersection(a: BoundingBox, b: BoundingBox) -> float:
    iw = max(0.0, min(a.x_br, b.x_br) - max(a.x_tl, b.x_tl))
    ih = max(0.0, min(a.y_br, b.y_br) - max(a.y_tl, b.y_tl))
    return iw * ih


def iou_family(kind: IouKind | str, a: BoundingBox, b: BoundingBox) -> float:
    kind = IouKind(kind)
    _require_proper(a, "first")
    _require_proper(b, "second")
    inter = _intersection(a, b)
    union = a.area + b.area - inter
    iou = inter / union
    if kind is IouKind.IOU:
        return iou
    cw = max(a.x_br, b.x_br) - min(a.x_tl, b.x_tl)
    ch = max(a.y_br, b.y_br) - min(a.y_tl, b.y_tl)
    if kind is IouKind.GIOU:
        c_area = cw * ch
        return iou - (c_area - union) / c_area
    c2 = cw * cw + ch * ch
    if c2 == 0:
        return 1.0
    (ax, ay), (bx, by) = a.center, b.center
    rho2 = _sq(ax - bx) + _sq(ay - by)
    diou = iou - rho2 / c2
    if kind is IouKind.DIOU:
        return diou
    v = (4 / math.pi ** 2) * (math.atan(a.width / a.height) - math.atan(b.width / b.height)) ** 2
    denom = (1 - iou) + v
    alpha = v / denom if denom > 0 else 0.0
    return diou - alpha * v


def center_distance(a: BoundingBox, b: BoundingBox) -> float:
    (ax, ay), (bx, by) = a.center, b.center
    return math.sqrt(_sq(ax - bx) + _sq(ay - by))


def gap_distance(a: BoundingBox, b: BoundingBox) -> float:
    """Shortest distance between the two rectangles (0 when they touch or overlap)."""
    dx = max(0.0, max(a.x_tl, b.x_tl) - min(a.x_br, b.x_br))
    dy = max(0.0, max(a.y_tl, b.y_tl) - min(a.y_br, b.y_br))
    return math.sqrt(dx * dx + dy * dy)


def overlap_ratio(a: BoundingBox, b: BoundingBox) -> float:
    if a.area <= 0 or b.area <= 0:
        raise GeometryError(f"overlap ratio needs positive areas, got {a.area} and {b.area}")
    inter = _intersection(a, b)
    return max(inter / a.area, inter / b.area)


# --- Pairwise (vectorised) versions: rows index `a`, columns index `b` ---
def boxes_to_array(boxes: Iterable[BoundingBox]) -> np.ndarray:
    rows = [b.to_list() for b in boxes]
    return np.asarray(rows, dtype=np.float64).reshape(len(rows), 4)


def _wh(arr: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    return arr[:, 2] - arr[:, 0], arr[:, 3] - arr[:, 1]


def _centers(arr: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    return (arr[:, 0] + arr[:, 2]) / 2, (arr[:, 1] + arr[:, 3]) / 2


def _check_proper(arr: np.ndarray, what: str) -> None:
    w, h = _wh(arr)
    bad = np.flatnonzero((w <= 0) | (h <= 0))
    if bad.size:
        raise GeometryError(f"{what} box {int(bad[0])} is degenerate (w={w[bad[0]]}, h={h[bad[0]]})")


def pairwise_edge_features(src: np.ndarray, ref: np.ndarray) -> np.ndarray:
    """[n, m, 5] edge features of every src box against every ref box."""
    if len(ref):
        _check_proper(ref, "reference")
    rw, rh = _wh(ref)
    rxc, ryc = _centers(ref)
    sw, sh = _wh(src)
    out = np.empty((len(src), len(ref), EDGE_DIM), dtype=np.float64)
    out[:, :, 0] = (src[:, None, 0] - rxc[None, :]) / rw[None, :]
    out[:, :, 1] = (src[:, None, 1] - ryc[None, :]) / rh[None, :]
    out[:, :, 2] = (src[:, None, 2] - rxc[None, :]) / rw[None, :]
    out[:, :, 3] = (src[:, None, 3] - ryc[None, :]) / rh[None, :]
    out[:, :, 4] = (sw * sh)[:, None] / (rw * rh)[None, :]
    return out


def _pairwise_intersection(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    iw = np.maximum(0.0, np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0]))
    ih = np.maximum(0.0, np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1]))
    return iw * ih


def pairwise_iou_family(kind: IouKind | str, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    kind = IouKind(kind)
    if len(a):
        _check_proper(a, "first")
    if len(b):
        _check_proper(b, "second")
    aw, ah = _wh(a)
    bw, bh = _wh(b)
    inter = _pairwise_intersection(a, b)
    union = (aw * ah)[:, None] + (bw * bh)[None, :] - inter
    iou = inter / union
    if kind is IouKind.IOU:
        return iou
    cw = np.maximum(a[:, None, 2], b[None, :, 2]) - np.minimum(a[:, None, 0], b[None, :, 0])
    ch = np.maximum(a[:, None, 3], b[None, :, 3]) - np.minimum(a[:, None, 1], b[None, :, 1])
    if kind is IouKind.GIOU:
        c_area = cw * ch
        return iou - (c_area - union) / c_area
    c2 = cw * cw + ch * ch
    axc, ayc = _centers(a)
    bxc, byc = _centers(b)
    rho2 = _sq(axc[:, None] - bxc[None, :]) + _sq(ayc[:, None] - byc[None, :])
    with np.errstate(divide="ignore", invalid="ignore"):
        diou = np.where(c2 == 0, 1.0, iou - rho2 / np.where(c2 == 0, 1.0, c2))
    if kind is IouKind.DIOU:
        return diou
    v = (4 / math.pi ** 2) * (np.arctan(aw / ah)[:, None] - np.arctan(bw / bh)[None, :]) ** 2
    denom = (1 - iou) + v
    alpha = np.where(denom > 0, v / np.where(denom > 0, denom, 1.0), 0.0)
    return diou - alpha * v


def pairwise_center_distance(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    axc, ayc = _centers(a)
    bxc, byc = _centers(b)
    return np.sqrt(_sq(axc[:, None] - bxc[None, :]) + _sq(ayc[:, None] - byc[None, :]))


def pairwise_gap_distance(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    dx = np.maximum(0.0, np.maximum(a[:, None, 0], b[None, :, 0]) - np.minimum(a[:, None, 2], b[None, :, 2]))
    dy = np.maximum(0.0, np.maximum(a[:, None, 1], b[None, :, 1]) - np.minimum(a[:, None, 3], b[None, :, 3]))
    return np.sqrt(dx * dx + dy * dy)


def pairwise_overlap_ratio(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ah = _wh(a)
    bw, bh = _wh(b)
    area_a, area_b = aw * ah, bw * bh
    if np.any(area_a <= 0) or np.any(area_b <= 0):
        raise GeometryError("overlap ratio needs positive box areas")
    inter = _pairwise_intersection(a, b)
    return np.maximum(inter / area_a[:, None], inter / area_b[None, :])
