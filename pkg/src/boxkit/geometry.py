"""Axis-aligned boxes and the three pairwise geometric factors.

A :class:`Box` is stored in center form ``[x, y, w, h]``; corner form
``(x1, y1, x2, y2)`` is an accessor view.  Scalar helpers operate on
``Box`` values, the ``pairwise_*`` helpers on ``(N, 4)`` corner arrays
and are what the suppression code uses.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

DIM_FLOOR = 1e-9

_FOUR_OVER_PI_SQ = 4.0 / math.pi**2


@dataclass(frozen=True)
class Box:
    """Axis-aligned rectangle in center form.

    Widths and heights at or below ``floor`` are clamped up to ``floor``
    so that a box can never become degenerate.
    """

    x: float
    y: float
    w: float
    h: float
    floor: float = field(default=DIM_FLOOR, repr=False, compare=False)

    def __post_init__(self):
        vals = (self.x, self.y, self.w, self.h)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError(f"box coordinates must be finite, got {vals}")
        if not self.floor > 0:
            raise ValueError("floor must be positive")
        for name in ("x", "y", "w", "h"):
            object.__setattr__(self, name, float(getattr(self, name)))
        if self.w < self.floor:
            object.__setattr__(self, "w", float(self.floor))
        if self.h < self.floor:
            object.__setattr__(self, "h", float(self.floor))

    @classmethod
    def from_corners(cls, x1, y1, x2, y2, floor: float = DIM_FLOOR) -> "Box":
        return cls((x1 + x2) / 2.0, (y1 + y2) / 2.0, x2 - x1, y2 - y1, floor=floor)

    @property
    def corners(self) -> tuple[float, float, float, float]:
        hw, hh = self.w / 2.0, self.h / 2.0
        return (self.x - hw, self.y - hh, self.x + hw, self.y + hh)

    @property
    def center(self) -> tuple[float, float]:
        return (self.x, self.y)

    def as_array(self) -> np.ndarray:
        """Center-form ``[x, y, w, h]`` as a float64 vector."""
        return np.array([self.x, self.y, self.w, self.h], dtype=np.float64)

    def scaled(self, k: float) -> "Box":
        return Box(self.x * k, self.y * k, self.w * k, self.h * k, floor=self.floor)

    def shifted(self, dx: float, dy: float) -> "Box":
        return Box(self.x + dx, self.y + dy, self.w, self.h, floor=self.floor)


def area(b: Box) -> float:
    return b.w * b.h


def _intersection(a: Box, b: Box) -> float:
    ax1, ay1, ax2, ay2 = a.corners
    bx1, by1, bx2, by2 = b.corners
    iw = min(ax2, bx2) - max(ax1, bx1)
    ih = min(ay2, by2) - max(ay1, by1)
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    return iw * ih


def iou(a: Box, b: Box) -> float:
    """Intersection over union; 0 for disjoint boxes."""
    inter = _intersection(a, b)
    union = area(a) + area(b) - inter
    if union <= 0.0:
        return 1.0 if a.corners == b.corners else 0.0
    return min(inter / union, 1.0)


def enclosing_box(a: Box, b: Box) -> Box:
    ax1, ay1, ax2, ay2 = a.corners
    bx1, by1, bx2, by2 = b.corners
    return Box.from_corners(min(ax1, bx1), min(ay1, by1), max(ax2, bx2), max(ay2, by2))


def distance_term(a: Box, b: Box) -> float:
    """Squared center distance over the squared enclosing-box diagonal."""
    ax1, ay1, ax2, ay2 = a.corners
    bx1, by1, bx2, by2 = b.corners
    cw = max(ax2, bx2) - min(ax1, bx1)
    ch = max(ay2, by2) - min(ay1, by1)
    c2 = cw * cw + ch * ch
    if c2 <= 0.0:
        return 0.0
    rho2 = (a.x - b.x) ** 2 + (a.y - b.y) ** 2
    return rho2 / c2


def aspect_term(a: Box, b: Box) -> float:
    diff = math.atan(b.w / b.h) - math.atan(a.w / a.h)
    return _FOUR_OVER_PI_SQ * diff * diff


# --- vectorised forms over (N, 4) corner arrays -------------------------------


def as_corners(boxes) -> np.ndarray:
    arr = np.asarray(boxes, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr.reshape(1, -1)
    if arr.ndim != 2 or arr.shape[1] != 4:
        raise ValueError(f"expected an (N, 4) array of corner boxes, got shape {arr.shape}")
    return arr


def pairwise_iou(boxes_a, boxes_b) -> np.ndarray:
    """IoU for every pair of rows of two corner arrays, shape ``(Na, Nb)``."""
    a = as_corners(boxes_a)
    b = as_corners(boxes_b)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.maximum(iw, 0.0) * np.maximum(ih, 0.0)
    union = area_a[:, None] + area_b[None, :] - inter
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=union > 0.0)
    return np.minimum(out, 1.0, out=out)


def pairwise_distance_term(boxes_a, boxes_b) -> np.ndarray:
    """Normalized squared center distance for every pair, shape ``(Na, Nb)``."""
    a = as_corners(boxes_a)
    b = as_corners(boxes_b)
    acx = (a[:, 0] + a[:, 2]) / 2.0
    acy = (a[:, 1] + a[:, 3]) / 2.0
    bcx = (b[:, 0] + b[:, 2]) / 2.0
    bcy = (b[:, 1] + b[:, 3]) / 2.0
    rho2 = (acx[:, None] - bcx[None, :]) ** 2 + (acy[:, None] - bcy[None, :]) ** 2
    cw = np.maximum(a[:, None, 2], b[None, :, 2]) - np.minimum(a[:, None, 0], b[None, :, 0])
    ch = np.maximum(a[:, None, 3], b[None, :, 3]) - np.minimum(a[:, None, 1], b[None, :, 1])
    c2 = cw * cw + ch * ch
    out = np.zeros_like(rho2)
    np.divide(rho2, c2, out=out, where=c2 > 0.0)
    return out


def pairwise_diou(boxes_a, boxes_b) -> np.ndarray:
    """IoU minus the normalized distance term, in ``(-1, 1]``."""
    return pairwise_iou(boxes_a, boxes_b) - pairwise_distance_term(boxes_a, boxes_b)
