"""Non-maximum suppression: sequential, Fast, Cluster-NMS and its variants.

Every function works on one class channel, a :class:`DetectionSet` whose
detections are already sorted by non-ascending score.  Boxes are held in
corner form ``(x1, y1, x2, y2)``.

Suppression uses ``affinity >= eps``; a box is kept while every
affinity to a surviving higher-scored box is ``< eps``.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from .geometry import Box, as_corners, pairwise_distance_term, pairwise_iou

logger = logging.getLogger(__name__)

DEFAULT_EPS = 0.5
DEFAULT_SIGMA = 0.2
DEFAULT_BETA = 0.6
DEFAULT_SCORE_FLOOR = 0.01

FLAVORS = ("iou", "diou")


@dataclass(frozen=True)
class Detection:
    box: Box
    score: float
    class_id: int = 0
    source_id: object = None


@dataclass(frozen=True, eq=False)
class DetectionSet:
    """One class channel, sorted by score (stable, ties keep input order).

    ``order[k]`` is the input position of the detection now at ``k``.
    """

    boxes: np.ndarray
    scores: np.ndarray
    class_id: int = 0
    image_id: str = ""
    source_ids: tuple = ()
    order: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        boxes = as_corners(self.boxes) if len(self.boxes) else np.zeros((0, 4))
        scores = np.asarray(self.scores, dtype=np.float64).reshape(-1)
        if boxes.shape[0] != scores.shape[0]:
            raise ValueError("boxes and scores differ in length")
        if not np.all(np.isfinite(boxes)) or not np.all(np.isfinite(scores)):
            raise ValueError("boxes and scores must be finite")
        bad = np.flatnonzero((boxes[:, 0] >= boxes[:, 2]) | (boxes[:, 1] >= boxes[:, 3]))
        if bad.size:
            raise ValueError(f"detection {int(bad[0])} has x1 >= x2 or y1 >= y2: {boxes[bad[0]].tolist()}")
        if np.any(np.diff(scores) > 0):
            raise ValueError("scores must be sorted non-ascending; build with DetectionSet.from_arrays")
        object.__setattr__(self, "boxes", boxes)
        object.__setattr__(self, "scores", scores)
        if self.order is None:
            object.__setattr__(self, "order", np.arange(len(scores)))
        if not self.source_ids:
            object.__setattr__(self, "source_ids", tuple(range(len(scores))))

    @classmethod
    def from_arrays(cls, boxes, scores, class_id: int = 0, image_id: str = "",
                    source_ids: Sequence | None = None) -> "DetectionSet":
        """Sort detections by descending score and build a channel."""
        scores = np.asarray(scores, dtype=np.float64).reshape(-1)
        boxes = as_corners(boxes) if len(scores) else np.zeros((0, 4))
        order = np.argsort(-scores, kind="stable")
        ids = tuple(range(len(scores))) if source_ids is None else tuple(source_ids)
        return cls(boxes[order], scores[order], class_id, image_id,
                   tuple(ids[k] for k in order), order)

    @classmethod
    def from_detections(cls, detections: Sequence[Detection], image_id: str = "") -> "DetectionSet":
        if not detections:
            return cls(np.zeros((0, 4)), np.zeros(0), image_id=image_id)
        class_ids = {d.class_id for d in detections}
        if len(class_ids) != 1:
            raise ValueError("a DetectionSet holds exactly one class channel")
        return cls.from_arrays(
            [d.box.corners for d in detections],
            [d.score for d in detections],
            class_id=class_ids.pop(),
            image_id=image_id,
            source_ids=[d.source_id for d in detections],
        )

    def __len__(self) -> int:
        return self.scores.shape[0]

    def subset(self, mask) -> "DetectionSet":
        idx = np.flatnonzero(mask)
        return DetectionSet(self.boxes[idx], self.scores[idx], self.class_id, self.image_id,
                            tuple(self.source_ids[k] for k in idx), self.order[idx])


@dataclass(frozen=True, eq=False)
class IoUMatrix:
    """Strictly upper-triangular pairwise affinities ``x_ij`` for ``i < j``."""

    values: np.ndarray
    flavor: str = "iou"

    @property
    def n(self) -> int:
        return self.values.shape[0]


@dataclass(frozen=True, eq=False)
class KeepMask:
    keep: np.ndarray
    iterations_used: int = 1

    @property
    def indices(self) -> np.ndarray:
        return np.flatnonzero(self.keep)

    def __len__(self) -> int:
        return self.keep.shape[0]


@dataclass(frozen=True, eq=False)
class NmsResult:
    keep: KeepMask
    scores: np.ndarray
    boxes: np.ndarray

    @classmethod
    def plain(cls, dets: DetectionSet, mask: KeepMask) -> "NmsResult":
        return cls(mask, dets.scores.copy(), dets.boxes.copy())


def _check_eps(eps: float) -> None:
    if not 0.0 < eps < 1.0:
        raise ValueError(f"eps must lie in (0, 1), got {eps}")


def _affinity(boxes_a, boxes_b, flavor: str) -> np.ndarray:
    if flavor == "iou":
        return pairwise_iou(boxes_a, boxes_b)
    if flavor == "diou":
        return pairwise_iou(boxes_a, boxes_b) - pairwise_distance_term(boxes_a, boxes_b)
    raise ValueError(f"unknown flavor {flavor!r}; expected one of {FLAVORS}")


def build_iou_matrix(dets: DetectionSet, flavor: str = "iou") -> IoUMatrix:
    """Pairwise affinity table with the diagonal and lower triangle zeroed."""
    n = len(dets)
    if n == 0:
        return IoUMatrix(np.zeros((0, 0)), flavor)
    return IoUMatrix(np.triu(_affinity(dets.boxes, dets.boxes, flavor), k=1), flavor)


def original_nms(dets: DetectionSet | None, eps: float = DEFAULT_EPS, flavor: str = "iou",
                 matrix: IoUMatrix | None = None) -> KeepMask:
    """Greedy sequential NMS; the reference every matrix variant is checked against.

    Affinities are computed one row at a time from the boxes unless a
    precomputed ``matrix`` is supplied (``dets`` may then be ``None``).
    """
    _check_eps(eps)
    n = matrix.n if matrix is not None else len(dets)
    keep = np.ones(n, dtype=bool)
    for i in range(n - 1):
        if keep[i]:
            if matrix is not None:
                row = matrix.values[i, i + 1:]
            else:
                row = _affinity(dets.boxes[i:i + 1], dets.boxes[i + 1:], flavor)[0]
            keep[i + 1:] &= row < eps
    return KeepMask(keep, max(n, 1))


def fast_nms(dets: DetectionSet, eps: float = DEFAULT_EPS, flavor: str = "iou",
             matrix: IoUMatrix | None = None) -> KeepMask:
    """Suppress ``j`` if any higher-scored box overlaps it, suppressed or not."""
    _check_eps(eps)
    x = (matrix if matrix is not None else build_iou_matrix(dets, flavor)).values
    if x.shape[0] == 0:
        return KeepMask(np.zeros(0, dtype=bool), 1)
    return KeepMask(~(x >= eps).any(axis=0), 1)


def _fixed_point(x: np.ndarray, eps: float, t_cap: int | None):
    n = x.shape[0]
    if n == 0:
        return np.zeros(0, dtype=bool), 1
    t_cap = n if t_cap is None else int(t_cap)
    if t_cap < 1:
        raise ValueError("t_cap must be at least 1")
    hits = x >= eps
    b = np.ones(n, dtype=bool)
    for t in range(1, t_cap + 1):
        # column max of diag(b) @ X, on the binarized matrix
        b_next = ~hits[b].any(axis=0)
        if np.array_equal(b_next, b):
            return b_next, t
        b = b_next
    return b, t_cap


def cluster_nms(dets: DetectionSet, eps: float = DEFAULT_EPS, t_cap: int | None = None,
                flavor: str = "iou", matrix: IoUMatrix | None = None) -> KeepMask:
    """Iterate ``b <- [max_i b_i x_ij < eps]`` from ``b = 1`` until it stops changing.

    ``t_cap`` defaults to ``len(dets)``, enough to reach the sequential result.
    ``t_cap=1`` is Fast NMS.
    """
    _check_eps(eps)
    x = (matrix if matrix is not None else build_iou_matrix(dets, flavor)).values
    b, t = _fixed_point(x, eps, t_cap)
    return KeepMask(b, t)


def cluster_nms_d(dets: DetectionSet, eps: float = DEFAULT_EPS, t_cap: int | None = None) -> KeepMask:
    """Cluster-NMS on IoU minus normalized center distance (DIoU-NMS)."""
    return cluster_nms(dets, eps, t_cap, flavor="diou")


def _penalized(dets, eps, sigma, score_floor, beta=None):
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    _check_eps(eps)
    iou = build_iou_matrix(dets, "iou")
    b, t = _fixed_point(iou.values, eps, None)
    ax = iou.values * b[:, None]
    factors = np.exp(-(ax * ax) / sigma)
    if beta is not None:
        if not beta > 0:
            raise ValueError("beta must be positive")
        dist = np.triu(pairwise_distance_term(dets.boxes, dets.boxes), k=1) if len(dets) else ax
        factors = np.minimum(factors + dist**beta, 1.0)
    scores = dets.scores * factors.prod(axis=0) if len(dets) else dets.scores.copy()
    keep = scores >= score_floor
    if keep.size:
        # the top box is never penalized; keep it whatever the floor
        keep[0] = True
    return NmsResult(KeepMask(keep, t), scores, dets.boxes.copy())


def cluster_nms_s(dets: DetectionSet, eps: float = DEFAULT_EPS, sigma: float = DEFAULT_SIGMA,
                  score_floor: float = DEFAULT_SCORE_FLOOR) -> NmsResult:
    """Gaussian score penalty from surviving higher-scored boxes.

    ``s_j <- s_j * prod_i exp(-(A X)_ij**2 / sigma)`` with ``A`` the
    Cluster-NMS fixed point.  Boxes whose new score falls below
    ``score_floor`` are reported as suppressed.
    """
    return _penalized(dets, eps, sigma, score_floor)


def cluster_nms_s_d(dets: DetectionSet, eps: float = DEFAULT_EPS, sigma: float = DEFAULT_SIGMA,
                    beta: float = DEFAULT_BETA,
                    score_floor: float = DEFAULT_SCORE_FLOOR) -> NmsResult:
    """Score penalty relaxed by center distance: factor ``min(exp(.) + D**beta, 1)``."""
    return _penalized(dets, eps, sigma, score_floor, beta)


def weighted_nms(dets: DetectionSet, eps: float = DEFAULT_EPS,
                 shared_members: bool = False) -> NmsResult:
    """Sequential Weighted-NMS.

    Each kept box is replaced by the average of itself and the boxes it
    suppresses, weighted by ``score * IoU(kept, member)``.  By default a box
    belongs to the first kept box that suppresses it only.  With
    ``shared_members=True`` a lower box contributes to every kept box it
    overlaps, already-suppressed or not; that is what the matrix form in
    :func:`cluster_nms_w` computes.
    """
    _check_eps(eps)
    n = len(dets)
    boxes = dets.boxes
    out = boxes.copy()
    keep = np.zeros(n, dtype=bool)
    claimed = np.zeros(n, dtype=bool)
    for i in range(n):
        if claimed[i]:
            continue
        keep[i] = True
        if i == n - 1:
            break
        ov = pairwise_iou(boxes[i:i + 1], boxes[i + 1:])[0]
        members = ov >= eps
        if not shared_members:
            members &= ~claimed[i + 1:]
        idx = np.flatnonzero(members) + i + 1
        if idx.size:
            w = np.concatenate([[dets.scores[i]], dets.scores[idx] * ov[idx - i - 1]])
            pts = np.vstack([boxes[i:i + 1], boxes[idx]])
            out[i] = (w[:, None] * pts).sum(axis=0) / w.sum()
        claimed[i + 1:] |= ov >= eps
    return NmsResult(KeepMask(keep, max(n, 1)), dets.scores.copy(), out)


def cluster_nms_w(dets: DetectionSet, eps: float = DEFAULT_EPS, flavor: str = "iou") -> NmsResult:
    """Matrix-form weighted coordinates at the Cluster-NMS fixed point.

    Row ``i`` of the weight matrix is ``b_i [x_ij >= eps] IoU_ij s_j`` plus
    ``s_i`` on the diagonal; the new boxes are the row-normalized product
    with the box matrix.  ``flavor`` only changes which affinity decides
    suppression and cluster membership.
    """
    _check_eps(eps)
    n = len(dets)
    if n == 0:
        return NmsResult(KeepMask(np.zeros(0, dtype=bool), 1), dets.scores.copy(), dets.boxes.copy())
    iou = build_iou_matrix(dets, "iou").values
    x = iou if flavor == "iou" else build_iou_matrix(dets, flavor).values
    b, t = _fixed_point(x, eps, None)
    member = (x >= eps) & b[:, None]
    weights = np.where(member, iou, 0.0) * dets.scores[None, :]
    weights[np.diag_indices(n)] = dets.scores
    merged = (weights @ dets.boxes) / weights.sum(axis=1)[:, None]
    # boxes without cluster members stay bit-exact
    boxes = np.where(member.any(axis=1)[:, None], merged, dets.boxes)
    return NmsResult(KeepMask(b, t), dets.scores.copy(), boxes)


def cluster_nms_w_d(dets: DetectionSet, eps: float = DEFAULT_EPS) -> NmsResult:
    return cluster_nms_w(dets, eps, flavor="diou")


def cluster_components(matrix: IoUMatrix, eps: float = DEFAULT_EPS) -> list[np.ndarray]:
    """Connected components of the graph with an edge wherever ``x_ij >= eps``.

    Components are ordered by their lowest index.
    """
    n = matrix.n
    if n == 0:
        return []
    rows, cols = np.nonzero(np.triu(matrix.values >= eps, k=1))
    graph = coo_matrix((np.ones(rows.size), (rows, cols)), shape=(n, n))
    _, labels = connected_components(graph, directed=False)
    groups: dict[int, list[int]] = {}
    for idx, lab in enumerate(labels):
        groups.setdefault(int(lab), []).append(idx)
    return [np.array(g) for g in sorted(groups.values(), key=lambda g: g[0])]


def largest_cluster_size(dets: DetectionSet, eps: float = DEFAULT_EPS, flavor: str = "iou") -> int:
    comps = cluster_components(build_iou_matrix(dets, flavor), eps)
    return max((len(c) for c in comps), default=0)


# --- method registry used by the CLI and channel runner ----------------------

MethodFn = Callable[..., NmsResult]


def _original(dets, eps=DEFAULT_EPS, **_):
    return NmsResult.plain(dets, original_nms(dets, eps))


def _fast(dets, eps=DEFAULT_EPS, **_):
    return NmsResult.plain(dets, fast_nms(dets, eps))


def _cluster(dets, eps=DEFAULT_EPS, t_cap=None, **_):
    return NmsResult.plain(dets, cluster_nms(dets, eps, t_cap))


def _cluster_d(dets, eps=DEFAULT_EPS, t_cap=None, **_):
    return NmsResult.plain(dets, cluster_nms_d(dets, eps, t_cap))


def _cluster_s(dets, eps=DEFAULT_EPS, sigma=DEFAULT_SIGMA, score_floor=DEFAULT_SCORE_FLOOR, **_):
    return cluster_nms_s(dets, eps, sigma, score_floor)


def _cluster_s_d(dets, eps=DEFAULT_EPS, sigma=DEFAULT_SIGMA, beta=DEFAULT_BETA,
                 score_floor=DEFAULT_SCORE_FLOOR, **_):
    return cluster_nms_s_d(dets, eps, sigma, beta, score_floor)


def _weighted(dets, eps=DEFAULT_EPS, **_):
    return weighted_nms(dets, eps)


def _cluster_w(dets, eps=DEFAULT_EPS, **_):
    return cluster_nms_w(dets, eps)


def _cluster_w_d(dets, eps=DEFAULT_EPS, **_):
    return cluster_nms_w_d(dets, eps)


METHODS: dict[str, MethodFn] = {
    "original": _original,
    "fast": _fast,
    "cluster": _cluster,
    "cluster-d": _cluster_d,
    "cluster-s": _cluster_s,
    "cluster-s+d": _cluster_s_d,
    "weighted": _weighted,
    "cluster-w": _cluster_w,
    "cluster-w+d": _cluster_w_d,
}

MERGING_METHODS = frozenset({"weighted", "cluster-w", "cluster-w+d"})


def run_method(method: str, dets: DetectionSet, **params) -> NmsResult:
    try:
        fn = METHODS[method]
    except KeyError:
        raise ValueError(f"unknown NMS method {method!r}; choose from {sorted(METHODS)}") from None
    return fn(dets, **params)


def run_channels(method: str, channels: Sequence[DetectionSet], workers: int = 1,
                 **params) -> list[NmsResult]:
    """Apply one method to independent class channels, preserving order."""
    if workers > 1 and len(channels) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(lambda d: run_method(method, d, **params), channels))
    return [run_method(method, d, **params) for d in channels]
