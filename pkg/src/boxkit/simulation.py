"""Gradient-descent simulation of anchor-to-target box regression.

Anchors with every (scale, aspect ratio) combination are placed at points
scattered over a disc and regressed toward unit-area targets centered in
the disc.  The accumulated l1 error per point and iteration forms the
:class:`ErrorTable`.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .geometry import DIM_FLOOR, Box
from .losses import LossKind, loss_and_grad

logger = logging.getLogger(__name__)

DEFAULT_SCALES = (0.5, 0.67, 0.75, 1.0, 1.33, 1.5, 2.0)
DEFAULT_RATIOS = (1 / 4, 1 / 3, 1 / 2, 1.0, 2.0, 3.0, 4.0)

LAYOUTS = ("random", "sunflower")


@dataclass(frozen=True)
class SimulationConfig:
    n_points: int = 500
    radius: float = 3.0
    center: tuple[float, float] = (10.0, 10.0)
    scales: tuple[float, ...] = DEFAULT_SCALES
    aspect_ratios: tuple[float, ...] = DEFAULT_RATIOS  # width / height
    target_ratios: tuple[float, ...] = DEFAULT_RATIOS
    target_area: float = 1.0
    iterations: int = 200
    learning_rates: tuple[float, float, float] = (0.1, 0.01, 0.001)
    milestones: tuple[float, float] = (0.8, 0.9)
    loss_kind: LossKind = LossKind.CIOU
    layout: str = "random"
    dim_floor: float = DIM_FLOOR
    # treat the enclosing diagonal of the distance term as constant in updates
    detach_diagonal: bool = True

    def __post_init__(self):
        object.__setattr__(self, "loss_kind", LossKind.parse(self.loss_kind))
        if self.n_points < 1 or self.iterations < 1:
            raise ValueError("n_points and iterations must be positive")
        if not self.radius > 0:
            raise ValueError("radius must be positive")
        if not (self.scales and self.aspect_ratios and self.target_ratios):
            raise ValueError("scales, aspect_ratios and target_ratios must be non-empty")
        if any(v <= 0 for v in (*self.scales, *self.aspect_ratios, *self.target_ratios)):
            raise ValueError("scales and ratios must be positive")
        if len(self.learning_rates) != 3 or any(lr <= 0 for lr in self.learning_rates):
            raise ValueError("learning_rates must be three positive values")
        lo, hi = self.milestones
        if not 0.0 <= lo <= hi <= 1.0:
            raise ValueError("milestones must satisfy 0 <= first <= second <= 1")
        if self.layout not in LAYOUTS:
            raise ValueError(f"layout must be one of {LAYOUTS}")

    @classmethod
    def full_scale(cls, **overrides) -> "SimulationConfig":
        """The full-size experiment: 5,000 points."""
        return cls(**{"n_points": 5000, **overrides})

    @property
    def n_cases(self) -> int:
        return self.n_points * len(self.scales) * len(self.aspect_ratios) * len(self.target_ratios)

    def learning_rate(self, t: int) -> float:
        """Step size at 1-based iteration ``t``."""
        if t <= self.milestones[0] * self.iterations:
            return self.learning_rates[0]
        if t <= self.milestones[1] * self.iterations:
            return self.learning_rates[1]
        return self.learning_rates[2]


@dataclass
class ErrorTable:
    """Accumulated l1 regression errors.

    ``errors[t - 1, n]`` is the error summed over every anchor and target
    at point ``n`` after iteration ``t``.  ``initial[n]`` is the same sum
    before the first update.  The ``case_*`` arrays hold per-case l1 errors
    in (point, scale, anchor ratio, target ratio) order.
    """

    errors: np.ndarray
    points: np.ndarray
    initial: np.ndarray
    cases_per_point: int
    loss_kind: LossKind
    case_initial: np.ndarray = field(repr=False)
    case_final: np.ndarray = field(repr=False)
    case_initially_disjoint: np.ndarray = field(repr=False)

    @property
    def iterations(self) -> int:
        return self.errors.shape[0]

    def curve(self) -> np.ndarray:
        """Error sum over all points at each iteration, shape ``(T,)``."""
        return self.errors.sum(axis=1)

    def mean_curve(self) -> np.ndarray:
        return self.curve() / (self.cases_per_point * self.points.shape[0])

    @property
    def final_sum(self) -> float:
        return float(self.errors[-1].sum())

    @property
    def initial_sum(self) -> float:
        return float(self.initial.sum())


def scatter_points(config: SimulationConfig, seed: int | None = 0) -> np.ndarray:
    """Anchor centers spread uniformly over the disc, shape ``(n_points, 2)``.

    The ``random`` layout draws radii as ``R * sqrt(u)`` so that density is
    uniform in area.  ``sunflower`` is a deterministic Vogel spiral that
    does not depend on the seed.
    """
    n = config.n_points
    cx, cy = config.center
    if config.layout == "sunflower":
        k = np.arange(n, dtype=np.float64)
        r = config.radius * np.sqrt((k + 0.5) / n)
        theta = k * math.pi * (3.0 - math.sqrt(5.0))
    else:
        rng = np.random.default_rng(seed)
        u = rng.random(n)
        theta = rng.random(n) * 2.0 * math.pi
        r = config.radius * np.sqrt(u)
    return np.column_stack([cx + r * np.cos(theta), cy + r * np.sin(theta)])


def anchor_shapes(config: SimulationConfig) -> np.ndarray:
    """``(w, h)`` for every (scale, aspect ratio) pair, scale-major."""
    shapes = [
        (math.sqrt(s * r), math.sqrt(s / r)) for s in config.scales for r in config.aspect_ratios
    ]
    return np.array(shapes, dtype=np.float64)


def target_boxes(config: SimulationConfig) -> np.ndarray:
    cx, cy = config.center
    a = config.target_area
    return np.array(
        [(cx, cy, math.sqrt(a * r), math.sqrt(a / r)) for r in config.target_ratios],
        dtype=np.float64,
    )


def _descend(boxes, targets, kind, eta, floor, detach_diagonal=False):
    _, grad, iou = loss_and_grad(kind, boxes, targets, detach_diagonal=detach_diagonal)
    out = boxes - (eta * (2.0 - iou))[:, None] * grad
    np.maximum(out[:, 2:], floor, out=out[:, 2:])
    return out


def regression_step(b: Box, target: Box, kind, eta: float, detach_diagonal: bool = False) -> Box:
    """One update ``B <- B - eta * (2 - IoU) * dL/dB``."""
    if not eta > 0:
        raise ValueError("eta must be positive")
    out = _descend(b.as_array()[None, :], target.as_array()[None, :],
                   LossKind.parse(kind), eta, b.floor, detach_diagonal)
    return Box(*out[0], floor=b.floor)


def _initially_disjoint(boxes, targets):
    iw = np.minimum(boxes[:, 0] + boxes[:, 2] / 2, targets[:, 0] + targets[:, 2] / 2) - np.maximum(
        boxes[:, 0] - boxes[:, 2] / 2, targets[:, 0] - targets[:, 2] / 2)
    ih = np.minimum(boxes[:, 1] + boxes[:, 3] / 2, targets[:, 1] + targets[:, 3] / 2) - np.maximum(
        boxes[:, 1] - boxes[:, 3] / 2, targets[:, 1] - targets[:, 3] / 2)
    return (iw <= 0.0) | (ih <= 0.0)


def _run_chunk(config: SimulationConfig, points: np.ndarray, engine: str):
    shapes = anchor_shapes(config)
    tgts = target_boxes(config)
    n, s, m = points.shape[0], shapes.shape[0], tgts.shape[0]
    # case order: point, anchor shape, target
    boxes = np.empty((n, s, m, 4))
    boxes[..., 0] = points[:, None, None, 0]
    boxes[..., 1] = points[:, None, None, 1]
    boxes[..., 2] = shapes[None, :, None, 0]
    boxes[..., 3] = shapes[None, :, None, 1]
    boxes = boxes.reshape(-1, 4)
    targets = np.ascontiguousarray(np.broadcast_to(tgts[None, None], (n, s, m, 4)).reshape(-1, 4))
    per_point = s * m

    case_initial = np.abs(boxes - targets).sum(axis=1)
    initial = case_initial.reshape(n, per_point).sum(axis=1)
    disjoint = _initially_disjoint(boxes, targets)
    errors = np.zeros((config.iterations, n))
    lrs = np.array([config.learning_rate(t) for t in range(1, config.iterations + 1)])
    kind = config.loss_kind

    if engine == "numba":
        from . import _kernels

        case_final = np.empty(boxes.shape[0])
        _kernels.simulate_cases(boxes, targets, per_point, _kernels.KIND_CODES[kind.value], lrs,
                                config.dim_floor, config.detach_diagonal, errors, case_final)
    elif engine == "numpy":
        for t in range(config.iterations):
            boxes = _descend(boxes, targets, kind, lrs[t], config.dim_floor, config.detach_diagonal)
            errors[t] = np.abs(boxes - targets).sum(axis=1).reshape(n, per_point).sum(axis=1)
        case_final = np.abs(boxes - targets).sum(axis=1)
    else:
        raise ValueError(f"unknown engine {engine!r}")
    return errors, initial, case_initial, case_final, disjoint


def run_simulation(
    config: SimulationConfig,
    seed: int | None = 0,
    workers: int = 1,
    chunk_points: int = 250,
    engine: str = "numba",
) -> ErrorTable:
    """Regress every anchor onto every target for ``config.iterations`` steps.

    Points are processed in chunks; each chunk is independent so results
    do not depend on ``workers``.  ``engine="numpy"`` runs the vectorised
    reference path instead of the compiled kernel.
    """
    points = scatter_points(config, seed)
    bounds = list(range(0, config.n_points, chunk_points)) + [config.n_points]
    spans = list(zip(bounds[:-1], bounds[1:]))
    logger.info(
        "simulating %s loss: %d points, %d cases, T=%d",
        config.loss_kind.value, config.n_points, config.n_cases, config.iterations,
    )

    def job(span):
        lo, hi = span
        out = _run_chunk(config, points[lo:hi], engine)
        logger.info("  points %d-%d of %d done", lo, hi, config.n_points)
        return out

    if workers > 1 and len(spans) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(job, spans))
    else:
        parts = [job(span) for span in spans]

    return ErrorTable(
        errors=np.concatenate([p[0] for p in parts], axis=1),
        points=points,
        initial=np.concatenate([p[1] for p in parts]),
        cases_per_point=config.n_cases // config.n_points,
        loss_kind=config.loss_kind,
        case_initial=np.concatenate([p[2] for p in parts]),
        case_final=np.concatenate([p[3] for p in parts]),
        case_initially_disjoint=np.concatenate([p[4] for p in parts]),
    )


def final_error_map(table: ErrorTable) -> list[tuple[tuple[float, float], float]]:
    """Per-point error at the last iteration."""
    last = table.errors[-1]
    return [((float(px), float(py)), float(e)) for (px, py), e in zip(table.points, last)]


def write_curve_csv(table: ErrorTable, path) -> None:
    curve = table.curve()
    mean = table.mean_curve()
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("t,error_sum,error_mean\n")
        fh.write(f"0,{table.initial_sum!r},{table.initial_sum / (table.cases_per_point * len(table.points))!r}\n")
        for t, (s, m) in enumerate(zip(curve, mean), start=1):
            fh.write(f"{t},{float(s)!r},{float(m)!r}\n")


def write_map_csv(table: ErrorTable, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("px,py,final_error\n")
        for (px, py), e in final_error_map(table):
            fh.write(f"{px!r},{py!r},{e!r}\n")


# --- key=value config files ----------------------------------------------------

_TUPLE_KEYS = {"center", "scales", "aspect_ratios", "target_ratios", "learning_rates", "milestones"}


def _parse_number(text: str) -> float:
    text = text.strip()
    if ":" in text:
        num, den = text.split(":", 1)
        return float(num) / float(den)
    return float(text)


def parse_config_text(text: str, base: SimulationConfig | None = None) -> SimulationConfig:
    """Read flat ``key = value`` lines; ``#`` starts a comment.

    List values are comma separated; ratios may be written ``w:h``.
    """
    base = base or SimulationConfig()
    known = {f.name: f for f in fields(SimulationConfig)}
    aliases = {"t": "iterations", "loss": "loss_kind", "points": "n_points"}
    updates = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected key=value, got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        key = aliases.get(key.lower(), key.lower())
        if key not in known:
            raise ValueError(f"config line {lineno}: unknown key {key!r}")
        try:
            if key in _TUPLE_KEYS:
                updates[key] = tuple(_parse_number(v) for v in value.split(",") if v.strip())
            elif key in ("n_points", "iterations"):
                updates[key] = int(value)
            elif key in ("loss_kind", "layout"):
                updates[key] = value.lower()
            else:
                updates[key] = float(value)
        except ValueError as exc:
            raise ValueError(f"config line {lineno}: bad value for {key}: {exc}") from None
    return replace(base, **updates)


def load_config(path, base: SimulationConfig | None = None) -> SimulationConfig:
    return parse_config_text(Path(path).read_text(encoding="utf-8"), base)
