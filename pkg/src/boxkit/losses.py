"""IoU-family regression losses with analytic gradients.

All gradients are taken with respect to the center-form parameters
``[x, y, w, h]`` of the *predicted* box; the target is a constant.

At points where a ``min``/``max`` in the intersection or enclosing box is
tied (for instance when an edge of the prediction coincides with an edge
of the target) the derivative of that ``min``/``max`` is taken as the
midpoint of its one-sided derivatives.  That choice makes every loss
stationary at ``pred == target``.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from .geometry import Box

_FOUR_OVER_PI_SQ = 4.0 / math.pi**2
ALPHA_IOU_SWITCH = 0.5


class LossKind(str, enum.Enum):
    IOU = "iou"
    GIOU = "giou"
    DIOU = "diou"
    CIOU = "ciou"

    @classmethod
    def parse(cls, value) -> "LossKind":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(getattr(value, "value", value)).strip().lower())
        except ValueError:
            names = ", ".join(k.value for k in cls)
            raise ValueError(f"unknown loss kind {value!r} (expected one of: {names})") from None


@dataclass(frozen=True)
class LossEval:
    value: float
    grad: np.ndarray  # d value / d [x, y, w, h]

    def __iter__(self):
        yield self.value
        yield self.grad


def ciou_alpha(iou, v):
    """Trade-off weight on the aspect term: 0 below IoU 0.5, else V / ((1 - IoU) + V)."""
    iou = np.asarray(iou, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    denom = (1.0 - iou) + v
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(denom > 0.0, v / denom, 0.0)
    out = np.where(iou >= ALPHA_IOU_SWITCH, ratio, 0.0)
    return float(out) if out.ndim == 0 else out


def _step(cond_true, tie):
    # 1 where cond_true, 0.5 at exact ties, else 0
    return np.where(cond_true, 1.0, np.where(tie, 0.5, 0.0))


def loss_and_grad(kind, pred, target, alpha=None, detach_diagonal=False):
    """Vectorised loss evaluation.

    Parameters
    ----------
    kind : LossKind or str
    pred, target : array_like, shape (K, 4)
        Center-form boxes ``[x, y, w, h]``.
    alpha : array_like, optional
        Fixed CIoU trade-off weights.  When omitted they are computed from
        the current IoU and aspect term.  Either way alpha is held constant
        in the gradient.
    detach_diagonal : bool
        Treat the enclosing-box diagonal of the distance term as a constant
        in the gradient.  The value is unaffected; the gradient then only
        moves the center.

    Returns
    -------
    value : ndarray, shape (K,)
    grad : ndarray, shape (K, 4)
    iou : ndarray, shape (K,)
    """
    kind = LossKind.parse(kind)
    p = np.asarray(pred, dtype=np.float64)
    g = np.asarray(target, dtype=np.float64)
    x, y, w, h = p[..., 0], p[..., 1], p[..., 2], p[..., 3]
    gx, gy, gw, gh = g[..., 0], g[..., 1], g[..., 2], g[..., 3]

    x1, x2 = x - w / 2.0, x + w / 2.0
    y1, y2 = y - h / 2.0, y + h / 2.0
    gx1, gx2 = gx - gw / 2.0, gx + gw / 2.0
    gy1, gy2 = gy - gh / 2.0, gy + gh / 2.0

    iw_raw = np.minimum(x2, gx2) - np.maximum(x1, gx1)
    ih_raw = np.minimum(y2, gy2) - np.maximum(y1, gy1)
    overlap = (iw_raw > 0.0) & (ih_raw > 0.0)
    iw = np.where(overlap, iw_raw, 0.0)
    ih = np.where(overlap, ih_raw, 0.0)
    inter = iw * ih

    # d(iw)/d corner, d(ih)/d corner
    diw_dx1 = -_step(x1 > gx1, x1 == gx1) * overlap
    diw_dx2 = _step(x2 < gx2, x2 == gx2) * overlap
    dih_dy1 = -_step(y1 > gy1, y1 == gy1) * overlap
    dih_dy2 = _step(y2 < gy2, y2 == gy2) * overlap

    # corner -> center chain rule: d/dx = d/dx1 + d/dx2, d/dw = (d/dx2 - d/dx1) / 2
    dI = np.stack(
        [
            ih * (diw_dx1 + diw_dx2),
            iw * (dih_dy1 + dih_dy2),
            ih * (diw_dx2 - diw_dx1) / 2.0,
            iw * (dih_dy2 - dih_dy1) / 2.0,
        ],
        axis=-1,
    )
    area_p = w * h
    zeros = np.zeros_like(w)
    dA = np.stack([zeros, zeros, h, w], axis=-1)
    union = area_p + gw * gh - inter
    dU = dA - dI
    iou = inter / union
    dIoU = (dI - iou[..., None] * dU) / union[..., None]
    # corner rounding can push inter a hair past the smaller area
    iou = np.minimum(iou, 1.0)

    value = 1.0 - iou
    grad = -dIoU

    if kind is LossKind.IOU:
        return value, grad, iou

    cw = np.maximum(x2, gx2) - np.minimum(x1, gx1)
    ch = np.maximum(y2, gy2) - np.minimum(y1, gy1)
    dcw_dx1 = -_step(x1 < gx1, x1 == gx1)
    dcw_dx2 = _step(x2 > gx2, x2 == gx2)
    dch_dy1 = -_step(y1 < gy1, y1 == gy1)
    dch_dy2 = _step(y2 > gy2, y2 == gy2)
    dcw = np.stack([dcw_dx1 + dcw_dx2, zeros, (dcw_dx2 - dcw_dx1) / 2.0, zeros], axis=-1)
    dch = np.stack([zeros, dch_dy1 + dch_dy2, zeros, (dch_dy2 - dch_dy1) / 2.0], axis=-1)

    if kind is LossKind.GIOU:
        c_area = cw * ch
        dC = dcw * ch[..., None] + dch * cw[..., None]
        ratio = union / c_area
        penalty = np.maximum(1.0 - ratio, 0.0)
        dpen = -(dU - ratio[..., None] * dC) / c_area[..., None]
        return value + penalty, grad + dpen, iou

    c2 = cw * cw + ch * ch
    rho2 = (x - gx) ** 2 + (y - gy) ** 2
    safe_c2 = np.where(c2 > 0.0, c2, 1.0)
    dist = np.where(c2 > 0.0, rho2 / safe_c2, 0.0)
    drho2 = np.stack([2.0 * (x - gx), 2.0 * (y - gy), zeros, zeros], axis=-1)
    if detach_diagonal:
        ddist = drho2 / safe_c2[..., None]
    else:
        dc2 = 2.0 * cw[..., None] * dcw + 2.0 * ch[..., None] * dch
        ddist = (drho2 - dist[..., None] * dc2) / safe_c2[..., None]
    value = value + dist
    grad = grad + ddist

    if kind is LossKind.DIOU:
        return value, grad, iou

    delta = np.arctan(gw / gh) - np.arctan(w / h)
    v = _FOUR_OVER_PI_SQ * delta * delta
    if alpha is None:
        alpha = ciou_alpha(iou, v)
    alpha = np.asarray(alpha, dtype=np.float64)
    k = 2.0 * _FOUR_OVER_PI_SQ * delta / (w * w + h * h)
    dv = np.stack([zeros, zeros, -k * h, k * w], axis=-1)
    return value + alpha * v, grad + alpha[..., None] * dv, iou


def _evaluate(kind, pred: Box, target: Box, alpha=None) -> LossEval:
    value, grad, _ = loss_and_grad(kind, pred.as_array()[None, :], target.as_array()[None, :],
                                   None if alpha is None else np.array([alpha]))
    return LossEval(float(value[0]), grad[0])


def iou_loss(pred: Box, target: Box) -> LossEval:
    return _evaluate(LossKind.IOU, pred, target)


def giou_loss(pred: Box, target: Box) -> LossEval:
    return _evaluate(LossKind.GIOU, pred, target)


def diou_loss(pred: Box, target: Box) -> LossEval:
    return _evaluate(LossKind.DIOU, pred, target)


def ciou_loss(pred: Box, target: Box, alpha: float | None = None) -> LossEval:
    """CIoU loss.  Pass ``alpha`` to evaluate with a frozen trade-off weight."""
    return _evaluate(LossKind.CIOU, pred, target, alpha)


def evaluate(kind, pred: Box, target: Box) -> LossEval:
    return _evaluate(LossKind.parse(kind), pred, target)


def finite_diff_grad(kind, pred: Box, target: Box, step: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of the loss value w.r.t. ``[x, y, w, h]``.

    The step for each coordinate is ``step * max(1, |coordinate|)``.  For
    CIoU the trade-off weight alpha is frozen at ``pred``, matching the
    convention of the analytic gradient.
    """
    kind = LossKind.parse(kind)
    if not step > 0:
        raise ValueError("step must be positive")
    base = pred.as_array()
    tgt = target.as_array()[None, :]
    alpha = None
    if kind is LossKind.CIOU:
        _, _, iou0 = loss_and_grad(LossKind.IOU, base[None, :], tgt)
        delta = math.atan(target.w / target.h) - math.atan(pred.w / pred.h)
        alpha = np.atleast_1d(ciou_alpha(iou0[0], _FOUR_OVER_PI_SQ * delta * delta))

    rows = []
    steps = step * np.maximum(1.0, np.abs(base))
    for k in range(4):
        hk = steps[k]
        if base[k] + hk == base[k] or base[k] - hk == base[k]:
            raise ValueError(f"finite-difference step underflows at coordinate {k}")
        plus = base.copy()
        minus = base.copy()
        plus[k] += hk
        minus[k] -= hk
        rows.append(plus)
        rows.append(minus)
    stencil = np.array(rows)
    values, _, _ = loss_and_grad(kind, stencil, np.repeat(tgt, 8, axis=0),
                                 None if alpha is None else np.repeat(alpha, 8))
    values = values.reshape(4, 2)
    actual = np.diag(stencil[0::2]) - np.diag(stencil[1::2])
    return (values[:, 0] - values[:, 1]) / actual
