"""Compiled scalar kernels for the regression simulation.

These mirror :func:`boxkit.losses.loss_and_grad` one case at a time so a
whole trajectory stays in registers.  ``tests/test_simulation.py`` checks
the two against each other.
"""

import math

import numba
import numpy as np

KIND_CODES = {"iou": 0, "giou": 1, "diou": 2, "ciou": 3}

_C = 4.0 / (math.pi * math.pi)


@numba.njit(cache=True, inline="always")
def _tie_step(cond, tie):
    if cond:
        return 1.0
    if tie:
        return 0.5
    return 0.0


@numba.njit(cache=True)
def loss_grad_scalar(kind, x, y, w, h, gx, gy, gw, gh, detach):
    """Return ``(value, iou, dx, dy, dw, dh)`` for one pair."""
    x1 = x - w / 2.0
    x2 = x + w / 2.0
    y1 = y - h / 2.0
    y2 = y + h / 2.0
    gx1 = gx - gw / 2.0
    gx2 = gx + gw / 2.0
    gy1 = gy - gh / 2.0
    gy2 = gy + gh / 2.0

    iw = min(x2, gx2) - max(x1, gx1)
    ih = min(y2, gy2) - max(y1, gy1)
    if iw > 0.0 and ih > 0.0:
        diw1 = -_tie_step(x1 > gx1, x1 == gx1)
        diw2 = _tie_step(x2 < gx2, x2 == gx2)
        dih1 = -_tie_step(y1 > gy1, y1 == gy1)
        dih2 = _tie_step(y2 < gy2, y2 == gy2)
    else:
        iw = 0.0
        ih = 0.0
        diw1 = 0.0
        diw2 = 0.0
        dih1 = 0.0
        dih2 = 0.0
    inter = iw * ih
    dI_x = ih * (diw1 + diw2)
    dI_y = iw * (dih1 + dih2)
    dI_w = ih * (diw2 - diw1) / 2.0
    dI_h = iw * (dih2 - dih1) / 2.0

    union = w * h + gw * gh - inter
    dU_x = -dI_x
    dU_y = -dI_y
    dU_w = h - dI_w
    dU_h = w - dI_h
    iou = inter / union
    gx_ = -(dI_x - iou * dU_x) / union
    gy_ = -(dI_y - iou * dU_y) / union
    gw_ = -(dI_w - iou * dU_w) / union
    gh_ = -(dI_h - iou * dU_h) / union
    # corner rounding can push inter a hair past the smaller area
    iou = min(iou, 1.0)
    value = 1.0 - iou
    if kind == 0:
        return value, iou, gx_, gy_, gw_, gh_

    cw = max(x2, gx2) - min(x1, gx1)
    ch = max(y2, gy2) - min(y1, gy1)
    dcw1 = -_tie_step(x1 < gx1, x1 == gx1)
    dcw2 = _tie_step(x2 > gx2, x2 == gx2)
    dch1 = -_tie_step(y1 < gy1, y1 == gy1)
    dch2 = _tie_step(y2 > gy2, y2 == gy2)
    dcw_x = dcw1 + dcw2
    dcw_w = (dcw2 - dcw1) / 2.0
    dch_y = dch1 + dch2
    dch_h = (dch2 - dch1) / 2.0

    if kind == 1:
        c_area = cw * ch
        ratio = union / c_area
        value += max(1.0 - ratio, 0.0)
        gx_ -= (dU_x - ratio * dcw_x * ch) / c_area
        gy_ -= (dU_y - ratio * dch_y * cw) / c_area
        gw_ -= (dU_w - ratio * dcw_w * ch) / c_area
        gh_ -= (dU_h - ratio * dch_h * cw) / c_area
        return value, iou, gx_, gy_, gw_, gh_

    c2 = cw * cw + ch * ch
    if c2 > 0.0:
        dist = ((x - gx) ** 2 + (y - gy) ** 2) / c2
        gx_ += 2.0 * (x - gx) / c2
        gy_ += 2.0 * (y - gy) / c2
        if not detach:
            gx_ -= dist * 2.0 * cw * dcw_x / c2
            gy_ -= dist * 2.0 * ch * dch_y / c2
            gw_ -= dist * 2.0 * cw * dcw_w / c2
            gh_ -= dist * 2.0 * ch * dch_h / c2
        value += dist
    if kind == 2:
        return value, iou, gx_, gy_, gw_, gh_

    delta = math.atan(gw / gh) - math.atan(w / h)
    v = _C * delta * delta
    alpha = 0.0
    if iou >= 0.5:
        denom = (1.0 - iou) + v
        if denom > 0.0:
            alpha = v / denom
    k = 2.0 * _C * delta / (w * w + h * h)
    value += alpha * v
    gw_ += alpha * (-k * h)
    gh_ += alpha * (k * w)
    return value, iou, gx_, gy_, gw_, gh_


@numba.njit(cache=True)
def simulate_cases(boxes, targets, per_point, kind, lrs, floor, detach, errors, final):
    """Run every case for ``len(lrs)`` steps, accumulating l1 error per point.

    ``boxes``/``targets`` are ``(n * per_point, 4)`` center-form arrays;
    ``errors`` is ``(T, n)`` and is added into.  ``final`` receives each
    case's l1 error after the last step.
    """
    n_steps = lrs.shape[0]
    n_cases = boxes.shape[0]
    for c in range(n_cases):
        n = c // per_point
        x = boxes[c, 0]
        y = boxes[c, 1]
        w = boxes[c, 2]
        h = boxes[c, 3]
        gx = targets[c, 0]
        gy = targets[c, 1]
        gw = targets[c, 2]
        gh = targets[c, 3]
        for t in range(n_steps):
            _, iou, dx, dy, dw, dh = loss_grad_scalar(kind, x, y, w, h, gx, gy, gw, gh, detach)
            scale = lrs[t] * (2.0 - iou)
            x -= scale * dx
            y -= scale * dy
            w -= scale * dw
            h -= scale * dh
            if w < floor:
                w = floor
            if h < floor:
                h = floor
            errors[t, n] += abs(x - gx) + abs(y - gy) + abs(w - gw) + abs(h - gh)
        final[c] = abs(x - gx) + abs(y - gy) + abs(w - gw) + abs(h - gh)


def warmup():
    b = np.array([[0.0, 0.0, 1.0, 1.0]])
    simulate_cases(b, b.copy(), 1, 0, np.array([0.1]), 1e-9, False,
                   np.zeros((1, 1)), np.zeros(1))
