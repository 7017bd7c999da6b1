"""Self-generating property suites.

Each ``check_*`` function runs one property over a seeded random suite and
returns a :class:`PropertyReport`.  Failing NMS reports carry the
offending channel so it can be written out as a replayable detection file.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import nms
from .geometry import Box
from .losses import LossKind, evaluate, finite_diff_grad, loss_and_grad
from .nms import DetectionSet

logger = logging.getLogger(__name__)

EPS_CHOICES = (0.3, 0.5, 0.7)
LAYOUTS = ("uniform", "clustered")


@dataclass
class PropertyReport:
    name: str
    passed: bool
    checked: int
    detail: str = ""
    counterexamples: list = field(default_factory=list)

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"[{status}] {self.name}: {self.checked} checked. {self.detail}".rstrip()


# --- random inputs -------------------------------------------------------------


def random_channel(rng: np.random.Generator, n: int, layout: str = "uniform",
                   image_id: str = "", class_id: int = 0) -> DetectionSet:
    """``n`` random boxes; ``clustered`` packs them around a few centers."""
    if layout == "uniform":
        centers = rng.uniform(0.0, 400.0, size=(n, 2))
        sizes = rng.uniform(8.0, 60.0, size=(n, 2))
    elif layout == "clustered":
        k = max(1, n // 6)
        hubs = rng.uniform(0.0, 400.0, size=(k, 2))
        hub_sizes = rng.uniform(15.0, 60.0, size=(k, 2))
        pick = rng.integers(0, k, size=n)
        sizes = hub_sizes[pick] * rng.uniform(0.75, 1.3, size=(n, 2))
        centers = hubs[pick] + rng.normal(0.0, 0.12, size=(n, 2)) * hub_sizes[pick]
    else:
        raise ValueError(f"unknown layout {layout!r}")
    boxes = np.hstack([centers - sizes / 2.0, centers + sizes / 2.0])
    # two decimals so that score ties occur
    scores = np.round(rng.uniform(0.02, 1.0, size=n), 2)
    return DetectionSet.from_arrays(boxes, scores, class_id=class_id, image_id=image_id)


def nms_suite(seed: int, n_channels: int, max_n: int = 500) -> list[tuple[DetectionSet, float]]:
    """Random channels with sizes in ``1..max_n``, alternating layouts and eps."""
    rng = np.random.default_rng(seed)
    suite = []
    for k in range(n_channels):
        n = int(rng.integers(1, max_n + 1))
        layout = LAYOUTS[k % 2]
        eps = EPS_CHOICES[k % 3]
        suite.append((random_channel(rng, n, layout, image_id=f"s{seed}-c{k}"), eps))
    return suite


def random_box_pairs(seed: int, count: int) -> list[tuple[Box, Box]]:
    """Non-degenerate (pred, target) pairs; half are near-matches."""
    rng = np.random.default_rng(seed)
    pairs = []
    for k in range(count):
        target = Box(*rng.uniform(-20.0, 20.0, 2), *rng.uniform(0.2, 8.0, 2))
        if k % 2:
            pred = Box(*rng.uniform(-20.0, 20.0, 2), *rng.uniform(0.2, 8.0, 2))
        else:
            pred = Box(target.x + rng.normal(0, 0.3) * target.w, target.y + rng.normal(0, 0.3) * target.h,
                       target.w * rng.uniform(0.6, 1.6), target.h * rng.uniform(0.6, 1.6))
        pairs.append((pred, target))
    return pairs


# --- NMS properties ------------------------------------------------------------


def _fail_channels(report: PropertyReport, dets: DetectionSet, eps: float, why: str, limit: int = 5):
    if len(report.counterexamples) < limit:
        report.counterexamples.append((dets, eps, why))


def check_cluster_equals_original(suite, fault: bool = False) -> PropertyReport:
    rep = PropertyReport("cluster-nms(t_cap=N) == original-nms", True, len(suite))
    for dets, eps in suite:
        ref = nms.original_nms(dets, eps).keep
        got = (nms.fast_nms(dets, eps) if fault else nms.cluster_nms(dets, eps)).keep
        if not np.array_equal(ref, got):
            rep.passed = False
            _fail_channels(rep, dets, eps, "keep masks differ")
    bad = len(rep.counterexamples)
    rep.detail = "zero mismatches" if rep.passed else f"{bad}+ mismatching channels"
    return rep


def check_fast_degeneration(suite) -> PropertyReport:
    rep = PropertyReport("cluster-nms(t_cap=1) == fast-nms; keep(fast) within keep(original)",
                         True, len(suite))
    for dets, eps in suite:
        fast = nms.fast_nms(dets, eps).keep
        one = nms.cluster_nms(dets, eps, t_cap=1).keep
        ref = nms.original_nms(dets, eps).keep
        if not np.array_equal(fast, one):
            rep.passed = False
            _fail_channels(rep, dets, eps, "t_cap=1 differs from fast-nms")
        if np.any(fast & ~ref):
            rep.passed = False
            _fail_channels(rep, dets, eps, "fast-nms keeps a box original-nms suppresses")
    return rep


def check_iteration_bound(suite) -> PropertyReport:
    rep = PropertyReport("iterations_used <= largest cluster", True, len(suite))
    iters = []
    for dets, eps in suite:
        mask = nms.cluster_nms(dets, eps)
        bound = nms.largest_cluster_size(dets, eps)
        iters.append(mask.iterations_used)
        if len(dets) and mask.iterations_used > bound:
            rep.passed = False
            _fail_channels(rep, dets, eps, f"{mask.iterations_used} iterations > cluster {bound}")
    if iters:
        rep.detail = (f"median iterations {float(np.median(iters)):g}, "
                      f"mean {float(np.mean(iters)):.2f}, max {max(iters)}")
    return rep


def shared_member_boxes(dets: DetectionSet, eps: float) -> np.ndarray:
    """Kept boxes whose overlap cluster includes a box an earlier kept box already claimed."""
    keep = nms.original_nms(dets, eps).keep
    x = nms.build_iou_matrix(dets).values >= eps
    claimed_before = np.zeros(len(dets), dtype=bool)
    shared = np.zeros(len(dets), dtype=bool)
    for i in np.flatnonzero(keep):
        members = x[i]
        shared[i] = bool(np.any(members & claimed_before))
        claimed_before |= members
    return shared


def check_weighted_equivalence(suite, tol: float = 1e-6) -> PropertyReport:
    """Matrix weighted merge against the sequential merge.

    Passes when the matrix form equals the shared-membership sequential
    merge everywhere, and every difference from the classic exclusive
    merge is explained by a box shared between two kept boxes.
    """
    rep = PropertyReport("cluster-nms-w == weighted-nms", True, len(suite))
    exclusive_mismatch = 0
    unexplained = 0
    worst_shared = 0.0
    for dets, eps in suite:
        mat = nms.cluster_nms_w(dets, eps)
        shared_ref = nms.weighted_nms(dets, eps, shared_members=True)
        excl_ref = nms.weighted_nms(dets, eps)
        if not np.array_equal(mat.keep.keep, excl_ref.keep.keep):
            rep.passed = False
            _fail_channels(rep, dets, eps, "keep masks differ")
            continue
        if len(dets) == 0:
            continue
        worst_shared = max(worst_shared, float(np.abs(mat.boxes - shared_ref.boxes).max()))
        diff = np.abs(mat.boxes - excl_ref.boxes).max(axis=1) > tol
        if diff.any():
            exclusive_mismatch += 1
            _fail_channels(rep, dets, eps, "differs from exclusive weighted-nms", limit=3)
            if np.any(diff & ~shared_member_boxes(dets, eps)):
                unexplained += 1
    if worst_shared > tol or unexplained:
        rep.passed = False
    rep.detail = (f"max |matrix - shared sequential| = {worst_shared:.2e}; "
                  f"{exclusive_mismatch} channels differ from exclusive weighted-nms, "
                  f"{unexplained} not explained by shared cluster members")
    return rep


# --- loss properties -----------------------------------------------------------


def near_kink(pred: Box, target: Box, gap: float) -> bool:
    """True when an edge of ``pred`` lies within ``gap`` of an edge of ``target``."""
    px1, py1, px2, py2 = pred.corners
    tx1, ty1, tx2, ty2 = target.corners
    xs = np.abs(np.subtract.outer([px1, px2], [tx1, tx2]))
    ys = np.abs(np.subtract.outer([py1, py2], [ty1, ty2]))
    return bool(min(xs.min(), ys.min()) < gap)


def gradient_rel_error(kind, pred: Box, target: Box, step: float = 1e-6) -> float:
    analytic = evaluate(kind, pred, target).grad
    numeric = finite_diff_grad(kind, pred, target, step)
    scale = max(np.abs(analytic).max(), np.abs(numeric).max())
    if scale == 0.0:
        return 0.0
    return float(np.abs(analytic - numeric).max() / scale)


def check_gradients(pairs, tol: float = 1e-4, step: float = 1e-6, fault: bool = False) -> PropertyReport:
    rep = PropertyReport("analytic gradient == central differences", True, 0)
    worst = {k: 0.0 for k in LossKind}
    excluded = 0
    for pred, target in pairs:
        coord = max(abs(v) for v in (*pred.as_array(), *target.as_array()))
        if near_kink(pred, target, 10.0 * step * max(1.0, coord)):
            excluded += 1
            continue
        _, _, iou = loss_and_grad(LossKind.IOU, pred.as_array()[None], target.as_array()[None])
        if abs(iou[0] - 0.5) < 1e-6:
            excluded += 1
            continue
        rep.checked += 1
        for kind in LossKind:
            err = gradient_rel_error(kind, pred, target, step)
            if fault:
                err += 1.0
            worst[kind] = max(worst[kind], err)
            if err > tol:
                rep.passed = False
                if len(rep.counterexamples) < 5:
                    rep.counterexamples.append((pred, target, kind, err))
    rep.detail = "max rel error " + ", ".join(f"{k.value}={v:.1e}" for k, v in worst.items())
    rep.detail += f"; {excluded} pairs excluded near kinks or IoU=0.5"
    return rep


def _rel(a: float, b: float) -> float:
    return abs(a - b) / max(abs(a), abs(b), 1e-12)


def check_invariance(pairs, tol: float = 1e-9, scales=(0.01, 1.0, 100.0),
                     shifts=((0.0, 0.0), (37.5, -12.25), (-1e3, 250.0))) -> PropertyReport:
    rep = PropertyReport("scale/translation invariance; CIoU == DIoU below IoU 0.5", True, 0)
    worst = 0.0
    degrade_checked = 0
    for pred, target in pairs:
        rep.checked += 1
        for kind in LossKind:
            base = evaluate(kind, pred, target).value
            for k in scales:
                worst = max(worst, _rel(base, evaluate(kind, pred.scaled(k), target.scaled(k)).value))
            for dx, dy in shifts:
                moved = evaluate(kind, pred.shifted(dx, dy), target.shifted(dx, dy)).value
                worst = max(worst, _rel(base, moved))
        _, _, iou = loss_and_grad(LossKind.IOU, pred.as_array()[None], target.as_array()[None])
        if iou[0] < 0.5:
            degrade_checked += 1
            c = evaluate(LossKind.CIOU, pred, target)
            d = evaluate(LossKind.DIOU, pred, target)
            if c.value != d.value or not np.array_equal(c.grad, d.grad):
                rep.passed = False
                if len(rep.counterexamples) < 5:
                    rep.counterexamples.append((pred, target, "ciou != diou"))
    if worst > tol:
        rep.passed = False
    rep.detail = f"max rel change {worst:.1e}; {degrade_checked} pairs with IoU < 0.5 checked for CIoU == DIoU"
    return rep


# --- driver --------------------------------------------------------------------


@dataclass
class VerifySizes:
    channels: int = 300
    max_n: int = 300
    weighted_channels: int = 150
    gradient_pairs: int = 2000
    invariance_pairs: int = 500

    @classmethod
    def full(cls) -> "VerifySizes":
        return cls(channels=1000, max_n=500, weighted_channels=500,
                   gradient_pairs=10_000, invariance_pairs=2000)


def run_all(seed: int = 0, sizes: VerifySizes | None = None,
            inject_fault: str | None = None) -> list[PropertyReport]:
    """Run every property suite.  ``inject_fault`` names a suite to sabotage."""
    sizes = sizes or VerifySizes()
    suite = nms_suite(seed, sizes.channels, sizes.max_n)
    weighted = nms_suite(seed + 1, sizes.weighted_channels, min(sizes.max_n, 200))
    reports = [
        check_cluster_equals_original(suite, fault=inject_fault == "nms"),
        check_fast_degeneration(suite),
        check_iteration_bound(suite),
        check_weighted_equivalence(weighted),
        check_gradients(random_box_pairs(seed + 2, sizes.gradient_pairs), fault=inject_fault == "gradient"),
        check_invariance(random_box_pairs(seed + 3, sizes.invariance_pairs)),
    ]
    for rep in reports:
        logger.info(rep.line())
    return reports


def counterexample_sets(report: PropertyReport) -> list[DetectionSet]:
    """Detection channels reproducing a report's failures.

    Box-pair counterexamples become two-detection channels: prediction
    (score 1.0) and target (score 0.5).
    """
    out = []
    for k, item in enumerate(report.counterexamples):
        if isinstance(item[0], DetectionSet):
            dets = item[0]
            out.append(DetectionSet(dets.boxes, dets.scores, dets.class_id,
                                    dets.image_id or f"counterexample-{k}", dets.source_ids, dets.order))
        else:
            pred, target = item[0], item[1]
            out.append(DetectionSet.from_arrays([pred.corners, target.corners], [1.0, 0.5],
                                                image_id=f"pair-{k}"))
    return out
