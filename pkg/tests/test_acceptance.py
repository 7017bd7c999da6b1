"""Acceptance criteria 1-8 at their stated sizes and tolerances.

Run alone with ``pytest tests/test_acceptance.py``; one line per criterion
is printed in the terminal summary.  The 5000-point simulation run is
opt-in: set ``BOXKIT_FULL_SCALE=1``.  Discrepancy reports go to
``$BOXKIT_ARTIFACTS`` (default ``acceptance-artifacts/`` in the repo root).
"""

import os
import time
from pathlib import Path

import numpy as np
import pytest

from boxkit import nms, verify
from boxkit.detections_io import write_detections
from boxkit.nms import IoUMatrix
from boxkit.simulation import SimulationConfig, run_simulation

from conftest import record_criterion

SEED = 2024
LOSSES = ("iou", "giou", "diou", "ciou")
ARTIFACTS = Path(os.environ.get("BOXKIT_ARTIFACTS", Path(__file__).resolve().parents[1] / "acceptance-artifacts"))


@pytest.fixture(scope="module")
def suite():
    # 1000 channels, N in 1..500, eps cycling 0.3/0.5/0.7, clustered and uniform layouts
    return verify.nms_suite(SEED, 1000, 500)


def test_criterion_1_cluster_equals_original(suite):
    start = time.perf_counter()
    rep = verify.check_cluster_equals_original(suite)
    elapsed = time.perf_counter() - start
    ok = rep.passed and elapsed < 60.0
    record_criterion(1, ok, f"cluster-nms(t_cap=N) == original-nms on {rep.checked} channels, "
                            f"{rep.detail}, {elapsed:.1f}s (limit 60s)")
    assert rep.passed, rep.line()
    assert elapsed < 60.0


def test_criterion_2_degeneration_and_ordering(suite):
    rep = verify.check_fast_degeneration(suite)
    chain = IoUMatrix(np.array([[0.0, 0.6, 0.0], [0.0, 0.0, 0.6], [0.0, 0.0, 0.0]]))
    orig = nms.original_nms(None, 0.5, matrix=chain).keep.astype(int).tolist()
    fast = nms.fast_nms(None, 0.5, matrix=chain).keep.astype(int).tolist()
    chain_ok = orig == [1, 0, 1] and fast == [1, 0, 0]
    record_criterion(2, rep.passed and chain_ok,
                     f"t_cap=1 == fast and keep(fast) within keep(original) on {rep.checked} channels "
                     f"({'ok' if rep.passed else 'violated'}); chain original={orig} fast={fast}")
    assert rep.passed, rep.counterexamples[:1]
    assert chain_ok


def test_criterion_3_iteration_bound(suite):
    rep = verify.check_iteration_bound(suite)
    record_criterion(3, rep.passed, f"iterations_used <= largest cluster on {rep.checked} channels; {rep.detail}")
    assert rep.passed, rep.counterexamples[:1]


def test_criterion_4_weighted_equivalence():
    weighted_suite = verify.nms_suite(SEED + 1, 500, 200)
    rep = verify.check_weighted_equivalence(weighted_suite, tol=1e-6)
    report_path = None
    if rep.counterexamples:
        ARTIFACTS.mkdir(parents=True, exist_ok=True)
        report_path = ARTIFACTS / "weighted-discrepancy.jsonl"
        write_detections(report_path, verify.counterexample_sets(rep))
        (ARTIFACTS / "weighted-discrepancy.txt").write_text(
            f"{rep.line()}\n"
            "Channels in weighted-discrepancy.jsonl reproduce the difference between the matrix\n"
            "weighted merge and the exclusive sequential merge (run: boxkit nms --method weighted\n"
            "and --method cluster-w on the file).  Every differing kept box has a cluster member\n"
            "already claimed by an earlier kept box; the matrix form lets it contribute to both.\n"
            "Against the shared-membership sequential merge the two agree within 1e-6.\n"
            + "".join(f"{d.image_id}: eps={eps}\n" for d, eps, _ in rep.counterexamples))
        # the dump must replay to the same discrepancy
        from boxkit.detections_io import channels, load_detections
        replay = channels(load_detections(report_path))
        assert any(np.abs(nms.cluster_nms_w(d, eps).boxes - nms.weighted_nms(d, eps).boxes).max() > 1e-6
                   for d, (_, eps, _) in zip(replay, rep.counterexamples))
    how = "exact equality" if report_path is None else f"documented discrepancy report at {report_path}"
    record_criterion(4, rep.passed, f"{rep.checked} channels; {rep.detail}; {how}")
    assert rep.passed, rep.line()


def _ordering(config_overrides, seed):
    tables = {k: run_simulation(SimulationConfig(loss_kind=k, **config_overrides), seed=seed) for k in LOSSES}
    sums = {k: t.final_sum for k, t in tables.items()}
    ordered = sums["iou"] > sums["giou"] > sums["diou"] >= sums["ciou"]
    iou = tables["iou"]
    dis = iou.case_initially_disjoint
    basin = bool(dis.any()) and bool(np.array_equal(iou.case_final[dis], iou.case_initial[dis]))
    return sums, ordered, basin, int(dis.sum())


def test_criterion_5_simulation_ordering():
    start = time.perf_counter()
    sums, ordered, basin, n_dis = _ordering(dict(n_points=500, iterations=200), seed=SEED)
    elapsed = time.perf_counter() - start
    ok = ordered and basin and elapsed < 600
    text = ", ".join(f"{k}={v:.6g}" for k, v in sums.items())
    record_criterion(5, ok, f"n=500 T=200 final sums {text}; IoU > GIoU > DIoU >= CIoU: {ordered}; "
                            f"{n_dis} initially disjoint IoU cases unchanged: {basin}; {elapsed:.0f}s (limit 600s)")
    assert ordered and basin
    assert elapsed < 600


@pytest.mark.skipif(os.environ.get("BOXKIT_FULL_SCALE") != "1", reason="set BOXKIT_FULL_SCALE=1")
def test_criterion_5_full_scale():
    sums, ordered, basin, _ = _ordering(dict(n_points=5000, iterations=200), seed=SEED)
    text = ", ".join(f"{k}={v:.6g}" for k, v in sums.items())
    print(f"criterion 5 (full scale, n=5000): ordering {ordered}, basin {basin}; {text}")
    assert ordered and basin


def test_criterion_6_gradients():
    rep = verify.check_gradients(verify.random_box_pairs(SEED + 2, 10_000), tol=1e-4)
    record_criterion(6, rep.passed, f"{rep.checked} pairs x 4 losses; {rep.detail}")
    assert rep.passed, rep.line()


def test_criterion_7_invariance():
    rep = verify.check_invariance(verify.random_box_pairs(SEED + 3, 2000), tol=1e-9)
    record_criterion(7, rep.passed, f"{rep.checked} pairs, k in (0.01, 1, 100) and shifts; {rep.detail}")
    assert rep.passed, rep.line()


def test_criterion_8_deep_model_tables_not_reproduced():
    record_criterion(8, None, "deep-model AP/AR tables need trained detectors and COCO inference; "
                              "not reproduced, criteria 1-7 stand in")
