import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import tiny_config
from iat.evalkit import (RunResult, ablate, evaluate_files, format_table, iou, precision_curve,
                         read_groundtruth, read_results, sequence_mean_auc, success_curve)
from iat.geometry import ContractError


def test_iou_hand_cases():
    assert iou([3, 4, 10, 20], [3, 4, 10, 20]) == 1.0
    assert iou([0, 0, 1, 1], [5, 5, 1, 1]) == 0.0
    assert iou([0, 0, 1, 1], [0.5, 0, 1, 1]) == 1 / 3
    # touching edges share no area
    assert iou([0, 0, 1, 1], [1, 0, 1, 1]) == 0.0


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(0, 100), min_size=4, max_size=4), st.lists(st.floats(0, 100), min_size=4, max_size=4))
def test_iou_is_symmetric_and_bounded(a, b):
    a[2] += 0.5
    a[3] += 0.5
    b[2] += 0.5
    b[3] += 0.5
    v = iou(a, b)
    assert v == iou(b, a)
    assert 0.0 <= v <= 1.0


@pytest.mark.parametrize("bad", [[0, 0, 0, 1], [0, 0, 1, -2]])
def test_iou_rejects_degenerate_boxes(bad):
    with pytest.raises(ContractError):
        iou(bad, [0, 0, 1, 1])


def test_iou_is_stable_under_frame_clipping():
    # clipping a box that already lies inside the frame changes nothing
    a, b = np.array([10.0, 12.0, 30.0, 20.0]), np.array([15.0, 10.0, 25.0, 25.0])
    clipped = np.array([max(a[0], 0), max(a[1], 0), min(a[0] + a[2], 128) - max(a[0], 0),
                        min(a[1] + a[3], 128) - max(a[1], 0)])
    assert iou(clipped, b) == iou(a, b)


def _run(pred, gt, name="s"):
    return RunResult(name, np.asarray(pred, dtype=float), np.asarray(gt, dtype=float))


def test_perfect_tracking_success_is_twenty_of_twenty_one():
    gt = np.tile([10.0, 10.0, 20.0, 20.0], (7, 1))
    curve, auc = success_curve(_run(gt, gt))
    assert curve[:-1].tolist() == [1.0] * 20 and curve[-1] == 0.0
    assert auc == 20 / 21


def test_missed_tracking_scores_zero():
    gt = np.tile([10.0, 10.0, 20.0, 20.0], (5, 1))
    pred = np.tile([80.0, 80.0, 20.0, 20.0], (5, 1))
    assert success_curve(_run(pred, gt))[1] == 0.0


def test_precision_cases():
    gt = np.tile([10.0, 10.0, 20.0, 20.0], (4, 1))
    assert precision_curve(_run(gt, gt))[1] == 1.0
    far = gt + np.array([100.0, 0.0, 0.0, 0.0])
    assert precision_curve(_run(far, gt))[1] == 0.0
    # errors of exactly 20 px count, 20.5 px do not
    mixed = gt + np.array([[20.0, 0, 0, 0], [0, 20.5, 0, 0], [3, 4, 0, 0], [30, 0, 0, 0]])
    curve, p = precision_curve(_run(mixed, gt))
    assert p == 0.5
    assert curve[5] == 0.25 and curve[0] == 0.0


def test_empty_input_is_a_contract_error():
    with pytest.raises(ContractError):
        success_curve([])
    with pytest.raises(ContractError):
        precision_curve([])


def test_mismatched_lengths_are_refused():
    with pytest.raises(ContractError):
        _run(np.ones((3, 4)), np.ones((4, 4)))


def _random_results(rng, n_seq):
    out = []
    for s in range(n_seq):
        n = int(rng.integers(1, 40))
        gt = np.column_stack([rng.uniform(0, 100, (n, 2)), rng.uniform(5, 40, (n, 2))])
        pred = gt + np.column_stack([rng.normal(0, 12, (n, 2)), rng.normal(0, 5, (n, 2))])
        pred[:, 2:] = np.maximum(pred[:, 2:], 1.0)
        out.append(_run(pred, gt, str(s)))
    return out


def _brute_force(results):
    ious, errs = [], []
    for r in results:
        for p, g in zip(r.predicted, r.groundtruth):
            ious.append(iou(p, g))
            errs.append(math.hypot(p[0] + p[2] / 2 - g[0] - g[2] / 2, p[1] + p[3] / 2 - g[1] - g[3] / 2))
    succ = [sum(1 for v in ious if v > t / 20) / len(ious) for t in range(21)]
    return sum(succ) / 21, sum(1 for e in errs if e <= 20) / len(errs)


def test_metrics_match_a_brute_force_recount():
    rng = np.random.default_rng(2024)
    for _ in range(1000):
        results = _random_results(rng, int(rng.integers(1, 4)))
        auc_ref, prec_ref = _brute_force(results)
        assert abs(success_curve(results)[1] - auc_ref) < 1e-12
        assert abs(precision_curve(results)[1] - prec_ref) < 1e-12


def test_sequence_mean_auc_averages_per_sequence():
    gt = np.tile([10.0, 10.0, 20.0, 20.0], (3, 1))
    good = _run(gt, gt, "a")
    bad = _run(np.tile([90.0, 90.0, 20.0, 20.0], (9, 1)), np.tile([10.0, 10.0, 20.0, 20.0], (9, 1)), "b")
    assert sequence_mean_auc([good, bad]) == pytest.approx(10 / 21, abs=1e-15)
    # pooled frames weight the longer sequence more
    assert success_curve([good, bad])[1] == pytest.approx(3 / 12 * 20 / 21, abs=1e-15)


def test_result_and_groundtruth_files(tmp_path):
    res = tmp_path / "r.txt"
    res.write_text("10 10 20 20 1.0\n12 10 20 20 0.5\n")
    gt = tmp_path / "gt.txt"
    # the dataset's frame-indexed centre convention
    gt.write_text("0 20 20 20 20\n1 20 20 20 20\n")
    boxes, scores = read_results(res)
    assert boxes.shape == (2, 4) and scores.tolist() == [1.0, 0.5]
    np.testing.assert_array_equal(read_groundtruth(gt), [[10, 10, 20, 20]] * 2)
    report = evaluate_files(res, gt)
    assert report["frames"] == 2 and report["precision@20"] == 1.0
    assert report["success_auc"] == pytest.approx((20 / 21 + success_curve(_run([[12, 10, 20, 20]],
                                                                                 [[10, 10, 20, 20]]))[1]) / 2)


def test_malformed_results_line_names_the_line(tmp_path):
    p = tmp_path / "bad.txt"
    p.write_text("1 2 3 4\n1 2 3\n")
    with pytest.raises(ValueError, match=":2:"):
        read_results(p)


# -- ablation harness ----------------------------------------------------------

def _small_base():
    return tiny_config(data__frames_per_video=12)


def test_ablation_rows_and_determinism(tmp_path):
    base = _small_base()
    a = ablate("K", [0, 4], base, out_dir=tmp_path / "a", max_steps=3, heldout_videos=2)
    b = ablate("K", [0, 4], base, out_dir=tmp_path / "b", max_steps=3, heldout_videos=2)
    assert [r["status"] for r in a["rows"]] == ["ok", "ok"]
    assert a == b
    assert (tmp_path / "a" / "ablation.txt").read_text() == format_table(a)
    assert json.loads((tmp_path / "a" / "ablation.json").read_text()) == a
    # rows differ in the swept field only, so their hashes differ from each other
    assert a["rows"][0]["config_hash"] != a["rows"][1]["config_hash"]


def test_zero_bank_row_is_the_baseline_path(tmp_path):
    report = ablate("K", [0], _small_base(), max_steps=2, heldout_videos=1)
    row = report["rows"][0]
    assert row["status"] == "ok" and 0.0 <= row["success_auc"] <= 1.0


def test_filter_size_axis_populates_both_rows():
    report = ablate("F", [3, 5], _small_base(), max_steps=2, heldout_videos=1)
    assert [r["value"] for r in report["rows"]] == [3, 5]
    assert all(r["status"] == "ok" for r in report["rows"])


def test_failed_row_is_recorded_and_the_sweep_continues(caplog):
    report = ablate("K", [-1, 2], _small_base(), max_steps=2, heldout_videos=1)
    first, second = report["rows"]
    assert first["status"] == "failed" and "error" in first
    assert second["status"] == "ok"
    assert "failed" in format_table(report)


def test_unknown_axis():
    with pytest.raises(ValueError, match="axis"):
        ablate("depth", [1], _small_base())
