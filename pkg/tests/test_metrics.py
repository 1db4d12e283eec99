from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lsf.geometry import Box3D, Detection, bev_iou, iou_3d
from lsf.metrics import (
    SWEEP_FIELDS,
    DegenerateGapError,
    EvalResult,
    average_precision_r40,
    closed_gap,
    evaluate,
    greedy_true_positives,
    sampled_precisions,
    sweep_csv,
)

from oracles import pr_curve_oracle

# (ap_model, ap_source_only, ap_oracle, expected closed gap in percent)
TABLE = [
    (39.45, 32.91, 51.88, 34.48),
    (22.30, 17.24, 34.87, 28.70),
    (35.92, 32.91, 51.88, 15.87),
    (20.19, 17.24, 34.87, 16.73),
    (40.63, 32.91, 51.88, 40.70),
    (24.04, 17.24, 34.87, 38.57),
]


@pytest.mark.parametrize("model,source,oracle,want", TABLE)
def test_closed_gap_reference_values(model, source, oracle, want):
    assert abs(closed_gap(model, source, oracle) - want) <= 0.01


def test_closed_gap_edge_cases():
    assert closed_gap(30.0, 30.0, 50.0) == 0.0
    assert closed_gap(50.0, 30.0, 50.0) == 100.0
    assert closed_gap(20.0, 30.0, 50.0) < 0
    with pytest.raises(DegenerateGapError):
        closed_gap(1.0, 2.0, 2.0)


def car(x, y=0.0, yaw=0.0):
    return Box3D((x, y, -1.0), (4.0, 1.8, 1.5), yaw)


def random_instance(rng, max_objects=30):
    frames = int(rng.integers(1, 5))
    gts, preds = [], []
    budget = max_objects
    for _ in range(frames):
        n = int(rng.integers(0, max(1, budget // frames) + 1))
        g = [car(8.0 * k + rng.uniform(-1, 1), rng.uniform(-3, 3), rng.uniform(-0.3, 0.3)) for k in range(n)]
        p = []
        for box in g:
            if rng.random() < 0.8:
                jitter = rng.normal(0, [0.3, 0.3, 0.1])
                p.append(Detection(Box3D(tuple(np.array(box.center) + jitter), box.size, box.yaw), float(rng.random())))
        for _ in range(int(rng.integers(0, 4))):
            p.append(Detection(car(rng.uniform(0, 80), rng.uniform(-5, 5)), float(rng.random())))
        # coarse confidences force ties
        p = [Detection(d.box, round(d.confidence, 1)) for d in p]
        gts.append(g)
        preds.append(p)
    return preds, gts


# -- trivial cases -----------------------------------------------------------------


def test_perfect_detection_scores_100():
    gts = [[car(10), car(20)], [car(15)]]
    preds = [[Detection(b, 0.9) for b in g] for g in gts]
    assert average_precision_r40(preds, gts) == 100.0
    assert average_precision_r40(preds, gts, criterion="bev") == 100.0


def test_no_predictions_scores_zero():
    assert average_precision_r40([[]], [[car(10)]]) == 0.0


def test_no_ground_truth_scores_zero():
    assert average_precision_r40([[Detection(car(10), 0.5)]], [[]]) == 0.0
    assert average_precision_r40([], []) == 0.0


def test_frame_count_must_match():
    with pytest.raises(ValueError):
        average_precision_r40([[]], [[], []])


def test_threshold_is_strict():
    g = car(10)
    p = Detection(Box3D((10.5, 0, -1.0), g.size), 0.9)
    v = iou_3d(p.box, g)
    assert average_precision_r40([[p]], [[g]], iou_th=v) == 0.0
    assert average_precision_r40([[p]], [[g]], iou_th=np.nextafter(v, 0)) == 100.0


def test_duplicates_are_false_positives():
    g = car(10)
    preds = [[Detection(g, 0.9), Detection(g, 0.8)]]
    _, tp, assign = greedy_true_positives(preds, [[g]])
    assert list(tp) == [True, False] and list(assign) == [0, -1]


def test_sampled_precisions_examples():
    # TP, FP, TP with 2 GT: recall 0.5 at precision 1, recall 1 at 2/3
    out = sampled_precisions(np.array([True, False, True]), 2)
    assert np.all(out[:20] == 1.0) and np.all(out[20:] == 2 / 3)


# -- oracle -------------------------------------------------------------------------


@pytest.mark.parametrize("seed", range(15))
def test_matches_pr_oracle_bitwise(seed):
    rng = np.random.default_rng(seed)
    preds, gts = random_instance(rng)
    for crit, fn in (("3d", iou_3d), ("bev", bev_iou)):
        _, tp, _ = greedy_true_positives(preds, gts, 0.7, crit)
        num_gt = sum(map(len, gts))
        got = sampled_precisions(tp, num_gt)
        want = pr_curve_oracle(preds, gts, fn, 0.7)
        assert got.tobytes() == want.tobytes()


# -- properties ----------------------------------------------------------------------


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31))
def test_removing_a_false_positive_never_lowers_ap(seed):
    rng = np.random.default_rng(seed)
    preds, gts = random_instance(rng, 12)
    base = average_precision_r40(preds, gts)
    order, tp, _ = greedy_true_positives(preds, gts)
    for (f, i), hit in zip(order, tp):
        if not hit:
            trimmed = [list(p) for p in preds]
            del trimmed[f][i]
            assert average_precision_r40(trimmed, gts) >= base
            break


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31))
def test_monotone_confidence_transform_keeps_ap(seed):
    rng = np.random.default_rng(seed)
    preds, gts = random_instance(rng, 12)
    squashed = [[Detection(d.box, d.confidence**3 * 0.5) for d in p] for p in preds]
    assert average_precision_r40(squashed, gts) == average_precision_r40(preds, gts)


def test_ap_bounds():
    rng = np.random.default_rng(0)
    for _ in range(10):
        preds, gts = random_instance(rng)
        assert 0.0 <= average_precision_r40(preds, gts) <= 100.0


# -- reporting -----------------------------------------------------------------------


def test_evaluate_records_matches():
    gts = [[car(10), car(20)]]
    preds = [[Detection(car(20), 0.9), Detection(car(40), 0.5)]]
    res = evaluate(preds, gts)
    assert res.num_gt == 2 and res.num_pred == 2
    assert res.matches == [[(0, 1), (1, -1)]]
    assert res.ap_3d == pytest.approx(50.0)


def test_sweep_csv_layout():
    text = sweep_csv({"64": EvalResult(91.23456, 80.0, 10, 12), "16*": EvalResult(50.0, 40.5, 10, 9)})
    lines = text.splitlines()
    assert lines[0] == ",".join(SWEEP_FIELDS) == "variant_name,ap_bev,ap_3d,num_gt,num_pred"
    assert lines[1] == "64,91.2346,80.0000,10,12"
    assert lines[2] == "16*,50.0000,40.5000,10,9"
