from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lsf.beams import DEFAULT_VARIANTS, PointCloud
from lsf.geometry import Box3D, Detection, MatchedObject
from lsf.scenes import SceneSpec, generate_scene
from lsf.selection import (
    FrameConfidence,
    SelectionState,
    UnknownVariantError,
    frame_confidence,
    score_variants,
    select_augmentation,
    weighted_scores,
    weighted_select,
)

from oracles import replay_selection

NAMES = [s.name for s in DEFAULT_VARIANTS]
BOX = Box3D((10, 0, -1), (4, 2, 1.5))


def match(iou: float, conf: float) -> MatchedObject:
    return MatchedObject(Detection(BOX, conf), 0, iou)


def scores_of(values, names=NAMES):
    return [FrameConfidence(n, float(v), 1, v > 0) for n, v in zip(names, values)]


def fresh_state(names=NAMES, counts=None):
    return SelectionState(dict(zip(names, counts or [0] * len(names))))


# -- frame confidence ------------------------------------------------------------


def test_single_match():
    assert frame_confidence([match(0.8, 0.9)], 0.5).score == 0.9


def test_low_iou_match_is_excluded():
    fc = frame_confidence([match(0.8, 0.9), match(0.4, 0.3)], 0.5)
    assert fc.score == 0.9 and fc.matched_count == 1


def test_no_matches_scores_zero():
    fc = frame_confidence([], 0.5)
    assert fc.score == 0.0 and not fc.had_valid_matches


def test_threshold_is_strict():
    assert not frame_confidence([match(0.5, 0.9)], 0.5).had_valid_matches


def test_threshold_range_checked():
    with pytest.raises(ValueError):
        frame_confidence([], 1.5)
    with pytest.raises(ValueError):
        SelectionState({}, -0.1)


@settings(max_examples=100)
@given(st.lists(st.tuples(st.floats(0, 1), st.floats(0, 1)), max_size=30))
def test_score_is_the_plain_mean(pairs):
    fc = frame_confidence([match(i, c) for i, c in pairs], 0.5)
    kept = [c for i, c in pairs if i > 0.5]
    want = sum(kept) / len(kept) if kept else 0.0
    assert fc.score == want
    assert 0.0 <= fc.score <= 1.0
    if not fc.had_valid_matches:
        assert fc.score == 0.0


# -- weighted selection ------------------------------------------------------------


def test_equal_scores_fresh_state_picks_first():
    state = fresh_state()
    assert weighted_select(scores_of([0.5] * 4), state) == 0
    assert state.counts == {"32": 1, "32*": 0, "16": 0, "16*": 0}


def test_equal_counts_pick_lowest_raw_score():
    names = ["a", "b"]
    assert weighted_select(scores_of([0.9, 0.1], names), fresh_state(names, [5, 5])) == 1


def test_proportion_weighting_arithmetic():
    names = ["a", "b"]
    state = fresh_state(names, [0, 10])
    w = weighted_scores(scores_of([0.2, 0.8], names), state)
    assert w == pytest.approx([0.2 / 12, 0.8 * 11 / 12])
    assert weighted_select(scores_of([0.2, 0.8], names), state) == 0


def test_raw_score_breaks_weighted_ties():
    names = ["a", "b"]
    # 0.4 * 2/4 == 0.2 * 4/4 only if counts (1, 3): weights 2/6 and 4/6
    state = fresh_state(names, [1, 3])
    sc = scores_of([0.4, 0.2], names)
    w = weighted_scores(sc, state)
    assert w[0] == w[1]
    assert weighted_select(sc, state) == 1


def test_unknown_variant():
    with pytest.raises(UnknownVariantError):
        weighted_select(scores_of([0.1], ["nope"]), fresh_state())


def test_empty_scores():
    with pytest.raises(ValueError):
        weighted_select([], fresh_state())


def test_negative_counts_rejected():
    with pytest.raises(ValueError):
        SelectionState({"a": -1})


def test_balance_under_constant_equal_scores():
    state = fresh_state()
    for r in range(1, 201):
        weighted_select(scores_of([0.7] * 4), state)
        c = list(state.counts.values())
        assert max(c) - min(c) <= 1 and sum(c) == r


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31), st.integers(2, 6), st.integers(1, 60))
def test_replay_oracle_reproduces_trace(seed, n, rounds):
    rng = np.random.default_rng(seed)
    names = [f"v{i}" for i in range(n)]
    # coarse values make ties common so the tie-break chain is exercised
    rounds_scores = [list(rng.integers(0, 4, n) / 4) for _ in range(rounds)]
    state = fresh_state(names)
    trace = [weighted_select(scores_of(s, names), state) for s in rounds_scores]
    want_trace, want_counts = replay_selection(rounds_scores, names)
    assert trace == want_trace and state.counts == want_counts


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31), st.floats(0.01, 100))
def test_common_scaling_keeps_the_choice(seed, factor):
    rng = np.random.default_rng(seed)
    counts = list(rng.integers(0, 10, 4))
    raw = rng.random(4) * 0.5
    a = weighted_select(scores_of(raw), fresh_state(counts=counts))
    b = weighted_select(scores_of(raw * factor), fresh_state(counts=counts))
    assert a == b


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31))
def test_zero_scored_variant_with_minimal_share_wins(seed):
    rng = np.random.default_rng(seed)
    counts = list(rng.integers(0, 10, 4))
    raw = rng.uniform(0.1, 1.0, 4)
    blind = int(rng.integers(0, 4))
    raw[blind] = 0.0
    # the only zero score is always chosen
    assert weighted_select(scores_of(raw), fresh_state(counts=counts)) == blind


def test_repeatedly_blind_variants_share_the_picks():
    state = fresh_state()
    for _ in range(40):
        weighted_select(scores_of([0.0, 0.9, 0.0, 0.8]), state)
    assert state.counts["32"] == state.counts["16"] == 20


def test_balance_when_every_variant_is_blind():
    state = fresh_state()
    for _ in range(200):
        weighted_select(scores_of([0.0] * 4), state)
    assert set(state.counts.values()) == {50}


# -- end to end ---------------------------------------------------------------------


@pytest.fixture(scope="module")
def scene():
    return generate_scene(SceneSpec(seed=5))


def test_blind_detector_picks_first_variant(scene):
    state = SelectionState.for_variants(DEFAULT_VARIANTS)
    cloud, fc = select_augmentation(scene.cloud, scene.boxes, lambda c: [], DEFAULT_VARIANTS, state)
    assert cloud.frame_id.endswith("@32") and fc.score == 0.0
    assert state.counts["32"] == 1


def test_detector_blind_on_one_variant(scene):
    target = "16"

    def detector(cloud: PointCloud):
        if cloud.frame_id.endswith("@" + target):
            return []
        return [Detection(b, 0.95) for b in scene.boxes]

    cloud, fc = select_augmentation(scene.cloud, scene.boxes, detector)
    assert cloud.frame_id.endswith("@" + target) and not fc.had_valid_matches


def test_stochastic_detector_matches_replay(scene):
    rng = np.random.default_rng(0)
    from lsf.beams import make_beam_variants

    variants = make_beam_variants(scene.cloud, DEFAULT_VARIANTS)

    def detector(cloud):
        return [Detection(b, float(rng.random())) for b in scene.boxes[: rng.integers(0, 3)]]

    state = SelectionState.for_variants(DEFAULT_VARIANTS)
    rounds, trace = [], []
    for _ in range(200):
        sc = score_variants(variants, NAMES, scene.boxes, detector)
        rounds.append([s.score for s in sc])
        trace.append(weighted_select(sc, state))
    want_trace, want_counts = replay_selection(rounds, NAMES)
    assert trace == want_trace and state.counts == want_counts


def test_threaded_scoring_matches_serial(scene):
    from lsf.beams import make_beam_variants

    variants = make_beam_variants(scene.cloud, DEFAULT_VARIANTS)

    def detector(cloud):
        k = len(cloud) % 5
        return [Detection(b, (i + k) / 10) for i, b in enumerate(scene.boxes)]

    serial = score_variants(variants, NAMES, scene.boxes, detector)
    threaded = score_variants(variants, NAMES, scene.boxes, detector, workers=4)
    assert serial == threaded
