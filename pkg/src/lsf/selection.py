"""Confidence-based choice among density-reduced variants of a frame."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Sequence

from .beams import DEFAULT_VARIANTS, BeamVariantSpec, PointCloud, make_beam_variants
from .geometry import Box3D, Detection, MatchedObject, match_predictions

DEFAULT_IOU_TH = 0.5

Detector = Callable[[PointCloud], Sequence[Detection]]


@dataclass(frozen=True)
class FrameConfidence:
    variant_name: str
    score: float
    matched_count: int
    had_valid_matches: bool


@dataclass
class SelectionState:
    """Running count of how often each variant has been chosen.

    Counts accumulate over the whole run, not per epoch. A single coordinator
    owns the state; concurrent rounds must serialise on it.
    """

    counts: dict[str, int]
    iou_threshold: float = DEFAULT_IOU_TH

    def __post_init__(self):
        if not 0.0 <= self.iou_threshold <= 1.0:
            raise ValueError("IoU threshold must lie in [0, 1]")
        if any(c < 0 for c in self.counts.values()):
            raise ValueError("selection counts must be non-negative")

    @classmethod
    def for_variants(cls, specs: Sequence[BeamVariantSpec], iou_threshold=DEFAULT_IOU_TH):
        return cls({s.name: 0 for s in specs}, iou_threshold)


class UnknownVariantError(KeyError):
    pass


def frame_confidence(
    matches: Sequence[MatchedObject], iou_th: float = DEFAULT_IOU_TH, variant_name: str = ""
) -> FrameConfidence:
    """Mean confidence of matches whose IoU exceeds ``iou_th``.

    A frame with no qualifying match scores 0: a density the detector is blind
    to is the one it most needs to see.
    """
    if not 0.0 <= iou_th <= 1.0:
        raise ValueError("IoU threshold must lie in [0, 1]")
    kept = [m.prediction.confidence for m in matches if m.iou > iou_th]
    if not kept:
        return FrameConfidence(variant_name, 0.0, 0, False)
    return FrameConfidence(variant_name, sum(kept) / len(kept), len(kept), True)


def weighted_scores(scores: Sequence[FrameConfidence], state: SelectionState) -> list[float]:
    n = len(scores)
    try:
        counts = [state.counts[s.variant_name] for s in scores]
    except KeyError as exc:
        raise UnknownVariantError(f"variant {exc.args[0]!r} not tracked by the state") from None
    total = sum(counts)
    return [s.score * (c + 1) / (total + n) for s, c in zip(scores, counts)]


def weighted_select(scores: Sequence[FrameConfidence], state: SelectionState) -> int:
    """Pick the variant with the lowest proportion-weighted score and count it.

    Each score is scaled by the Laplace-smoothed share of past selections,
    ``(count + 1) / (total + N)``. Ties fall to the lower raw score, then
    the lower count, then the lower index. The count step only matters when
    the tied raw scores are zero, where the weighting cannot separate them;
    without it the first blind variant would win every round.
    """
    if not scores:
        raise ValueError("no variant scores to select from")
    weighted = weighted_scores(scores, state)
    counts = [state.counts[s.variant_name] for s in scores]
    best = min(range(len(scores)), key=lambda i: (weighted[i], scores[i].score, counts[i], i))
    state.counts[scores[best].variant_name] += 1
    return best


def score_variants(
    variants: Sequence[PointCloud],
    names: Sequence[str],
    gts: Sequence[Box3D],
    detector: Detector,
    iou_th: float = DEFAULT_IOU_TH,
    workers: int = 1,
) -> list[FrameConfidence]:
    """Score every variant; with ``workers > 1`` the detector runs in threads.

    Scoring is read-only, so the result does not depend on ``workers``.
    """

    def one(i: int) -> FrameConfidence:
        matches = match_predictions(list(detector(variants[i])), gts, "bev")
        return frame_confidence(matches, iou_th, names[i])

    if workers > 1 and len(variants) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(one, range(len(variants))))
    return [one(i) for i in range(len(variants))]


def select_augmentation(
    cloud: PointCloud,
    gts: Sequence[Box3D],
    detector: Detector,
    specs: Sequence[BeamVariantSpec] = DEFAULT_VARIANTS,
    state: SelectionState | None = None,
    k: int = 64,
) -> tuple[PointCloud, FrameConfidence]:
    """Build the density variants of ``cloud`` and return the one to train on."""
    if state is None:
        state = SelectionState.for_variants(specs)
    variants = make_beam_variants(cloud, specs, k)
    scores = score_variants(variants, [s.name for s in specs], gts, detector, state.iou_threshold)
    idx = weighted_select(scores, state)
    return variants[idx], scores[idx]
