"""Beam labelling by 1-D k-means on zenith, and density reduction."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .geometry import zenith_angles


class BeamLabelingError(ValueError):
    pass


@dataclass
class PointCloud:
    """An (N, 4) float64 array of x, y, z, intensity plus a frame id."""

    points: np.ndarray
    frame_id: str = ""

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 4:
            if pts.size == 0:
                pts = pts.reshape(0, 4)
            else:
                raise ValueError(f"points must have shape (N, 4), got {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise ValueError("point coordinates must be finite")
        self.points = pts

    def __len__(self) -> int:
        return self.points.shape[0]

    @property
    def xyz(self) -> np.ndarray:
        return self.points[:, :3]

    def subset(self, mask: np.ndarray, frame_id: str | None = None) -> "PointCloud":
        return PointCloud(self.points[mask], self.frame_id if frame_id is None else frame_id)


@dataclass
class BeamLabeling:
    labels: np.ndarray
    centroids: np.ndarray

    @property
    def k(self) -> int:
        return len(self.centroids)


@dataclass(frozen=True)
class BeamVariantSpec:
    name: str
    beam_keep_stride: int = 1
    point_keep_stride: int = 1

    def __post_init__(self):
        if self.beam_keep_stride < 1 or self.point_keep_stride < 1:
            raise ValueError("strides must be >= 1")


DEFAULT_VARIANTS: tuple[BeamVariantSpec, ...] = (
    BeamVariantSpec("32", 2, 1),
    BeamVariantSpec("32*", 2, 2),
    BeamVariantSpec("16", 4, 1),
    BeamVariantSpec("16*", 4, 2),
)


def kmeans_1d(
    values: np.ndarray, k: int, max_iter: int = 100, tol: float = 1e-6, init: str = "gaps"
):
    """Lloyd iterations on sorted 1-D data.

    ``init="gaps"`` seeds the clusters by cutting the sorted data at its k-1
    widest gaps; ``init="quantile"`` places centroids at evenly spaced
    quantiles. Quantile seeding stalls in poor local optima when bands hold
    very different point counts, which is the normal case for LiDAR beams.

    Returns ``(centroids ascending, labels)`` where labels index the centroids.
    """
    order = np.argsort(values, kind="stable")
    data = values[order]
    n = data.size
    csum = np.concatenate([[0.0], np.cumsum(data)])
    if init == "quantile":
        centroids = np.quantile(data, (np.arange(k) + 0.5) / k)
    elif init == "gaps":
        gaps = np.diff(data)
        cuts = np.sort(np.argsort(-gaps, kind="stable")[: k - 1]) + 1
        edges = np.concatenate([[0], cuts, [n]])
        centroids = (csum[edges[1:]] - csum[edges[:-1]]) / np.diff(edges)
    else:
        raise ValueError(f"unknown init {init!r}")
    for _ in range(max_iter):
        bounds = (centroids[:-1] + centroids[1:]) / 2
        # cluster c spans data[edges[c]:edges[c+1]]
        edges = np.concatenate([[0], np.searchsorted(data, bounds, side="right"), [n]])
        counts = np.diff(edges)
        sums = csum[edges[1:]] - csum[edges[:-1]]
        new = centroids.copy()
        nz = counts > 0
        new[nz] = sums[nz] / counts[nz]
        new = np.sort(new)
        shift = np.max(np.abs(new - centroids))
        centroids = new
        if shift < tol:
            break
    bounds = (centroids[:-1] + centroids[1:]) / 2
    sorted_labels = np.searchsorted(bounds, data, side="left")
    labels = np.empty(n, dtype=np.int64)
    labels[order] = sorted_labels
    return centroids, labels


def label_beams(cloud: PointCloud, k: int) -> BeamLabeling:
    """Assign each point to one of ``k`` beams; beam 0 is the topmost."""
    if k < 1:
        raise ValueError("beam count must be >= 1")
    if len(cloud) < k:
        raise BeamLabelingError(f"need at least {k} points, got {len(cloud)}")
    zen = zenith_angles(cloud.xyz)
    if np.unique(zen).size < k:
        raise BeamLabelingError(f"fewer than {k} distinct zenith values")
    centroids, labels = kmeans_1d(zen, k)
    counts = np.bincount(labels, minlength=k)
    if np.any(counts == 0):
        raise BeamLabelingError("k-means converged with an empty beam cluster")
    # ascending -> descending so beam 0 is the highest zenith
    return BeamLabeling(labels=(k - 1 - labels), centroids=centroids[::-1].copy())


def _check(cloud: PointCloud, labeling: BeamLabeling) -> None:
    if labeling.labels.shape != (len(cloud),):
        raise BeamLabelingError(
            f"labelling has {labeling.labels.shape[0]} entries for {len(cloud)} points"
        )
    if len(cloud) and (labeling.labels.min() < 0 or labeling.labels.max() >= labeling.k):
        raise BeamLabelingError("beam label out of range")


def beam_keep_mask(labels: np.ndarray, stride: int) -> np.ndarray:
    if stride < 1:
        raise ValueError("stride must be >= 1")
    return labels % stride == 0


def point_keep_mask(points: np.ndarray, labels: np.ndarray, stride: int) -> np.ndarray:
    """Keep every ``stride``-th point of each beam, ranked by azimuth."""
    if stride < 1:
        raise ValueError("stride must be >= 1")
    if stride == 1:
        return np.ones(len(labels), dtype=bool)
    azimuth = np.arctan2(points[:, 1], points[:, 0])
    # sort by beam, then azimuth, then original index for determinism
    order = np.lexsort((np.arange(len(labels)), azimuth, labels))
    sorted_labels = labels[order]
    starts = np.flatnonzero(np.r_[True, sorted_labels[1:] != sorted_labels[:-1]])
    run_start = np.repeat(starts, np.diff(np.r_[starts, len(order)]))
    rank = np.arange(len(order)) - run_start
    keep = np.zeros(len(labels), dtype=bool)
    keep[order] = rank % stride == 0
    return keep


def downsample_beams(cloud: PointCloud, labeling: BeamLabeling, stride: int) -> PointCloud:
    _check(cloud, labeling)
    return cloud.subset(beam_keep_mask(labeling.labels, stride))


def subsample_points_per_beam(
    cloud: PointCloud, labeling: BeamLabeling, stride: int
) -> PointCloud:
    _check(cloud, labeling)
    return cloud.subset(point_keep_mask(cloud.points, labeling.labels, stride))


def variant_mask(points: np.ndarray, labels: np.ndarray, spec: BeamVariantSpec) -> np.ndarray:
    keep = beam_keep_mask(labels, spec.beam_keep_stride)
    idx = np.flatnonzero(keep)
    sub = point_keep_mask(points[idx], labels[idx], spec.point_keep_stride)
    keep[idx[~sub]] = False
    return keep


def apply_variants(
    cloud: PointCloud, labels: np.ndarray, specs: Sequence[BeamVariantSpec]
) -> list[PointCloud]:
    """Variants from known beam labels (no k-means)."""
    return [
        cloud.subset(variant_mask(cloud.points, labels, s), f"{cloud.frame_id}@{s.name}")
        for s in specs
    ]


def make_beam_variants(
    cloud: PointCloud, specs: Sequence[BeamVariantSpec], k: int = 64
) -> list[PointCloud]:
    if not specs:
        raise ValueError("at least one variant spec is required")
    names = [s.name for s in specs]
    if len(set(names)) != len(names):
        raise ValueError(f"variant names must be unique: {names}")
    if len(cloud) == 0:
        raise BeamLabelingError("cannot make variants of an empty cloud")
    labeling = label_beams(cloud, k)
    return apply_variants(cloud, labeling.labels, specs)
