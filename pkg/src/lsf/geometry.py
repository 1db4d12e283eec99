"""Oriented boxes, rotated-box IoU and prediction/ground-truth matching."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

# Points closer than this to a clipping edge count as lying on it.
COLLINEAR_TOL = 1e-12


class DegenerateAxisError(ValueError):
    """Raised when a point lies on the sensor's vertical axis."""


def wrap_angle(angle: float) -> float:
    """Map an angle to (-pi, pi]."""
    a = math.fmod(angle + math.pi, 2.0 * math.pi)
    if a <= 0.0:
        a += 2.0 * math.pi
    return a - math.pi


@dataclass(frozen=True)
class Point:
    x: float
    y: float
    z: float
    intensity: float = 0.0


@dataclass(frozen=True)
class SphericalPoint:
    range: float
    zenith: float
    azimuth: float


@dataclass(frozen=True)
class Box3D:
    """Oriented 3D box: center (m), size (l, w, h) in m, yaw in rad.

    ``l`` runs along the heading direction, ``w`` across it, ``h`` is vertical.
    """

    center: tuple[float, float, float]
    size: tuple[float, float, float]
    yaw: float = 0.0

    def __post_init__(self):
        center = tuple(float(v) for v in self.center)
        size = tuple(float(v) for v in self.size)
        if len(center) != 3 or len(size) != 3:
            raise ValueError("center and size must have three components")
        if not all(math.isfinite(v) for v in center + size + (self.yaw,)):
            raise ValueError("box parameters must be finite")
        if min(size) <= 0.0:
            raise ValueError(f"box dimensions must be positive, got {size}")
        object.__setattr__(self, "center", center)
        object.__setattr__(self, "size", size)
        object.__setattr__(self, "yaw", wrap_angle(float(self.yaw)))

    @classmethod
    def from_array(cls, values) -> "Box3D":
        v = [float(x) for x in values]
        return cls(tuple(v[0:3]), tuple(v[3:6]), v[6])

    def as_array(self) -> np.ndarray:
        return np.array([*self.center, *self.size, self.yaw], dtype=np.float64)

    @property
    def volume(self) -> float:
        l, w, h = self.size
        return l * w * h

    def corners_bev(self) -> np.ndarray:
        """Footprint corners, counter-clockwise, shape (4, 2)."""
        l, w, _ = self.size
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        local = np.array(
            [[l / 2, w / 2], [-l / 2, w / 2], [-l / 2, -w / 2], [l / 2, -w / 2]]
        )
        rot = np.array([[c, -s], [s, c]])
        return local @ rot.T + np.array(self.center[:2])

    def z_range(self) -> tuple[float, float]:
        h = self.size[2]
        return self.center[2] - h / 2, self.center[2] + h / 2

    def contains(self, xyz: np.ndarray, margin: float = 0.0) -> np.ndarray:
        """Boolean mask of points (N, >=3) inside the box inflated by ``margin``."""
        xyz = np.asarray(xyz, dtype=np.float64)
        d = xyz[:, :3] - np.array(self.center)
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        lx = c * d[:, 0] + s * d[:, 1]
        ly = -s * d[:, 0] + c * d[:, 1]
        l, w, h = self.size
        return (
            (np.abs(lx) <= l / 2 + margin)
            & (np.abs(ly) <= w / 2 + margin)
            & (np.abs(d[:, 2]) <= h / 2 + margin)
        )


@dataclass(frozen=True)
class Detection:
    box: Box3D
    confidence: float

    def __post_init__(self):
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence must lie in [0, 1], got {self.confidence}")


@dataclass(frozen=True)
class MatchedObject:
    prediction: Detection
    gt_index: int
    iou: float


def to_spherical(p: Point) -> SphericalPoint:
    rho = math.hypot(p.x, p.y)
    if rho == 0.0:
        raise DegenerateAxisError("zenith is undefined for points with x = y = 0")
    return SphericalPoint(
        range=math.sqrt(p.x * p.x + p.y * p.y + p.z * p.z),
        zenith=math.atan(p.z / rho),
        azimuth=math.atan2(p.y, p.x),
    )


def zenith_angles(xyz: np.ndarray) -> np.ndarray:
    """Vectorised zenith of an (N, >=3) array."""
    xyz = np.asarray(xyz, dtype=np.float64)
    rho = np.hypot(xyz[:, 0], xyz[:, 1])
    if np.any(rho == 0.0):
        raise DegenerateAxisError("zenith is undefined for points with x = y = 0")
    return np.arctan(xyz[:, 2] / rho)


def _cross(o, a, b) -> float:
    return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])


def _clip(subject: list, a, b) -> list:
    """Keep the part of ``subject`` left of the directed edge a->b."""
    out = []
    n = len(subject)
    if n == 0:
        return out
    prev = subject[-1]
    prev_side = _cross(a, b, prev)
    for cur in subject:
        side = _cross(a, b, cur)
        cur_in = side >= -COLLINEAR_TOL
        prev_in = prev_side >= -COLLINEAR_TOL
        if cur_in:
            if not prev_in:
                out.append(_intersect(prev, cur, prev_side, side))
            out.append(cur)
        elif prev_in:
            out.append(_intersect(prev, cur, prev_side, side))
        prev, prev_side = cur, side
    return out


def _intersect(p, q, sp: float, sq: float):
    t = sp / (sp - sq)
    return (p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1]))


def polygon_area(poly) -> float:
    if len(poly) < 3:
        return 0.0
    s = 0.0
    for i in range(len(poly)):
        x0, y0 = poly[i - 1]
        x1, y1 = poly[i]
        s += x0 * y1 - x1 * y0
    return abs(s) / 2.0


def convex_intersection_area(p1: np.ndarray, p2: np.ndarray) -> float:
    """Area of the intersection of two counter-clockwise convex polygons."""
    poly = [tuple(v) for v in p1.tolist()]
    clip = [tuple(v) for v in p2.tolist()]
    for i in range(len(clip)):
        poly = _clip(poly, clip[i - 1], clip[i])
        if not poly:
            return 0.0
    return polygon_area(poly)


def _footprints_may_overlap(a: Box3D, b: Box3D) -> bool:
    ra = math.hypot(a.size[0], a.size[1]) / 2
    rb = math.hypot(b.size[0], b.size[1]) / 2
    dx = a.center[0] - b.center[0]
    dy = a.center[1] - b.center[1]
    return dx * dx + dy * dy <= (ra + rb) ** 2


def bev_intersection(a: Box3D, b: Box3D) -> float:
    if not _footprints_may_overlap(a, b):
        return 0.0
    return convex_intersection_area(a.corners_bev(), b.corners_bev())


def bev_iou(a: Box3D, b: Box3D) -> float:
    if a == b:
        return 1.0
    inter = bev_intersection(a, b)
    if inter <= 0.0:
        return 0.0
    area_a = a.size[0] * a.size[1]
    area_b = b.size[0] * b.size[1]
    return min(1.0, inter / (area_a + area_b - inter))


def iou_3d(a: Box3D, b: Box3D) -> float:
    if a == b:
        return 1.0
    za0, za1 = a.z_range()
    zb0, zb1 = b.z_range()
    dz = min(za1, zb1) - max(za0, zb0)
    if dz <= 0.0:
        return 0.0
    inter = bev_intersection(a, b) * dz
    if inter <= 0.0:
        return 0.0
    return min(1.0, inter / (a.volume + b.volume - inter))


IOU_FUNCS = {"bev": bev_iou, "3d": iou_3d}


def iou_matrix(
    boxes_a: Sequence[Box3D], boxes_b: Sequence[Box3D], criterion: str = "bev"
) -> np.ndarray:
    fn = IOU_FUNCS[criterion]
    out = np.zeros((len(boxes_a), len(boxes_b)))
    for i, a in enumerate(boxes_a):
        for j, b in enumerate(boxes_b):
            out[i, j] = fn(a, b)
    return out


def match_predictions(
    preds: Sequence[Detection], gts: Sequence[Box3D], criterion: str = "bev"
) -> list[MatchedObject]:
    """Associate every prediction with its maximum-IoU ground truth.

    Several predictions may share one ground truth. Predictions that overlap
    nothing are dropped; ties go to the lowest ground-truth index.
    """
    if not preds or not gts:
        return []
    ious = iou_matrix([p.box for p in preds], gts, criterion)
    matches = []
    for i, pred in enumerate(preds):
        j = int(np.argmax(ious[i]))  # first maximum wins
        if ious[i, j] > 0.0:
            matches.append(MatchedObject(pred, j, float(ious[i, j])))
    return matches
