"""Deterministic ray-cast LiDAR scenes with box-shaped objects."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .beams import DEFAULT_VARIANTS, BeamVariantSpec, PointCloud, apply_variants
from .geometry import Box3D

GROUND_INTENSITY = 0.1
# cars and clutter share one surface class so intensity cannot tell them apart
OBJECT_INTENSITY = 0.5


@dataclass(frozen=True)
class SceneSpec:
    seed: int = 0
    beams: int = 64
    fov_deg: tuple[float, float] = (-17.6, 2.4)
    azimuth_step_deg: float = 0.2
    azimuth_range_deg: tuple[float, float] = (-90.0, 90.0)
    ground_z: float = -1.73
    max_range: float = 80.0
    # cars are the labelled class; clutter boxes return points but carry no label
    object_count: tuple[int, int] = (3, 8)
    clutter_count: tuple[int, int] = (2, 5)  # the first one is a building
    car_length: tuple[float, float] = (3.6, 4.6)
    car_width: tuple[float, float] = (1.6, 2.0)
    car_height: tuple[float, float] = (1.4, 1.8)
    # every other non-building clutter item is a car-footprint decoy of this height
    decoy_height: tuple[float, float] = (0.7, 1.1)
    # objects are placed inside this x/y region (sensor frame)
    region_x: tuple[float, float] = (6.0, 60.0)
    region_y: tuple[float, float] = (-16.0, 16.0)
    zenith_jitter_deg: float = 0.0
    range_noise: float = 0.0

    def __post_init__(self):
        if self.beams < 1:
            raise ValueError("beam count must be >= 1")
        if not self.fov_deg[0] < self.fov_deg[1] and self.beams > 1:
            raise ValueError("zenith FOV must be ordered (low, high)")
        if self.azimuth_step_deg <= 0:
            raise ValueError("azimuth step must be positive")
        if self.azimuth_range_deg[1] <= self.azimuth_range_deg[0]:
            raise ValueError("azimuth range must be ordered")

    def beam_zeniths(self) -> np.ndarray:
        """Beam zeniths in radians, beam 0 topmost."""
        lo, hi = self.fov_deg
        if self.beams == 1:
            return np.radians(np.array([hi]))
        return np.radians(np.linspace(hi, lo, self.beams))

    def azimuths(self) -> np.ndarray:
        lo, hi = self.azimuth_range_deg
        n = int(round((hi - lo) / self.azimuth_step_deg))
        return np.radians(lo + self.azimuth_step_deg * np.arange(n))


@dataclass
class Scene:
    cloud: PointCloud
    boxes: list[Box3D]
    beam_labels: np.ndarray
    clutter: list[Box3D] = field(default_factory=list)
    # zenith actually used for each returned point
    ray_zenith: np.ndarray | None = None
    # per point: 0 for the ground, k for (boxes + clutter)[k - 1]
    surface: np.ndarray | None = None
    # cars that returned no point at all; they are not labelled
    hidden: list[Box3D] = field(default_factory=list)


def ray_box_hits(dirs: np.ndarray, box: Box3D) -> np.ndarray:
    """Entry distance along unit rays from the origin into ``box`` (inf on miss)."""
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    # origin and directions in the box frame
    o = -np.array(box.center)
    ox, oy, oz = c * o[0] + s * o[1], -s * o[0] + c * o[1], o[2]
    dx = c * dirs[:, 0] + s * dirs[:, 1]
    dy = -s * dirs[:, 0] + c * dirs[:, 1]
    dz = dirs[:, 2]
    half = np.array(box.size) / 2
    t_near = np.full(len(dirs), -np.inf)
    t_far = np.full(len(dirs), np.inf)
    with np.errstate(divide="ignore", invalid="ignore"):
        for orig, d, h in ((ox, dx, half[0]), (oy, dy, half[1]), (oz, dz, half[2])):
            t1 = (-h - orig) / d
            t2 = (h - orig) / d
            lo = np.minimum(t1, t2)
            hi = np.maximum(t1, t2)
            parallel = d == 0
            inside = abs(orig) <= h
            lo = np.where(parallel, np.where(inside, -np.inf, np.inf), lo)
            hi = np.where(parallel, np.where(inside, np.inf, -np.inf), hi)
            t_near = np.maximum(t_near, lo)
            t_far = np.minimum(t_far, hi)
    hit = (t_near <= t_far) & (t_near > 0)
    return np.where(hit, t_near, np.inf)


def _sample_boxes(rng, spec: SceneSpec, n_cars: int, n_clutter: int):
    placed: list[Box3D] = []
    cars: list[Box3D] = []
    clutter: list[Box3D] = []

    def free(box: Box3D) -> bool:
        r = math.hypot(box.size[0], box.size[1]) / 2
        for other in placed:
            ro = math.hypot(other.size[0], other.size[1]) / 2
            if math.dist(box.center[:2], other.center[:2]) < r + ro + 0.3:
                return False
        return True

    for kind, n in (("car", n_cars), ("clutter", n_clutter)):
        for _ in range(n):
            for _attempt in range(50):
                if kind == "car":
                    l = rng.uniform(*spec.car_length)
                    w = rng.uniform(*spec.car_width)
                    h = rng.uniform(*spec.car_height)
                elif not clutter:
                    # one building so the upward-looking beams have returns
                    l = rng.uniform(6.0, 12.0)
                    w = rng.uniform(2.0, 4.0)
                    h = rng.uniform(6.0, 9.0)
                elif len(clutter) % 2:
                    l = rng.uniform(*spec.car_length)
                    w = rng.uniform(*spec.car_width)
                    h = rng.uniform(*spec.decoy_height)
                else:
                    # poles, walls and bushes
                    l = rng.uniform(0.3, 3.0)
                    w = rng.uniform(0.3, 1.0)
                    h = rng.uniform(0.6, 4.5)
                x = rng.uniform(*spec.region_x)
                y = rng.uniform(*spec.region_y)
                yaw = rng.uniform(-math.pi, math.pi)
                box = Box3D((x, y, spec.ground_z + h / 2), (l, w, h), yaw)
                if free(box):
                    placed.append(box)
                    (cars if kind == "car" else clutter).append(box)
                    break
    return cars, clutter


def generate_scene(spec: SceneSpec, frame_id: str | None = None) -> Scene:
    rng = np.random.default_rng(spec.seed)
    n_cars = int(rng.integers(spec.object_count[0], spec.object_count[1] + 1))
    n_clutter = int(rng.integers(spec.clutter_count[0], spec.clutter_count[1] + 1))
    cars, clutter = _sample_boxes(rng, spec, n_cars, n_clutter)

    zen = spec.beam_zeniths()
    azi = spec.azimuths()
    if zen.size == 0 or azi.size == 0:
        raise ValueError("scene FOV yields no rays")
    beam = np.repeat(np.arange(zen.size), azi.size)
    theta = zen[beam]
    if spec.zenith_jitter_deg > 0:
        theta = theta + rng.uniform(
            -math.radians(spec.zenith_jitter_deg), math.radians(spec.zenith_jitter_deg), theta.size
        )
    phi = np.tile(azi, zen.size)
    dirs = np.stack(
        [np.cos(theta) * np.cos(phi), np.cos(theta) * np.sin(phi), np.sin(theta)], axis=1
    )

    with np.errstate(divide="ignore"):
        t_ground = np.where(dirs[:, 2] < 0, spec.ground_z / dirs[:, 2], np.inf)
    t_best = t_ground
    # 0 is the ground, k > 0 the (k-1)-th object
    surface = np.zeros(len(dirs), dtype=np.int64)
    objects = cars + clutter
    reflect = np.array([GROUND_INTENSITY] + [OBJECT_INTENSITY] * len(objects))
    for k, box in enumerate(objects, 1):
        t = ray_box_hits(dirs, box)
        closer = t < t_best
        t_best = np.where(closer, t, t_best)
        surface = np.where(closer, k, surface)

    hit = t_best <= spec.max_range
    # drop fully occluded cars from the labels and renumber surfaces to match
    seen = np.zeros(len(objects) + 1, dtype=bool)
    seen[surface[hit]] = True
    visible = [k for k in range(1, len(cars) + 1) if seen[k]]
    order = visible + list(range(len(cars) + 1, len(objects) + 1))
    renumber = np.zeros(len(objects) + 1, dtype=np.int64)
    renumber[order] = np.arange(1, len(order) + 1)
    hidden = [cars[k - 1] for k in range(1, len(cars) + 1) if not seen[k]]
    cars = [cars[k - 1] for k in visible]
    t = t_best[hit]
    if spec.range_noise > 0:
        t = t + rng.normal(0.0, spec.range_noise, t.size)
    xyz = dirs[hit] * t[:, None]
    on_ground = surface[hit] == 0
    # the ground return lies on the plane exactly, not wherever rounding puts it
    if spec.range_noise == 0:
        xyz[on_ground, 2] = spec.ground_z
    intensity = reflect[surface[hit]]
    points = np.column_stack([xyz, intensity])
    fid = frame_id if frame_id is not None else f"{spec.seed:06d}"
    return Scene(
        PointCloud(points, fid), cars, beam[hit], clutter, theta[hit], renumber[surface[hit]], hidden
    )


@dataclass
class Benchmark:
    train: list[Scene]
    val: list[Scene]
    # variant name -> clouds aligned with ``val``; includes the full-density source
    val_variants: dict[str, list[PointCloud]]


def source_variant(spec: SceneSpec) -> BeamVariantSpec:
    return BeamVariantSpec(str(spec.beams), 1, 1)


def generate_benchmark(
    spec: SceneSpec,
    frames: int,
    split: tuple[float, float] = (0.8, 0.2),
    variants: Sequence[BeamVariantSpec] = DEFAULT_VARIANTS,
) -> Benchmark:
    """Train/val scenes plus val clouds at every density, using true beam labels."""
    scenes = [
        generate_scene(replace(spec, seed=spec.seed * 100003 + i), f"{spec.seed}-{i:05d}")
        for i in range(frames)
    ]
    n_train = int(round(frames * split[0] / sum(split)))
    train, val = scenes[:n_train], scenes[n_train:]
    names = [source_variant(spec)] + list(variants)
    val_variants: dict[str, list[PointCloud]] = {s.name: [] for s in names}
    for scene in val:
        for s, cloud in zip(names, apply_variants(scene.cloud, scene.beam_labels, names)):
            val_variants[s.name].append(cloud)
    return Benchmark(train, val, val_variants)
