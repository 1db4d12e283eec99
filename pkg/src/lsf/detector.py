"""A small differentiable BEV detector: grid statistics -> ROI lattice -> head.

The model is deliberately tiny. A shared per-cell affine layer turns the four
grid statistics into M feature channels, each ROI's rotated footprint is
resampled onto an H x W lattice of those features (the proposal features the
alignment losses act on), and a one-hidden-layer head maps the flattened
lattice to seven box residuals and a confidence logit.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .alignment import ProposalFeatures
from .beams import PointCloud
from .geometry import Box3D, Detection, iou_matrix, wrap_angle

N_CHANNELS = 4  # point count, mean height, max height, mean intensity
N_RESIDUALS = 7


class OutOfExtentError(ValueError):
    pass


@dataclass(frozen=True)
class GridSpec:
    x_range: tuple[float, float] = (0.0, 64.0)
    y_range: tuple[float, float] = (-20.0, 20.0)
    cell: float = 0.25
    ground_z: float = -1.73
    count_norm: float = 8.0

    def __post_init__(self):
        if self.cell <= 0:
            raise ValueError("cell size must be positive")
        for lo, hi in (self.x_range, self.y_range):
            span = (hi - lo) / self.cell
            if hi <= lo or abs(span - round(span)) > 1e-9:
                raise ValueError("grid extent must be a positive multiple of the cell size")

    @property
    def shape(self) -> tuple[int, int]:
        return (
            int(round((self.x_range[1] - self.x_range[0]) / self.cell)),
            int(round((self.y_range[1] - self.y_range[0]) / self.cell)),
        )

    def cell_index(self, x: np.ndarray, y: np.ndarray):
        ix = np.floor((x - self.x_range[0]) / self.cell).astype(np.int64)
        iy = np.floor((y - self.y_range[0]) / self.cell).astype(np.int64)
        nx, ny = self.shape
        inside = (ix >= 0) & (ix < nx) & (iy >= 0) & (iy < ny)
        return ix, iy, inside


def bev_featurize(cloud: PointCloud, grid: GridSpec) -> np.ndarray:
    """Per-cell statistics, shape (nx, ny, 4).

    Channels: log1p(count) / log1p(count_norm), mean and max height above the
    ground plane, mean intensity. Empty cells are all zero. Points are put in
    canonical (x, y, z, intensity) order first so the floating-point sums do
    not depend on input order.
    """
    nx, ny = grid.shape
    if nx == 0 or ny == 0:
        raise ValueError("empty grid")
    out = np.zeros((nx, ny, N_CHANNELS))
    pts = cloud.points
    if len(pts) == 0:
        return out
    pts = pts[np.lexsort((pts[:, 3], pts[:, 2], pts[:, 1], pts[:, 0]))]
    ix, iy, inside = grid.cell_index(pts[:, 0], pts[:, 1])
    pts, flat = pts[inside], (ix * ny + iy)[inside]
    size = nx * ny
    count = np.bincount(flat, minlength=size).astype(np.float64)
    height = pts[:, 2] - grid.ground_z
    sum_h = np.bincount(flat, weights=height, minlength=size)
    sum_i = np.bincount(flat, weights=pts[:, 3], minlength=size)
    max_h = np.full(size, -np.inf)
    np.maximum.at(max_h, flat, height)
    occupied = count > 0
    stats = np.zeros((size, N_CHANNELS))
    stats[:, 0] = np.log1p(count) / math.log1p(grid.count_norm)
    stats[occupied, 1] = sum_h[occupied] / count[occupied]
    stats[occupied, 2] = max_h[occupied]
    stats[occupied, 3] = sum_i[occupied] / count[occupied]
    return stats.reshape(nx, ny, N_CHANNELS)


def lattice_points(roi: Box3D, h: int, w: int, context: float = 0.0) -> np.ndarray:
    """Sample positions (h, w, 2): centers of an h x w split of the footprint.

    ``context`` widens the footprint by that many metres on every side.
    """
    l, wd = roi.size[0] + 2 * context, roi.size[1] + 2 * context
    a = ((np.arange(h) + 0.5) / h - 0.5) * l
    b = ((np.arange(w) + 0.5) / w - 0.5) * wd
    la, lb = np.meshgrid(a, b, indexing="ij")
    c, s = math.cos(roi.yaw), math.sin(roi.yaw)
    x = roi.center[0] + c * la - s * lb
    y = roi.center[1] + s * la + c * lb
    return np.stack([x, y], axis=-1)


def roi_lattice(
    grid_stats: np.ndarray,
    grid: GridSpec,
    rois: Sequence[Box3D],
    h: int,
    w: int,
    context: float = 0.0,
):
    """Nearest-cell resampling of raw grid statistics, shape (N_r, h, w, 4)."""
    if not rois:
        return np.zeros((0, h, w, grid_stats.shape[-1]))
    pts = np.stack([lattice_points(r, h, w, context) for r in rois])
    ix, iy, inside = grid.cell_index(pts[..., 0], pts[..., 1])
    if not inside.all():
        raise OutOfExtentError("ROI lattice leaves the grid extent")
    return grid_stats[ix, iy]


@dataclass(frozen=True)
class ModelConfig:
    feat_dim: int = 8
    lattice_h: int = 20
    lattice_w: int = 10
    hidden: int = 32
    context: float = 1.0
    channels: int = N_CHANNELS

    @property
    def flat_dim(self) -> int:
        return self.lattice_h * self.lattice_w * self.feat_dim

    def digest(self) -> bytes:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).digest()


@dataclass
class HeadOutput:
    rois: list[Box3D]
    residuals: np.ndarray  # (N, 7)
    logits: np.ndarray  # (N,)

    @property
    def confidences(self) -> np.ndarray:
        return sigmoid(self.logits)


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


@dataclass
class ToyModel:
    config: ModelConfig
    params: np.ndarray

    @classmethod
    def init(cls, config: ModelConfig = ModelConfig(), seed: int = 0) -> "ToyModel":
        rng = np.random.default_rng(seed)
        c, m, k, d = config.channels, config.feat_dim, config.hidden, config.flat_dim
        parts = [
            rng.normal(0.0, 1.0 / math.sqrt(c), (c, m)),
            np.zeros(m),
            rng.normal(0.0, 1.0 / math.sqrt(d), (d, k)),
            np.zeros(k),
            rng.normal(0.0, 0.1 / math.sqrt(k), (k, N_RESIDUALS)),
            np.zeros(N_RESIDUALS),
            rng.normal(0.0, 0.1 / math.sqrt(k), k),
            np.zeros(1),
        ]
        return cls(config, np.concatenate([p.ravel() for p in parts]))

    def copy(self) -> "ToyModel":
        return ToyModel(self.config, self.params.copy())

    def unpack(self, params: np.ndarray | None = None) -> dict[str, np.ndarray]:
        p = self.params if params is None else params
        c, m, k, d = (
            self.config.channels,
            self.config.feat_dim,
            self.config.hidden,
            self.config.flat_dim,
        )
        shapes = [
            ("feat_w", (c, m)),
            ("feat_b", (m,)),
            ("hid_w", (d, k)),
            ("hid_b", (k,)),
            ("reg_w", (k, N_RESIDUALS)),
            ("reg_b", (N_RESIDUALS,)),
            ("cls_w", (k,)),
            ("cls_b", (1,)),
        ]
        out, i = {}, 0
        for name, shape in shapes:
            n = math.prod(shape)
            out[name] = p[i : i + n].reshape(shape)
            i += n
        if i != p.size:
            raise ValueError(f"parameter vector has {p.size} entries, expected {i}")
        return out

    # -- forward / backward --------------------------------------------------

    def features(self, lattice: np.ndarray) -> np.ndarray:
        """Shared per-cell affine layer: (N, H, W, 4) -> (N, H, W, M)."""
        w = self.unpack()
        return lattice @ w["feat_w"] + w["feat_b"]

    def head(self, feats: np.ndarray):
        w = self.unpack()
        flat = feats.reshape(feats.shape[0], -1)
        hid = np.tanh(flat @ w["hid_w"] + w["hid_b"])
        reg = hid @ w["reg_w"] + w["reg_b"]
        logit = hid @ w["cls_w"] + w["cls_b"][0]
        return reg, logit, (flat, hid)

    def forward(self, lattice: np.ndarray):
        feats = self.features(lattice)
        reg, logit, head_cache = self.head(feats)
        return feats, reg, logit, (lattice, head_cache)

    def backward(self, cache, g_reg, g_logit, g_feats=None) -> np.ndarray:
        """Parameter gradient given upstream gradients on outputs and features."""
        lattice, (flat, hid) = cache
        w = self.unpack()
        g_hid = g_reg @ w["reg_w"].T + np.outer(g_logit, w["cls_w"])
        g_pre = g_hid * (1.0 - hid * hid)
        g_flat = g_pre @ w["hid_w"].T
        g_feat = g_flat.reshape(lattice.shape[:-1] + (self.config.feat_dim,))
        if g_feats is not None:
            g_feat = g_feat + g_feats
        lat2 = lattice.reshape(-1, lattice.shape[-1])
        gf2 = g_feat.reshape(-1, self.config.feat_dim)
        grads = [
            lat2.T @ gf2,
            gf2.sum(axis=0),
            flat.T @ g_pre,
            g_pre.sum(axis=0),
            hid.T @ g_reg,
            g_reg.sum(axis=0),
            hid.T @ g_logit,
            np.array([g_logit.sum()]),
        ]
        return np.concatenate([g.ravel() for g in grads])


def roi_features(
    model: ToyModel, grid_stats: np.ndarray, grid: GridSpec, rois: Sequence[Box3D]
) -> ProposalFeatures:
    cfg = model.config
    lattice = roi_lattice(grid_stats, grid, rois, cfg.lattice_h, cfg.lattice_w, cfg.context)
    return ProposalFeatures(model.features(lattice), list(rois))


# -- box encoding -------------------------------------------------------------


def encode_residuals(roi: Box3D, gt: Box3D) -> np.ndarray:
    c, s = math.cos(roi.yaw), math.sin(roi.yaw)
    dx = gt.center[0] - roi.center[0]
    dy = gt.center[1] - roi.center[1]
    return np.array(
        [
            c * dx + s * dy,
            -s * dx + c * dy,
            gt.center[2] - roi.center[2],
            math.log(gt.size[0] / roi.size[0]),
            math.log(gt.size[1] / roi.size[1]),
            math.log(gt.size[2] / roi.size[2]),
            wrap_angle(gt.yaw - roi.yaw),
        ]
    )


def decode_residuals(roi: Box3D, res: np.ndarray) -> Box3D:
    c, s = math.cos(roi.yaw), math.sin(roi.yaw)
    lx, ly, dz = (float(v) for v in res[:3])
    scale = np.exp(np.clip(res[3:6], -3.0, 3.0))
    return Box3D(
        (roi.center[0] + c * lx - s * ly, roi.center[1] + s * lx + c * ly, roi.center[2] + dz),
        tuple(np.array(roi.size) * scale),
        roi.yaw + float(res[6]),
    )


def predict(model: ToyModel, grid_stats, grid: GridSpec, rois: Sequence[Box3D]) -> HeadOutput:
    rois = list(rois)
    cfg = model.config
    if not rois:
        return HeadOutput([], np.zeros((0, N_RESIDUALS)), np.zeros(0))
    lattice = roi_lattice(grid_stats, grid, rois, cfg.lattice_h, cfg.lattice_w, cfg.context)
    _, reg, logit, _ = model.forward(lattice)
    return HeadOutput(rois, reg, logit)


def decode(out: HeadOutput) -> list[Detection]:
    conf = out.confidences
    return [
        Detection(decode_residuals(roi, out.residuals[i]), float(conf[i]))
        for i, roi in enumerate(out.rois)
    ]


def detect(model: ToyModel, cloud: PointCloud, rois: Sequence[Box3D], grid: GridSpec = GridSpec()):
    """Refined boxes with confidences, one per ROI."""
    return decode(predict(model, bev_featurize(cloud, grid), grid, rois))


# -- surrogate detection loss ---------------------------------------------------


@dataclass
class DetTargets:
    positive: np.ndarray  # (N,) bool
    residuals: np.ndarray  # (N, 7), zero rows for negatives


def assign_targets(rois: Sequence[Box3D], gts: Sequence[Box3D], pos_iou: float = 0.3) -> DetTargets:
    """Each ROI takes the target of its best-overlapping ground truth, if any."""
    n = len(rois)
    pos = np.zeros(n, dtype=bool)
    res = np.zeros((n, N_RESIDUALS))
    if n and gts:
        ious = iou_matrix(rois, gts, "bev")
        best = np.argmax(ious, axis=1)
        for i in range(n):
            if ious[i, best[i]] >= pos_iou:
                pos[i] = True
                res[i] = encode_residuals(rois[i], gts[best[i]])
    return DetTargets(pos, res)


def smooth_l1(x: np.ndarray, beta: float = 1.0):
    ax = np.abs(x)
    small = ax < beta
    val = np.where(small, 0.5 * x * x / beta, ax - 0.5 * beta)
    grad = np.where(small, x / beta, np.sign(x))
    return val, grad


def surrogate_det_loss(
    residuals: np.ndarray, logits: np.ndarray, targets: DetTargets, reg_weight: float = 2.0
):
    """Smooth-L1 on positive ROIs' residuals plus mean BCE on confidences.

    Returns ``(loss, parts, g_residuals, g_logits)`` with
    ``parts = {"reg": ..., "cls": ...}``.
    """
    n = len(logits)
    if n == 0:
        return 0.0, {"reg": 0.0, "cls": 0.0}, np.zeros((0, N_RESIDUALS)), np.zeros(0)
    pos = targets.positive
    n_pos = max(int(pos.sum()), 1)
    val, g = smooth_l1(residuals - targets.residuals)
    mask = pos[:, None].astype(np.float64)
    reg = float((val * mask).sum() / n_pos)
    g_res = reg_weight * g * mask / n_pos
    y = pos.astype(np.float64)
    # softplus(z) - y z, written to stay finite for large |z|
    bce = np.logaddexp(0.0, logits) - y * logits
    cls = float(bce.sum() / n)
    g_log = (sigmoid(logits) - y) / n
    return reg_weight * reg + cls, {"reg": reg, "cls": cls}, g_res, g_log


# -- proposals ------------------------------------------------------------------

PROPOSAL_SIZE = (4.1, 1.8, 1.6)


def jitter_boxes(gts: Sequence[Box3D], rng, center: float = 0.3, yaw: float = 0.1) -> list[Box3D]:
    out = []
    for g in gts:
        dx, dy = rng.uniform(-center, center, 2)
        dyaw = rng.uniform(-yaw, yaw)
        out.append(Box3D((g.center[0] + dx, g.center[1] + dy, g.center[2]), g.size, g.yaw + dyaw))
    return out


def distractor_rois(
    grid_stats: np.ndarray,
    grid: GridSpec,
    gts: Sequence[Box3D],
    rng,
    count: int = 4,
    min_height: float = 0.3,
    margin: float = 4.0,
) -> list[Box3D]:
    """Car-sized boxes on raised, unlabelled structure (hard negatives)."""
    nx, ny = grid.shape
    ix, iy = np.nonzero(grid_stats[..., 2] > min_height)
    xs = grid.x_range[0] + (ix + 0.5) * grid.cell
    ys = grid.y_range[0] + (iy + 0.5) * grid.cell
    ok = (
        (xs > grid.x_range[0] + margin)
        & (xs < grid.x_range[1] - margin)
        & (ys > grid.y_range[0] + margin)
        & (ys < grid.y_range[1] - margin)
    )
    cand = np.stack([xs[ok], ys[ok]], axis=1)
    if len(cand) and gts:
        keep = np.ones(len(cand), dtype=bool)
        for g in gts:
            reach = math.hypot(g.size[0], g.size[1]) / 2 + math.hypot(*PROPOSAL_SIZE[:2]) / 2
            keep &= np.hypot(cand[:, 0] - g.center[0], cand[:, 1] - g.center[1]) > reach
        cand = cand[keep]
    if len(cand) == 0:
        return []
    pick = rng.choice(len(cand), size=min(count, len(cand)), replace=False)
    z = grid.ground_z + PROPOSAL_SIZE[2] / 2
    return [
        Box3D((cand[i, 0], cand[i, 1], z), PROPOSAL_SIZE, rng.uniform(-math.pi, math.pi))
        for i in np.sort(pick)
    ]


def make_proposals(
    grid_stats: np.ndarray,
    grid: GridSpec,
    gts: Sequence[Box3D],
    rng,
    distractors: int = 4,
) -> list[Box3D]:
    """Jittered ground truth plus hard-negative distractors."""
    return jitter_boxes(gts, rng) + distractor_rois(grid_stats, grid, gts, rng, distractors)
