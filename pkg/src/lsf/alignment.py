"""Feature-content and graph-relationship alignment between two detectors.

Both losses compare proposal features of a frozen teacher (original cloud)
with those of a trainable student (density-reduced cloud) over the same set
of regions of interest. Teacher-side inputs are constants everywhere: no
gradient is ever returned for them.

All arithmetic is float64.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .geometry import Box3D

EPS_KL = 1e-4
DEFAULT_LAMBDA = 0.1
DEFAULT_EPSILON = 1.0


class ShapeMismatchError(ValueError):
    pass


class ZeroNormEmbeddingError(ValueError):
    pass


class MissingCacheError(RuntimeError):
    pass


@dataclass
class ProposalFeatures:
    """Per-ROI feature lattices of shape (N_r, H, W, M) with their ROIs."""

    block: np.ndarray
    rois: Sequence[Box3D] = ()

    def __post_init__(self):
        self.block = np.asarray(self.block, dtype=np.float64)
        if self.block.ndim != 4 or self.block.shape[0] < 1:
            raise ValueError(f"expected a non-empty (N_r, H, W, M) block, got {self.block.shape}")
        if self.rois and len(self.rois) != self.block.shape[0]:
            raise ValueError("one ROI per proposal is required")

    @property
    def n(self) -> int:
        return self.block.shape[0]

    def flat(self) -> np.ndarray:
        return self.block.reshape(self.n, -1)


def _block(x) -> np.ndarray:
    return x.block if isinstance(x, ProposalFeatures) else np.asarray(x, dtype=np.float64)


# -- feature content alignment ----------------------------------------------


def fca_loss(fs, fa) -> tuple[float, np.ndarray]:
    """Mean L2 distance between matching teacher/student proposal features.

    Returns the loss and its gradient w.r.t. the student block ``fa``. The
    gradient of a proposal whose features coincide is taken as zero.
    """
    s, a = _block(fs), _block(fa)
    if s.shape != a.shape:
        raise ShapeMismatchError(f"teacher {s.shape} vs student {a.shape}")
    n = s.shape[0]
    diff = (a - s).reshape(n, -1)
    norms = np.sqrt(np.einsum("ij,ij->i", diff, diff))
    loss = float(norms.sum() / n)
    scale = np.divide(1.0, n * norms, out=np.zeros_like(norms), where=norms > 0)
    grad = (diff * scale[:, None]).reshape(a.shape)
    return loss, grad


# -- embedding network --------------------------------------------------------


@dataclass
class EmbeddingNet:
    """affine -> tanh -> affine, mapping a flattened lattice to an embedding."""

    in_dim: int
    hidden: int
    out_dim: int
    params: np.ndarray

    @classmethod
    def init(cls, in_dim: int, hidden: int, out_dim: int | None = None, seed: int = 0):
        out_dim = hidden if out_dim is None else out_dim
        rng = np.random.default_rng(seed)
        w1 = rng.normal(0.0, 1.0 / math.sqrt(in_dim), (hidden, in_dim))
        w2 = rng.normal(0.0, 1.0 / math.sqrt(hidden), (out_dim, hidden))
        # a non-zero output bias keeps the embedding of an empty proposal off the origin
        b2 = rng.normal(0.0, 0.1, out_dim)
        params = np.concatenate([w1.ravel(), np.zeros(hidden), w2.ravel(), b2])
        return cls(in_dim, hidden, out_dim, params)

    @property
    def size(self) -> int:
        return self.hidden * self.in_dim + self.hidden + self.out_dim * self.hidden + self.out_dim

    def unpack(self, params: np.ndarray | None = None):
        p = self.params if params is None else params
        i, h, o = self.in_dim, self.hidden, self.out_dim
        k = 0
        w1 = p[k : k + h * i].reshape(h, i); k += h * i
        b1 = p[k : k + h]; k += h
        w2 = p[k : k + o * h].reshape(o, h); k += o * h
        b2 = p[k : k + o]
        return w1, b1, w2, b2

    def copy(self) -> "EmbeddingNet":
        return EmbeddingNet(self.in_dim, self.hidden, self.out_dim, self.params.copy())

    def forward(self, x: np.ndarray):
        """Embed rows of ``x`` (N, in_dim). Returns (embeddings, cache)."""
        w1, b1, w2, b2 = self.unpack()
        hid = np.tanh(x @ w1.T + b1)
        return hid @ w2.T + b2, (x, hid)

    def backward(self, cache, g_out: np.ndarray):
        """Gradients w.r.t. the flat parameter vector and the input rows."""
        x, hid = cache
        w1, _, w2, _ = self.unpack()
        g_w2 = g_out.T @ hid
        g_b2 = g_out.sum(axis=0)
        g_pre = (g_out @ w2) * (1.0 - hid * hid)
        g_w1 = g_pre.T @ x
        g_b1 = g_pre.sum(axis=0)
        g_x = g_pre @ w1
        return np.concatenate([g_w1.ravel(), g_b1, g_w2.ravel(), g_b2]), g_x


def embed(net: EmbeddingNet, f: np.ndarray) -> np.ndarray:
    """Embedding of a single (H, W, M) proposal block."""
    return net.forward(np.asarray(f, dtype=np.float64).reshape(1, -1))[0][0]


# -- graph construction ------------------------------------------------------


def normalize_edges(raw: np.ndarray, eps_kl: float = EPS_KL) -> np.ndarray:
    """Map cosine edges from [-1, 1] into [eps_kl, 1 - eps_kl]."""
    return np.clip((1.0 + raw) / 2.0, eps_kl, 1.0 - eps_kl)


def edge_matrix(embeddings: np.ndarray, eps_kl: float = EPS_KL):
    """Cosine-similarity graph over embeddings (N_r, M).

    Returns ``(raw, normalized)``.
    """
    e = np.asarray(embeddings, dtype=np.float64)
    norms = np.linalg.norm(e, axis=1)
    if np.any(norms <= 1e-12):
        raise ZeroNormEmbeddingError("embedding with (near) zero norm")
    u = e / norms[:, None]
    raw = u @ u.T
    raw = (raw + raw.T) / 2
    np.fill_diagonal(raw, 1.0)
    return raw, normalize_edges(raw, eps_kl)


def discrepancy_matrix(rois: Sequence[Box3D], epsilon: float = DEFAULT_EPSILON) -> np.ndarray:
    """Inverse pairwise box difference (center L2 + size L2 + |yaw diff| + eps).

    Metres and radians are summed as-is; the yaw difference is wrapped to [0, pi].
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    arr = np.array([b.as_array() for b in rois], dtype=np.float64).reshape(-1, 7)
    dc = np.linalg.norm(arr[:, None, :3] - arr[None, :, :3], axis=-1)
    dd = np.linalg.norm(arr[:, None, 3:6] - arr[None, :, 3:6], axis=-1)
    # |a - b| == |b - a| bitwise, so D comes out exactly symmetric
    dyaw = np.abs(arr[:, None, 6] - arr[None, :, 6]) % (2 * np.pi)
    dyaw = np.minimum(dyaw, 2 * np.pi - dyaw)
    return 1.0 / (dc + dd + dyaw + epsilon)


def relationship_matrix(d: np.ndarray, lam: float = DEFAULT_LAMBDA) -> np.ndarray:
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    return np.eye(d.shape[0]) + lam * d


# -- graph relationship alignment --------------------------------------------


def binary_kl(a, b):
    return a * np.log(a / b) + (1.0 - a) * np.log((1.0 - a) / (1.0 - b))


def _check_normalized(p: np.ndarray, name: str, eps_kl: float) -> None:
    slack = 1e-12
    if np.any(p < eps_kl - slack) or np.any(p > 1.0 - eps_kl + slack):
        raise ValueError(f"{name} is not a normalized edge matrix")


def gera_loss(
    ea: np.ndarray, es: np.ndarray, r: np.ndarray, eps_kl: float = EPS_KL
) -> tuple[float, np.ndarray]:
    """Relationship-weighted KL between student and teacher edge graphs.

    Computes sum_{i,j,m,n} kl(ea[i,j], es[m,n]) r[i,m] r[j,n] in O(N^3) by
    splitting the binary KL into a student-only term and two cross terms.
    Returns the loss and its gradient w.r.t. ``ea``.
    """
    ea = np.asarray(ea, dtype=np.float64)
    es = np.asarray(es, dtype=np.float64)
    r = np.asarray(r, dtype=np.float64)
    n = ea.shape[0]
    if ea.shape != (n, n) or es.shape != (n, n) or r.shape != (n, n):
        raise ShapeMismatchError(f"shapes {ea.shape}, {es.shape}, {r.shape} do not agree")
    _check_normalized(ea, "student edges", eps_kl)
    _check_normalized(es, "teacher edges", eps_kl)

    row = r.sum(axis=1)
    w = np.outer(row, row)
    t1 = r @ np.log(es) @ r.T
    t0 = r @ np.log1p(-es) @ r.T
    log_a, log_1a = np.log(ea), np.log1p(-ea)
    neg_entropy = ea * log_a + (1.0 - ea) * log_1a
    loss = float(np.sum(neg_entropy * w - ea * t1 - (1.0 - ea) * t0))
    grad = (log_a - log_1a) * w - t1 + t0
    return loss, grad


@dataclass
class GeraCache:
    x: np.ndarray
    net_cache: tuple
    emb: np.ndarray
    u: np.ndarray
    norms: np.ndarray
    live: np.ndarray
    grad_pa: np.ndarray
    shape: tuple


def gera_forward(
    student: ProposalFeatures,
    teacher: ProposalFeatures,
    net: EmbeddingNet,
    teacher_net: EmbeddingNet | None = None,
    lam: float = DEFAULT_LAMBDA,
    epsilon: float = DEFAULT_EPSILON,
    eps_kl: float = EPS_KL,
    rois: Sequence[Box3D] | None = None,
) -> tuple[float, GeraCache]:
    """GERA loss from proposal features; the cache feeds the backward pass.

    ``teacher_net`` defaults to ``net``; either way the teacher side is
    treated as a constant.
    """
    if student.block.shape != teacher.block.shape:
        raise ShapeMismatchError(f"{student.block.shape} vs {teacher.block.shape}")
    rois = rois if rois is not None else (teacher.rois or student.rois)
    if len(rois) != student.n:
        raise ValueError("GERA needs one ROI per proposal")
    teacher_net = net if teacher_net is None else teacher_net

    emb_s, _ = teacher_net.forward(teacher.flat())
    _, es = edge_matrix(emb_s, eps_kl)

    x = student.flat()
    emb, net_cache = net.forward(x)
    raw, ea = edge_matrix(emb, eps_kl)
    norms = np.linalg.norm(emb, axis=1)
    u = emb / norms[:, None]
    half = (1.0 + raw) / 2.0
    live = (half > eps_kl) & (half < 1.0 - eps_kl)
    np.fill_diagonal(live, False)

    r = relationship_matrix(discrepancy_matrix(rois, epsilon), lam)
    loss, grad_pa = gera_loss(ea, es, r, eps_kl)
    return loss, GeraCache(x, net_cache, emb, u, norms, live, grad_pa, student.block.shape)


def gera_backward_to_features(
    cache: GeraCache | None, net: EmbeddingNet, upstream: float = 1.0
) -> tuple[np.ndarray, np.ndarray]:
    """Chain rule from the GERA loss down to student features and net params.

    Returns ``(grad_features with the block's shape, grad_net_params)``.
    """
    if cache is None:
        raise MissingCacheError("gera_forward must run before the backward pass")
    g_raw = 0.5 * upstream * cache.grad_pa * cache.live
    g_u = (g_raw + g_raw.T) @ cache.u
    # d(e/|e|) = (I - u u^T) / |e|
    radial = np.einsum("ij,ij->i", g_u, cache.u)
    g_emb = (g_u - cache.u * radial[:, None]) / cache.norms[:, None]
    g_params, g_x = net.backward(cache.net_cache, g_emb)
    return g_x.reshape(cache.shape), g_params
