"""Central finite-difference checks for every analytic gradient in the package."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import alignment as al
from .detector import ModelConfig, ToyModel, assign_targets, surrogate_det_loss
from .geometry import Box3D
from .trainer import DistillConfig, overall_loss_and_grads

STEP = 1e-6
TOLERANCE = 1e-5
LOSSES = ("fca", "gera", "det", "overall")


def numeric_grad(f: Callable[[np.ndarray], float], x: np.ndarray, step: float = STEP) -> np.ndarray:
    x = np.array(x, dtype=np.float64)
    flat = x.ravel()
    out = np.zeros_like(flat)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + step
        hi = f(x)
        flat[i] = keep - step
        lo = f(x)
        flat[i] = keep
        out[i] = (hi - lo) / (2 * step)
    return out.reshape(x.shape)


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """||a - n|| / max(||a||, ||n||); 0 when both vanish."""
    a, n = np.ravel(analytic), np.ravel(numeric)
    scale = max(np.linalg.norm(a), np.linalg.norm(n))
    if scale == 0:
        return 0.0
    return float(np.linalg.norm(a - n) / scale)


@dataclass
class Case:
    rois: list[Box3D]
    gts: list[Box3D]
    source: np.ndarray  # teacher-side lattice (N, H, W, 4)
    target: np.ndarray  # student-side lattice
    teacher: ToyModel
    student: ToyModel
    embed: al.EmbeddingNet
    teacher_embed: al.EmbeddingNet


def random_case(rng: np.random.Generator, n_rois: int, h: int = 4, w: int = 4, m: int = 8) -> Case:
    gts, rois = [], []
    for k in range(n_rois):
        g = Box3D(
            (10.0 + 6.0 * k + rng.uniform(-1, 1), rng.uniform(-5, 5), -0.9),
            (rng.uniform(3.6, 4.6), rng.uniform(1.6, 2.0), rng.uniform(1.4, 1.8)),
            rng.uniform(-math.pi, math.pi),
        )
        gts.append(g)
        if rng.random() < 0.7:
            dx, dy = rng.uniform(-0.3, 0.3, 2)
            rois.append(Box3D((g.center[0] + dx, g.center[1] + dy, g.center[2]), g.size,
                              g.yaw + rng.uniform(-0.1, 0.1)))
        else:
            # a negative well away from every ground truth
            rois.append(Box3D((g.center[0], g.center[1] + 30.0, g.center[2]), g.size, g.yaw))
    cfg = ModelConfig(feat_dim=m, lattice_h=h, lattice_w=w, hidden=6, context=0.0)
    teacher = ToyModel.init(cfg, int(rng.integers(1 << 30)))
    student = ToyModel(cfg, teacher.params + rng.normal(0, 0.05, teacher.params.size))
    source = rng.uniform(0, 1.5, (n_rois, h, w, 4))
    target = source * rng.uniform(0.3, 1.0, source.shape)
    embed = al.EmbeddingNet.init(cfg.flat_dim, m, m, int(rng.integers(1 << 30)))
    student_embed = al.EmbeddingNet(embed.in_dim, embed.hidden, embed.out_dim,
                                    embed.params + rng.normal(0, 0.05, embed.size))
    return Case(rois, gts, source, target, teacher, student, student_embed, embed)


def check_fca(case: Case) -> float:
    fs = case.teacher.features(case.source)
    fa = case.student.features(case.target)
    _, grad = al.fca_loss(fs, fa)
    num = numeric_grad(lambda x: al.fca_loss(fs, x)[0], fa)
    return relative_error(grad, num)


def check_gera(case: Case) -> float:
    """Gradient w.r.t. student features, back through the embedding net.

    The embedding parameters' own gradient is covered by ``check_overall``.
    """
    teacher = al.ProposalFeatures(case.teacher.features(case.source), case.rois)
    fa = case.student.features(case.target)

    def loss(feats):
        student = al.ProposalFeatures(feats, case.rois)
        return al.gera_forward(student, teacher, case.embed, case.teacher_embed)

    _, cache = loss(fa)
    g_feat, _ = al.gera_backward_to_features(cache, case.embed)
    return relative_error(g_feat, numeric_grad(lambda x: loss(x)[0], fa))


def check_det(case: Case) -> float:
    targets = assign_targets(case.rois, case.gts)

    def loss(params):
        _, reg, logit, _ = ToyModel(case.student.config, params).forward(case.target)
        return surrogate_det_loss(reg, logit, targets)[0]

    _, reg, logit, cache = case.student.forward(case.target)
    _, _, g_reg, g_logit = surrogate_det_loss(reg, logit, targets)
    grad = case.student.backward(cache, g_reg, g_logit)
    return relative_error(grad, numeric_grad(loss, case.student.params))


def check_overall(case: Case, config: DistillConfig | None = None) -> float:
    config = config or DistillConfig(model=case.student.config)
    n_model = case.student.params.size
    targets = assign_targets(case.rois, case.gts)

    def loss(flat):
        student = ToyModel(case.student.config, flat[:n_model])
        net = al.EmbeddingNet(case.embed.in_dim, case.embed.hidden, case.embed.out_dim,
                              flat[n_model:])
        losses, _, _ = overall_loss_and_grads(
            student, net, case.teacher, case.teacher_embed,
            case.source, case.target, case.rois, case.gts, config, targets, with_grad=False,
        )
        return losses.overall

    _, g_model, g_embed = overall_loss_and_grads(
        case.student, case.embed, case.teacher, case.teacher_embed,
        case.source, case.target, case.rois, case.gts, config, targets,
    )
    flat = np.concatenate([case.student.params, case.embed.params])
    return relative_error(np.concatenate([g_model, g_embed]), numeric_grad(loss, flat))


CHECKS = {"fca": check_fca, "gera": check_gera, "det": check_det, "overall": check_overall}


def run_gradcheck(seed: int = 0, configs: int = 20, max_rois: int = 6) -> dict[str, float]:
    """Worst relative error per loss over ``configs`` random cases."""
    rng = np.random.default_rng(seed)
    worst = dict.fromkeys(LOSSES, 0.0)
    for i in range(configs):
        n_rois = 1 + i % max_rois
        case = random_case(rng, n_rois)
        for name, check in CHECKS.items():
            worst[name] = max(worst[name], check(case))
    return worst
