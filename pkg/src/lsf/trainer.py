"""Pretraining with density augmentation and frozen-teacher distillation."""

from __future__ import annotations

import csv
import hashlib
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import alignment as al
from .beams import DEFAULT_VARIANTS, BeamVariantSpec, PointCloud, apply_variants, label_beams
from .detector import (
    DetTargets,
    GridSpec,
    ModelConfig,
    ToyModel,
    assign_targets,
    bev_featurize,
    decode,
    make_proposals,
    predict,
    roi_lattice,
    surrogate_det_loss,
)
from .geometry import Box3D
from .metrics import EvalResult, evaluate, sweep_csv
from .selection import SelectionState, score_variants, weighted_select
from .threads import thread_limit

log = logging.getLogger(__name__)

LOG_FIELDS = ("step", "L_det", "L_FCA", "L_GERA", "L_overall", "selected_variant")


class TrainingDivergedError(FloatingPointError):
    pass


@dataclass(frozen=True)
class DistillConfig:
    alpha: float = 1.0
    beta: float = 1.0
    lam: float = al.DEFAULT_LAMBDA
    epsilon: float = al.DEFAULT_EPSILON
    iou_th: float = 0.5
    variants: tuple[BeamVariantSpec, ...] = DEFAULT_VARIANTS
    lr: float = 0.01
    # learning rate of the distillation phase; None reuses ``lr``
    distill_lr: float | None = 0.002
    momentum: float = 0.9
    grad_clip: float = 5.0
    pretrain_epochs: int = 4
    distill_epochs: int = 4
    seed: int = 0
    distractors: int = 4
    source_beams: int = 64
    model: ModelConfig = ModelConfig()
    grid: GridSpec = GridSpec()

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be non-negative")
        if not (np.isfinite(self.lr) and np.isfinite(self.momentum)):
            raise ValueError("learning rate and momentum must be finite")
        if not 0.0 <= self.iou_th <= 1.0:
            raise ValueError("iou_th must lie in [0, 1]")

    def phase_lr(self) -> float:
        return self.lr if self.distill_lr is None else self.distill_lr


@dataclass
class LabeledFrame:
    cloud: PointCloud
    boxes: list[Box3D]
    beam_labels: np.ndarray | None = None


@dataclass
class FrameCache:
    """Everything about a frame that does not depend on model parameters."""

    frame: LabeledFrame
    grid: np.ndarray
    variants: list[PointCloud]
    variant_grids: list[np.ndarray]


def prepare_frame(
    frame: LabeledFrame, config: DistillConfig, use_true_labels: bool = False
) -> FrameCache:
    grid = bev_featurize(frame.cloud, config.grid)
    if not config.variants:
        return FrameCache(frame, grid, [], [])
    if use_true_labels and frame.beam_labels is not None:
        labels = frame.beam_labels
    else:
        labels = label_beams(frame.cloud, config.source_beams).labels
    variants = apply_variants(frame.cloud, labels, config.variants)
    return FrameCache(frame, grid, variants, [bev_featurize(v, config.grid) for v in variants])


def _step_rng(config: DistillConfig, phase: int, epoch: int, index: int):
    return np.random.default_rng([config.seed, phase, epoch, index])


def _epoch_order(config: DistillConfig, phase: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng([config.seed, phase, epoch]).permutation(n)


def checksum(params: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(params, dtype="<f8").tobytes()).hexdigest()


def momentum_update(params, velocity, grad, config: DistillConfig, lr: float | None = None):
    lr = config.lr if lr is None else lr
    norm = float(np.sqrt(grad @ grad))
    if config.grad_clip and norm > config.grad_clip:
        grad = grad * (config.grad_clip / norm)
    velocity = config.momentum * velocity + grad
    return params - lr * velocity, velocity


def _check_finite(value: float, what: str) -> None:
    if not np.isfinite(value):
        raise TrainingDivergedError(f"{what} became non-finite")


def select_variant(
    model: ToyModel,
    cache: FrameCache,
    rois: Sequence[Box3D],
    state: SelectionState,
    config: DistillConfig,
) -> int:
    """Confidence-based choice among the frame's cached variants."""
    grids = {id(c): g for c, g in zip(cache.variants, cache.variant_grids)}

    def detector(cloud: PointCloud):
        return decode(predict(model, grids[id(cloud)], config.grid, rois))

    names = [s.name for s in config.variants]
    scores = score_variants(
        cache.variants, names, cache.frame.boxes, detector, state.iou_threshold, thread_limit()
    )
    return weighted_select(scores, state)


def det_loss_and_grad(model: ToyModel, lattice: np.ndarray, rois, gts, extra_feat_grad=None):
    """Surrogate loss on one frame plus its gradient w.r.t. model parameters."""
    feats, reg, logit, cache = model.forward(lattice)
    targets = assign_targets(rois, gts)
    loss, parts, g_reg, g_logit = surrogate_det_loss(reg, logit, targets)
    grad = model.backward(cache, g_reg, g_logit, extra_feat_grad)
    return loss, grad


def det_step(
    model: ToyModel, velocity: np.ndarray, lattice, rois, gts, config: DistillConfig,
    lr: float | None = None,
):
    """One plain momentum step on the surrogate detection loss."""
    loss, grad = det_loss_and_grad(model, lattice, rois, gts)
    _check_finite(loss, "detection loss")
    params, velocity = momentum_update(model.params, velocity, grad, config, lr)
    return ToyModel(model.config, params), velocity, loss


def write_log(path: Path, rows: Sequence[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=LOG_FIELDS, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})


def pretrain(
    frames: Sequence[LabeledFrame] | Sequence[FrameCache],
    config: DistillConfig,
    augment: bool = True,
    history: list | None = None,
    model: ToyModel | None = None,
    epochs: int | None = None,
    lr: float | None = None,
    phase: int = 0,
) -> ToyModel:
    """Train on the surrogate detection loss alone.

    With ``augment`` every frame is swapped for its confidence-selected
    density variant, otherwise the original cloud is used. Training starts
    from ``model`` when given, else from a fresh seeded init.
    """
    if not frames:
        raise ValueError("empty training set")
    caches = [f if isinstance(f, FrameCache) else prepare_frame(f, config) for f in frames]
    model = ToyModel.init(config.model, config.seed) if model is None else model.copy()
    epochs = config.pretrain_epochs if epochs is None else epochs
    velocity = np.zeros_like(model.params)
    state = SelectionState.for_variants(config.variants, config.iou_th)
    step = 0
    for epoch in range(epochs):
        for idx in _epoch_order(config, phase, epoch, len(caches)):
            cache = caches[idx]
            rng = _step_rng(config, phase, epoch, int(idx))
            rois = make_proposals(cache.grid, config.grid, cache.frame.boxes, rng, config.distractors)
            if not rois:
                continue
            if augment and cache.variants:
                chosen = select_variant(model, cache, rois, state, config)
                grid, name = cache.variant_grids[chosen], config.variants[chosen].name
            else:
                grid, name = cache.grid, "source"
            cfg = model.config
            lattice = roi_lattice(grid, config.grid, rois, cfg.lattice_h, cfg.lattice_w, cfg.context)
            model, velocity, loss = det_step(
                model, velocity, lattice, rois, cache.frame.boxes, config, lr
            )
            if history is not None:
                history.append(
                    {"step": step, "L_det": loss, "L_FCA": 0.0, "L_GERA": 0.0,
                     "L_overall": loss, "selected_variant": name}
                )
            step += 1
    return model


def train_source_only(
    frames: Sequence[LabeledFrame] | Sequence[FrameCache],
    config: DistillConfig,
    history: list | None = None,
) -> ToyModel:
    """Baseline with the same two-phase schedule as distillation but no
    augmentation and no alignment: original clouds throughout."""
    model = pretrain(frames, config, augment=False, history=history)
    return pretrain(
        frames, config, augment=False, history=history, model=model,
        epochs=config.distill_epochs, lr=config.phase_lr(), phase=1,
    )


@dataclass
class TrainState:
    student: ToyModel
    teacher: ToyModel
    student_embed: al.EmbeddingNet
    teacher_embed: al.EmbeddingNet
    selection: SelectionState
    velocity: np.ndarray
    embed_velocity: np.ndarray
    step: int = 0
    history: list = field(default_factory=list)
    teacher_checksum: str = ""

    @classmethod
    def from_teacher(cls, teacher: ToyModel, config: DistillConfig) -> "TrainState":
        cfg = teacher.config
        embed = al.EmbeddingNet.init(cfg.flat_dim, cfg.feat_dim, cfg.feat_dim, config.seed + 1)
        teacher = teacher.copy()
        return cls(
            student=teacher.copy(),
            teacher=teacher,
            student_embed=embed.copy(),
            teacher_embed=embed,
            selection=SelectionState.for_variants(config.variants, config.iou_th),
            velocity=np.zeros_like(teacher.params),
            embed_velocity=np.zeros_like(embed.params),
            teacher_checksum=checksum(teacher.params),
        )


@dataclass
class StepLosses:
    det: float
    fca: float
    gera: float
    overall: float
    selected: str


def overall_loss_and_grads(
    student: ToyModel,
    student_embed: al.EmbeddingNet,
    teacher: ToyModel,
    teacher_embed: al.EmbeddingNet,
    source_lattice: np.ndarray,
    student_lattice: np.ndarray,
    rois: Sequence[Box3D],
    gts: Sequence[Box3D],
    config: DistillConfig,
    targets: DetTargets | None = None,
    with_grad: bool = True,
):
    """L_det + alpha L_FCA + beta L_GERA and gradients for the student side.

    ``targets`` may be passed in when the same ROIs are evaluated repeatedly.
    Returns ``(StepLosses without selection, grad_model, grad_embed)``; both
    gradients are None when ``with_grad`` is false.
    """
    teacher_feats = al.ProposalFeatures(teacher.features(source_lattice), list(rois))
    feats, reg, logit, cache = student.forward(student_lattice)
    student_feats = al.ProposalFeatures(feats, list(rois))

    if targets is None:
        targets = assign_targets(rois, gts)
    det, _, g_reg, g_logit = surrogate_det_loss(reg, logit, targets)
    fca, g_fca = al.fca_loss(teacher_feats, student_feats)
    gera, gcache = al.gera_forward(
        student_feats, teacher_feats, student_embed, teacher_embed, config.lam, config.epsilon
    )

    overall = det + config.alpha * fca + config.beta * gera
    if not with_grad:
        return StepLosses(det, fca, gera, overall, ""), None, None

    g_feats = None
    g_embed = np.zeros_like(student_embed.params)
    if config.alpha:
        g_feats = config.alpha * g_fca
    if config.beta:
        g_gera_feats, g_gera_embed = al.gera_backward_to_features(gcache, student_embed)
        g_feats = config.beta * g_gera_feats if g_feats is None else g_feats + config.beta * g_gera_feats
        g_embed = config.beta * g_gera_embed
    grad = student.backward(cache, g_reg, g_logit, g_feats)
    return StepLosses(det, fca, gera, overall, ""), grad, g_embed


def distill_step(state: TrainState, cache: FrameCache, config: DistillConfig, rng) -> StepLosses | None:
    """One student update: teacher sees the original cloud, student the
    selected variant, both over the same jittered ground-truth ROIs.

    Returns None (and leaves the state untouched) for frames with no ROI.
    """
    rois = make_proposals(cache.grid, config.grid, cache.frame.boxes, rng, config.distractors)
    if not rois:
        return None
    chosen = select_variant(state.student, cache, rois, state.selection, config)
    cfg = state.student.config
    h, w = cfg.lattice_h, cfg.lattice_w
    source_lattice = roi_lattice(cache.grid, config.grid, rois, h, w, config.model.context)
    student_lattice = roi_lattice(cache.variant_grids[chosen], config.grid, rois, h, w, config.model.context)

    losses, grad, g_embed = overall_loss_and_grads(
        state.student, state.student_embed, state.teacher, state.teacher_embed,
        source_lattice, student_lattice, rois, cache.frame.boxes, config,
    )
    _check_finite(losses.overall, "overall loss")
    losses.selected = config.variants[chosen].name

    lr = config.phase_lr()
    params, state.velocity = momentum_update(state.student.params, state.velocity, grad, config, lr)
    state.student = ToyModel(state.student.config, params)
    if config.beta:
        eparams, state.embed_velocity = momentum_update(
            state.student_embed.params, state.embed_velocity, g_embed, config, lr
        )
        state.student_embed = replace(state.student_embed, params=eparams)
    state.history.append(
        {"step": state.step, "L_det": losses.det, "L_FCA": losses.fca, "L_GERA": losses.gera,
         "L_overall": losses.overall, "selected_variant": losses.selected}
    )
    state.step += 1
    return losses


# -- evaluation ------------------------------------------------------------------


@dataclass
class EvalSet:
    """Validation frames at one or more densities, sharing proposals."""

    boxes: list[list[Box3D]]
    proposals: list[list[Box3D]]
    grids: dict[str, list[np.ndarray]]


def build_eval_set(
    source_clouds: Sequence[PointCloud],
    boxes: Sequence[Sequence[Box3D]],
    variant_clouds: dict[str, Sequence[PointCloud]],
    config: DistillConfig,
    seed: int = 12345,
) -> EvalSet:
    proposals = []
    for i, (cloud, gts) in enumerate(zip(source_clouds, boxes)):
        grid = bev_featurize(cloud, config.grid)
        rng = np.random.default_rng([seed, i])
        proposals.append(make_proposals(grid, config.grid, list(gts), rng, config.distractors))
    grids = {
        name: [bev_featurize(c, config.grid) for c in clouds]
        for name, clouds in variant_clouds.items()
    }
    return EvalSet([list(b) for b in boxes], proposals, grids)


def evaluate_model(model: ToyModel, eval_set: EvalSet, config: DistillConfig) -> dict[str, EvalResult]:
    out = {}
    for name, grids in eval_set.grids.items():
        preds = [
            decode(predict(model, g, config.grid, rois))
            for g, rois in zip(grids, eval_set.proposals)
        ]
        out[name] = evaluate(preds, eval_set.boxes)
    return out


def density_sweep_report(model: ToyModel, eval_set: EvalSet, config: DistillConfig) -> str:
    """Plot-ready CSV of BEV and 3D AP per density variant."""
    return sweep_csv(evaluate_model(model, eval_set, config))


# -- full run --------------------------------------------------------------------


@dataclass
class DistillResult:
    teacher: ToyModel
    state: TrainState
    pretrain_history: list
    epoch_metrics: list


def run_distillation(
    frames: Sequence[LabeledFrame] | Sequence[FrameCache],
    config: DistillConfig,
    eval_set: EvalSet | None = None,
    out_dir: str | Path | None = None,
    teacher: ToyModel | None = None,
) -> DistillResult:
    """Pretrain a teacher (unless given), then distil a student from it."""
    from .formats import save_checkpoint

    caches = [f if isinstance(f, FrameCache) else prepare_frame(f, config) for f in frames]
    pre_hist: list = []
    if teacher is None:
        teacher = pretrain(caches, config, augment=True, history=pre_hist)
    state = TrainState.from_teacher(teacher, config)
    metrics = []
    for epoch in range(config.distill_epochs):
        for idx in _epoch_order(config, 1, epoch, len(caches)):
            distill_step(state, caches[idx], config, _step_rng(config, 1, epoch, int(idx)))
        if checksum(state.teacher.params) != state.teacher_checksum:
            raise RuntimeError("teacher parameters changed during distillation")
        if eval_set is not None:
            for name, res in evaluate_model(state.student, eval_set, config).items():
                metrics.append(
                    {"epoch": epoch, "variant_name": name, "ap_bev": res.ap_bev, "ap_3d": res.ap_3d}
                )
        log.info("distill epoch %d done, %d steps", epoch, state.step)

    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        save_checkpoint(out / "teacher.ckpt", teacher.params, teacher.config.digest())
        save_checkpoint(out / "student.ckpt", state.student.params, state.student.config.digest())
        save_checkpoint(out / "student_embed.ckpt", state.student_embed.params, b"embed")
        if pre_hist:
            write_log(out / "pretrain_log.csv", pre_hist)
        write_log(out / "distill_log.csv", state.history)
        if metrics:
            with open(out / "epoch_metrics.csv", "w", newline="") as fh:
                writer = csv.DictWriter(
                    fh, fieldnames=("epoch", "variant_name", "ap_bev", "ap_3d"), lineterminator="\n"
                )
                writer.writeheader()
                for row in metrics:
                    writer.writerow({k: (f"{v:.4f}" if isinstance(v, float) else v) for k, v in row.items()})
    return DistillResult(teacher, state, pre_hist, metrics)
