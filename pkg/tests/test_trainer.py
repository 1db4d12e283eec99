from __future__ import annotations

from dataclasses import replace

import numpy as np
import pytest

from lsf import alignment as al
from lsf.detector import GridSpec, ModelConfig, ToyModel, make_proposals, roi_lattice
from lsf.gradcheck import run_gradcheck
from lsf.scenes import SceneSpec, generate_scene
from lsf.selection import SelectionState
from lsf.trainer import (
    DistillConfig,
    LabeledFrame,
    TrainState,
    TrainingDivergedError,
    build_eval_set,
    checksum,
    det_step,
    distill_step,
    evaluate_model,
    overall_loss_and_grads,
    prepare_frame,
    pretrain,
    run_distillation,
    select_variant,
    train_source_only,
)

MODEL = ModelConfig(feat_dim=4, lattice_h=6, lattice_w=3, hidden=8)
CONFIG = DistillConfig(model=MODEL, pretrain_epochs=1, distill_epochs=1, seed=3)


def frames_for(n, seed=0):
    out = []
    for i in range(n):
        sc = generate_scene(SceneSpec(seed=seed * 1000 + i))
        out.append(LabeledFrame(sc.cloud, sc.boxes, sc.beam_labels))
    return out


@pytest.fixture(scope="module")
def caches():
    return [prepare_frame(f, CONFIG, use_true_labels=True) for f in frames_for(3)]


def lattices(config, cache, rois, chosen):
    cfg = config.model
    args = (config.grid, rois, cfg.lattice_h, cfg.lattice_w, cfg.context)
    return roi_lattice(cache.grid, *args), roi_lattice(cache.variant_grids[chosen], *args)


def test_prepare_frame_builds_every_variant(caches):
    c = caches[0]
    assert len(c.variants) == len(CONFIG.variants) == len(c.variant_grids)
    assert all(len(v) < len(c.frame.cloud) for v in c.variants)


def test_prepare_frame_with_kmeans_labels_matches_true_labels(caches):
    c = prepare_frame(caches[0].frame, CONFIG)
    for a, b in zip(c.variants, caches[0].variants):
        assert np.array_equal(a.points, b.points)


def test_zero_weights_reduce_to_a_plain_detection_step(caches):
    config = replace(CONFIG, alpha=0.0, beta=0.0)
    teacher = ToyModel.init(MODEL, seed=1)
    state = TrainState.from_teacher(teacher, config)
    cache = caches[0]
    distill_step(state, cache, config, np.random.default_rng(7))

    rng = np.random.default_rng(7)
    rois = make_proposals(cache.grid, config.grid, cache.frame.boxes, rng, config.distractors)
    chosen = select_variant(teacher, cache, rois, SelectionState.for_variants(config.variants), config)
    _, lattice = lattices(config, cache, rois, chosen)
    plain, _, _ = det_step(teacher, np.zeros_like(teacher.params), lattice, rois,
                           cache.frame.boxes, config, config.phase_lr())
    assert np.array_equal(state.student.params, plain.params)


def test_identity_inputs_align_perfectly(caches):
    teacher = ToyModel.init(MODEL, seed=2)
    state = TrainState.from_teacher(teacher, CONFIG)
    cache = caches[1]
    rois = make_proposals(cache.grid, CONFIG.grid, cache.frame.boxes, np.random.default_rng(0))
    source, _ = lattices(CONFIG, cache, rois, 0)
    losses, _, _ = overall_loss_and_grads(
        state.student, state.student_embed, state.teacher, state.teacher_embed,
        source, source, rois, cache.frame.boxes, CONFIG,
    )
    assert losses.fca == 0.0
    fs = state.teacher.features(source)
    fa = state.student.features(source)
    es = al.edge_matrix(state.teacher_embed.forward(fs.reshape(len(rois), -1))[0])[1]
    ea = al.edge_matrix(state.student_embed.forward(fa.reshape(len(rois), -1))[0])[1]
    assert np.array_equal(es, ea)


def test_logged_total_is_the_weighted_sum(caches):
    config = replace(CONFIG, alpha=0.7, beta=0.3)
    state = TrainState.from_teacher(ToyModel.init(MODEL, seed=4), config)
    for i, cache in enumerate(caches):
        distill_step(state, cache, config, np.random.default_rng(i))
    for row in state.history:
        want = row["L_det"] + 0.7 * row["L_FCA"] + 0.3 * row["L_GERA"]
        assert abs(row["L_overall"] - want) <= 1e-12


def test_overall_gradient_is_the_sum_of_parts(caches):
    cache = caches[2]
    state = TrainState.from_teacher(ToyModel.init(MODEL, seed=5), CONFIG)
    state.student.params += np.random.default_rng(0).normal(0, 0.05, state.student.params.size)
    rois = make_proposals(cache.grid, CONFIG.grid, cache.frame.boxes, np.random.default_rng(1))
    source, student = lattices(CONFIG, cache, rois, 3)
    args = (state.student, state.student_embed, state.teacher, state.teacher_embed,
            source, student, rois, cache.frame.boxes)
    _, g_all, e_all = overall_loss_and_grads(*args, replace(CONFIG, alpha=0.6, beta=0.4))
    _, g_det, _ = overall_loss_and_grads(*args, replace(CONFIG, alpha=0.0, beta=0.0))
    _, g_fca, _ = overall_loss_and_grads(*args, replace(CONFIG, alpha=1.0, beta=0.0))
    _, g_gera, e_gera = overall_loss_and_grads(*args, replace(CONFIG, alpha=0.0, beta=1.0))
    want = g_det + 0.6 * (g_fca - g_det) + 0.4 * (g_gera - g_det)
    assert np.allclose(g_all, want, rtol=1e-10, atol=1e-13)
    assert np.allclose(e_all, 0.4 * e_gera, rtol=1e-12, atol=0)


def test_finite_difference_suite_passes():
    worst = run_gradcheck(seed=2, configs=3)
    assert set(worst) == {"fca", "gera", "det", "overall"}
    assert all(v < 1e-5 for v in worst.values())


def test_teacher_never_changes(caches):
    state = TrainState.from_teacher(ToyModel.init(MODEL, seed=6), CONFIG)
    before = checksum(state.teacher.params)
    for i in range(6):
        distill_step(state, caches[i % 3], CONFIG, np.random.default_rng(i))
    assert checksum(state.teacher.params) == before == state.teacher_checksum
    assert checksum(state.student.params) != before


def test_zero_epochs_returns_the_seeded_init(caches):
    model = pretrain(caches, replace(CONFIG, pretrain_epochs=0))
    assert np.array_equal(model.params, ToyModel.init(MODEL, CONFIG.seed).params)


def test_empty_training_set():
    with pytest.raises(ValueError):
        pretrain([], CONFIG)


def test_loss_decreases_on_a_learnable_frame(caches):
    cache = caches[0]
    model = ToyModel.init(MODEL, seed=0)
    rois = make_proposals(cache.grid, CONFIG.grid, cache.frame.boxes, np.random.default_rng(0))
    lattice, _ = lattices(CONFIG, cache, rois, 0)
    velocity = np.zeros_like(model.params)
    losses = []
    for _ in range(11):
        model, velocity, loss = det_step(model, velocity, lattice, rois, cache.frame.boxes, CONFIG)
        losses.append(loss)
    assert all(b < a for a, b in zip(losses, losses[1:]))


def test_pretrain_is_deterministic(caches):
    h1, h2 = [], []
    a = pretrain(caches, CONFIG, history=h1)
    b = pretrain(caches, CONFIG, history=h2)
    assert a.params.tobytes() == b.params.tobytes()
    assert h1 == h2 and len(h1) == len(caches)
    assert {r["selected_variant"] for r in h1} <= {s.name for s in CONFIG.variants}


def test_source_only_uses_original_clouds(caches):
    hist = []
    train_source_only(caches, CONFIG, history=hist)
    assert len(hist) == 2 * len(caches)
    assert {r["selected_variant"] for r in hist} == {"source"}


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_is_reported(caches):
    model = ToyModel.init(MODEL, seed=0)
    model.params[:] = np.nan
    rois = make_proposals(caches[0].grid, CONFIG.grid, caches[0].frame.boxes, np.random.default_rng(0))
    lattice, _ = lattices(CONFIG, caches[0], rois, 0)
    with pytest.raises(TrainingDivergedError):
        det_step(model, np.zeros_like(model.params), lattice, rois, caches[0].frame.boxes, CONFIG)


def test_run_distillation_writes_artifacts(caches, tmp_path):
    val = frames_for(2, seed=9)
    eval_set = build_eval_set([f.cloud for f in val], [f.boxes for f in val], {"64": [f.cloud for f in val]}, CONFIG)
    res = run_distillation(caches, CONFIG, eval_set, tmp_path)
    names = {p.name for p in tmp_path.iterdir()}
    assert {"teacher.ckpt", "student.ckpt", "student_embed.ckpt", "pretrain_log.csv",
            "distill_log.csv", "epoch_metrics.csv"} <= names
    header = (tmp_path / "distill_log.csv").read_text().splitlines()[0]
    assert header == "step,L_det,L_FCA,L_GERA,L_overall,selected_variant"
    assert len(res.state.history) == len(caches)
    assert set(evaluate_model(res.state.student, eval_set, CONFIG)) == {"64"}


def test_config_rejects_bad_values():
    with pytest.raises(ValueError):
        DistillConfig(alpha=-1)
    with pytest.raises(ValueError):
        DistillConfig(iou_th=2)
    assert DistillConfig(distill_lr=None).phase_lr() == DistillConfig().lr


def test_grid_defaults_cover_the_scene_region():
    spec, grid = SceneSpec(), GridSpec()
    assert grid.x_range[0] <= spec.region_x[0] and spec.region_x[1] <= grid.x_range[1]
