from __future__ import annotations

import csv

import numpy as np
import pytest

from lsf import formats
from lsf.beams import PointCloud, label_beams
from lsf.cli import EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, main
from lsf.scenes import SceneSpec, generate_scene

SMALL = """[run]
seed = 5
out_dir = {out}
frames = 4
train_fraction = 0.5

[train]
pretrain_epochs = 1
distill_epochs = 1

[model]
feat_dim = 4
lattice_h = 6
lattice_w = 3
hidden = 8
"""


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("run")
    cfg = root / "config.ini"
    cfg.write_text(SMALL.format(out=root / "out"))
    assert main(["gen-scenes", "--config", str(cfg)]) == EXIT_OK
    return root, cfg


def test_gen_scenes_layout(workspace):
    root, _ = workspace
    data = root / "out" / "data"
    with open(data / "manifest.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [r["split"] for r in rows] == ["train", "train", "val", "val"]
    for r in rows:
        assert (data / r["split"] / f"{r['frame_id']}.bin").exists()
        assert (data / r["split"] / f"{r['frame_id']}.txt").exists()
    with open(data / "variants.csv") as fh:
        names = [r["name"] for r in csv.DictReader(fh)]
    assert names == ["64", "32", "32*", "16", "16*"]
    assert (root / "out" / "config.ini").exists()


def test_pipeline(workspace, capsys):
    root, cfg = workspace
    out = root / "out"
    c = ["--config", str(cfg)]
    assert main(["pretrain", *c]) == EXIT_OK
    assert main(["pretrain", "--source-only", *c]) == EXIT_OK
    assert main(["distill", "--teacher", str(out / "teacher.ckpt"), *c]) == EXIT_OK
    assert main(["select", "--checkpoint", str(out / "teacher.ckpt"), *c]) == EXIT_OK
    assert main(["eval", "--checkpoint", str(out / "student.ckpt"), "--variant", "16*", *c]) == EXIT_OK
    assert main(["sweep", "--checkpoint", str(out / "baseline.ckpt"), *c]) == EXIT_OK
    for name in ("teacher.ckpt", "baseline.ckpt", "student.ckpt", "pretrain_log.csv",
                 "baseline_log.csv", "distill_log.csv", "selection.csv"):
        assert (out / name).exists(), name
    eval_rows = (out / "eval_student.csv").read_text().splitlines()
    assert eval_rows[0] == "variant_name,ap_bev,ap_3d,num_gt,num_pred"
    assert eval_rows[1].startswith("16*,")
    sweep = (out / "sweep_baseline.csv").read_text().splitlines()
    assert [line.split(",")[0] for line in sweep[1:]] == ["64", "32", "32*", "16", "16*"]
    assert "variant_name" in capsys.readouterr().out
    with open(out / "selection.csv") as fh:
        sel = list(csv.DictReader(fh))
    assert len(sel) == 2 and all(r["selected"] in {"32", "32*", "16", "16*"} for r in sel)


def test_unknown_variant_is_a_usage_error(workspace):
    root, cfg = workspace
    ckpt = root / "out" / "teacher.ckpt"
    if not ckpt.exists():
        assert main(["pretrain", "--config", str(cfg)]) == EXIT_OK
    assert main(["eval", "--config", str(cfg), "--checkpoint", str(ckpt), "--variant", "8"]) == EXIT_USAGE


def test_downsample_halves_the_beams(tmp_path):
    sc = generate_scene(SceneSpec(seed=0))
    formats.write_bin(tmp_path / "in.bin", sc.cloud)
    assert main(["downsample", "--beams", "32", str(tmp_path / "in.bin"), str(tmp_path / "out.bin")]) == EXIT_OK
    src = formats.read_bin(tmp_path / "in.bin")
    out = formats.read_bin(tmp_path / "out.bin")
    assert 0 < len(out) < len(src)
    assert label_beams(out, 32).k == 32
    beam_of = dict(zip(map(bytes, src.points), sc.beam_labels))
    kept = {beam_of[bytes(p)] for p in out.points}
    assert kept == {b for b in set(sc.beam_labels) if b % 2 == 0}


def test_label_beams_command(tmp_path):
    sc = generate_scene(SceneSpec(seed=1))
    formats.write_bin(tmp_path / "in.bin", sc.cloud)
    assert main(["label-beams", str(tmp_path / "in.bin"), str(tmp_path / "labels.txt")]) == EXIT_OK
    labels = np.array([int(v) for v in (tmp_path / "labels.txt").read_text().split()])
    assert np.array_equal(labels, sc.beam_labels)


def test_gradcheck_command(capsys):
    assert main(["gradcheck", "--seed", "7", "--configs", "2"]) == EXIT_OK
    text = capsys.readouterr().out
    assert text.count(" ok") == 4


@pytest.mark.parametrize("argv", [
    [],
    ["frobnicate"],
    ["downsample", "--beams", "24", "a.bin", "b.bin"],
    ["downsample", "--beams", "32", "--point-stride", "0", "a.bin", "b.bin"],
    ["gradcheck", "--configs", "0"],
    ["eval", "--config", "x.ini"],
])
def test_usage_errors_exit_2(argv, capsys):
    assert main(argv) == EXIT_USAGE


def test_missing_config_key_exits_2(tmp_path, capsys):
    cfg = tmp_path / "c.ini"
    cfg.write_text("[run]\nseed = 1\n")
    assert main(["gen-scenes", "--config", str(cfg)]) == EXIT_USAGE
    assert "run.out_dir" in capsys.readouterr().err


def test_bad_thread_setting_exits_2(monkeypatch):
    monkeypatch.setenv("LSF_THREADS", "zero")
    assert main(["gradcheck", "--configs", "1"]) == EXIT_USAGE


def test_runtime_errors_exit_1(workspace, tmp_path):
    _, cfg = workspace
    assert main(["eval", "--config", str(cfg), "--checkpoint", str(tmp_path / "nope.ckpt")]) == EXIT_RUNTIME
    (tmp_path / "bad.bin").write_bytes(b"\0" * 17)
    assert main(["label-beams", str(tmp_path / "bad.bin"), str(tmp_path / "l.txt")]) == EXIT_RUNTIME
    formats.write_bin(tmp_path / "few.bin", PointCloud(np.ones((3, 4)), "few"))
    assert main(["label-beams", str(tmp_path / "few.bin"), str(tmp_path / "l.txt")]) == EXIT_RUNTIME


def test_checkpoint_from_another_config_exits_1(workspace, tmp_path):
    _, cfg = workspace
    formats.save_checkpoint(tmp_path / "x.ckpt", np.zeros(3), "another")
    assert main(["eval", "--config", str(cfg), "--checkpoint", str(tmp_path / "x.ckpt")]) == EXIT_RUNTIME
