"""Command-line entry point: ``lsf <subcommand> ...``.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import formats
from .beams import BeamLabelingError, BeamVariantSpec, PointCloud, apply_variants, label_beams
from .config import ConfigError, RunConfig, load_config
from .detector import ToyModel, decode, make_proposals, predict
from .gradcheck import LOSSES, TOLERANCE, run_gradcheck
from .metrics import evaluate
from .scenes import generate_benchmark, source_variant
from .selection import SelectionState, score_variants, weighted_select
from .threads import ThreadSettingError, thread_limit
from .trainer import (
    EvalSet,
    FrameCache,
    LabeledFrame,
    build_eval_set,
    density_sweep_report,
    prepare_frame,
    pretrain,
    run_distillation,
    train_source_only,
    write_log,
)

log = logging.getLogger("lsf")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# -- dataset layout -----------------------------------------------------------
#
#   <data_dir>/manifest.csv          split,frame_id
#   <data_dir>/variants.csv          name,directory (validation densities)
#   <data_dir>/{train,val}/<id>.bin  point clouds, <id>.txt box labels
#   <data_dir>/val_variants/<dir>/<id>.bin


def _variant_dir(name: str) -> str:
    return "b" + name.replace("*", "s")


def write_dataset(run: RunConfig) -> int:
    bench = generate_benchmark(run.scene, run.frames, (run.train_fraction, 1 - run.train_fraction),
                               run.train.variants)
    root = run.data_dir
    rows = []
    for split, scenes in (("train", bench.train), ("val", bench.val)):
        (root / split).mkdir(parents=True, exist_ok=True)
        for scene in scenes:
            fid = scene.cloud.frame_id
            formats.write_bin(root / split / f"{fid}.bin", scene.cloud)
            formats.write_labels(root / split / f"{fid}.txt", scene.boxes)
            rows.append((split, fid))
    variant_rows = []
    for name, clouds in bench.val_variants.items():
        d = root / "val_variants" / _variant_dir(name)
        d.mkdir(parents=True, exist_ok=True)
        for scene, cloud in zip(bench.val, clouds):
            formats.write_bin(d / f"{scene.cloud.frame_id}.bin", cloud)
        variant_rows.append((name, _variant_dir(name)))
    _write_rows(root / "manifest.csv", ("split", "frame_id"), rows)
    _write_rows(root / "variants.csv", ("name", "directory"), variant_rows)
    return len(rows)


def _write_rows(path: Path, header, rows) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    path.write_text(buf.getvalue())


def _read_rows(path: Path) -> list[dict]:
    if not path.exists():
        raise FileNotFoundError(f"{path} not found; run gen-scenes first")
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def load_split(run: RunConfig, split: str) -> list[LabeledFrame]:
    root = run.data_dir
    out = []
    for row in _read_rows(root / "manifest.csv"):
        if row["split"] == split:
            fid = row["frame_id"]
            cloud = formats.read_bin(root / split / f"{fid}.bin", fid)
            out.append(LabeledFrame(cloud, formats.read_boxes(root / split / f"{fid}.txt")))
    if not out:
        raise ValueError(f"no {split} frames in {root}")
    return out


def load_eval_set(run: RunConfig, val: list[LabeledFrame]) -> EvalSet:
    variants: dict[str, list[PointCloud]] = {}
    for row in _read_rows(run.data_dir / "variants.csv"):
        d = run.data_dir / "val_variants" / row["directory"]
        variants[row["name"]] = [
            formats.read_bin(d / f"{f.cloud.frame_id}.bin", f.cloud.frame_id) for f in val
        ]
    return build_eval_set([f.cloud for f in val], [f.boxes for f in val], variants, run.train)


def prepare_all(frames: list[LabeledFrame], run: RunConfig) -> list[FrameCache]:
    workers = thread_limit()
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(lambda f: prepare_frame(f, run.train), frames))
    return [prepare_frame(f, run.train) for f in frames]


def _out_dir(run: RunConfig) -> Path:
    run.out_dir.mkdir(parents=True, exist_ok=True)
    (run.out_dir / "config.ini").write_text(run.to_ini())
    return run.out_dir


def _load_model(run: RunConfig, path: str) -> ToyModel:
    params = formats.load_checkpoint(path, run.model.digest())
    model = ToyModel(run.model, params)
    model.unpack()  # size check
    return model


def _save_model(path: Path, model: ToyModel) -> None:
    formats.save_checkpoint(path, model.params, model.config.digest())


# -- subcommands ----------------------------------------------------------------


def cmd_gen_scenes(args) -> int:
    run = load_config(args.config)
    _out_dir(run)
    n = write_dataset(run)
    print(f"wrote {n} frames to {run.data_dir}")
    return EXIT_OK


def cmd_label_beams(args) -> int:
    cloud = formats.read_bin(args.input)
    labeling = label_beams(cloud, args.beams)
    Path(args.output).write_text("".join(f"{int(v)}\n" for v in labeling.labels))
    print(f"{len(cloud)} points in {labeling.k} beams")
    return EXIT_OK


def cmd_downsample(args) -> int:
    if args.beams < 1 or args.source_beams % args.beams:
        raise UsageError(f"--beams must divide --source-beams ({args.source_beams})")
    if args.point_stride < 1:
        raise UsageError("--point-stride must be positive")
    cloud = formats.read_bin(args.input)
    labels = label_beams(cloud, args.source_beams).labels
    spec = BeamVariantSpec(str(args.beams), args.source_beams // args.beams, args.point_stride)
    (out,) = apply_variants(cloud, labels, [spec])
    formats.write_bin(args.output, out)
    print(f"kept {len(out)} of {len(cloud)} points")
    return EXIT_OK


def cmd_select(args) -> int:
    run = load_config(args.config)
    out = _out_dir(run)
    model = _load_model(run, args.checkpoint) if args.checkpoint else ToyModel.init(run.model, run.seed)
    caches = prepare_all(load_split(run, "train"), run)
    state = SelectionState.for_variants(run.train.variants, run.train.iou_th)
    names = [s.name for s in run.train.variants]
    rows = []
    for i, cache in enumerate(caches):
        rng = np.random.default_rng([run.seed, 2, i])
        rois = make_proposals(cache.grid, run.grid, cache.frame.boxes, rng, run.train.distractors)
        grids = {id(c): g for c, g in zip(cache.variants, cache.variant_grids)}
        scores = score_variants(
            cache.variants, names, cache.frame.boxes,
            lambda c: decode(predict(model, grids[id(c)], run.grid, rois)),
            state.iou_threshold, thread_limit(),
        )
        chosen = weighted_select(scores, state)
        rows.append([cache.frame.cloud.frame_id] + [repr(s.score) for s in scores] + [names[chosen]])
    _write_rows(out / "selection.csv", ["frame_id"] + [f"S_{n}" for n in names] + ["selected"], rows)
    print(" ".join(f"{k}={v}" for k, v in state.counts.items()))
    return EXIT_OK


def cmd_pretrain(args) -> int:
    run = load_config(args.config)
    out = _out_dir(run)
    caches = prepare_all(load_split(run, "train"), run)
    history: list = []
    if args.source_only:
        model = train_source_only(caches, run.train, history)
        _save_model(out / "baseline.ckpt", model)
        write_log(out / "baseline_log.csv", history)
        print(f"baseline written to {out / 'baseline.ckpt'}")
    else:
        model = pretrain(caches, run.train, augment=True, history=history)
        _save_model(out / "teacher.ckpt", model)
        write_log(out / "pretrain_log.csv", history)
        print(f"teacher written to {out / 'teacher.ckpt'}")
    return EXIT_OK


def cmd_distill(args) -> int:
    run = load_config(args.config)
    out = _out_dir(run)
    caches = prepare_all(load_split(run, "train"), run)
    teacher = _load_model(run, args.teacher) if args.teacher else None
    eval_set = load_eval_set(run, load_split(run, "val")) if args.track else None
    result = run_distillation(caches, run.train, eval_set, out, teacher)
    print(f"student written to {out / 'student.ckpt'} after {result.state.step} steps")
    return EXIT_OK


def cmd_eval(args) -> int:
    run = load_config(args.config)
    out = _out_dir(run)
    model = _load_model(run, args.checkpoint)
    eval_set = load_eval_set(run, load_split(run, "val"))
    name = args.variant or source_variant(run.scene).name
    if name not in eval_set.grids:
        raise UsageError(f"unknown variant {name!r}; have {', '.join(eval_set.grids)}")
    preds = [decode(predict(model, g, run.grid, rois))
             for g, rois in zip(eval_set.grids[name], eval_set.proposals)]
    res = evaluate(preds, eval_set.boxes)
    stem = Path(args.checkpoint).stem
    _write_rows(out / f"eval_{stem}.csv", ("variant_name", "ap_bev", "ap_3d", "num_gt", "num_pred"),
                [(name, f"{res.ap_bev:.4f}", f"{res.ap_3d:.4f}", res.num_gt, res.num_pred)])
    print(f"{name}: AP_BEV {res.ap_bev:.2f}  AP_3D {res.ap_3d:.2f}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    run = load_config(args.config)
    out = _out_dir(run)
    model = _load_model(run, args.checkpoint)
    report = density_sweep_report(model, load_eval_set(run, load_split(run, "val")), run.train)
    path = out / f"sweep_{Path(args.checkpoint).stem}.csv"
    path.write_text(report)
    sys.stdout.write(report)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    if args.configs < 1:
        raise UsageError("--configs must be positive")
    worst = run_gradcheck(args.seed, args.configs)
    ok = True
    for name in LOSSES:
        passed = worst[name] < TOLERANCE
        ok &= passed
        print(f"{name:8s} max_rel_err={worst[name]:.3e} {'ok' if passed else 'FAIL'}")
    return EXIT_OK if ok else EXIT_RUNTIME


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="lsf", description="Density-robust LiDAR detection toolkit.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def with_config(name, helptext):
        sp = sub.add_parser(name, help=helptext)
        sp.add_argument("--config", required=True, help="INI run configuration")
        return sp

    with_config("gen-scenes", "simulate the train/val benchmark").set_defaults(func=cmd_gen_scenes)

    sp = sub.add_parser("label-beams", help="assign each point of a .bin file to a beam")
    sp.add_argument("--beams", type=int, default=64)
    sp.add_argument("input")
    sp.add_argument("output", help="one beam label per line")
    sp.set_defaults(func=cmd_label_beams)

    sp = sub.add_parser("downsample", help="drop beams (and optionally points) from a .bin file")
    sp.add_argument("--beams", type=int, required=True, help="beams to keep")
    sp.add_argument("--source-beams", type=int, default=64)
    sp.add_argument("--point-stride", type=int, default=1, help="keep every n-th point per beam")
    sp.add_argument("input")
    sp.add_argument("output")
    sp.set_defaults(func=cmd_downsample)

    sp = with_config("select", "score density variants of each training frame")
    sp.add_argument("--checkpoint", help="model to score with (default: fresh init)")
    sp.set_defaults(func=cmd_select)

    sp = with_config("pretrain", "train the teacher with density augmentation")
    sp.add_argument("--source-only", action="store_true", help="train the unaugmented baseline")
    sp.set_defaults(func=cmd_pretrain)

    sp = with_config("distill", "distil a student from a frozen teacher")
    sp.add_argument("--teacher", help="teacher checkpoint (default: pretrain one first)")
    sp.add_argument("--track", action="store_true", help="evaluate after every epoch")
    sp.set_defaults(func=cmd_distill)

    sp = with_config("eval", "AP of a checkpoint at one density")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--variant", help="density variant name (default: source)")
    sp.set_defaults(func=cmd_eval)

    sp = with_config("sweep", "AP of a checkpoint at every density")
    sp.add_argument("--checkpoint", required=True)
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("gradcheck", help="finite-difference check of all analytic gradients")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--configs", type=int, default=20)
    sp.set_defaults(func=cmd_gradcheck)
    return p


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        thread_limit()  # validate early
        return args.func(args)
    except (UsageError, ConfigError, ThreadSettingError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ValueError, BeamLabelingError, ArithmeticError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
