"""INI run configuration: ``[run]``, ``[scene]``, ``[train]``, ``[model]``, ``[grid]``.

Keys under the last four sections are the field names of the matching
dataclasses; tuples are written comma separated. Beam variants are written
``name:beam_stride:point_stride`` separated by commas. ``[run]`` needs
``seed`` and ``out_dir``; everything else has a default. Relative paths are
taken from the working directory.
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .beams import BeamVariantSpec
from .detector import GridSpec, ModelConfig
from .scenes import SceneSpec
from .trainer import DistillConfig


class ConfigError(ValueError):
    def __init__(self, message: str, key: str | None = None):
        super().__init__(message)
        self.key = key


RUN_REQUIRED = ("seed", "out_dir")
RUN_OPTIONAL = {"data_dir": "", "frames": 250, "train_fraction": 0.8}

_SECTIONS = {
    "scene": SceneSpec,
    "train": DistillConfig,
    "model": ModelConfig,
    "grid": GridSpec,
}
_NULLABLE = {"train.distill_lr"}
# filled from elsewhere, never read from the file
_DERIVED = {"scene": {"seed"}, "train": {"seed", "model", "grid"}, "model": {"channels"}}


@dataclass
class RunConfig:
    seed: int
    out_dir: Path
    data_dir: Path
    frames: int
    train_fraction: float
    scene: SceneSpec
    train: DistillConfig
    raw: dict[str, dict[str, str]] = field(default_factory=dict)

    @property
    def model(self) -> ModelConfig:
        return self.train.model

    @property
    def grid(self) -> GridSpec:
        return self.train.grid

    def to_ini(self) -> str:
        """Canonical dump of every resolved value, sorted for stable bytes."""
        lines = ["[run]"]
        lines += [f"seed = {self.seed}", f"out_dir = {self.out_dir}", f"data_dir = {self.data_dir}",
                  f"frames = {self.frames}", f"train_fraction = {self.train_fraction!r}"]
        for name, obj in (("scene", self.scene), ("train", self.train),
                          ("model", self.model), ("grid", self.grid)):
            lines += ["", f"[{name}]"]
            skip = _DERIVED.get(name, set())
            for f in sorted(dataclasses.fields(obj), key=lambda f: f.name):
                if f.name not in skip:
                    lines.append(f"{f.name} = {_format(getattr(obj, f.name))}")
        return "\n".join(lines) + "\n"


def _format(value: Any) -> str:
    if isinstance(value, tuple) and value and isinstance(value[0], BeamVariantSpec):
        return ", ".join(f"{v.name}:{v.beam_keep_stride}:{v.point_keep_stride}" for v in value)
    if isinstance(value, tuple):
        return ", ".join(_format(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return "none" if value is None else str(value)


def parse_variants(text: str) -> tuple[BeamVariantSpec, ...]:
    out = []
    for item in text.split(","):
        parts = item.strip().split(":")
        if len(parts) != 3:
            raise ValueError(f"variant {item.strip()!r} is not name:beam_stride:point_stride")
        out.append(BeamVariantSpec(parts[0], int(parts[1]), int(parts[2])))
    return tuple(out)


def _convert(text: str, default: Any, key: str) -> Any:
    text = text.strip()
    try:
        if key == "train.variants":
            return parse_variants(text)
        if isinstance(default, bool):
            low = text.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(f"not a boolean: {text!r}")
            return low in ("true", "1", "yes")
        if isinstance(default, tuple):
            items = [t for t in text.split(",") if t.strip()]
            if len(items) != len(default):
                raise ValueError(f"expected {len(default)} comma separated values")
            return tuple(_convert(t, d, key) for t, d in zip(items, default))
        if isinstance(default, int):
            return int(text)
        if key in _NULLABLE and text.lower() == "none":
            return None
        if default is None or isinstance(default, float):
            return float(text)
        return text
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {exc}", key) from None


def _build(cls, values: dict[str, str], section: str, extra: dict[str, Any]):
    defaults = {f.name: getattr(cls(), f.name) for f in dataclasses.fields(cls)}
    allowed = set(defaults) - _DERIVED.get(section, set())
    kwargs = dict(extra)
    for key, text in values.items():
        if key not in allowed:
            raise ConfigError(f"unknown key {section}.{key}", f"{section}.{key}")
        kwargs[key] = _convert(text, defaults[key], f"{section}.{key}")
    try:
        return cls(**kwargs)
    except ValueError as exc:
        raise ConfigError(f"[{section}] {exc}") from None


def parse_config(text: str, base_dir: str | Path = ".") -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str  # keep key case
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"unreadable config: {exc}") from None
    unknown = set(parser.sections()) - {"run", *_SECTIONS}
    if unknown:
        name = sorted(unknown)[0]
        raise ConfigError(f"unknown section [{name}]", name)
    raw = {s: dict(parser[s]) for s in parser.sections()}
    run = raw.get("run", {})
    for key in RUN_REQUIRED:
        if key not in run:
            raise ConfigError(f"missing required key run.{key}", f"run.{key}")
    for key in run:
        if key not in RUN_REQUIRED and key not in RUN_OPTIONAL:
            raise ConfigError(f"unknown key run.{key}", f"run.{key}")
    seed = _convert(run["seed"], 0, "run.seed")
    frames = _convert(run.get("frames", "250"), 0, "run.frames")
    fraction = _convert(run.get("train_fraction", "0.8"), 0.0, "run.train_fraction")
    if frames < 2:
        raise ConfigError("run.frames must be at least 2", "run.frames")
    if not 0.0 < fraction < 1.0:
        raise ConfigError("run.train_fraction must lie in (0, 1)", "run.train_fraction")
    base = Path(base_dir)
    out_dir = base / run["out_dir"].strip()
    data_dir = base / run["data_dir"].strip() if run.get("data_dir", "").strip() else out_dir / "data"

    scene = _build(SceneSpec, raw.get("scene", {}), "scene", {"seed": seed})
    model = _build(ModelConfig, raw.get("model", {}), "model", {})
    grid = _build(GridSpec, raw.get("grid", {}), "grid", {})
    train = _build(DistillConfig, raw.get("train", {}), "train",
                   {"seed": seed, "model": model, "grid": grid})
    if train.lr <= 0 or train.phase_lr() <= 0:
        raise ConfigError("learning rates must be positive", "train.lr")
    if train.pretrain_epochs < 0 or train.distill_epochs < 0:
        raise ConfigError("epoch counts must be non-negative", "train.pretrain_epochs")
    return RunConfig(seed, out_dir, data_dir, frames, fraction, scene, train, raw)


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(text)

