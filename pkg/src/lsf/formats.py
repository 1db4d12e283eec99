"""On-disk formats: KITTI-style point files, box CSVs, checkpoints."""

from __future__ import annotations

import hashlib
import struct
from pathlib import Path
from typing import Sequence

import numpy as np

from .beams import PointCloud
from .geometry import Box3D, Detection

CKPT_MAGIC = b"LSF1"


class MalformedFileError(ValueError):
    pass


def read_bin(path: str | Path, frame_id: str | None = None) -> PointCloud:
    """Little-endian float32 (x, y, z, intensity) records, no header."""
    raw = Path(path).read_bytes()
    if len(raw) % 16:
        raise MalformedFileError(f"{path}: {len(raw)} bytes is not a multiple of 16")
    pts = np.frombuffer(raw, dtype="<f4").reshape(-1, 4)
    return PointCloud(pts.astype(np.float64), frame_id if frame_id is not None else Path(path).stem)


def write_bin(path: str | Path, cloud: PointCloud) -> None:
    Path(path).write_bytes(np.ascontiguousarray(cloud.points, dtype="<f4").tobytes())


def _fmt(v: float) -> str:
    # repr is locale independent and round-trips exactly
    return repr(float(v))


def write_labels(path: str | Path, boxes: Sequence[Box3D | Detection]) -> None:
    lines = []
    for b in boxes:
        if isinstance(b, Detection):
            vals = list(b.box.as_array()) + [b.confidence]
        else:
            vals = list(b.as_array())
        lines.append(",".join(_fmt(v) for v in vals))
    Path(path).write_text("".join(line + "\n" for line in lines))


def read_labels(path: str | Path) -> list[Box3D | Detection]:
    """``cx,cy,cz,l,w,h,yaw[,confidence]`` per line; blank lines skipped."""
    out: list[Box3D | Detection] = []
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split(",")
        if len(parts) not in (7, 8):
            raise MalformedFileError(f"{path}:{n}: expected 7 or 8 fields, got {len(parts)}")
        try:
            vals = [float(p) for p in parts]
        except ValueError as exc:
            raise MalformedFileError(f"{path}:{n}: {exc}") from None
        box = Box3D.from_array(vals[:7])
        out.append(Detection(box, vals[7]) if len(vals) == 8 else box)
    return out


def read_boxes(path: str | Path) -> list[Box3D]:
    return [b.box if isinstance(b, Detection) else b for b in read_labels(path)]


def config_hash(tag: bytes | str) -> bytes:
    if isinstance(tag, str):
        tag = tag.encode()
    return tag if len(tag) == 32 else hashlib.sha256(tag).digest()


def save_checkpoint(path: str | Path, params: np.ndarray, tag: bytes | str) -> None:
    """Magic, 32-byte config hash, uint64 count, then float64 parameters (LE)."""
    p = np.ascontiguousarray(params, dtype="<f8")
    blob = CKPT_MAGIC + config_hash(tag) + struct.pack("<Q", p.size) + p.tobytes()
    Path(path).write_bytes(blob)


def load_checkpoint(path: str | Path, tag: bytes | str | None = None) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != CKPT_MAGIC:
        raise MalformedFileError(f"{path}: not a checkpoint")
    digest = raw[4:36]
    if tag is not None and digest != config_hash(tag):
        raise MalformedFileError(f"{path}: checkpoint was written for a different config")
    (count,) = struct.unpack("<Q", raw[36:44])
    body = raw[44:]
    if len(body) != 8 * count:
        raise MalformedFileError(f"{path}: truncated parameter block")
    return np.frombuffer(body, dtype="<f8").astype(np.float64)
