"""KITTI-style AP over 40 recall positions and the closed-gap ratio."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .geometry import Box3D, Detection, iou_matrix

R40 = np.arange(1, 41) / 40.0
AP_IOU = 0.7


@dataclass
class EvalResult:
    ap_bev: float
    ap_3d: float
    num_gt: int = 0
    num_pred: int = 0
    # per frame: list of (prediction index, matched gt index or -1) under 3D IoU
    matches: list = field(default_factory=list)


def greedy_true_positives(
    preds_by_frame: Sequence[Sequence[Detection]],
    gts_by_frame: Sequence[Sequence[Box3D]],
    iou_th: float = AP_IOU,
    criterion: str = "3d",
):
    """One-to-one TP/FP labelling in descending confidence order.

    A prediction is a true positive when some not-yet-claimed ground truth in
    its frame overlaps it with IoU strictly above ``iou_th`` (the KITTI
    convention); it claims the best such ground truth, lowest index on ties.
    Confidence ties are broken by frame, then prediction index.

    Returns ``(order, tp, assignment)`` where ``order`` lists (frame, index)
    pairs, ``tp`` is a bool array aligned with ``order`` and ``assignment``
    gives the claimed gt index or -1.
    """
    flat = [
        (-det.confidence, f, i)
        for f, dets in enumerate(preds_by_frame)
        for i, det in enumerate(dets)
    ]
    flat.sort()
    ious = [
        iou_matrix([d.box for d in dets], gts, criterion)
        for dets, gts in zip(preds_by_frame, gts_by_frame)
    ]
    used = [np.zeros(len(g), dtype=bool) for g in gts_by_frame]
    tp = np.zeros(len(flat), dtype=bool)
    assign = np.full(len(flat), -1)
    for k, (_, f, i) in enumerate(flat):
        if not len(gts_by_frame[f]):
            continue
        row = np.where(used[f], -1.0, ious[f][i])
        j = int(np.argmax(row))
        if row[j] > iou_th:
            used[f][j] = True
            tp[k] = True
            assign[k] = j
    order = [(f, i) for _, f, i in flat]
    return order, tp, assign


def sampled_precisions(tp: np.ndarray, num_gt: int) -> np.ndarray:
    """Interpolated precision at recall 1/40 ... 40/40."""
    out = np.zeros(len(R40))
    if num_gt == 0 or len(tp) == 0:
        return out
    cum = np.cumsum(tp)
    precision = cum / np.arange(1, len(tp) + 1)
    recall = cum / num_gt
    for k, r in enumerate(R40):
        reach = recall >= r
        if reach.any():
            out[k] = precision[reach].max()
    return out


def average_precision_r40(
    preds_by_frame: Sequence[Sequence[Detection]],
    gts_by_frame: Sequence[Sequence[Box3D]],
    iou_th: float = AP_IOU,
    criterion: str = "3d",
) -> float:
    """AP in percent; 0 when there is no ground truth at all."""
    if len(preds_by_frame) != len(gts_by_frame):
        raise ValueError("predictions and ground truth must cover the same frames")
    _, tp, _ = greedy_true_positives(preds_by_frame, gts_by_frame, iou_th, criterion)
    num_gt = sum(len(g) for g in gts_by_frame)
    return float(sampled_precisions(tp, num_gt).mean() * 100.0)


def evaluate(preds_by_frame, gts_by_frame, iou_th: float = AP_IOU) -> EvalResult:
    order, tp, assign = greedy_true_positives(preds_by_frame, gts_by_frame, iou_th, "3d")
    num_gt = sum(len(g) for g in gts_by_frame)
    matches: list[list] = [[] for _ in preds_by_frame]
    for (f, i), j in zip(order, assign):
        matches[f].append((i, int(j)))
    return EvalResult(
        ap_bev=average_precision_r40(preds_by_frame, gts_by_frame, iou_th, "bev"),
        ap_3d=float(sampled_precisions(tp, num_gt).mean() * 100.0),
        num_gt=num_gt,
        num_pred=len(order),
        matches=matches,
    )


class DegenerateGapError(ZeroDivisionError):
    pass


def closed_gap(ap_model: float, ap_source_only: float, ap_oracle: float) -> float:
    """Share of the source-only -> oracle gap recovered, in percent."""
    gap = ap_oracle - ap_source_only
    if gap == 0:
        raise DegenerateGapError("oracle and source-only AP coincide")
    return (ap_model - ap_source_only) / gap * 100.0


SWEEP_FIELDS = ("variant_name", "ap_bev", "ap_3d", "num_gt", "num_pred")


def density_sweep_rows(results: dict[str, EvalResult]) -> list[dict]:
    return [
        {
            "variant_name": name,
            "ap_bev": f"{r.ap_bev:.4f}",
            "ap_3d": f"{r.ap_3d:.4f}",
            "num_gt": r.num_gt,
            "num_pred": r.num_pred,
        }
        for name, r in results.items()
    ]


def sweep_csv(results: dict[str, EvalResult]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=SWEEP_FIELDS, lineterminator="\n")
    writer.writeheader()
    writer.writerows(density_sweep_rows(results))
    return buf.getvalue()
