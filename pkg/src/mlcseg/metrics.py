"""Pixel-level precision/recall/F1, fold aggregation, and error overlays."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    def __post_init__(self):
        if min(self.tp, self.fp, self.fn, self.tn) < 0:
            raise ValueError(f"counts must be non-negative, got {self}")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


def _check_binary(arr: np.ndarray, name: str) -> np.ndarray:
    arr = np.asarray(arr)
    if not np.all((arr == 0) | (arr == 1)):
        raise ValueError(f"{name} must be binary (all values 0 or 1)")
    return arr


def confusion(pred_prob: np.ndarray, gt_mask: np.ndarray, threshold: float = 0.5) -> ConfusionCounts:
    """Binarize predictions at threshold (>= goes foreground), tally pixels."""
    pred_prob = np.asarray(pred_prob)
    gt_mask = np.asarray(gt_mask)
    if pred_prob.shape != gt_mask.shape:
        raise ValueError(f"pred shape {pred_prob.shape} != mask shape {gt_mask.shape}")
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must be in (0, 1), got {threshold}")
    gt = _check_binary(gt_mask, "ground-truth mask").astype(bool)
    pred = pred_prob >= threshold
    return ConfusionCounts(
        tp=int(np.sum(pred & gt)),
        fp=int(np.sum(pred & ~gt)),
        fn=int(np.sum(~pred & gt)),
        tn=int(np.sum(~pred & ~gt)),
    )


def prf1(counts: ConfusionCounts) -> dict:
    """Precision, recall, harmonic-mean F1; empty denominators score 0."""
    tp, fp, fn = counts.tp, counts.fp, counts.fn
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2.0 * precision * recall / (precision + recall) if precision + recall else 0.0
    return {"precision": precision, "recall": recall, "f1": f1}


def aggregate(folds) -> dict:
    """Mean and population std of fold-level F1 (fold F1 = mean of its images)."""
    if len(folds) == 0:
        raise ValueError("aggregate needs at least one fold")
    vals = []
    for i, fold in enumerate(folds):
        scores = np.atleast_1d(np.asarray(fold, dtype=np.float64))
        if scores.size == 0:
            raise ValueError(f"fold {i} has no scores")
        vals.append(float(scores.mean()))
    vals = np.asarray(vals)
    return {"mean_f1": float(vals.mean()), "std_f1": float(vals.std())}


@dataclass
class EvalReport:
    """Per-image scores plus the aggregate over this evaluation set."""

    rows: list = field(default_factory=list)
    threshold: float = 0.5
    mean_f1: float = 0.0
    std_f1: float = 0.0


def evaluate_pairs(pairs, threshold: float = 0.5) -> EvalReport:
    """Score (id, predicted probabilities, ground-truth mask) triples."""
    rows = []
    for sid, pred, gt in pairs:
        scores = prf1(confusion(pred, gt, threshold))
        rows.append({"id": sid, **scores})
    if not rows:
        raise ValueError("nothing to evaluate")
    f1s = np.asarray([r["f1"] for r in rows])
    return EvalReport(rows=rows, threshold=threshold,
                      mean_f1=float(f1s.mean()), std_f1=float(f1s.std()))


def report_to_text(report: EvalReport) -> str:
    lines = ["id\tprecision\trecall\tf1"]
    for r in report.rows:
        lines.append(f"{r['id']}\t{r['precision']:.6f}\t{r['recall']:.6f}\t{r['f1']:.6f}")
    lines.append("# aggregate")
    lines.append(f"mean_f1\t{report.mean_f1:.6f}")
    lines.append(f"std_f1\t{report.std_f1:.6f}")
    lines.append(f"threshold\t{report.threshold}")
    return "\n".join(lines) + "\n"


TP_COLOR = (0.0, 1.0, 0.0)
FP_COLOR = (1.0, 0.0, 0.0)
FN_COLOR = (0.0, 0.0, 1.0)


def render_overlay(pred_mask: np.ndarray, gt_mask: np.ndarray, base_image: np.ndarray) -> np.ndarray:
    """Tint agreement classes over the base: green tp, red fp, blue fn.

    True negatives keep the base pixel; tinted pixels blend base and class
    color half and half.
    """
    pred = _check_binary(np.asarray(pred_mask), "pred mask").astype(bool)
    gt = _check_binary(np.asarray(gt_mask), "ground-truth mask").astype(bool)
    if pred.ndim == 3 and pred.shape[0] == 1:
        pred = pred[0]
    if gt.ndim == 3 and gt.shape[0] == 1:
        gt = gt[0]
    base = np.asarray(base_image, dtype=np.float32)
    if base.ndim != 3 or base.shape[0] != 3:
        raise ValueError(f"base image must be 3xHxW, got {base.shape}")
    if pred.shape != gt.shape or pred.shape != base.shape[1:]:
        raise ValueError(
            f"shape mismatch: pred {pred.shape}, mask {gt.shape}, image {base.shape[1:]}")
    out = base.copy()
    for cls, color in ((pred & gt, TP_COLOR), (pred & ~gt, FP_COLOR), (~pred & gt, FN_COLOR)):
        for ch in range(3):
            out[ch][cls] = 0.5 * base[ch][cls] + 0.5 * color[ch]
    return out
