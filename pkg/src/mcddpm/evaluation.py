"""Segmentation metrics and report assembly."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .postprocessing import DEFAULT_EROSION, DEFAULT_KERNEL, brain_mask, postprocess

REPORT_COLUMNS = ("dataset", "dice_pooled", "dice_mean", "auprc", "recon_error", "theta", "p", "checkpoint")
NOT_APPLICABLE = "n/a"


class UndefinedMetricError(ValueError):
    pass


def _same_shape(a, b):
    if np.shape(a) != np.shape(b):
        raise ValueError(f"shape mismatch: {np.shape(a)} vs {np.shape(b)}")


def dice(pred: np.ndarray, truth: np.ndarray) -> float:
    """``2|A & B| / (|A| + |B|)``; 1.0 when both masks are empty."""
    _same_shape(pred, truth)
    pred = np.asarray(pred) > 0
    truth = np.asarray(truth) > 0
    total = int(pred.sum()) + int(truth.sum())
    if total == 0:
        return 1.0
    return 2 * int((pred & truth).sum()) / total


def auprc(scores: np.ndarray, truth: np.ndarray, mask: np.ndarray | None = None) -> float:
    """Average precision over every distinct score threshold.

    Precision is held constant between recall steps (no interpolation), i.e.
    ``sum_k (R_k - R_{k-1}) * P_k`` with thresholds taken in decreasing order.
    Only voxels where ``mask`` is set take part.
    """
    _same_shape(scores, truth)
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(truth) > 0
    if mask is not None:
        _same_shape(scores, mask)
        keep = np.asarray(mask) > 0
        s, y = s[keep], y[keep]
    s, y = s.ravel(), y.ravel()
    n_pos = int(y.sum())
    if n_pos == 0:
        raise UndefinedMetricError("AUPRC is undefined without positive voxels")
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    # last index of each run of tied scores
    cut = np.flatnonzero(np.diff(s) != 0)
    cut = np.append(cut, s.size - 1)
    tp = np.cumsum(y, dtype=np.int64)[cut]
    predicted = cut + 1
    dtp = np.diff(tp, prepend=0)
    terms = dtp * tp / predicted
    return math.fsum(terms.tolist()) / n_pos


def reconstruction_error(v: np.ndarray, v_hat: np.ndarray, mask: np.ndarray | None = None) -> float:
    """Mean absolute residual over brain voxels (``v > 0`` unless a mask is given)."""
    _same_shape(v, v_hat)
    v = np.asarray(v, dtype=np.float64)
    keep = brain_mask(v) > 0 if mask is None else np.asarray(mask) > 0
    if not keep.any():
        raise UndefinedMetricError("no brain voxels to average over")
    return float(np.abs(v - np.asarray(v_hat, dtype=np.float64))[keep].mean())


@dataclass
class EvalReport:
    rows: list[dict] = field(default_factory=list)

    def add(self, **row):
        self.rows.append({c: row.get(c, NOT_APPLICABLE) for c in REPORT_COLUMNS})

    @staticmethod
    def _fmt(value):
        if isinstance(value, float):
            return f"{value:.6g}"
        return str(value)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(REPORT_COLUMNS)
            for row in self.rows:
                writer.writerow([self._fmt(row[c]) for c in REPORT_COLUMNS])

    def to_table(self) -> str:
        cells = [list(REPORT_COLUMNS)] + [[self._fmt(r[c]) for c in REPORT_COLUMNS] for r in self.rows]
        widths = [max(len(row[i]) for row in cells) for i in range(len(REPORT_COLUMNS))]
        lines = ["  ".join(c.ljust(w) for c, w in zip(row, widths)) for row in cells]
        lines.insert(1, "  ".join("-" * w for w in widths))
        return "\n".join(lines)


@dataclass
class VolumeScores:
    """Intermediate per-volume results kept for reporting and inspection."""

    subject_id: str
    residual: np.ndarray
    filtered: np.ndarray
    eroded_mask: np.ndarray
    segmentation: np.ndarray
    truth: np.ndarray | None


def score_volume(
    subject_id: str,
    volume: np.ndarray,
    residual: np.ndarray,
    truth: np.ndarray | None,
    theta: float,
    kernel: int = DEFAULT_KERNEL,
    iterations: int = DEFAULT_EROSION,
) -> VolumeScores:
    filtered, mask, seg = postprocess(residual, volume, theta, kernel, iterations)
    return VolumeScores(subject_id, residual, filtered, mask, seg, truth)


def summarize(
    volumes: Sequence[np.ndarray],
    reconstructions: Sequence[np.ndarray],
    scored: Sequence[VolumeScores],
) -> dict:
    """Pooled and per-volume Dice, pooled AUPRC and healthy-volume reconstruction error.

    Metrics are computed over brain voxels only; anomaly scores outside the
    eroded brain mask are zeroed, as the segmentation step does.  Volumes whose
    ground truth is empty (or absent) contribute to the reconstruction error.
    """
    out = {"dice_pooled": NOT_APPLICABLE, "dice_mean": NOT_APPLICABLE, "auprc": NOT_APPLICABLE,
           "recon_error": NOT_APPLICABLE}
    preds, truths, scores, masks, per_volume = [], [], [], [], []
    healthy_err = []
    for v, v_hat, s in zip(volumes, reconstructions, scored):
        brain = brain_mask(v) > 0
        if s.truth is None or not np.any(s.truth):
            healthy_err.append(reconstruction_error(v, v_hat))
        if s.truth is None:
            continue
        truth = (np.asarray(s.truth) > 0) & brain
        preds.append(s.segmentation[brain] > 0)
        truths.append(truth[brain])
        scores.append((s.filtered * s.eroded_mask)[brain])
        if truth.any():
            per_volume.append(dice(s.segmentation & brain, truth))
    if truths and any(t.any() for t in truths):
        pred_all, truth_all = np.concatenate(preds), np.concatenate(truths)
        out["dice_pooled"] = 100.0 * dice(pred_all, truth_all)
        out["dice_mean"] = 100.0 * float(np.mean(per_volume))
        out["auprc"] = 100.0 * auprc(np.concatenate(scores), truth_all)
    if healthy_err:
        out["recon_error"] = float(np.mean(healthy_err))
    return out
