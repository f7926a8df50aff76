"""Pixel-level AUC, average precision, and per-image mean-IoU PRO."""

from dataclasses import dataclass, field, asdict
import json

import numpy as np

from .errors import ShapeError, UndefinedMetricError


def _flat(scores, labels):
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    if s.shape != y.shape:
        raise ShapeError("scores and labels differ in size", ("scores", s.shape), ("labels", y.shape))
    if not np.isin(y, (0, 1)).all():
        raise ValueError("labels must be binary")
    return s, y.astype(bool)


def _threshold_counts(s, y):
    """Cumulative (tp, fp) at each unique score, thresholds descending, ties grouped."""
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    last = np.r_[np.flatnonzero(np.diff(s) != 0), len(s) - 1]
    tp = np.cumsum(y)[last]
    fp = (last + 1) - tp
    return tp.astype(np.float64), fp.astype(np.float64)


def auc(scores, labels):
    """Area under the ROC curve (trapezoidal over unique thresholds)."""
    s, y = _flat(scores, labels)
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs both positive and negative pixels")
    tp, fp = _threshold_counts(s, y)
    tpr = np.r_[0.0, tp / n_pos]
    fpr = np.r_[0.0, fp / n_neg]
    return float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2))


def average_precision(scores, labels):
    """Sum over descending unique thresholds of ``(R_n - R_{n-1}) * P_n``."""
    s, y = _flat(scores, labels)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise UndefinedMetricError("average precision needs at least one positive pixel")
    tp, fp = _threshold_counts(s, y)
    recall = np.r_[0.0, tp / n_pos]
    precision = tp / (tp + fp)
    return float(np.sum(np.diff(recall) * precision))


def normalize_map(a):
    a = np.asarray(a, dtype=np.float64)
    lo, hi = a.min(), a.max()
    return (a - lo) / (hi - lo) if hi > lo else np.zeros_like(a)


def _iou_per_image(norm_maps, masks, tau):
    out = []
    for a, m in zip(norm_maps, masks):
        pred = a >= tau
        inter = np.logical_and(pred, m).sum()
        union = np.logical_or(pred, m).sum()
        out.append(inter / union)
    return np.asarray(out, dtype=np.float64)


def pro_mean_iou(score_maps, gt_masks, threshold_mode="best", tau=0.5, n_thresholds=101, return_details=False):
    """Mean IoU over test images with a nonempty mask.

    Each map is min-max normalized per image and binarized at ``score >= tau``.
    ``threshold_mode`` is ``"fixed"`` (use ``tau``) or ``"best"`` (max over
    ``n_thresholds`` evenly spaced values in [0, 1]).
    """
    masks = [np.asarray(m).astype(bool) for m in gt_masks]
    maps = [np.asarray(a) for a in score_maps]
    if len(maps) != len(masks):
        raise ShapeError("score map and mask counts differ", ("maps", (len(maps),)), ("masks", (len(masks),)))
    keep = [i for i, m in enumerate(masks) if m.any()]
    if not keep:
        raise UndefinedMetricError("PRO needs at least one image with a nonempty mask")
    norm = []
    for i in keep:
        if maps[i].shape != masks[i].shape:
            raise ShapeError("score map and mask differ", ("map", maps[i].shape), ("mask", masks[i].shape))
        norm.append(normalize_map(maps[i]))
    m_keep = [masks[i] for i in keep]
    if threshold_mode == "fixed":
        taus = np.array([tau], dtype=np.float64)
    elif threshold_mode == "best":
        taus = np.linspace(0.0, 1.0, n_thresholds)
    else:
        raise ValueError(f"unknown threshold_mode {threshold_mode!r}")
    best, best_tau, best_per = -1.0, None, None
    for t in taus:
        per = _iou_per_image(norm, m_keep, t)
        if per.mean() > best:
            best, best_tau, best_per = float(per.mean()), float(t), per
    if return_details:
        return best, best_tau, dict(zip(keep, best_per.tolist()))
    return best


@dataclass
class MetricReport:
    auc: float
    ap: float
    pro: float
    pro_threshold: float
    per_image: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def to_json(self):
        d = asdict(self)
        d["per_image"] = {str(k): v for k, v in self.per_image.items()}
        return json.dumps(d, indent=2, sort_keys=True)


def evaluate(score_maps, gt_masks, threshold_mode="best", tau=0.5, ids=None, meta=None):
    """All three metrics over a list of ``(H, W)`` score maps and masks."""
    maps = [np.asarray(a, dtype=np.float64) for a in score_maps]
    masks = [np.asarray(m) for m in gt_masks]
    s = np.concatenate([a.ravel() for a in maps])
    y = np.concatenate([(m > 0).ravel() for m in masks]).astype(np.uint8)
    a_ = auc(s, y)
    ap = average_precision(s, y)
    pro, t, per = pro_mean_iou(maps, masks, threshold_mode, tau, return_details=True)
    ids = list(range(len(maps))) if ids is None else list(ids)
    per_image = {ids[i]: v for i, v in per.items()}
    return MetricReport(a_, ap, pro, t, per_image, dict(meta or {}))
