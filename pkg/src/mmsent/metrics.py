"""Classification metrics: confusion counts, precision/recall/F1, ROC/AUC
and precision-recall curves, per class and macro-averaged.

Multiclass curve metrics are one-vs-rest per class with an unweighted macro
mean; ratios with zero denominators are defined as 0 and flagged so macro
averages stay finite.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class MetricsError(ValueError):
    """Invalid input to a metric computation."""


@dataclass
class ClassScores:
    precision: float
    recall: float
    f1: float
    degenerate: bool = False  # some ratio had a zero denominator


@dataclass
class CurvePoints:
    """Sweep points with strictly decreasing thresholds."""

    thresholds: list[float]
    xs: list[float]  # FPR for ROC, recall for PRC
    ys: list[float]  # TPR for ROC, precision for PRC

    def rows(self) -> list[tuple[float, float, float]]:
        return list(zip(self.thresholds, self.xs, self.ys))


@dataclass
class MetricsReport:
    accuracy: float
    per_class: list[ClassScores]
    macro_precision: float
    macro_recall: float
    macro_f1: float
    auc_per_class: list[float]
    macro_auc: float
    ap_per_class: list[float]
    macro_ap: float
    roc_curves: list[CurvePoints] = field(default_factory=list)
    pr_curves: list[CurvePoints] = field(default_factory=list)
    confusion: list[list[int]] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "per_class": [
                {"precision": c.precision, "recall": c.recall, "f1": c.f1,
                 "degenerate": c.degenerate}
                for c in self.per_class
            ],
            "macro_precision": self.macro_precision,
            "macro_recall": self.macro_recall,
            "macro_f1": self.macro_f1,
            "auc_per_class": self.auc_per_class,
            "macro_auc": self.macro_auc,
            "average_precision_per_class": self.ap_per_class,
            "macro_average_precision": self.macro_ap,
            "confusion": self.confusion,
        }


def confusion_and_prf(
    y_true, y_pred, class_count: int
) -> tuple[np.ndarray, list[ClassScores], tuple[float, float, float], float]:
    """Confusion matrix (rows = truth), per-class and macro P/R/F1, accuracy."""
    y_true = np.asarray(y_true, dtype=int)
    y_pred = np.asarray(y_pred, dtype=int)
    if y_true.size == 0:
        raise MetricsError("cannot score an empty label list")
    if y_true.shape != y_pred.shape:
        raise MetricsError("label lists must have equal length")
    if y_true.min() < 0 or y_true.max() >= class_count \
            or y_pred.min() < 0 or y_pred.max() >= class_count:
        raise MetricsError(f"labels must lie in [0, {class_count})")
    conf = np.zeros((class_count, class_count), dtype=int)
    np.add.at(conf, (y_true, y_pred), 1)

    scores = []
    for c in range(class_count):
        tp = int(conf[c, c])
        fp = int(conf[:, c].sum()) - tp
        fn = int(conf[c, :].sum()) - tp
        degenerate = (tp + fp == 0) or (tp + fn == 0)
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
        scores.append(ClassScores(precision, recall, f1,
                                  degenerate=degenerate or precision + recall == 0))
    macro = (
        float(np.mean([s.precision for s in scores])),
        float(np.mean([s.recall for s in scores])),
        float(np.mean([s.f1 for s in scores])),
    )
    accuracy = float(np.trace(conf) / conf.sum())
    return conf, scores, macro, accuracy


def _sweep_counts(scores, labels):
    """Cumulative TP/FP at each distinct score, thresholds descending."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels, dtype=int)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise MetricsError("scores and labels must be equal-length vectors")
    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    pos = labels[order] == 1
    tp = np.cumsum(pos)
    fp = np.cumsum(~pos)
    # keep the last index of each tied block: counts at threshold = score
    distinct = np.nonzero(np.diff(s, append=-np.inf))[0]
    return s[distinct], tp[distinct], fp[distinct]


def roc_auc(scores, labels) -> tuple[CurvePoints, float]:
    """ROC sweep over every distinct score and its trapezoid-rule area.

    ``labels`` are 0/1; needs at least one of each. The curve starts at
    (0, 0) with threshold +inf and ends at (1, 1).
    """
    labels = np.asarray(labels, dtype=int)
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise MetricsError("ROC needs at least one positive and one negative label")
    thr, tp, fp = _sweep_counts(scores, labels)
    fpr = fp / n_neg
    tpr = tp / n_pos
    points = CurvePoints([float("inf")] + thr.tolist(),
                         [0.0] + fpr.tolist(), [0.0] + tpr.tolist())
    auc = float(np.trapezoid(points.ys, points.xs))
    return points, auc


def pr_curve(scores, labels) -> tuple[CurvePoints, float]:
    """Precision/recall at every distinct score, plus step-sum average
    precision: sum_i (R_i - R_{i-1}) * P_i."""
    labels = np.asarray(labels, dtype=int)
    n_pos = int((labels == 1).sum())
    if n_pos == 0:
        raise MetricsError("PR curve needs at least one positive label")
    thr, tp, fp = _sweep_counts(scores, labels)
    recall = tp / n_pos
    precision = tp / (tp + fp)
    ap = 0.0
    prev_r = 0.0
    for r, p in zip(recall, precision):
        ap += (r - prev_r) * p
        prev_r = r
    points = CurvePoints(thr.tolist(), recall.tolist(), precision.tolist())
    return points, float(ap)


def full_report(y_true, probs, class_count: int,
                with_curves: bool = True) -> MetricsReport:
    """Combined report from true labels and per-class probability rows."""
    probs = np.asarray(probs, dtype=float)
    y_true = np.asarray(y_true, dtype=int)
    y_pred = probs.argmax(axis=1)
    conf, scores, macro, accuracy = confusion_and_prf(y_true, y_pred, class_count)
    aucs, aps, rocs, prs = [], [], [], []
    for c in range(class_count):
        binary = (y_true == c).astype(int)
        # a class absent from either side of the one-vs-rest split cannot be
        # curve-scored; record None and leave it out of the macro means
        if binary.min() == binary.max():
            aucs.append(None)
            aps.append(None)
            rocs.append(None)
            prs.append(None)
            continue
        roc_pts, auc = roc_auc(probs[:, c], binary)
        pr_pts, ap = pr_curve(probs[:, c], binary)
        aucs.append(auc)
        aps.append(ap)
        rocs.append(roc_pts)
        prs.append(pr_pts)
    valid_auc = [a for a in aucs if a is not None]
    valid_ap = [a for a in aps if a is not None]
    return MetricsReport(
        accuracy=accuracy,
        per_class=scores,
        macro_precision=macro[0],
        macro_recall=macro[1],
        macro_f1=macro[2],
        auc_per_class=aucs,
        macro_auc=float(np.mean(valid_auc)) if valid_auc else 0.0,
        ap_per_class=aps,
        macro_ap=float(np.mean(valid_ap)) if valid_ap else 0.0,
        roc_curves=rocs if with_curves else [],
        pr_curves=prs if with_curves else [],
        confusion=conf.tolist(),
    )


def average_reports(reports: list[MetricsReport]) -> dict:
    """Unweighted mean of the scalar fields across fold reports."""
    if not reports:
        raise MetricsError("no reports to average")
    keys = ("accuracy", "macro_precision", "macro_recall", "macro_f1",
            "macro_auc", "macro_average_precision")
    dicts = [r.to_dict() for r in reports]
    return {k: float(np.mean([d[k] for d in dicts])) for k in keys}
