"""Classification metrics: weighted P/R/F1, confusion matrix, ROC/PR curves, thresholding, grouping.

Conventions: the prediction is the argmax with ties going to the lowest
class index; a 0/0 precision or recall is reported as 0 and flagged.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np


class MetricsError(ValueError):
    pass


def predict_labels(probs: np.ndarray) -> np.ndarray:
    return np.argmax(probs, axis=1)  # numpy returns the first maximum


def confusion_matrix(y_true: np.ndarray, y_pred: np.ndarray, k: int) -> np.ndarray:
    cm = np.zeros((k, k), dtype=np.int64)
    np.add.at(cm, (y_true, y_pred), 1)
    return cm


def _safe_div(num: np.ndarray, den: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    den = np.asarray(den, dtype=np.float64)
    zero = den == 0
    out = np.divide(num, den, out=np.zeros_like(den), where=~zero)
    return out, zero


def _check_inputs(probs, labels, require_normalized=True):
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    if probs.ndim != 2 or probs.shape[0] != labels.shape[0]:
        raise MetricsError(f"probs {probs.shape} and labels {labels.shape} disagree")
    k = probs.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        bad = labels[(labels < 0) | (labels >= k)][0]
        raise MetricsError(f"label {bad} out of range [0, {k})")
    if require_normalized and probs.size and np.abs(probs.sum(axis=1) - 1).max() > 1e-4:
        raise MetricsError("probability rows must sum to 1 (+-1e-4)")
    return probs, labels.astype(np.int64)


# --- curves ---------------------------------------------------------------------------------------


@dataclass
class Curve:
    thresholds: np.ndarray
    x: np.ndarray  # fpr for ROC, recall for PR
    y: np.ndarray  # tpr for ROC, precision for PR
    area: float


def _ranked_counts(scores: np.ndarray, positive: np.ndarray):
    """Cumulative TP/FP at each distinct threshold, highest first."""
    order = np.argsort(-scores, kind="mergesort")
    s, pos = scores[order], positive[order]
    last = np.r_[np.flatnonzero(np.diff(s)), s.size - 1]
    tp = np.cumsum(pos)[last]
    fp = (last + 1) - tp
    return s[last], tp.astype(np.float64), fp.astype(np.float64)


def roc_curve(scores, positive) -> Curve:
    scores, positive = np.asarray(scores, np.float64), np.asarray(positive, bool)
    thr, tp, fp = _ranked_counts(scores, positive)
    tpr = np.r_[0.0, tp / positive.sum()]
    fpr = np.r_[0.0, fp / (~positive).sum()]
    return Curve(np.r_[np.inf, thr], fpr, tpr, float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2)))


def pr_curve(scores, positive) -> Curve:
    """Precision/recall at every distinct threshold; AP = sum (R_n - R_{n-1}) P_n."""
    scores, positive = np.asarray(scores, np.float64), np.asarray(positive, bool)
    thr, tp, fp = _ranked_counts(scores, positive)
    precision = tp / (tp + fp)
    recall = tp / positive.sum()
    ap = float(np.sum(np.diff(np.r_[0.0, recall]) * precision))
    return Curve(thr, recall, precision, ap)


@dataclass
class CurveReport:
    roc: dict[int, Curve]
    pr: dict[int, Curve]
    macro_auc: Optional[float]
    micro_auc: Optional[float]
    macro_ap: Optional[float]
    micro_ap: Optional[float]
    micro_roc: Optional[Curve]
    micro_pr: Optional[Curve]
    skipped: list[int]


def roc_pr_curves(probs, labels) -> CurveReport:
    """One-vs-rest curves per class; classes lacking a positive or a negative are skipped."""
    probs, labels = _check_inputs(probs, labels, require_normalized=False)
    k = probs.shape[1]
    onehot = labels[:, None] == np.arange(k)[None, :]
    roc, pr, skipped = {}, {}, []
    for c in range(k):
        pos = onehot[:, c]
        if pos.all() or not pos.any():
            skipped.append(c)
            continue
        roc[c] = roc_curve(probs[:, c], pos)
        pr[c] = pr_curve(probs[:, c], pos)
    flat_pos = onehot.ravel()
    micro_roc = micro_pr = None
    if flat_pos.any() and not flat_pos.all():
        micro_roc = roc_curve(probs.ravel(), flat_pos)
        micro_pr = pr_curve(probs.ravel(), flat_pos)
    mean = lambda xs: float(np.mean(xs)) if xs else None  # noqa: E731
    return CurveReport(roc, pr, mean([c.area for c in roc.values()]), micro_roc.area if micro_roc else None,
                       mean([c.area for c in pr.values()]), micro_pr.area if micro_pr else None, micro_roc, micro_pr,
                       skipped)


# --- report ---------------------------------------------------------------------------------------


@dataclass
class ClassScores:
    name: str
    precision: float
    recall: float
    f1: float
    support: int


@dataclass
class ThresholdReport:
    tau: float
    coverage: float
    kept: int
    defined: bool
    accuracy: Optional[float]
    weighted_f1: Optional[float]


@dataclass
class MetricsReport:
    class_names: list[str]
    n: int
    accuracy: float
    weighted_precision: float
    weighted_recall: float
    weighted_f1: float
    per_class: list[ClassScores]
    confusion: np.ndarray
    curves: Optional[CurveReport] = None
    confidence_bins: Optional[np.ndarray] = None
    confidence_correct: Optional[np.ndarray] = None
    confidence_incorrect: Optional[np.ndarray] = None
    flags: list[str] = field(default_factory=list)
    threshold: Optional[ThresholdReport] = None
    groups: Optional[dict] = None

    def to_dict(self) -> dict:
        d = {
            "n": self.n,
            "accuracy": self.accuracy,
            "precision": self.weighted_precision,
            "recall": self.weighted_recall,
            "f1_score": self.weighted_f1,
            "per_class": [asdict(c) for c in self.per_class],
            "confusion_matrix": {"classes": self.class_names, "matrix": self.confusion.tolist()},
            "flags": list(self.flags),
        }
        if self.curves is not None:
            c = self.curves
            d["roc_auc"] = {self.class_names[k]: v.area for k, v in c.roc.items()}
            d["average_precision"] = {self.class_names[k]: v.area for k, v in c.pr.items()}
            d.update(macro_auc=c.macro_auc, micro_auc=c.micro_auc, macro_ap=c.macro_ap, micro_ap=c.micro_ap)
        if self.confidence_bins is not None:
            d["confidence_histogram"] = {"bin_edges": self.confidence_bins.tolist(),
                                         "correct": self.confidence_correct.tolist(),
                                         "incorrect": self.confidence_incorrect.tolist()}
        if self.threshold is not None:
            d["threshold"] = asdict(self.threshold)
        if self.groups is not None:
            d["groups"] = self.groups
        return d


def _class_scores(cm: np.ndarray):
    tp = np.diag(cm).astype(np.float64)
    support = cm.sum(axis=1)
    predicted = cm.sum(axis=0)
    precision, p_zero = _safe_div(tp, predicted)
    recall, r_zero = _safe_div(tp, support)
    f1, _ = _safe_div(2 * precision * recall, precision + recall)
    return precision, recall, f1, support, p_zero, r_zero


def compute_metrics(probs, labels, class_names: Optional[Sequence[str]] = None, curves: bool = True,
                    bins: int = 10) -> MetricsReport:
    probs, labels = _check_inputs(probs, labels)
    n, k = probs.shape
    names = list(class_names) if class_names is not None else [str(i) for i in range(k)]
    if len(names) != k:
        raise MetricsError(f"{len(names)} class names for {k} columns")
    if n == 0:
        raise MetricsError("no samples")
    pred = predict_labels(probs)
    cm = confusion_matrix(labels, pred, k)
    precision, recall, f1, support, p_zero, r_zero = _class_scores(cm)
    flags = [f"zero_support:{names[c]}" for c in np.flatnonzero(r_zero)]
    flags += [f"no_predictions:{names[c]}" for c in np.flatnonzero(p_zero)]
    w = support / n
    per_class = [ClassScores(names[c], float(precision[c]), float(recall[c]), float(f1[c]), int(support[c]))
                 for c in range(k)]
    report = MetricsReport(names, n, float(np.trace(cm) / n), float(w @ precision), float(w @ recall),
                           float(w @ f1), per_class, cm, flags=flags)
    if curves:
        report.curves = roc_pr_curves(probs, labels)
        flags += [f"curve_skipped:{names[c]}" for c in report.curves.skipped]
    conf = probs.max(axis=1)
    edges = np.linspace(0.0, 1.0, bins + 1)
    report.confidence_bins = edges
    report.confidence_correct = np.histogram(conf[pred == labels], edges)[0]
    report.confidence_incorrect = np.histogram(conf[pred != labels], edges)[0]
    return report


def threshold_report(probs, labels, tau: float = 0.9) -> ThresholdReport:
    """Metrics restricted to samples whose top probability exceeds ``tau``."""
    if not 0 < tau < 1:
        raise MetricsError("tau must be in (0, 1)")
    probs, labels = _check_inputs(probs, labels)
    keep = probs.max(axis=1) > tau
    n_keep = int(keep.sum())
    coverage = n_keep / len(labels) if len(labels) else 0.0
    if n_keep == 0:
        return ThresholdReport(tau, 0.0, 0, False, None, None)
    sub = compute_metrics(probs[keep], labels[keep], curves=False)
    return ThresholdReport(tau, coverage, n_keep, True, sub.accuracy, sub.weighted_f1)


# --- grouping -------------------------------------------------------------------------------------


@dataclass
class GroupScores:
    group_names: list[str]
    group_probs: np.ndarray  # (N, G)
    predictions: np.ndarray
    report: Optional[MetricsReport] = None


def group_index(group_map: Sequence[str]) -> tuple[list[str], np.ndarray]:
    """Groups ordered by sorted name; returns names and the class -> group index vector."""
    names = sorted(set(group_map))
    lookup = {g: i for i, g in enumerate(names)}
    return names, np.array([lookup[g] for g in group_map], dtype=np.int64)


def group_scores(probs, group_map: Sequence[str], labels=None) -> GroupScores:
    """Sum member-class probabilities per group; with labels, score the group predictions."""
    probs = np.asarray(probs, dtype=np.float64)
    if len(group_map) != probs.shape[1]:
        raise MetricsError(f"group map covers {len(group_map)} classes, probs have {probs.shape[1]}")
    names, gidx = group_index(group_map)
    onehot = np.zeros((probs.shape[1], len(names)))
    onehot[np.arange(probs.shape[1]), gidx] = 1.0
    gp = probs @ onehot
    out = GroupScores(names, gp, predict_labels(gp))
    if labels is not None:
        glabels = gidx[np.asarray(labels, dtype=np.int64)]
        out.report = compute_metrics(gp, glabels, names, curves=len(names) > 1)
    return out


def load_group_map(path, class_names: Sequence[str]) -> list[str]:
    """CSV ``label,group``; must cover every class exactly once."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ["label", "group"]:
            raise MetricsError(f"{path}: header must be label,group")
        mapping = {}
        for row in reader:
            if row["label"] in mapping:
                raise MetricsError(f"{path}: class {row['label']!r} mapped twice")
            mapping[row["label"]] = row["group"]
    missing = [c for c in class_names if c not in mapping]
    if missing:
        raise MetricsError(f"{path}: group map is not total, missing {missing}")
    unknown = sorted(set(mapping) - set(class_names))
    if unknown:
        raise MetricsError(f"{path}: unknown classes {unknown}")
    return [mapping[c] for c in class_names]


# --- files ----------------------------------------------------------------------------------------


def _fmt(x: float) -> str:
    return "inf" if math.isinf(x) else repr(float(x))


def write_roc_csv(path, report: MetricsReport) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["class", "threshold", "fpr", "tpr"])
        for k, c in report.curves.roc.items():
            for t, x, y in zip(c.thresholds, c.x, c.y):
                w.writerow([report.class_names[k], _fmt(t), _fmt(x), _fmt(y)])


def write_pr_csv(path, report: MetricsReport) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["class", "threshold", "precision", "recall"])
        for k, c in report.curves.pr.items():
            for t, r, p in zip(c.thresholds, c.x, c.y):
                w.writerow([report.class_names[k], _fmt(t), _fmt(p), _fmt(r)])


def read_curve_csv(path) -> dict[str, dict[str, np.ndarray]]:
    """Inverse of the curve writers: ``class -> column -> array``."""
    out: dict[str, dict[str, list]] = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        cols = [c for c in reader.fieldnames if c != "class"]
        for row in reader:
            d = out.setdefault(row["class"], {c: [] for c in cols})
            for c in cols:
                d[c].append(float(row[c]))
    return {k: {c: np.array(v) for c, v in d.items()} for k, d in out.items()}


def write_confusion_csv(path, cm: np.ndarray, names: Sequence[str]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["true\\pred", *names])
        for name, row in zip(names, cm):
            w.writerow([name, *map(int, row)])


def read_confusion_csv(path) -> tuple[np.ndarray, list[str]]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    names = rows[0][1:]
    return np.array([[int(v) for v in r[1:]] for r in rows[1:]], dtype=np.int64), names


def write_report_json(path, report: MetricsReport) -> None:
    import json

    Path(path).write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
