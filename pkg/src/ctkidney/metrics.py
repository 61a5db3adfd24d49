"""Multi-class evaluation: confusion matrix, per-class scores, ROC/PR curves.

Averages are unweighted macro means unless stated otherwise; support
weighted means are reported alongside as a supplementary view.  Undefined
ratios (zero denominators) evaluate to 0 and emit
:class:`UndefinedMetricWarning`, so reports never contain NaN.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import IndexOutOfRange, LengthMismatch, SingleClass


class UndefinedMetricWarning(UserWarning):
    pass


def confusion_matrix(y_true, y_pred, k: int) -> np.ndarray:
    """Counts with rows = true class and columns = predicted class."""
    y_true = np.asarray(y_true, dtype=np.int64).ravel()
    y_pred = np.asarray(y_pred, dtype=np.int64).ravel()
    if y_true.shape != y_pred.shape:
        raise LengthMismatch(f"y_true has {y_true.size} entries, y_pred {y_pred.size}")
    for name, arr in (("y_true", y_true), ("y_pred", y_pred)):
        if arr.size and (arr.min() < 0 or arr.max() >= k):
            raise IndexOutOfRange(f"{name} holds indices outside [0, {k})")
    return np.bincount(y_true * k + y_pred, minlength=k * k).reshape(k, k)


def _safe_ratio(num: np.ndarray, den: np.ndarray, what: str, labels=None) -> np.ndarray:
    num = np.asarray(num, dtype=np.float64)
    den = np.asarray(den, dtype=np.float64)
    out = np.zeros_like(num)
    ok = den > 0
    out[ok] = num[ok] / den[ok]
    if not ok.all():
        bad = np.flatnonzero(~ok).tolist()
        if labels is not None:
            bad = [labels[i] for i in bad]
        warnings.warn(f"{what} is undefined for classes {bad}; reported as 0", UndefinedMetricWarning, stacklevel=3)
    return out


def f1_from(precision, recall) -> np.ndarray:
    """Harmonic mean of precision and recall (0 where both are 0)."""
    p = np.asarray(precision, dtype=np.float64)
    r = np.asarray(recall, dtype=np.float64)
    return _safe_ratio(2 * p * r, p + r, "f1")


def per_class_metrics(cm, labels: Optional[Sequence[str]] = None) -> Dict[str, np.ndarray]:
    cm = np.asarray(cm, dtype=np.int64)
    tp = np.diag(cm).astype(np.float64)
    predicted = cm.sum(axis=0)
    support = cm.sum(axis=1)
    precision = _safe_ratio(tp, predicted, "precision", labels)
    recall = _safe_ratio(tp, support, "recall", labels)
    return {
        "precision": precision,
        "recall": recall,
        "f1": _safe_ratio(2 * precision * recall, precision + recall, "f1", labels),
        "support": support,
    }


def macro_average(values) -> float:
    values = np.asarray(list(values), dtype=np.float64)
    if values.size == 0:
        raise ValueError("macro_average of an empty sequence")
    return float(values.mean())


def weighted_average(values, support) -> float:
    values = np.asarray(values, dtype=np.float64)
    support = np.asarray(support, dtype=np.float64)
    return float((values * support).sum() / support.sum())


def _threshold_counts(y_true, scores) -> Tuple[np.ndarray, np.ndarray, np.ndarray, int, int]:
    y = np.asarray(y_true).astype(bool).ravel()
    s = np.asarray(scores, dtype=np.float64).ravel()
    if y.shape != s.shape:
        raise LengthMismatch(f"{y.size} labels vs {s.size} scores")
    if not np.all(np.isfinite(s)):
        raise ValueError("scores must be finite")
    n_pos = int(y.sum())
    n_neg = int(y.size - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise SingleClass("both positive and negative labels are required")
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    # last index of each run of equal scores = one threshold step
    ends = np.r_[np.flatnonzero(np.diff(s) != 0), y.size - 1]
    tps = np.cumsum(y)[ends].astype(np.float64)
    fps = (ends + 1) - tps
    return s[ends], tps, fps, n_pos, n_neg


def roc_auc(y_true_binary, scores) -> Tuple[np.ndarray, float]:
    """ROC points ``(fpr, tpr)`` from (0, 0) to (1, 1) and trapezoidal AUC.

    Equal scores form a single threshold step, which makes the area equal
    to the pairwise ranking probability with half credit for ties.
    """
    _, tps, fps, n_pos, n_neg = _threshold_counts(y_true_binary, scores)
    fpr = np.r_[0.0, fps / n_neg]
    tpr = np.r_[0.0, tps / n_pos]
    if fpr[-1] != 1.0 or tpr[-1] != 1.0:  # pragma: no cover - final step always reaches (1, 1)
        fpr, tpr = np.r_[fpr, 1.0], np.r_[tpr, 1.0]
    auc = float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))
    return np.column_stack([fpr, tpr]), auc


def pr_curve(y_true_binary, scores) -> np.ndarray:
    """``(recall, precision)`` at each descending unique-score threshold."""
    _, tps, fps, n_pos, _ = _threshold_counts(y_true_binary, scores)
    return np.column_stack([tps / n_pos, tps / (tps + fps)])


def average_precision(pr_points: np.ndarray) -> float:
    """Step-wise area under a PR curve: sum of (R_n - R_{n-1}) * P_n."""
    r, p = pr_points[:, 0], pr_points[:, 1]
    return float(np.sum(np.diff(np.r_[0.0, r]) * p))


def round_half_up(x: float, places: int = 2) -> Decimal:
    return Decimal(repr(float(x))).quantize(Decimal(1).scaleb(-places), rounding=ROUND_HALF_UP)


METRIC_KEYS = ("precision", "recall", "f1", "auc")


@dataclass
class EvaluationReport:
    classes: List[str]
    confusion: np.ndarray
    per_class: Dict[str, Dict[str, Optional[float]]]
    macro: Dict[str, Optional[float]]
    weighted: Dict[str, Optional[float]]
    accuracy: float
    roc_points: Dict[str, List[List[float]]] = field(default_factory=dict)
    pr_points: Dict[str, List[List[float]]] = field(default_factory=dict)
    warnings: List[str] = field(default_factory=list)

    @property
    def n_samples(self) -> int:
        return int(self.confusion.sum())

    def to_dict(self) -> dict:
        return {
            "classes": list(self.classes),
            "n_samples": self.n_samples,
            "accuracy": self.accuracy,
            "confusion": self.confusion.tolist(),
            "per_class": self.per_class,
            "macro": self.macro,
            "weighted": self.weighted,
            "roc_points": self.roc_points,
            "pr_points": self.pr_points,
            "warnings": self.warnings,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EvaluationReport":
        return cls(
            classes=list(d["classes"]),
            confusion=np.asarray(d["confusion"], dtype=np.int64),
            per_class=d["per_class"],
            macro=d["macro"],
            weighted=d["weighted"],
            accuracy=d["accuracy"],
            roc_points=d.get("roc_points", {}),
            pr_points=d.get("pr_points", {}),
            warnings=d.get("warnings", []),
        )

    def table_rows(self) -> List[dict]:
        """Per-class rows shaped like a precision/recall/F1/AUC table."""
        return [dict(class_name=c, **self.per_class[c]) for c in self.classes]

    def render_table(self, places: int = 2) -> str:
        """Fixed-point text table, rounded half-up."""
        def fmt(v):
            return "-" if v is None else str(round_half_up(v, places))

        lines = ["class\tprecision\trecall\tf1\tauc\tsupport"]
        for c in self.classes:
            m = self.per_class[c]
            lines.append("\t".join([c] + [fmt(m[k]) for k in METRIC_KEYS] + [str(m["support"])]))
        lines.append("\t".join(["macro"] + [fmt(self.macro[k]) for k in METRIC_KEYS] + [str(self.n_samples)]))
        return "\n".join(lines) + "\n"


def report_from_predictions(y_true, probs, classes: Sequence[str]) -> EvaluationReport:
    """Build a full report from true indices and an ``(n, k)`` probability matrix."""
    probs = np.asarray(probs, dtype=np.float64)
    y_true = np.asarray(y_true, dtype=np.int64)
    k = len(classes)
    if probs.ndim != 2 or probs.shape[1] != k:
        raise LengthMismatch(f"probabilities of shape {probs.shape} for {k} classes")
    y_pred = probs.argmax(axis=1)
    cm = confusion_matrix(y_true, y_pred, k)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", UndefinedMetricWarning)
        pcm = per_class_metrics(cm, labels=list(classes))
    notes = [str(w.message) for w in caught]

    per_class, roc_pts, pr_pts = {}, {}, {}
    aucs: List[Optional[float]] = []
    for i, name in enumerate(classes):
        binary = y_true == i
        try:
            pts, auc = roc_auc(binary, probs[:, i])
            pr = pr_curve(binary, probs[:, i])
            ap: Optional[float] = average_precision(pr)
            roc_pts[name] = pts.tolist()
            pr_pts[name] = pr.tolist()
        except SingleClass:
            auc, ap = None, None
            notes.append(f"auc is undefined for class {name!r} (single label value present)")
        aucs.append(auc)
        per_class[name] = {
            "precision": float(pcm["precision"][i]),
            "recall": float(pcm["recall"][i]),
            "f1": float(pcm["f1"][i]),
            "auc": auc,
            "average_precision": ap,
            "support": int(pcm["support"][i]),
        }

    present = [a for a in aucs if a is not None]
    support = pcm["support"]
    macro = {key: macro_average(pcm[key]) for key in ("precision", "recall", "f1")}
    macro["auc"] = macro_average(present) if present else None
    weighted = {key: weighted_average(pcm[key], support) for key in ("precision", "recall", "f1")}
    if present and len(present) == k:
        weighted["auc"] = weighted_average(aucs, support)
    else:
        weighted["auc"] = None
    accuracy = float(np.trace(cm) / cm.sum()) if cm.sum() else 0.0
    return EvaluationReport(list(classes), cm, per_class, macro, weighted, accuracy, roc_pts, pr_pts, notes)


def collect_predictions(model, test_stream) -> Tuple[np.ndarray, np.ndarray]:
    """Run ``model`` over an unaugmented stream; returns (y_true, probs)."""
    from .models import predict_proba  # torch import deferred for metric-only use

    predict: Callable = model if not hasattr(model, "parameters") else (lambda x: predict_proba(model, x))
    batches = test_stream.iter_epoch(0) if hasattr(test_stream, "iter_epoch") else iter(test_stream)
    ys, ps = [], []
    for x, y in batches:
        ps.append(np.asarray(predict(x), dtype=np.float64))
        ys.append(np.asarray(y).argmax(axis=1))
    return np.concatenate(ys), np.concatenate(ps)


def evaluate(model, test_stream, codec) -> EvaluationReport:
    """Predict with ``argmax`` of the model's probabilities and score one-vs-rest."""
    y_true, probs = collect_predictions(model, test_stream)
    return report_from_predictions(y_true, probs, codec.classes)
