"""Weighted/macro precision and recall, NDCG@k and the evaluation report."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

COLUMNS = ("prec_w", "rec_w", "prec_m", "rec_m", "ndcg@3", "ndcg@5")


@dataclass
class ConfusionCounts:
    tp: np.ndarray
    fp: np.ndarray
    fn: np.ndarray

    @property
    def n_classes(self) -> int:
        return len(self.tp)

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn)


def confusion_counts(predictions, targets, n_classes: int) -> ConfusionCounts:
    pred = np.asarray(predictions, dtype=np.int64).ravel()
    true = np.asarray(targets, dtype=np.int64).ravel()
    if pred.shape != true.shape:
        raise ValueError(f"length mismatch: {len(pred)} predictions vs {len(true)} targets")
    for arr in (pred, true):
        if arr.size and (arr.min() < 0 or arr.max() >= n_classes):
            raise ValueError(f"label outside [0, {n_classes})")
    hit = pred == true
    tp = np.bincount(true[hit], minlength=n_classes)
    fp = np.bincount(pred[~hit], minlength=n_classes)
    fn = np.bincount(true[~hit], minlength=n_classes)
    return ConfusionCounts(tp, fp, fn)


def _ratio(num, den):
    num = num.astype(float)
    return np.divide(num, den, out=np.zeros_like(num), where=den > 0)


def per_class_precision(c: ConfusionCounts) -> np.ndarray:
    return _ratio(c.tp, c.tp + c.fp)


def per_class_recall(c: ConfusionCounts) -> np.ndarray:
    return _ratio(c.tp, c.tp + c.fn)


def weighted_precision(c: ConfusionCounts, classes=None) -> float:
    """Precision_c weighted by ``TP_c + FP_c`` (optionally restricted to ``classes``)."""
    sel = slice(None) if classes is None else np.asarray(sorted(classes), dtype=np.int64)
    w = (c.tp + c.fp)[sel]
    if w.sum() == 0:
        raise ValueError("weighted precision undefined: no predictions")
    return float((w * per_class_precision(c)[sel]).sum() / w.sum())


def weighted_recall(c: ConfusionCounts, classes=None) -> float:
    sel = slice(None) if classes is None else np.asarray(sorted(classes), dtype=np.int64)
    w = (c.tp + c.fn)[sel]
    if w.sum() == 0:
        raise ValueError("weighted recall undefined: no samples")
    return float((w * per_class_recall(c)[sel]).sum() / w.sum())


def macro_precision(c: ConfusionCounts) -> float:
    # empty classes count as 0 and stay in the denominator
    return float(per_class_precision(c).mean())


def macro_recall(c: ConfusionCounts) -> float:
    return float(per_class_recall(c).mean())


def ndcg_at_k(scores_or_rankings, targets, k: int) -> float:
    """Mean single-label NDCG@k.

    Accepts either a score matrix ``(N, C)`` (ranked by descending score,
    ties by lower index) or integer rankings ``(N, C)`` listing classes best
    first.  ``k`` larger than ``C`` is clamped.
    """
    arr = np.asarray(scores_or_rankings)
    true = np.asarray(targets, dtype=np.int64)
    if arr.ndim != 2 or len(arr) != len(true):
        raise ValueError("expected an (N, C) array aligned with targets")
    if k < 1:
        raise ValueError("k must be >= 1")
    if len(true) == 0:
        return 0.0
    k = min(k, arr.shape[1])
    if np.issubdtype(arr.dtype, np.integer):
        ranking = arr
    else:
        ranking = np.argsort(-arr, axis=1, kind="stable")
    rank = np.argmax(ranking == true[:, None], axis=1) + 1  # 1-based
    gains = np.where(rank <= k, 1.0 / np.log2(rank + 1.0), 0.0)
    return float(gains.mean())


@dataclass
class MetricsReport:
    prec_w: float
    rec_w: float
    prec_m: float
    rec_m: float
    ndcg: dict[int, float] = field(default_factory=dict)
    n_samples: int = 0

    def row(self) -> dict[str, float]:
        out = {"prec_w": self.prec_w, "rec_w": self.rec_w, "prec_m": self.prec_m, "rec_m": self.rec_m}
        out.update({f"ndcg@{k}": v for k, v in sorted(self.ndcg.items())})
        return out

    def to_text(self) -> str:
        lines = [f"{k}: {v:.6f}" for k, v in self.row().items()]
        lines.append(f"n_samples: {self.n_samples}")
        return "\n".join(lines) + "\n"


def report_from_scores(scores: np.ndarray, targets, n_classes: int, ks: Sequence[int] = (3, 5)) -> MetricsReport:
    targets = np.asarray(targets, dtype=np.int64)
    if len(targets) == 0:
        raise ValueError("cannot evaluate an empty dataset")
    pred = np.argmax(scores, axis=1)
    c = confusion_counts(pred, targets, n_classes)
    return MetricsReport(
        prec_w=weighted_precision(c),
        rec_w=weighted_recall(c),
        prec_m=macro_precision(c),
        rec_m=macro_recall(c),
        ndcg={k: ndcg_at_k(scores, targets, k) for k in ks},
        n_samples=len(targets),
    )


def evaluate(model, arrays, ks: Sequence[int] = (3, 5)) -> MetricsReport:
    """Run ``model`` (an IntentPredictor or ModelCheckpoint) on windowed data and score it."""
    from .model import ModelCheckpoint, predict_logits

    if isinstance(model, ModelCheckpoint):
        model = model.model
    if len(arrays) == 0:
        raise ValueError("cannot evaluate an empty dataset")
    logits = predict_logits(model, arrays)
    return report_from_scores(logits, arrays.targets, model.config.n_intents, ks)


def mean_report(reports: Sequence[MetricsReport]) -> dict[str, float]:
    """Per-user mean of every column."""
    if not reports:
        raise ValueError("no reports to aggregate")
    rows = [r.row() for r in reports]
    return {k: float(np.mean([r[k] for r in rows])) for k in rows[0]}
