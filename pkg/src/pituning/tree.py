"""Hand-crafted features and a pluggable gradient-boosted tree classifier for the tree baseline."""
from __future__ import annotations

import abc
import logging
import os
from collections import Counter
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from .data import EventRecord

log = logging.getLogger(__name__)

NEVER = -1.0
N_SCALAR = 8
SMALL_DATA = 200


def feature_names(n_intents: int, n_events: int) -> list[str]:
    names = [f"prob_{i}" for i in range(n_intents)]
    names += ["top_location", "hour", "weekday", "timestamp", "morning", "afternoon", "evening", "weekend"]
    names += [f"since_last_{e}" for e in range(n_events)]
    names += [f"last_gap_{e}" for e in range(n_events)]
    return names


def extract_features(history: Sequence[EventRecord], current: EventRecord, model_probs, n_events: int,
                     n_timeslots: int = 48, top_k: int = 10) -> np.ndarray:
    """One feature row for predicting ``current``'s intent from strictly earlier records.

    Layout: model probabilities, eight context scalars, then per-event
    time since last occurrence and gap between the last two occurrences
    (``-1`` where the occurrence count leaves them undefined).
    """
    probs = np.asarray(model_probs, dtype=float)
    t = current.timestamp
    prev = None
    for r in history:
        if r.timestamp >= t:
            raise ValueError(f"history record at t={r.timestamp} is not before current t={t}")
        if prev is not None and r.timestamp < prev:
            raise ValueError("history is not ordered by timestamp")
        prev = r.timestamp

    last = np.full(n_events, np.nan)
    second = np.full(n_events, np.nan)
    for r in history:
        second[r.event_id] = last[r.event_id]
        last[r.event_id] = r.timestamp
    since = np.where(np.isnan(last), NEVER, t - last)
    gap = np.where(np.isnan(second), NEVER, last - second)

    top = {loc for loc, _ in Counter(r.location_id for r in history).most_common(top_k)}
    slot = current.timeslot_id
    third = n_timeslots / 3
    bucket = 0 if slot < third else (1 if slot < 2 * third else 2)
    scalars = [
        float(current.location_id in top),
        float(slot * 24 // n_timeslots),
        float(current.weekday_id),
        float(t),
        float(bucket == 0),
        float(bucket == 1),
        float(bucket == 2),
        float(current.weekday_id >= 5),
    ]
    return np.concatenate([probs, scalars, since, gap])


def sequence_features(records: Sequence[EventRecord], model_probs: np.ndarray, n_events: int,
                      n_timeslots: int = 48) -> tuple[np.ndarray, np.ndarray]:
    """Features and labels for records ``1..n-1`` of one user (row ``j-1`` predicts record ``j``).

    ``model_probs`` holds one probability row per predicted record; records
    sharing a timestamp with the target are not visible to it.
    """
    if len(records) < 2:
        n_i = np.asarray(model_probs).shape[-1] if np.asarray(model_probs).ndim == 2 else 0
        return np.zeros((0, n_i + 2 * n_events + N_SCALAR)), np.zeros(0, dtype=np.int64)
    if len(model_probs) != len(records) - 1:
        raise ValueError("need one probability row per predicted record")
    rows, labels = [], []
    for j in range(1, len(records)):
        cur = records[j]
        hist = [r for r in records[:j] if r.timestamp < cur.timestamp]
        rows.append(extract_features(hist, cur, model_probs[j - 1], n_events, n_timeslots))
        labels.append(cur.intent_id)
    return np.stack(rows), np.asarray(labels, dtype=np.int64)


def write_feature_matrix(path: str | os.PathLike, features: np.ndarray, names: Sequence[str],
                         labels: np.ndarray | None = None) -> None:
    """Header of feature names, then comma-separated rows (label last when given)."""
    if features.shape[1] != len(names):
        raise ValueError("feature width does not match the names")
    header = list(names) + (["label"] if labels is not None else [])
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(header) + "\n")
        for i, row in enumerate(features):
            vals = [repr(float(v)) for v in row]
            if labels is not None:
                vals.append(str(int(labels[i])))
            fh.write(",".join(vals) + "\n")


@dataclass
class TreeConfig:
    """Boosting hyperparameters; ``max_depth = -1`` means unlimited."""

    n_iterations: int = 2000
    num_leaves: int = 32
    max_depth: int = -1
    min_data_in_leaf: int = 20
    feature_fraction: float = 1.0
    early_stopping_rounds: int = 75
    lambda_l1: float = 0.0
    lambda_l2: float = 0.0
    learning_rate: float = 0.1
    seed: int = 42

    def small_data(self) -> "TreeConfig":
        return replace(self, max_depth=3, num_leaves=3, lambda_l1=1.0, lambda_l2=1.0)


class Classifier(abc.ABC):
    """Anything that can fit ``(X, y)`` and return class probabilities."""

    @abc.abstractmethod
    def fit(self, X: np.ndarray, y: np.ndarray, X_val=None, y_val=None) -> "Classifier": ...

    @abc.abstractmethod
    def predict_proba(self, X: np.ndarray) -> np.ndarray: ...


class ConstantClassifier(Classifier):
    def __init__(self, label: int, n_classes: int):
        self.label, self.n_classes = label, n_classes

    def fit(self, X, y, X_val=None, y_val=None):
        return self

    def predict_proba(self, X):
        out = np.zeros((len(X), self.n_classes))
        out[:, self.label] = 1.0
        return out


class HistGBDT(Classifier):
    """Histogram gradient boosting from scikit-learn.

    L1 leaf regularisation has no counterpart there and is ignored (the
    handle metadata records this).
    """

    def __init__(self, config: TreeConfig, n_classes: int):
        from sklearn.ensemble import HistGradientBoostingClassifier

        self.n_classes = n_classes
        c = config
        self.model = HistGradientBoostingClassifier(
            learning_rate=c.learning_rate,
            max_iter=c.n_iterations,
            max_leaf_nodes=max(2, c.num_leaves),
            max_depth=None if c.max_depth < 0 else c.max_depth,
            min_samples_leaf=c.min_data_in_leaf,
            l2_regularization=c.lambda_l2,
            max_features=c.feature_fraction,
            early_stopping=c.early_stopping_rounds > 0,
            n_iter_no_change=max(1, c.early_stopping_rounds),
            random_state=c.seed,
        )

    def fit(self, X, y, X_val=None, y_val=None):
        known = np.isin(y_val, np.unique(y)) if X_val is not None else np.zeros(0, dtype=bool)
        if known.any() and self.model.early_stopping:
            self.model.fit(X, y, X_val=X_val[known], y_val=y_val[known])
        else:
            # the internal stratified hold-out needs >= 2 samples per class and room for every class
            counts = np.bincount(y)[np.unique(y)]
            feasible = counts.min() >= 2 and int(0.1 * len(y)) >= len(counts)
            self.model.set_params(early_stopping=self.model.early_stopping and feasible)
            self.model.fit(X, y)
        return self

    def predict_proba(self, X):
        out = np.zeros((len(X), self.n_classes))
        out[:, self.model.classes_] = self.model.predict_proba(X)
        return out


@dataclass
class TreeHandle:
    classifier: Classifier
    n_classes: int
    n_features: int
    config: TreeConfig
    meta: dict = field(default_factory=dict)


def train_baseline(features: np.ndarray, labels, n_classes: int, config: TreeConfig | None = None,
                   val_features: np.ndarray | None = None, val_labels=None, backend=HistGBDT) -> TreeHandle:
    """Fit a multi-class boosted-tree classifier, simplifying it for small datasets."""
    cfg = config or TreeConfig()
    X = np.asarray(features, dtype=float)
    y = np.asarray(labels, dtype=np.int64)
    if X.ndim != 2 or len(X) != len(y):
        raise ValueError("features must be (N, F) aligned with labels")
    if len(y) == 0:
        raise ValueError("no training samples")
    if y.min() < 0 or y.max() >= n_classes:
        raise ValueError(f"label outside [0, {n_classes})")
    meta = {"n_samples": len(y), "fallback": False}
    if len(y) < SMALL_DATA:
        cfg = cfg.small_data()
        meta["fallback"] = True
    if cfg.lambda_l1 and backend is HistGBDT:
        meta["l1_ignored"] = cfg.lambda_l1
    classes = np.unique(y)
    if len(classes) == 1:
        log.warning("single-class training labels; fitting a constant classifier")
        meta["constant"] = int(classes[0])
        clf: Classifier = ConstantClassifier(int(classes[0]), n_classes)
    else:
        Xv = None if val_features is None else np.asarray(val_features, dtype=float)
        yv = None if val_labels is None else np.asarray(val_labels, dtype=np.int64)
        clf = backend(cfg, n_classes).fit(X, y, Xv, yv)
        n_iter = getattr(getattr(clf, "model", None), "n_iter_", None)
        if n_iter is not None:
            meta["n_iter"] = int(n_iter)
    meta["config"] = asdict(cfg)
    return TreeHandle(clf, n_classes, X.shape[1], cfg, meta)


def predict_baseline(handle: TreeHandle, features: np.ndarray) -> np.ndarray:
    X = np.asarray(features, dtype=float)
    if X.ndim != 2 or X.shape[1] != handle.n_features:
        raise ValueError(f"expected {handle.n_features} features per row")
    return handle.classifier.predict_proba(X)
