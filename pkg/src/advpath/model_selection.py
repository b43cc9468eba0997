"""Stratified k-fold splitting and repeated cross-validation."""

from dataclasses import dataclass, field

import numpy as np

from .exceptions import DataError
from .metrics import accuracy, auc_roc
from .model import TrainConfig, build_model, predict_proba, train
from .utils import derive_seed, make_rng


def _labels_of(data):
    if hasattr(data, "labels"):
        return np.asarray(data.labels)
    return np.asarray(data)


def stratified_kfold(data, k, seed=0):
    """Split indices into ``k`` stratified ``(train, test)`` pairs.

    Each class is shuffled on its own stream and dealt round-robin across the
    folds, continuing from where the previous class stopped, so every fold
    gets either floor or ceil of its share of each class.
    """
    labels = _labels_of(data)
    k = int(k)
    if k < 2:
        raise ValueError(f"k must be >= 2, got {k}")
    classes, counts = np.unique(labels, return_counts=True)
    if len(classes) == 0:
        raise DataError("cannot split an empty label set")
    if counts.min() < k:
        raise DataError(f"class {classes[counts.argmin()]} has {counts.min()} members, fewer than k={k}")
    fold_of = np.empty(len(labels), dtype=np.int64)
    offset = 0
    for c in classes:
        idx = np.flatnonzero(labels == c)
        idx = idx[make_rng(seed, "kfold", int(c)).permutation(len(idx))]
        fold_of[idx] = (offset + np.arange(len(idx))) % k
        offset = (offset + len(idx)) % k
    everything = np.arange(len(labels))
    return [(everything[fold_of != f], everything[fold_of == f]) for f in range(k)]


@dataclass
class FoldRecord:
    run: int
    fold: int
    n_train: int
    n_test: int
    accuracy: float
    auc_roc: float

    def to_dict(self):
        return dict(self.__dict__)


@dataclass
class Metrics:
    folds: list = field(default_factory=list)

    @property
    def accuracies(self):
        return np.array([f.accuracy for f in self.folds])

    @property
    def aucs(self):
        return np.array([f.auc_roc for f in self.folds])

    def summary(self):
        acc, auc = self.accuracies, self.aucs
        # population standard deviation over all runs x folds
        return {
            "n_folds": len(self.folds),
            "accuracy_mean": float(acc.mean()),
            "accuracy_std": float(acc.std()),
            "auc_mean": float(auc.mean()),
            "auc_std": float(auc.std()),
        }

    def to_dict(self):
        return {"summary": self.summary(), "folds": [f.to_dict() for f in self.folds]}


def evaluate(model, X, y):
    proba = predict_proba(model, X)
    return accuracy(proba.argmax(axis=1), y), auc_roc(proba[:, 1], y)


def cross_validate(spec, dataset, runs=5, k=3, cfg=None, seed=0, progress=None):
    """Repeated stratified k-fold cross-validation.

    Every fold trains a fresh model whose init and data-order seeds are
    derived from ``(seed, run, fold)``.
    """
    cfg = cfg or TrainConfig()
    cfg.validate()
    X, y = dataset.arrays() if hasattr(dataset, "arrays") else dataset
    y = np.asarray(y)
    metrics = Metrics()
    for run in range(int(runs)):
        for fold, (tr, te) in enumerate(stratified_kfold(y, k, derive_seed(seed, "cv-split", run))):
            fold_cfg = TrainConfig(**{**cfg.__dict__, "seed": derive_seed(seed, "cv-train", run, fold)})
            model = build_model(spec, derive_seed(seed, "cv-init", run, fold))
            model, _, _ = train(model, (X[tr], y[tr]), fold_cfg)
            acc, auc = evaluate(model, X[te], y[te])
            rec = FoldRecord(run, fold, len(tr), len(te), acc, auc)
            metrics.folds.append(rec)
            if progress:
                progress(rec)
    return metrics
