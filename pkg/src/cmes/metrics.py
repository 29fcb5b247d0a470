"""Prediction metrics and synthetic mastery recovery."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np
from scipy.stats import rankdata

from .errors import UndefinedMetricError, ValidationError


@dataclass
class MetricsReport:
    acc: float
    rmse: float
    auc: float
    n_examples: int
    seed: int | None = None
    config_hash: str | None = None
    epoch: int | None = None
    split: str = "test"
    recovery: float | None = None

    def to_json(self) -> str:
        return json.dumps({k: (round(v, 4) if isinstance(v, float) else v) for k, v in asdict(self).items()})


def _check(preds, labels):
    preds = np.asarray(preds, dtype=float).ravel()
    labels = np.asarray(labels).ravel()
    if len(preds) != len(labels):
        raise ValidationError(f"length mismatch: {len(preds)} predictions vs {len(labels)} labels")
    if len(preds) == 0:
        raise UndefinedMetricError("metric undefined on empty input")
    return preds, labels


def accuracy(preds, labels, threshold: float = 0.5) -> float:
    preds, labels = _check(preds, labels)
    return float(np.mean((preds >= threshold).astype(int) == labels))


def rmse(preds, labels) -> float:
    preds, labels = _check(preds, labels)
    return float(np.sqrt(np.mean((preds - labels) ** 2)))


def auc(preds, labels) -> float:
    """Mann-Whitney AUC from average ranks (ties count one half)."""
    preds, labels = _check(preds, labels)
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs at least one positive and one negative label")
    ranks = rankdata(preds)  # average ranks; sums are exact half-integers
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2
    return float(u / (n_pos * n_neg))


def evaluate(preds, labels, **meta) -> MetricsReport:
    return MetricsReport(acc=accuracy(preds, labels), rmse=rmse(preds, labels), auc=auc(preds, labels),
                         n_examples=len(labels), **meta)


def mastery_recovery(diagnosed, truth) -> float:
    """Mean per-student Spearman correlation between diagnosed and true mastery.

    Students whose diagnosed or true vector is constant are skipped.
    """
    diagnosed = np.asarray(diagnosed, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if diagnosed.shape != truth.shape or diagnosed.ndim != 2:
        raise ValidationError(f"shape mismatch: {diagnosed.shape} vs {truth.shape}")
    a = rankdata(diagnosed, axis=1)
    b = rankdata(truth, axis=1)
    a -= a.mean(axis=1, keepdims=True)
    b -= b.mean(axis=1, keepdims=True)
    denom = np.sqrt((a ** 2).sum(axis=1) * (b ** 2).sum(axis=1))
    ok = denom > 0
    if not ok.any():
        raise UndefinedMetricError("every student has a constant mastery vector")
    return float(np.mean((a * b).sum(axis=1)[ok] / denom[ok]))
