"""Prediction-quality metrics: AUC, scaled Brier score, squared-error vs truth."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from .errors import ValidationError


def auc(y: np.ndarray, p: np.ndarray) -> float:
    """Mann-Whitney probability that a case outranks a control; ties count half."""
    y = np.asarray(y, dtype=float)
    p = np.asarray(p, dtype=float)
    if y.shape != p.shape:
        raise ValidationError("y and p must have equal length")
    n1 = int((y == 1).sum())
    n0 = int((y == 0).sum())
    if n1 == 0 or n0 == 0:
        raise ValidationError("AUC needs both outcome classes present")
    ranks = rankdata(p)
    rank_sum = float(ranks[y == 1].sum())
    return (rank_sum - n1 * (n1 + 1) / 2.0) / (n1 * n0)


def scaled_brier(y: np.ndarray, p: np.ndarray) -> float:
    """Sum (y - p)^2 over sum (y - ybar)^2; 1 matches the mean predictor."""
    y = np.asarray(y, dtype=float)
    p = np.asarray(p, dtype=float)
    if y.shape != p.shape:
        raise ValidationError("y and p must have equal length")
    ybar = y.mean()
    denom = float(((y - ybar) ** 2).sum())
    if denom == 0.0:
        raise ValidationError("outcome vector is degenerate (single class)")
    return float(((y - p) ** 2).sum()) / denom


def sse(p_hat: np.ndarray, p_true: np.ndarray) -> float:
    """Mean squared error between predicted and true probabilities."""
    p_hat = np.asarray(p_hat, dtype=float)
    p_true = np.asarray(p_true, dtype=float)
    if p_hat.shape != p_true.shape:
        raise ValidationError("probability vectors must have equal length")
    return float(((p_hat - p_true) ** 2).mean())


@dataclass(frozen=True)
class MetricReport:
    auc: float
    scaled_brier: float
    n_test: int
    sse: float | None = None  # mean form; needs true probabilities
    sse_sum: float | None = None  # unnormalized companion, for cross-report comparisons

    def to_dict(self) -> dict:
        out = {"auc": self.auc, "scaled_brier": self.scaled_brier, "n_test": self.n_test}
        if self.sse is not None:
            out["sse"] = self.sse
            out["sse_sum"] = self.sse_sum
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


def evaluate(y, p_hat, p_true=None) -> MetricReport:
    rep_sse = None
    rep_sum = None
    if p_true is not None:
        rep_sse = sse(p_hat, p_true)
        rep_sum = rep_sse * len(np.asarray(p_hat))
    return MetricReport(auc(y, p_hat), scaled_brier(y, p_hat), len(np.asarray(y)), rep_sse, rep_sum)
