"""Prediction metrics on a validation set."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit


@dataclass(frozen=True)
class MetricReport:
    avg_pred_var: float
    sse: float
    scaled_brier: float
    n_test: int


def avg_prediction_variance(gamma_cov, design) -> float:
    """Average of ``x_i' Cov(gamma) x_i``: the estimated variance of the
    logit-scale prediction, averaged over validation rows."""
    cov = np.asarray(gamma_cov, dtype=float)
    design = np.atleast_2d(np.asarray(design, dtype=float))
    if cov.shape != (design.shape[1], design.shape[1]):
        raise ValueError(f"covariance {cov.shape} does not match {design.shape[1]} columns")
    return float(np.mean(np.einsum("ij,jk,ik->i", design, cov, design)))


def sse(gamma, design, true_prob) -> float:
    """Mean squared difference between fitted and true probabilities.

    Named after the literature's "sum of squared errors" but averaged over rows.
    """
    p_hat = expit(np.asarray(design, dtype=float) @ np.asarray(gamma, dtype=float))
    return float(np.mean((p_hat - np.asarray(true_prob, dtype=float)) ** 2))


def scaled_brier(gamma, design, y) -> float:
    """Brier score divided by that of the constant prediction ``mean(y)``."""
    y = np.asarray(y, dtype=float)
    p_hat = expit(np.asarray(design, dtype=float) @ np.asarray(gamma, dtype=float))
    return brier_ratio(p_hat, y)


def brier_ratio(p_hat, y) -> float:
    y = np.asarray(y, dtype=float)
    denom = np.sum((y - y.mean()) ** 2)
    if denom == 0:
        raise ValueError("outcome is constant; scaled Brier score undefined")
    return float(np.sum((y - np.asarray(p_hat, dtype=float)) ** 2) / denom)


def evaluate(gamma, gamma_cov, design, y, true_prob=None) -> MetricReport:
    design = np.atleast_2d(np.asarray(design, dtype=float))
    return MetricReport(
        avg_pred_var=avg_prediction_variance(gamma_cov, design),
        sse=float("nan") if true_prob is None else sse(gamma, design, true_prob),
        scaled_brier=scaled_brier(gamma, design, y),
        n_test=design.shape[0],
    )
