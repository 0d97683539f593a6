"""Internal GLM fitting: likelihood, score, information, Newton-Raphson."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .data import Dataset, build_design


class FitError(RuntimeError):
    """A numerical fit failed (rank deficiency, separation, no convergence)."""


def _check_link(link):
    if link not in ("logit", "identity"):
        raise ValueError(f"unsupported link {link!r}")


def inverse_link(eta, link):
    _check_link(link)
    return expit(eta) if link == "logit" else np.asarray(eta, dtype=float)


def predict(gamma, design, link="logit"):
    """Linear predictors and mean responses for each design row."""
    gamma = np.asarray(gamma, dtype=float)
    design = np.atleast_2d(np.asarray(design, dtype=float))
    if not (np.all(np.isfinite(gamma)) and np.all(np.isfinite(design))):
        raise ValueError("non-finite input to predict")
    eta = design @ gamma
    return eta, inverse_link(eta, link)


def loglik(gamma, X, y, link="logit", dispersion=1.0):
    eta = X @ gamma
    if link == "logit":
        return float(np.sum(y * eta - np.logaddexp(0.0, eta)))
    _check_link(link)
    r = y - eta
    return float(-0.5 * np.sum(r * r) / dispersion
                 - 0.5 * len(y) * np.log(2 * np.pi * dispersion))


def score_info_arrays(gamma, X, y, link="logit", dispersion=1.0):
    """Mean score and mean negative Hessian of the log-likelihood."""
    eta = X @ gamma
    if not np.all(np.isfinite(eta)):
        raise FloatingPointError("non-finite linear predictor")
    n = len(y)
    if link == "logit":
        mu = expit(eta)
        w = mu * (1.0 - mu)
        score = X.T @ (y - mu) / n
        info = (X * w[:, None]).T @ X / n
    else:
        _check_link(link)
        score = X.T @ (y - eta) / (n * dispersion)
        info = X.T @ X / (n * dispersion)
    return score, info


def score_and_info(gamma, dataset: Dataset, link="logit", dispersion=1.0):
    """Per-observation averaged score vector and information matrix at ``gamma``."""
    gamma = np.asarray(gamma, dtype=float)
    if not np.all(np.isfinite(gamma)):
        raise ValueError("gamma must be finite")
    return score_info_arrays(gamma, build_design(dataset), dataset.outcome, link, dispersion)


@dataclass(frozen=True)
class GlmFit:
    gamma_hat: np.ndarray
    cov: np.ndarray
    link: str
    loglik: float
    converged: bool
    iterations: int
    dispersion: float = 1.0

    @property
    def se(self):
        return np.sqrt(np.diag(self.cov))


def _newton_logit(X, y, tol, max_iter, coef_cap, start=None):
    n, d = X.shape
    gamma = np.zeros(d) if start is None else np.array(start, dtype=float)
    ll = loglik(gamma, X, y)
    for it in range(1, max_iter + 1):
        score, info = score_info_arrays(gamma, X, y)
        if np.max(np.abs(score)) < tol:
            return gamma, ll, True, it - 1
        try:
            step = np.linalg.solve(info, score)
        except np.linalg.LinAlgError:
            raise FitError("singular information matrix") from None
        t = 1.0
        while True:
            cand = gamma + t * step
            cand_ll = loglik(cand, X, y)
            if cand_ll >= ll - 1e-12 * abs(ll) or t < 1e-10:
                break
            t *= 0.5
        rel = np.max(np.abs(cand - gamma)) / max(1.0, np.max(np.abs(gamma)))
        gamma, ll = cand, cand_ll
        if np.linalg.norm(gamma) > coef_cap:
            raise FitError("coefficients diverge; the outcome looks separated")
        if rel < 1e-10:
            return gamma, ll, True, it
    score, _ = score_info_arrays(gamma, X, y)
    return gamma, ll, bool(np.max(np.abs(score)) < tol), max_iter


def fit_arrays(X, y, link="logit", dispersion=1.0, tol=1e-8, max_iter=100,
               coef_cap=1e3) -> GlmFit:
    """Maximum likelihood fit on a raw design matrix (intercept included).

    ``dispersion=None`` estimates the residual variance for the identity link.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    _check_link(link)
    n, d = X.shape
    if np.linalg.matrix_rank(X) < d:
        raise FitError("design matrix is rank deficient")
    if link == "identity":
        gamma, *_ = np.linalg.lstsq(X, y, rcond=None)
        if dispersion is None:
            r = y - X @ gamma
            dispersion = float(r @ r / (n - d))
        cov = dispersion * np.linalg.inv(X.T @ X)
        return GlmFit(gamma, 0.5 * (cov + cov.T), link, loglik(gamma, X, y, link, dispersion),
                      True, 0, dispersion)

    gamma, ll, converged, iters = _newton_logit(X, y, tol, max_iter, coef_cap)
    if not converged:
        raise FitError(f"Newton-Raphson did not converge in {max_iter} iterations")
    mu = expit(X @ gamma)
    # every fitted probability at its outcome: the likelihood has no interior maximum
    if np.all(np.abs(y - mu) < 1e-4):
        raise FitError("outcome is perfectly separated")
    _, info = score_info_arrays(gamma, X, y)
    cov = np.linalg.inv(info * n)
    return GlmFit(gamma, 0.5 * (cov + cov.T), link, ll, converged, iters, 1.0)


def fit_mle(dataset: Dataset, link="logit", dispersion=1.0, **kwargs) -> GlmFit:
    """Fit the target model on the internal data alone."""
    if link == "logit":
        dataset.check_binary()
    return fit_arrays(build_design(dataset), dataset.outcome, link, dispersion, **kwargs)
