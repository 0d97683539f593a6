"""Second-step combinations of the per-model empirical Bayes estimators."""
from __future__ import annotations

import itertools
import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .asymptotics import CovarianceRepairWarning, EbCovariance
from .glm import GlmFit

ENUMERATION_LIMIT = 20


@dataclass(frozen=True)
class CombinationResult:
    """Combined estimate.

    ``weights`` is a length-K vector for ``ivw`` and ``ocwe``; for
    ``sclearner`` it is a (K, d) matrix whose column j holds the weights
    used for coefficient j (all zero where the internal estimate is used).
    """

    method: str
    gamma_final: np.ndarray
    se_final: np.ndarray
    cov_final: np.ndarray
    weights: np.ndarray
    objective: float = float("nan")


def _weighted_cov(eb_cov: EbCovariance, w):
    d = eb_cov.dim
    W = np.kron(np.asarray(w, dtype=float)[None, :], np.eye(d))
    cov = W @ eb_cov.eb_matrix @ W.T
    return 0.5 * (cov + cov.T)


def prediction_variance_matrix(eb_cov: EbCovariance, design):
    """``Q[j, k] = trace(S Cov(EB_j, EB_k))`` with ``S = X'X`` over design rows."""
    design = np.asarray(design, dtype=float)
    S = design.T @ design
    K = eb_cov.K
    Q = np.empty((K, K))
    for j in range(K):
        for k in range(j, K):
            Q[j, k] = Q[k, j] = np.sum(S * eb_cov.block(j, k))
    return Q


def _project_simplex(v):
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - 1.0
    idx = np.arange(1, len(v) + 1)
    rho = np.nonzero(u - css / idx > 0)[0][-1]
    return np.maximum(v - css[rho] / (rho + 1.0), 0.0)


def _projected_gradient(Q, tol=1e-10, max_iter=100_000):
    K = len(Q)
    w = np.full(K, 1.0 / K)
    step = 1.0 / max(np.linalg.eigvalsh(Q)[-1], 1e-300) / 2.0
    for _ in range(max_iter):
        new = _project_simplex(w - step * 2.0 * Q @ w)
        if np.max(np.abs(new - w)) < tol:
            return new
        w = new
    return w


def simplex_qp(Q) -> np.ndarray:
    """Minimise ``w' Q w`` subject to ``w >= 0`` and ``sum(w) = 1``.

    For K <= 20 every support set is tried: the equality-constrained KKT
    system is solved on the support, infeasible candidates are dropped and the
    best objective wins, ties going to the lexicographically smallest support.
    Larger problems use projected gradient.
    """
    Q = np.asarray(Q, dtype=float)
    Q = 0.5 * (Q + Q.T)
    K = Q.shape[0]
    if Q.shape != (K, K) or K == 0:
        raise ValueError("Q must be a non-empty square matrix")
    if K > ENUMERATION_LIMIT:
        return _projected_gradient(Q)

    scale = max(float(np.max(np.abs(Q))), 1e-300)
    best_w, best_obj = None, np.inf
    supports = sorted(itertools.chain.from_iterable(
        itertools.combinations(range(K), r) for r in range(1, K + 1)))
    for support in supports:
        idx = list(support)
        m = len(idx)
        kkt = np.zeros((m + 1, m + 1))
        kkt[:m, :m] = 2.0 * Q[np.ix_(idx, idx)]
        kkt[:m, m] = 1.0
        kkt[m, :m] = 1.0
        rhs = np.zeros(m + 1)
        rhs[m] = 1.0
        sol, *_ = np.linalg.lstsq(kkt, rhs, rcond=None)
        if np.max(np.abs(kkt @ sol - rhs)) > 1e-8:
            continue
        ws = sol[:m]
        if np.any(ws < -1e-12):
            continue
        w = np.zeros(K)
        w[idx] = np.clip(ws, 0.0, None)
        w /= w.sum()
        obj = float(w @ Q @ w)
        if obj < best_obj - 1e-12 * scale:
            best_w, best_obj = w, obj
    if best_w is None:
        raise ArithmeticError("no feasible support found; Q is numerically corrupt")
    return best_w


def _check_inputs(eb_estimates, eb_cov):
    est = [np.asarray(e, dtype=float) for e in eb_estimates]
    if not est:
        raise ValueError("at least one EB estimate is required")
    if len(est) != eb_cov.K:
        raise ValueError("number of estimates does not match the covariance")
    return np.array(est)


def combine_ivw(eb_estimates, eb_cov: EbCovariance, design) -> CombinationResult:
    """Weights proportional to the inverse total prediction variance of each EB estimate."""
    est = _check_inputs(eb_estimates, eb_cov)
    pv = np.diag(prediction_variance_matrix(eb_cov, design))
    if np.any(pv <= 0):
        raise ValueError("zero prediction variance; weights undefined")
    w = (1.0 / pv) / np.sum(1.0 / pv)
    cov = _weighted_cov(eb_cov, w)
    return CombinationResult("ivw", w @ est, np.sqrt(np.clip(np.diag(cov), 0, None)), cov, w)


def combine_ocwe(eb_estimates, eb_cov: EbCovariance, design) -> CombinationResult:
    """Simplex weights minimising the total estimated prediction variance."""
    est = _check_inputs(eb_estimates, eb_cov)
    Q = prediction_variance_matrix(eb_cov, design)
    vals, vecs = np.linalg.eigh(Q)
    if vals[0] < -1e-6 * max(np.sum(np.abs(vals)), 1e-300):
        raise ValueError("prediction-variance matrix is materially indefinite")
    if vals[0] < 0:
        if -vals[0] > 1e-8 * np.sum(np.abs(vals)):
            warnings.warn("clipping negative eigenvalues of Q", CovarianceRepairWarning,
                          stacklevel=2)
        Q = (vecs * np.clip(vals, 0.0, None)) @ vecs.T
    w = simplex_qp(Q)
    cov = _weighted_cov(eb_cov, w)
    return CombinationResult("ocwe", w @ est, np.sqrt(np.clip(np.diag(cov), 0, None)), cov, w,
                             float(w @ Q @ w))


def combine_sclearner(eb_estimates, eb_cov: EbCovariance, positions: Sequence,
                      internal_fit: GlmFit) -> CombinationResult:
    """Per-coefficient inverse-variance weighting over the models that used each covariate.

    ``positions[k]`` lists the target coefficients informed by model k (an
    :class:`~metaeb.data.IndexMap` entry; position 0 is the intercept).
    Coefficients no model informs are taken from the internal fit.
    """
    est = _check_inputs(eb_estimates, eb_cov)
    K, d = est.shape
    gamma_i = np.asarray(internal_fit.gamma_hat, dtype=float)
    member = np.zeros((K, d), dtype=bool)
    for k in range(K):
        member[k, np.asarray(positions[k], dtype=int)] = True
    variances = np.array([np.diag(eb_cov.var(k)) for k in range(K)])
    if np.any(variances[member] <= 0):
        raise ValueError("non-positive variance for a contributing coefficient")

    weights = np.zeros((K, d))
    # linear map from the stacked (EB_1..EB_K, I) vector to the combined estimate
    A = np.zeros((d, (K + 1) * d))
    for j in range(d):
        contrib = np.nonzero(member[:, j])[0]
        if len(contrib) == 0:
            A[j, K * d + j] = 1.0
            continue
        inv = 1.0 / variances[contrib, j]
        weights[contrib, j] = inv / inv.sum()
        for k in contrib:
            A[j, k * d + j] = weights[k, j]
    stacked = np.concatenate([est.reshape(-1), gamma_i])
    gamma = A @ stacked
    omega = np.array(eb_cov.matrix)
    omega[K * d:, K * d:] = internal_fit.cov
    cov = A @ omega @ A.T
    cov = 0.5 * (cov + cov.T)
    return CombinationResult("sclearner", gamma, np.sqrt(np.clip(np.diag(cov), 0, None)), cov,
                             weights)
