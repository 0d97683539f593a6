"""Joint large-sample covariance of the constrained and internal estimators,
and Monte Carlo covariance of the empirical Bayes estimators built from them.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .cml import _mean_derivs, _check_pair
from .data import Dataset, ExternalModelSpec, build_design, map_indices
from .glm import inverse_link, score_info_arrays

CHUNK = 1024


class CovarianceRepairWarning(UserWarning):
    """Eigenvalue clipping changed a covariance matrix materially."""


@dataclass(frozen=True)
class AsymptoticBlocks:
    """Sample analogues of the information ``B``, ``C_j`` and ``L_jk``.

    ``L[j][k]`` is the average of ``u_j u_k'`` over internal rows.
    """

    B_hat: np.ndarray
    C: tuple
    L: tuple

    @property
    def K(self):
        return len(self.C)


def estimate_blocks(dataset: Dataset, specs: Sequence[ExternalModelSpec], gamma,
                    link="logit", dispersion=1.0) -> AsymptoticBlocks:
    """Evaluate the information blocks at ``gamma`` by averaging over internal rows."""
    gamma = np.asarray(gamma, dtype=float)
    if not np.all(np.isfinite(gamma)):
        raise ValueError("gamma must be finite")
    X = build_design(dataset)
    n = len(X)
    _, B_hat = score_info_arrays(gamma, X, dataset.outcome, link, dispersion)
    imap = map_indices(specs, dataset)
    mu, d1, _ = _mean_derivs(X @ gamma, link)
    U, C = [], []
    for k, spec in enumerate(specs):
        _check_pair(link, spec.link)
        Xk = X[:, imap[k]]
        U.append(Xk * (mu - inverse_link(Xk @ spec.coefficients, spec.link))[:, None])
        C.append((Xk * d1[:, None]).T @ X / n)
    L = tuple(tuple(U[j].T @ U[k] / n for k in range(len(U))) for j in range(len(U)))
    for k in range(len(U)):
        if np.linalg.matrix_rank(L[k][k]) < L[k][k].shape[0]:
            raise np.linalg.LinAlgError(f"{specs[k].name}: singular L block")
    return AsymptoticBlocks(B_hat, tuple(C), L)


@dataclass(frozen=True)
class JointAsymptoticCov:
    """Covariance of ``(gamma_CML_1, ..., gamma_CML_K, gamma_I)`` on the per-n scale."""

    matrix: np.ndarray
    dim: int
    K: int

    def block(self, a, b):
        """Block for estimators ``a`` and ``b``; index ``K`` is the internal MLE."""
        d = self.dim
        return self.matrix[a * d:(a + 1) * d, b * d:(b + 1) * d]

    def var_cml(self, k):
        return self.block(k, k)

    @property
    def var_internal(self):
        return self.block(self.K, self.K)


def _sym(a):
    return 0.5 * (a + a.T)


def joint_cov(blocks: AsymptoticBlocks, n: int) -> JointAsymptoticCov:
    """Assemble the full block covariance and divide by ``n``."""
    B, K = blocks.B_hat, blocks.K
    d = B.shape[0]
    Linv_C = [np.linalg.solve(blocks.L[k][k], blocks.C[k]) for k in range(K)]
    var = []
    for k in range(K):
        M = B + blocks.C[k].T @ Linv_C[k]
        try:
            np.linalg.cholesky(M)
        except np.linalg.LinAlgError:
            raise np.linalg.LinAlgError(f"B + C'L^-1 C not invertible for model {k}") from None
        var.append(_sym(np.linalg.inv(M)))
    full = np.zeros(((K + 1) * d, (K + 1) * d))

    def put(a, b, m):
        full[a * d:(a + 1) * d, b * d:(b + 1) * d] = m
        if a != b:
            full[b * d:(b + 1) * d, a * d:(a + 1) * d] = m.T

    for j in range(K):
        put(j, j, var[j] / n)
        put(j, K, var[j] / n)
        for k in range(j + 1, K):
            middle = B + Linv_C[j].T @ blocks.L[j][k] @ Linv_C[k]
            put(j, k, var[j] @ middle @ var[k] / n)
    put(K, K, _sym(np.linalg.inv(B)) / n)
    return JointAsymptoticCov(full, d, K)


def psd_sqrt(cov, name="covariance"):
    """Symmetric square root after clipping negative eigenvalues at zero."""
    cov = _sym(np.asarray(cov, dtype=float))
    vals, vecs = np.linalg.eigh(cov)
    moved = float(np.sum(np.clip(-vals, 0.0, None)))
    trace = float(np.sum(np.abs(vals)))
    if trace > 0 and moved > 0.01 * trace:
        warnings.warn(f"{name}: eigenvalue repair moved {moved / trace:.1%} of the trace",
                      CovarianceRepairWarning, stacklevel=2)
    return (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T


def eb_point(gamma_i, gamma_cml, V_I):
    """Empirical Bayes estimator from the discrepancy ``Z = gamma_I - gamma_CML``."""
    gamma_i = np.asarray(gamma_i, dtype=float)
    gamma_cml = np.asarray(gamma_cml, dtype=float)
    Z = gamma_i - gamma_cml
    try:
        quad = float(Z @ np.linalg.solve(V_I, Z))
    except np.linalg.LinAlgError:
        raise np.linalg.LinAlgError("V_I is singular") from None
    return gamma_cml + Z * (1.0 - 1.0 / (1.0 + quad))


def eb_point_matrix(gamma_i, gamma_cml, V_I):
    """Matrix-weighted form ``A(S+A)^-1 g_I + S(S+A)^-1 g_CML`` with ``A = ZZ'``."""
    Z = np.asarray(gamma_i, dtype=float) - np.asarray(gamma_cml, dtype=float)
    A = np.outer(Z, Z)
    total_inv = np.linalg.inv(V_I + A)
    return A @ total_inv @ gamma_i + V_I @ total_inv @ gamma_cml


def shrinkage_f(Z, V_I_inv):
    """Row-wise ``f(Z) = Z (1 - 1 / (1 + Z' V_I^-1 Z))``."""
    quad = np.einsum("ij,jk,ik->i", Z, V_I_inv, Z)
    return Z * (quad / (1.0 + quad))[:, None]


def large_discrepancy(gamma_i, gamma_cml, V_I, factor=3.0):
    """True when ``||Z||`` exceeds ``factor * sqrt(trace V_I)`` (EB SEs likely too small)."""
    Z = np.asarray(gamma_i) - np.asarray(gamma_cml)
    return bool(np.linalg.norm(Z) > factor * np.sqrt(np.trace(V_I)))


@dataclass(frozen=True)
class EbCovariance:
    """Stacked covariance of ``(gamma_EB_1, ..., gamma_EB_K, gamma_I)``.

    The internal estimator rides along as block ``K`` so that estimators mixing
    EB coefficients with internal ones get a full covariance.
    """

    matrix: np.ndarray
    dim: int
    K: int
    mc_draws: int
    seed: int

    def block(self, j, k):
        d = self.dim
        return self.matrix[j * d:(j + 1) * d, k * d:(k + 1) * d]

    def var(self, k):
        return self.block(k, k)

    @property
    def eb_matrix(self):
        """Covariance of the EB estimators only."""
        m = self.K * self.dim
        return self.matrix[:m, :m]


def _standard_normals(seed, draws, width):
    """Standard normal draws in fixed-size chunks, each from its own substream."""
    out = np.empty((draws, width))
    n_chunks = -(-draws // CHUNK)
    for c, child in enumerate(np.random.SeedSequence(seed).spawn(n_chunks)):
        lo = c * CHUNK
        hi = min(draws, lo + CHUNK)
        out[lo:hi] = np.random.Generator(np.random.Philox(child)).standard_normal((hi - lo, width))
    return out


def eb_covariance(joint: JointAsymptoticCov, gamma_cml=None, gamma_i=None, draws=5000, seed=0,
                  V_I=None) -> EbCovariance:
    """Monte Carlo covariance of the EB estimators.

    Draws the stacked ``(CML_1..K, I)`` vector from a normal with the joint
    covariance, maps each draw through the EB transformation and returns the
    empirical covariance of the EB draws. The draws are centred at the fitted
    ``(gamma_cml, gamma_i)`` when both are given, so each ``Z_k`` is centred at
    its observed value; otherwise they have mean zero. ``V_I`` defaults to the
    internal block of ``joint``.
    """
    if draws < 100:
        raise ValueError("at least 100 Monte Carlo draws are required")
    d, K = joint.dim, joint.K
    root = psd_sqrt(joint.matrix, "joint covariance")
    sample = _standard_normals(seed, draws, root.shape[0]) @ root
    if (gamma_cml is None) != (gamma_i is None):
        raise ValueError("give both gamma_cml and gamma_i, or neither")
    if gamma_cml is not None:
        if len(gamma_cml) != K:
            raise ValueError(f"expected {K} constrained estimates, got {len(gamma_cml)}")
        centre = np.concatenate([np.asarray(g, dtype=float) for g in gamma_cml]
                                + [np.asarray(gamma_i, dtype=float)])
        if centre.shape != (root.shape[0],):
            raise ValueError("estimate dimensions do not match the joint covariance")
        sample += centre
    V_I = joint.var_internal if V_I is None else np.asarray(V_I, dtype=float)
    V_inv = np.linalg.inv(V_I)
    internal = sample[:, K * d:]
    stacked = np.empty((draws, (K + 1) * d))
    for k in range(K):
        cml = sample[:, k * d:(k + 1) * d]
        stacked[:, k * d:(k + 1) * d] = cml + shrinkage_f(internal - cml, V_inv)
    stacked[:, K * d:] = internal
    cov = _sym(np.cov(stacked, rowvar=False))
    return EbCovariance(cov, d, K, draws, seed)
