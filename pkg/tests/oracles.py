"""Independent reference implementations used only by the tests."""
from __future__ import annotations

import numpy as np
from scipy.optimize import minimize
from scipy.special import expit

from metaeb import Dataset, ExternalModelSpec
from metaeb.glm import fit_arrays


def tiny_instance(rng, n=30, shift=0.3):
    """One standard covariate, one new covariate, one external model on X.

    The external coefficients come from a large sample of the same
    population, then move by ``shift`` so the constraint binds.
    """
    corr = np.array([[1.0, 0.3], [0.3, 1.0]])
    root = np.linalg.cholesky(corr)
    gamma = np.array([-0.5, 0.8, 0.6])

    def draw(m):
        cov = rng.standard_normal((m, 2)) @ root.T
        y = (rng.random(m) < expit(gamma[0] + cov @ gamma[1:])).astype(float)
        return cov, y

    cov_e, y_e = draw(5000)
    beta = fit_arrays(np.column_stack([np.ones(len(y_e)), cov_e[:, 0]]), y_e).gamma_hat
    beta = beta + shift * rng.standard_normal(2)
    cov, y = draw(n)
    data = Dataset(y, cov, ("X", "B"), ("X",), ("B",))
    spec = ExternalModelSpec("ext", "logit", ("X",), beta)
    return data, spec


def brute_force_cml(X, y, Xk, beta, start):
    """Maximise the joint likelihood over coefficients and point masses.

    Solves the primal problem directly: variables are ``gamma`` and
    ``v = n p`` with ``sum v = n`` and ``sum v_i u_i(gamma) = 0``.
    """
    n, d = X.shape
    mu_beta = expit(Xk @ beta)

    def negll(theta):
        g, v = theta[:d], theta[d:]
        eta = X @ g
        return -(np.sum(y * eta - np.logaddexp(0.0, eta)) + np.sum(np.log(v / n)))

    def moment(theta):
        g, v = theta[:d], theta[d:]
        u = Xk * (expit(X @ g) - mu_beta)[:, None]
        return np.concatenate([[np.sum(v) - n], v @ u / n])

    x0 = np.concatenate([start, np.ones(n)])
    bounds = [(None, None)] * d + [(1e-6, n)] * n
    res = minimize(negll, x0, method="SLSQP", bounds=bounds,
                   constraints=[{"type": "eq", "fun": moment}],
                   options={"ftol": 1e-15, "maxiter": 2000})
    return res.x[:d], res


def grid_simplex_min(Q, step=0.005):
    """Minimum of ``w'Qw`` over a regular grid on the 3-simplex."""
    m = int(round(1 / step))
    i, j = np.meshgrid(np.arange(m + 1), np.arange(m + 1), indexing="ij")
    keep = i + j <= m
    W = np.column_stack([i[keep], j[keep], m - i[keep] - j[keep]]) / m
    vals = np.einsum("ij,jk,ik->i", W, Q, W)
    return float(vals.min()), W[np.argmin(vals)]
