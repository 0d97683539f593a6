"""Constrained semiparametric maximum likelihood with one external model.

The external coefficients enter through the moment condition

    sum_i p_i u_i(gamma) = 0,   u_i = E_{Y|X_i,B_i; gamma}[U_beta(Y | X_k,i)],

with the empirical masses ``p_i`` profiled out by the usual empirical
likelihood dual: ``p_i = 1 / (n (1 + lambda' u_i))``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .data import Dataset, ExternalModelSpec, build_design, map_indices
from .glm import FitError, GlmFit, inverse_link, loglik, score_info_arrays

FEASIBILITY_FLOOR = 1e-10


class InfeasibleConstraint(FitError):
    """Zero is outside the convex hull of the constraint vectors."""


def _check_pair(internal_link, external_link):
    if (internal_link, external_link) not in (("logit", "logit"), ("identity", "identity")):
        raise ValueError(f"unsupported link pairing {internal_link}/{external_link}")


def _mean_derivs(eta, link):
    """First and second derivative of the inverse link at ``eta``."""
    if link == "logit":
        mu = expit(eta)
        d1 = mu * (1.0 - mu)
        return mu, d1, d1 * (1.0 - 2.0 * mu)
    return eta, np.ones_like(eta), np.zeros_like(eta)


def conditional_external_score(gamma, beta_k, design, sub_design, links=("logit", "logit")):
    """Expected external score given the full covariates, one row per observation.

    Parameters
    ----------
    gamma : target coefficients, length ``design.shape[1]``.
    beta_k : external coefficients, length ``sub_design.shape[1]``.
    design : full design rows ``[1, X, B]`` (a single row is accepted).
    sub_design : the matching external rows ``[1, X_k]``.
    links : (internal link, external link).

    Both supported pairings have canonical external scores, so the expectation
    reduces to ``x_k * (mu_gamma(row) - mu_beta(x_k))``.
    """
    _check_pair(*links)
    single = np.ndim(design) == 1
    design = np.atleast_2d(np.asarray(design, dtype=float))
    sub_design = np.atleast_2d(np.asarray(sub_design, dtype=float))
    mu_g = inverse_link(design @ np.asarray(gamma, dtype=float), links[0])
    mu_b = inverse_link(sub_design @ np.asarray(beta_k, dtype=float), links[1])
    out = sub_design * (mu_g - mu_b)[:, None]
    return out[0] if single else out


@dataclass
class InnerSolution:
    lam: np.ndarray
    t: np.ndarray          # 1 + lambda' u_i
    log_el: float          # sum_i log t_i
    constraint: np.ndarray  # sum_i p_i u_i
    iterations: int


def solve_multiplier(U, lam0=None, tol=1e-12, max_iter=200) -> InnerSolution:
    """Maximise ``sum log(1 + lam' u_i)`` over ``lam`` (concave dual).

    Raises :class:`InfeasibleConstraint` when the maximiser does not exist.
    """
    n, m = U.shape
    lam = np.zeros(m) if lam0 is None else np.array(lam0, dtype=float)
    t = 1.0 + U @ lam
    if np.any(t <= FEASIBILITY_FLOOR):
        lam = np.zeros(m)
        t = np.ones(n)
    obj = float(np.sum(np.log(t)))
    for it in range(1, max_iter + 1):
        grad = U.T @ (1.0 / t)
        if np.max(np.abs(grad)) / n < tol:
            return InnerSolution(lam, t, obj, grad / n, it - 1)
        Ut = U / t[:, None]
        hess = Ut.T @ Ut
        try:
            step = np.linalg.solve(hess, grad)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(hess, grad, rcond=None)[0]
        s = 1.0
        while s > 1e-12:
            cand = lam + s * step
            t_c = 1.0 + U @ cand
            if np.all(t_c > FEASIBILITY_FLOOR):
                obj_c = float(np.sum(np.log(t_c)))
                if obj_c >= obj - 1e-14 * max(1.0, abs(obj)):
                    break
            s *= 0.5
        else:
            break
        lam, t, obj = cand, t_c, obj_c
        if obj > n * 25.0:
            break
    grad = U.T @ (1.0 / t)
    if np.max(np.abs(grad)) / n < 1e-8:
        return InnerSolution(lam, t, obj, grad / n, max_iter)
    raise InfeasibleConstraint(
        "multiplier diverges: the external model is incompatible with the internal data"
    )


@dataclass
class CmlFit:
    gamma_cml: np.ndarray
    lam: np.ndarray
    p_weights: np.ndarray
    converged: bool
    iterations: int
    constraint: np.ndarray
    objective_trace: list = field(default_factory=list)
    name: str = ""
    degenerate: bool = False

    @property
    def constraint_norm(self):
        """Norm of ``sum_i p_i u_i`` at the solution."""
        return float(np.linalg.norm(self.constraint))


class _Profile:
    """Profile log-likelihood ``l(gamma) - sum log(1 + lam(gamma)' u_i(gamma))``."""

    def __init__(self, X, y, Xk, beta, link, dispersion):
        self.X, self.y, self.Xk, self.beta = X, y, Xk, beta
        self.link = link
        self.dispersion = dispersion
        self.mu_beta = inverse_link(Xk @ beta, link)
        self._lam = None

    def u(self, gamma):
        mu, d1, d2 = _mean_derivs(self.X @ gamma, self.link)
        return self.Xk * (mu - self.mu_beta)[:, None], d1, d2

    def value(self, gamma, lam0=None):
        U, d1, d2 = self.u(gamma)
        inner = solve_multiplier(U, self._lam if lam0 is None else lam0)
        ll = loglik(gamma, self.X, self.y, self.link, self.dispersion)
        return ll - inner.log_el, inner, (U, d1, d2)

    def derivatives(self, gamma, inner, cache):
        """Gradient, exact Hessian and a negative-definite scoring matrix."""
        U, d1, d2 = cache
        X, Xk, lam, t = self.X, self.Xk, inner.lam, inner.t
        n = len(self.y)
        s_mean, info = score_info_arrays(gamma, X, self.y, self.link, self.dispersion)
        c = Xk @ lam
        grad = n * s_mean - X.T @ (c * d1 / t)
        # d lam / d gamma = S^{-1} R
        Ut = U / t[:, None]
        S = Ut.T @ Ut
        R = (Xk * (d1 / t)[:, None]).T @ X - Ut.T @ (X * (c * d1 / t)[:, None])
        SinvR = np.linalg.solve(S, R)
        cross = X * (c * d1 / t)[:, None]
        hess = (-n * info - (X * (c * d2 / t)[:, None]).T @ X + cross.T @ cross
                - R.T @ SinvR)
        scoring = -n * info - R.T @ SinvR
        return grad, 0.5 * (hess + hess.T), 0.5 * (scoring + scoring.T)


def _embedded(gamma_i, positions, beta):
    """Target coefficients reproducing the external model exactly (all u_i = 0)."""
    out = np.zeros_like(gamma_i)
    out[positions] = beta
    return out


def _start_points(gamma_i, positions, beta):
    embedded = _embedded(gamma_i, positions, beta)
    yield gamma_i
    for s in (0.25, 0.5, 0.75, 0.9):
        yield (1 - s) * gamma_i + s * embedded


def fit_cml(dataset: Dataset, spec: ExternalModelSpec, internal_fit: GlmFit,
            tol=1e-8, max_iter=100) -> CmlFit:
    """Maximise the internal likelihood subject to the external model's score constraint.

    Starts from the internal MLE with ``lambda = 0``. The outer step is Newton
    on the profile likelihood, falling back to a Fisher-scoring direction
    where the profile Hessian is not negative definite.

    The coefficient vector that reproduces the external model exactly (zero
    on every covariate it lacks) makes every ``u_i`` vanish, so it is always
    feasible with uniform masses. When its likelihood is at least the profile
    optimum the fit returns it and sets ``degenerate``; this happens when the
    internal data carry almost no signal beyond the external model.
    """
    link = internal_fit.link
    _check_pair(link, spec.link)
    positions = map_indices([spec], dataset)[0]
    X = build_design(dataset)
    Xk = X[:, positions]
    y = dataset.outcome
    n = len(y)
    if Xk.shape[1] >= n:
        raise ValueError("constraint dimension must be smaller than n")
    prof = _Profile(X, y, Xk, spec.coefficients, link, internal_fit.dispersion)

    gamma = None
    for start in _start_points(np.asarray(internal_fit.gamma_hat, dtype=float),
                               positions, spec.coefficients):
        try:
            val, inner, cache = prof.value(start, lam0=np.zeros(Xk.shape[1]))
        except InfeasibleConstraint:
            continue
        gamma = start
        break
    if gamma is None:
        raise InfeasibleConstraint(f"{spec.name}: no feasible starting point")
    prof._lam = inner.lam

    trace = [val]
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        grad, hess, scoring = prof.derivatives(gamma, inner, cache)
        if np.max(np.abs(grad)) / n < tol:
            converged = True
            it -= 1
            break
        try:
            np.linalg.cholesky(-hess)
            step = np.linalg.solve(-hess, grad)
        except np.linalg.LinAlgError:
            step = np.linalg.solve(-scoring, grad)
        # predicted ascent at roundoff level: optimal to machine precision even
        # when an ill-conditioned direction keeps the gradient just above tol
        if float(grad @ step) < 1e-12 * max(1.0, abs(val)):
            converged = True
            break
        s = 1.0
        accepted = False
        while s > 1e-10:
            cand = gamma + s * step
            try:
                cand_val, cand_inner, cand_cache = prof.value(cand)
            except InfeasibleConstraint:
                s *= 0.5
                continue
            if cand_val >= val - 1e-12 * max(1.0, abs(val)):
                accepted = True
                break
            s *= 0.5
        if not accepted:
            break
        rel = np.max(np.abs(cand - gamma)) / max(1.0, np.max(np.abs(gamma)))
        gamma, val, inner, cache = cand, cand_val, cand_inner, cand_cache
        prof._lam = inner.lam
        trace.append(val)
        if rel < 1e-13:
            break
    grad, _, _ = prof.derivatives(gamma, inner, cache)
    converged = converged or np.max(np.abs(grad)) / n < tol

    embedded = _embedded(np.asarray(internal_fit.gamma_hat, dtype=float), positions,
                         spec.coefficients)
    ll_embedded = loglik(embedded, X, y, link, internal_fit.dispersion)
    # the iterates can also stall while collapsing onto that point, where the
    # multiplier is not identified
    collapsed = not converged and np.max(np.abs(gamma - embedded)) < 1e-3
    if collapsed or ll_embedded >= val - 1e-10 * max(1.0, abs(val)):
        p = np.full(n, 1.0 / n)
        U0 = prof.u(embedded)[0]
        return CmlFit(embedded, np.zeros(Xk.shape[1]), p, True, it, p @ U0, trace,
                      spec.name, degenerate=True)
    if not converged:
        raise FitError(f"{spec.name}: constrained fit did not converge "
                       f"(max |gradient|/n = {np.max(np.abs(grad)) / n:.2e})")

    p = 1.0 / (n * inner.t)
    p = p / p.sum()
    return CmlFit(gamma, inner.lam, p, converged, it, p @ cache[0], trace, spec.name)
