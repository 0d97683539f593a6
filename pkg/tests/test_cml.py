import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from metaeb import ExternalModelSpec, build_design, fit_cml, fit_mle, map_indices
from metaeb.cml import _embedded, _Profile, solve_multiplier
from metaeb.glm import fit_arrays, loglik
from metaeb.simulation import generate, get_scenario

sys.path.insert(0, str(Path(__file__).parent))
from oracles import brute_force_cml, tiny_instance  # noqa: E402


@pytest.mark.parametrize("seed", range(5))
def test_matches_brute_force(seed):
    rng = np.random.default_rng(100 + seed)
    data, spec = tiny_instance(rng, n=40)
    internal = fit_mle(data)
    fit = fit_cml(data, spec, internal)
    X = build_design(data)
    Xk = X[:, map_indices([spec], data)[0]]
    ref, _ = brute_force_cml(X, data.outcome, Xk, spec.coefficients, internal.gamma_hat)
    np.testing.assert_allclose(fit.gamma_cml, ref, atol=1e-4)


def test_constraint_and_masses():
    data, specs, _, _ = generate(get_scenario("I"), 0, 0)
    internal = fit_mle(data)
    for spec in specs:
        fit = fit_cml(data, spec, internal)
        assert fit.converged and not fit.degenerate
        assert fit.constraint_norm < 1e-6
        assert abs(fit.p_weights.sum() - 1) < 1e-10
        assert np.all(fit.p_weights > 0)
        assert all(b >= a - 1e-9 for a, b in zip(fit.objective_trace, fit.objective_trace[1:]))


def test_compatible_model_returns_internal_fit():
    data, specs, _, _ = generate(get_scenario("I"), 0, 1)
    internal = fit_mle(data)
    X = build_design(data)
    pos = map_indices(specs, data)[2]
    spec = ExternalModelSpec("nested", "logit", specs[2].covariates,
                             fit_arrays(X[:, pos], data.outcome).gamma_hat)
    fit = fit_cml(data, spec, internal)
    np.testing.assert_allclose(fit.gamma_cml, internal.gamma_hat, atol=1e-6)
    np.testing.assert_allclose(fit.lam, 0.0, atol=1e-6)


def test_external_information_shrinks_variance_direction():
    """A constraint from a far-off model pulls the fit toward it."""
    data, specs, _, _ = generate(get_scenario("I"), 0, 2)
    internal = fit_mle(data)
    spec = specs[0]
    moved = ExternalModelSpec("moved", "logit", spec.covariates,
                              spec.coefficients + np.array([0.3, 0.0, 0.0]))
    a = fit_cml(data, spec, internal).gamma_cml
    b = fit_cml(data, moved, internal).gamma_cml
    assert b[0] > a[0]


def test_embedded_point_is_always_feasible():
    """Coefficients equal to the external model on its covariates and zero
    elsewhere make every moment vanish, so the profile equals the likelihood."""
    data, specs, _, _ = generate(get_scenario("I"), 0, 34)
    internal = fit_mle(data)
    X = build_design(data)
    for spec, pos in zip(specs, map_indices(specs, data)):
        point = _embedded(internal.gamma_hat, pos, spec.coefficients)
        prof = _Profile(X, data.outcome, X[:, pos], spec.coefficients, "logit", 1.0)
        np.testing.assert_allclose(prof.u(point)[0], 0.0, atol=1e-15)
        val, inner, _ = prof.value(point)
        assert val == pytest.approx(loglik(point, X, data.outcome), abs=1e-12)
        np.testing.assert_allclose(inner.lam, 0.0)
        fit = fit_cml(data, spec, internal)
        # the embedded point bounds the constrained optimum from below
        assert fit.objective_trace[-1] >= val - 1e-9


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 4))
def test_multiplier_solves_dual(seed, dim):
    rng = np.random.default_rng(seed)
    U = rng.standard_normal((50, dim)) + 0.1 * rng.standard_normal(dim)
    sol = solve_multiplier(U)
    p = 1.0 / (len(U) * sol.t)
    assert np.all(sol.t > 0)
    np.testing.assert_allclose(p @ U, 0.0, atol=1e-9)
    np.testing.assert_allclose(p.sum(), 1.0, atol=1e-9)
