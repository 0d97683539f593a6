import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from metaeb import (eb_covariance, eb_point, estimate_blocks, fit_mle, joint_cov)
from metaeb.asymptotics import (AsymptoticBlocks, JointAsymptoticCov, eb_point_matrix,
                                large_discrepancy, psd_sqrt)
from metaeb.simulation import generate, get_scenario


@pytest.fixture(scope="module")
def scenario_one():
    data, specs, _, _ = generate(get_scenario("I"), 0, 0)
    internal = fit_mle(data)
    blocks = estimate_blocks(data, specs, internal.gamma_hat)
    return data, specs, internal, blocks, joint_cov(blocks, data.n)


def test_cross_block_equals_variance(scenario_one):
    *_, joint = scenario_one
    for k in range(joint.K):
        np.testing.assert_array_equal(joint.block(k, joint.K), joint.var_cml(k))
        np.testing.assert_array_equal(joint.block(joint.K, k), joint.var_cml(k).T)


def test_joint_is_symmetric_psd(scenario_one):
    *_, joint = scenario_one
    np.testing.assert_allclose(joint.matrix, joint.matrix.T, atol=1e-14)
    assert np.linalg.eigvalsh(joint.matrix).min() > -1e-10


def test_internal_block_matches_glm_covariance(scenario_one):
    _, _, internal, _, joint = scenario_one
    np.testing.assert_allclose(joint.var_internal, internal.cov, rtol=1e-10)


def test_external_information_reduces_variance(scenario_one):
    *_, joint = scenario_one
    for k in range(joint.K):
        gap = joint.var_internal - joint.var_cml(k)
        assert np.linalg.eigvalsh(gap).min() > -1e-12


def test_no_information_limit(scenario_one):
    """With vanishing C every constrained block collapses to the internal one."""
    _, _, _, blocks, _ = scenario_one
    zero = AsymptoticBlocks(blocks.B_hat, tuple(np.zeros_like(c) for c in blocks.C), blocks.L)
    joint = joint_cov(zero, 200)
    inv_b = np.linalg.inv(blocks.B_hat) / 200
    for j in range(joint.K + 1):
        for k in range(joint.K + 1):
            np.testing.assert_allclose(joint.block(j, k), inv_b, atol=1e-14)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(2, 10))
def test_eb_matrix_and_scalar_forms(seed, d):
    rng = np.random.default_rng(seed)
    A = rng.standard_normal((d, d))
    V = A @ A.T / d + 0.1 * np.eye(d)
    g_i, g_c = rng.standard_normal(d), rng.standard_normal(d)
    np.testing.assert_allclose(eb_point(g_i, g_c, V), eb_point_matrix(g_i, g_c, V),
                               atol=1e-10)


def test_eb_limits():
    V = np.diag([0.04, 0.09])
    g_c = np.array([0.1, 0.2])
    np.testing.assert_allclose(eb_point(g_c, g_c, V), g_c)
    far = g_c + np.array([50.0, -50.0])
    # a huge discrepancy sends the EB estimate to the internal fit; the gap
    # left is Z / (1 + Z'V^-1 Z)
    Z = far - g_c
    gap = Z / (1 + Z @ np.linalg.solve(V, Z))
    np.testing.assert_allclose(eb_point(far, g_c, V), far - gap, atol=1e-12)
    assert np.abs(gap).max() < 1e-3
    assert large_discrepancy(far, g_c, V)
    assert not large_discrepancy(g_c + 0.01, g_c, V)


def test_eb_covariance_deterministic(scenario_one):
    *_, joint = scenario_one
    a = eb_covariance(joint, draws=3000, seed=9)
    b = eb_covariance(joint, draws=3000, seed=9)
    c = eb_covariance(joint, draws=3000, seed=10)
    np.testing.assert_array_equal(a.matrix, b.matrix)
    assert not np.array_equal(a.matrix, c.matrix)
    assert a.mc_draws == 3000 and a.seed == 9


def test_eb_covariance_prefix_stable(scenario_one):
    """Chunked substreams: the first chunk of draws does not depend on the total."""
    from metaeb.asymptotics import CHUNK, _standard_normals
    a = _standard_normals(5, CHUNK, 4)
    b = _standard_normals(5, 3 * CHUNK, 4)
    np.testing.assert_array_equal(a, b[:CHUNK])


def test_eb_covariance_internal_block(scenario_one):
    *_, joint = scenario_one
    cov = eb_covariance(joint, draws=20000, seed=1)
    rel = np.diag(cov.block(cov.K, cov.K)) / np.diag(joint.var_internal)
    np.testing.assert_allclose(rel, 1.0, atol=0.05)
    for k in range(cov.K):
        # EB variance sits between the constrained and internal variances
        v = np.diag(cov.var(k))
        assert np.all(v >= 0.9 * np.diag(joint.var_cml(k)))
        assert np.all(v <= 1.1 * np.diag(joint.var_internal))


def test_zero_discrepancy_gives_internal():
    """When every constrained estimator equals the internal one, so do the EB draws."""
    d = 3
    V = np.diag([1.0, 2.0, 3.0])
    full = np.kron(np.ones((2, 2)), V)
    joint = JointAsymptoticCov(full, d, 1)
    cov = eb_covariance(joint, draws=500, seed=0)
    np.testing.assert_allclose(cov.var(0), cov.block(1, 1), atol=1e-12)


def test_centred_draws(scenario_one):
    _, specs, internal, _, joint = scenario_one
    gammas = [internal.gamma_hat] * joint.K
    a = eb_covariance(joint, gammas, internal.gamma_hat, draws=2000, seed=3)
    b = eb_covariance(joint, draws=2000, seed=3)
    # identical centres leave every Z draw unchanged
    np.testing.assert_allclose(a.matrix, b.matrix, atol=1e-12)
    with pytest.raises(ValueError, match="both"):
        eb_covariance(joint, gammas, None, draws=200)
    with pytest.raises(ValueError, match="constrained estimates"):
        eb_covariance(joint, gammas[:1], internal.gamma_hat, draws=200)


def test_too_few_draws(scenario_one):
    *_, joint = scenario_one
    with pytest.raises(ValueError):
        eb_covariance(joint, draws=50)


def test_psd_sqrt_clips():
    cov = np.array([[1.0, 0.0], [0.0, -1e-14]])
    root = psd_sqrt(cov)
    np.testing.assert_allclose(root @ root, np.diag([1.0, 0.0]), atol=1e-12)


@pytest.mark.slow
def test_bootstrap_agrees_at_large_n():
    """At n = 2000 the analytic variances match a parametric bootstrap."""
    from scipy.special import expit

    from metaeb import ExternalModelSpec, build_design, fit_cml, map_indices
    from metaeb.glm import fit_arrays
    from metaeb.simulation import _dataset

    scen = get_scenario("I", n_internal=2000)
    data, specs, _, _ = generate(scen, 0, 0)
    internal = fit_mle(data)
    X = build_design(data)
    mu = expit(X @ internal.gamma_hat)
    pos = map_indices(specs, data)
    world = [ExternalModelSpec(s.name, "logit", s.covariates,
                               fit_arrays(X[:, pos[k]], mu).gamma_hat)
             for k, s in enumerate(specs)]
    target = np.diag(joint_cov(estimate_blocks(data, world, internal.gamma_hat),
                               data.n).matrix)
    rng = np.random.default_rng(0)
    draws = []
    for _ in range(300):
        rows = rng.integers(0, data.n, data.n)
        boot = _dataset(scen, data.covariates[rows],
                        (rng.random(data.n) < mu[rows]).astype(float))
        fit = fit_mle(boot)
        draws.append(np.concatenate([fit_cml(boot, s, fit).gamma_cml for s in world]
                                    + [fit.gamma_hat]))
    ratio = np.var(np.array(draws), axis=0, ddof=1) / target
    # 300 refits carry roughly 8% Monte Carlo error on each variance
    assert np.all(np.abs(ratio - 1) < 0.25), ratio
