"""Self-checks for the test oracles against independent solvers."""

import cvxpy as cp
import numpy as np

from oracles import gaussian_posterior, naive_gmm_logpdf, tv1d_taut_string


def test_taut_string_matches_convex_solver():
    rng = np.random.default_rng(0)
    for lam in (0.05, 0.5, 2.0):
        y = np.cumsum(rng.standard_normal(60)) * 0.3 + rng.standard_normal(60)
        x = cp.Variable(60)
        cp.Problem(cp.Minimize(0.5 * cp.sum_squares(x - y) + lam * cp.norm1(cp.diff(x)))).solve(
            solver=cp.CLARABEL)
        assert np.max(np.abs(tv1d_taut_string(y, lam) - x.value)) <= 1e-5


def test_taut_string_edge_cases():
    y = np.array([1.0, 5.0, -2.0])
    np.testing.assert_allclose(tv1d_taut_string(y, 0.0), y)
    np.testing.assert_allclose(tv1d_taut_string(y, 100.0), np.full(3, y.mean()))


def test_gaussian_posterior_identity_shrinkage():
    y, mu = np.array([1.0, 2.0]), np.array([0.0, 1.0])
    # equal variances: the posterior mean is the midpoint
    np.testing.assert_allclose(gaussian_posterior(np.eye(2), y, 0.5, mu, 0.5), (y + mu) / 2)


def test_naive_logpdf_single_gaussian():
    x = np.array([0.3, -0.2])
    ref = -0.5 * (x @ x) / 2.0 - np.log(2 * np.pi * 2.0)
    assert abs(naive_gmm_logpdf(x, [1.0], [np.zeros(2)], [2.0]) - ref) <= 1e-12
