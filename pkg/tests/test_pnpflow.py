import numpy as np
import pytest

from invbench.linops import Identity, MatrixOperator, Radon, RadonGeometry, fbp, op_norm, uniform_angles
from invbench.pnpflow import PnpFlowConfig, pnpflow, step_sizes
from invbench.priors import FlowPrior, GmmPrior, gmm_flow_velocity


def _separated_flow(n=2):
    means = np.array([[3.0] * n, [-3.0] * n, [3.0] + [-3.0] * (n - 1)])
    return FlowPrior(GmmPrior([0.3, 0.3, 0.4], means, [0.05, 0.05, 0.05]))


def test_step_sizes():
    t, g = step_sizes(PnpFlowConfig(gamma=2.0, steps=10, alpha=1.5))
    assert t[0] == 0.0 and t[-1] == 1.0 and len(t) == 11
    assert np.all(np.diff(g) <= 0) and g[-1] == 0.0 and g[0] == 2.0


def test_config_validation():
    for kw in ({"gamma": 0.0}, {"steps": 0}, {"n_noise": 0}, {"variant": "other"}):
        with pytest.raises(ValueError):
            PnpFlowConfig(**kw)


@pytest.mark.parametrize("variant", ["explicit", "implicit"])
def test_tiny_gamma_is_flow_sampling(variant):
    fp = _separated_flow()
    A = Identity((2,))
    y = np.array([10.0, 10.0])
    s = np.sqrt(0.05)
    for seed in range(10):
        x = pnpflow(y, A, fp, PnpFlowConfig(gamma=1e-12, steps=100, variant=variant),
                    np.random.default_rng(seed), np.zeros(2))
        d = np.min(np.linalg.norm(fp.base.means - x, axis=1))
        assert d < 3 * s


def test_explicit_implicit_agree_for_tiny_gamma():
    rng = np.random.default_rng(1)
    M = rng.standard_normal((5, 4))
    A = MatrixOperator(M)
    fp = FlowPrior(GmmPrior([0.5, 0.5], rng.standard_normal((2, 4)), [0.3, 0.2]))
    y = rng.standard_normal(5)
    g = 1e-6 / op_norm(A) ** 2
    x0 = A.adjoint(y)
    a = pnpflow(y, A, fp, PnpFlowConfig(gamma=g, steps=50, variant="explicit"), np.random.default_rng(3), x0)
    b = pnpflow(y, A, fp, PnpFlowConfig(gamma=g, steps=50, variant="implicit"), np.random.default_rng(3), x0)
    assert np.max(np.abs(a - b)) <= 1e-4


def test_single_noise_draw_is_plain_loop():
    rng = np.random.default_rng(2)
    fp = FlowPrior(GmmPrior([0.4, 0.6], rng.standard_normal((2, 3)), [0.1, 0.2]))
    A = Identity((3,))
    y = rng.standard_normal(3)
    cfg = PnpFlowConfig(gamma=0.5, steps=20, n_noise=1, variant="explicit")
    out = pnpflow(y, A, fp, cfg, np.random.default_rng(4), np.zeros(3))
    r = np.random.default_rng(4)
    x = np.zeros(3)
    ts, gs = step_sizes(cfg)
    for t, g in zip(ts[:-1], gs[:-1]):
        z = x - g * (x - y)
        zt = (1 - t) * r.standard_normal((1, 3)) + t * z
        x = (zt + (1 - t) * gmm_flow_velocity(fp, zt, t))[0]
    x = x - gs[-1] * (x - y)
    assert np.max(np.abs(out - x)) <= 1e-12


def test_implicit_bounded_for_large_gamma():
    geom = RadonGeometry(16, uniform_angles(32))
    A = Radon(geom)
    rng = np.random.default_rng(5)
    fp = FlowPrior(GmmPrior([0.5, 0.5], rng.uniform(0, 1, (2, 256)), [0.002, 0.002], (16, 16)))
    x_true = fp.base.sample(rng).reshape(16, 16)
    y = A.apply(x_true) + 0.001 * rng.standard_normal(geom.sino_shape)
    x0 = fbp(y, geom)
    for gamma in (10.0, 1e2, 1e3, 1e4, 1e5):
        x = pnpflow(y, A, fp, PnpFlowConfig(gamma=gamma, steps=30), np.random.default_rng(0), x0)
        assert np.all(np.isfinite(x))
        assert np.max(np.abs(x)) < 10.0


def test_deterministic_per_seed():
    fp = _separated_flow(3)
    A = Identity((3,))
    cfg = PnpFlowConfig(steps=20)
    a = pnpflow(np.ones(3), A, fp, cfg, np.random.default_rng(8), np.zeros(3))
    b = pnpflow(np.ones(3), A, fp, cfg, np.random.default_rng(8), np.zeros(3))
    assert np.array_equal(a, b)
