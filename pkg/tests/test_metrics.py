import math

import numpy as np
import pytest
from skimage.metrics import structural_similarity

from invbench.bench import add_noise
from invbench.linops import Identity, Mask, MatrixOperator, Radon, RadonGeometry, uniform_angles
from invbench.metrics import (PSNR_CAP, SSIM_C1, NoiseModel, data_consistency, estimate_diameter,
                              evaluate, expected_residual, psnr, ssim)
from invbench.priors import GmmPrior


# -- PSNR

def test_psnr_examples():
    x_true = np.zeros((10, 10))
    assert psnr(np.full((10, 10), 0.1), x_true) == pytest.approx(20.0, abs=1e-12)
    assert psnr(x_true, x_true) == PSNR_CAP
    with pytest.raises(ValueError):
        psnr(np.zeros(3), np.zeros(4))


def test_psnr_direct_formula_and_symmetry():
    rng = np.random.default_rng(0)
    a, b = rng.random((2, 16, 16))
    ref = -10 * math.log10(np.sum((a - b) ** 2) / 256)
    assert abs(psnr(a, b) - ref) <= 1e-10
    assert psnr(a, b) == psnr(b, a)


# -- SSIM

def test_ssim_matches_skimage():
    rng = np.random.default_rng(1)
    for _ in range(5):
        a = rng.random((24, 30))
        b = np.clip(a + 0.1 * rng.standard_normal(a.shape), 0, 1)
        _, smap = structural_similarity(a, b, gaussian_weights=True, sigma=1.5,
                                        use_sample_covariance=False, data_range=1.0, full=True)
        ref = smap[5:-5, 5:-5].mean()
        assert abs(ssim(a, b) - ref) <= 1e-10


def test_ssim_identity_symmetry_and_size():
    rng = np.random.default_rng(2)
    a, b = rng.random((2, 16, 16))
    assert ssim(a, a) == pytest.approx(1.0, abs=1e-12)
    assert ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-14)
    with pytest.raises(ValueError):
        ssim(np.zeros((10, 10)), np.zeros((10, 10)))


def test_ssim_checkerboard_negation_negative():
    yy, xx = np.mgrid[:16, :16]
    board = ((xx + yy) % 2).astype(float)
    assert ssim(1.0 - board, board) < 0


def test_ssim_constant_images():
    a, b = 0.3, 0.7
    ref = (2 * a * b + SSIM_C1) / (a * a + b * b + SSIM_C1)
    assert ssim(np.full((12, 12), a), np.full((12, 12), b)) == pytest.approx(ref, abs=1e-12)


# -- data consistency

def test_dc_exact_fit_and_undefined():
    rng = np.random.default_rng(3)
    A = MatrixOperator(rng.standard_normal((6, 4)))
    x = rng.standard_normal(4)
    assert data_consistency(x, A.apply(x), A, NoiseModel("gaussian", 0.1)) == 0.0
    assert data_consistency(x, A.apply(x), A, NoiseModel("gaussian", 0.0)) is None


def test_dc_calibration():
    geom = RadonGeometry(16, uniform_angles(20))
    A = Radon(geom)
    rng = np.random.default_rng(4)
    x_true = rng.random((16, 16))
    y0 = A.apply(x_true)
    for nm in (NoiseModel("gaussian", 0.05), NoiseModel("signal_dependent", 0.05)):
        dcs = [data_consistency(x_true, add_noise(y0, nm, rng), A, nm) for _ in range(200)]
        assert 0.8 <= np.mean(dcs) <= 1.2


def test_dc_permutation_invariant():
    rng = np.random.default_rng(5)
    M = rng.standard_normal((9, 5))
    x, y = rng.standard_normal(5), rng.standard_normal(9)
    perm = rng.permutation(9)
    for nm in (NoiseModel("gaussian", 0.2), NoiseModel("signal_dependent", 0.2)):
        a = data_consistency(x, y, MatrixOperator(M), nm)
        b = data_consistency(x, y[perm], MatrixOperator(M[perm]), nm)
        assert a == pytest.approx(b, rel=1e-12)


def test_expected_residual_signal_dependent_total():
    y = np.array([1.0, -2.0, 3.0, 0.5])
    # delta is set so the total variance equals m sigma^2
    assert expected_residual(y, NoiseModel("signal_dependent", 0.1)) == pytest.approx(4 * 0.01)


def test_evaluate_report():
    rng = np.random.default_rng(6)
    x_true = rng.random((12, 12))
    A = Identity((12, 12))
    rep = evaluate(x_true, x_true, x_true, A, NoiseModel("gaussian", 0.1))
    assert rep.psnr_db == PSNR_CAP and rep.ssim == pytest.approx(1.0) and rep.dc == 0.0


# -- diameter

def test_diameter_injective_small():
    rng = np.random.default_rng(7)
    Q, _ = np.linalg.qr(rng.standard_normal((4, 4)))
    M = Q @ np.diag([1.0, 1.5, 2.0, 2.5])
    A = MatrixOperator(M)
    prior = GmmPrior([1.0], [np.zeros(4)], [1.0])
    x = rng.standard_normal(4)
    delta = 1e-3
    d = estimate_diameter(A, M @ x, delta, prior, 3, np.random.default_rng(0))
    assert d <= 2 * delta / 1.0 + 1e-9


def test_diameter_hidden_coordinate():
    m = np.array([[1.0, 0.0, 1.0]])
    A = Mask(m)
    d = 2.0
    prior = GmmPrior([0.5, 0.5], [[0.5, 0.0, 0.5], [0.5, d, 0.5]], [0.01, 0.01], (1, 3))
    y = np.array([[0.5, 0.0, 0.5]])
    est = estimate_diameter(A, y, 0.05, prior, 4, np.random.default_rng(1))
    assert est >= 0.9 * d


def test_diameter_deterministic_and_monotone():
    m = np.array([[1.0, 0.0, 1.0]])
    A = Mask(m)
    prior = GmmPrior([0.5, 0.5], [[0.5, 0.0, 0.5], [0.5, 1.0, 0.5]], [0.02, 0.02], (1, 3))
    y = np.array([[0.5, 0.0, 0.5]])
    a = estimate_diameter(A, y, 0.1, prior, 1, np.random.default_rng(2))
    b = estimate_diameter(A, y, 0.1, prior, 1, np.random.default_rng(2))
    assert a == b
    # bimodal 1-D prior centred off the data: the feasible interval, not the
    # prior, limits the diameter until delta reaches the modes
    prior = GmmPrior([0.5, 0.5], [[-1.0], [1.0]], [0.05, 0.05])
    vals = [estimate_diameter(Identity((1,)), np.zeros(1), dl, prior, 2, np.random.default_rng(3))
            for dl in (0.2, 0.4, 0.6, 0.8, 1.2)]
    assert all(v2 >= v1 for v1, v2 in zip(vals, vals[1:]))
    assert vals[0] >= 0.9 * 2 * 0.2


def test_diameter_rejects_nonpositive_delta():
    with pytest.raises(ValueError):
        estimate_diameter(Identity((2,)), np.zeros(2), 0.0, GmmPrior([1.0], [np.zeros(2)], [1.0]), 1,
                          np.random.default_rng(0))
