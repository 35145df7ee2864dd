"""Reconstruction metrics and the solution-set diameter estimator."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize

from .linops import LinearOperator
from .priors import GmmPrior

__all__ = [
    "PSNR_CAP",
    "NoiseModel",
    "MetricReport",
    "psnr",
    "ssim",
    "data_consistency",
    "expected_residual",
    "estimate_diameter",
    "evaluate",
]

PSNR_CAP = 300.0
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


@dataclass(frozen=True)
class NoiseModel:
    """``gaussian``: ``y + level * eta``.  ``signal_dependent``: ``y + delta sqrt|y| eta``
    with ``delta`` chosen so the total variance matches the Gaussian case at ``level``."""

    kind: str = "gaussian"
    level: float = 0.01

    def __post_init__(self):
        if self.kind not in ("gaussian", "signal_dependent"):
            raise ValueError(f"unknown noise kind {self.kind!r}")
        if self.level < 0:
            raise ValueError("noise level must be non-negative")


@dataclass(frozen=True)
class MetricReport:
    psnr_db: float
    ssim: float
    dc: float | None


def _pair(x, x_true):
    x = np.asarray(x, dtype=float)
    x_true = np.asarray(x_true, dtype=float)
    if x.shape != x_true.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {x_true.shape}")
    return x, x_true


def psnr(x, x_true) -> float:
    """PSNR for dynamic range [0, 1], capped at ``PSNR_CAP``."""
    x, x_true = _pair(x, x_true)
    mse = float(np.mean((x - x_true) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(-10.0 * math.log10(mse), PSNR_CAP)


def _gauss_window(size=11, sigma=1.5):
    t = np.arange(size) - (size - 1) / 2
    g = np.exp(-0.5 * (t / sigma) ** 2)
    return g / g.sum()


def _filter_valid(img, w):
    out = np.apply_along_axis(lambda r: np.convolve(r, w, mode="valid"), 1, img)
    return np.apply_along_axis(lambda c: np.convolve(c, w, mode="valid"), 0, out)


def ssim(x, x_true) -> float:
    """Mean SSIM with an 11x11 Gaussian window (sigma 1.5) over fully covered positions."""
    x, x_true = _pair(x, x_true)
    if x.ndim != 2 or min(x.shape) < 11:
        raise ValueError("ssim needs 2-D images of at least 11x11")
    w = _gauss_window()
    mu1, mu2 = _filter_valid(x, w), _filter_valid(x_true, w)
    s11 = _filter_valid(x * x, w) - mu1 * mu1
    s22 = _filter_valid(x_true * x_true, w) - mu2 * mu2
    s12 = _filter_valid(x * x_true, w) - mu1 * mu2
    num = (2 * mu1 * mu2 + SSIM_C1) * (2 * s12 + SSIM_C2)
    den = (mu1 ** 2 + mu2 ** 2 + SSIM_C1) * (s11 + s22 + SSIM_C2)
    return float(np.mean(num / den))


def expected_residual(y, nm: NoiseModel) -> float | None:
    """``E ||A x_true - y||^2`` under the noise model, or None when noise-free."""
    if nm.level == 0:
        return None
    y = np.asarray(y, dtype=float)
    m = y.size
    if nm.kind == "gaussian":
        return m * nm.level ** 2
    total = float(np.sum(np.abs(y)))
    if total == 0:
        return m * nm.level ** 2
    delta2 = nm.level ** 2 * m / total
    return delta2 * total


def data_consistency(x, y, A: LinearOperator, nm: NoiseModel) -> float | None:
    """``||Ax - y||^2`` relative to the expected residual of the true image."""
    denom = expected_residual(y, nm)
    if denom is None:
        return None
    r = np.asarray(A.apply(np.asarray(x).reshape(A.in_shape)), dtype=float).ravel() \
        - np.asarray(y, dtype=float).ravel()
    return float(r @ r) / denom


def evaluate(x, x_true, y, A: LinearOperator, nm: NoiseModel) -> MetricReport:
    x = np.asarray(x, dtype=float).reshape(A.in_shape)
    x_true = np.asarray(x_true, dtype=float).reshape(A.in_shape)
    s = ssim(x, x_true) if x.ndim == 2 and min(x.shape) >= 11 else float("nan")
    return MetricReport(psnr(x, x_true), s, data_consistency(x, y, A, nm))


def estimate_diameter(A: LinearOperator, y, delta: float, prior: GmmPrior, restarts: int,
                      rng, rho: float = 1e3, kappa: float = 1e-2, max_repairs: int = 6) -> float:
    """Lower bound on the diameter of the set of plausible data-consistent images.

    Maximizes ``||x1 - x2||^2 - rho * sum_i [hinge(||A x_i - y||^2 - delta^2)^2
    - kappa log p(x_i)]`` by L-BFGS from pairs of prior samples.  Pairs that
    violate ``||A x_i - y|| <= delta`` are re-optimized with a growing
    constraint weight; the prior weight ``rho * kappa`` stays fixed.  The
    penalty aims at a slightly smaller radius so its optima end up feasible.
    Returns the largest distance of a feasible pair, or 0 with a warning.
    """
    if delta <= 0:
        raise ValueError("delta must be positive")
    y = np.asarray(y, dtype=float).ravel()
    n = A.in_size
    d2 = delta * delta
    target = (1.0 - 1e-3) * d2
    prior_w = rho * kappa

    def fwd(v):
        return np.asarray(A.apply(v.reshape(A.in_shape)), dtype=float).ravel()

    def adj(r):
        return np.asarray(A.adjoint(r.reshape(A.out_shape)), dtype=float).ravel()

    def neg_obj(z, pen):
        x1, x2 = z[:n], z[n:]
        diff = x1 - x2
        val = -float(diff @ diff)
        g1, g2 = -2.0 * diff, 2.0 * diff
        for x, g in ((x1, g1), (x2, g2)):
            r = fwd(x) - y
            h = float(r @ r) - target
            if h > 0:
                val += pen * h * h
                g += pen * 4.0 * h * adj(r)
            val -= prior_w * prior.log_density(x)
            g -= prior_w * prior.score(x)
        return val, np.concatenate([g1, g2])

    def feasible(x):
        r = fwd(x) - y
        return float(r @ r) <= d2

    best = None
    for _ in range(restarts):
        z = np.concatenate([prior.sample(rng), prior.sample(rng)])
        pen = rho
        for _ in range(max_repairs):
            res = minimize(neg_obj, z, args=(pen,), jac=True, method="L-BFGS-B",
                           options={"maxiter": 500, "gtol": 1e-10})
            z = res.x
            if feasible(z[:n]) and feasible(z[n:]):
                dist = float(np.linalg.norm(z[:n] - z[n:]))
                best = dist if best is None else max(best, dist)
                break
            pen *= 10.0
    if best is None:
        warnings.warn("estimate_diameter: no feasible pair found; reporting 0", RuntimeWarning)
        return 0.0
    return best
