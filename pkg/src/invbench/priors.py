"""Analytic Gaussian-mixture priors.

An isotropic Gaussian mixture stays a Gaussian mixture under the diffusion
forward process and under the flow-matching interpolation, so the exact
noise-prediction model, its Tweedie denoiser, the denoiser Jacobian and the
flow velocity are all available in closed form.  These stand in for trained
networks throughout the benchmark.

All evaluation functions accept a single point of shape ``(n,)`` or a batch of
shape ``(B, n)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "GmmPrior",
    "DiffusionSchedule",
    "FlowPrior",
    "EllipseSceneParams",
    "make_schedule",
    "gmm_log_density",
    "gmm_eps_model",
    "gmm_posterior_mean",
    "gmm_posterior_mean_jvp",
    "gmm_flow_velocity",
    "gmm_sample",
    "fit_gmm_em",
    "generate_ellipse_image",
    "ellipse_means_prior",
]

VAR_FLOOR = 1e-6
RESP_FLOOR = 1e-300


@dataclass(frozen=True, eq=False)
class GmmPrior:
    """Mixture ``sum_k w_k N(mu_k, s_k^2 I)``."""

    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray
    image_shape: tuple[int, ...] | None = None

    def __post_init__(self):
        w = np.atleast_1d(np.asarray(self.weights, dtype=float))
        mu = np.atleast_2d(np.asarray(self.means, dtype=float))
        var = np.atleast_1d(np.asarray(self.variances, dtype=float))
        if not (len(w) == mu.shape[0] == len(var)):
            raise ValueError("weights, means and variances disagree on the component count")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ValueError("weights must be non-negative and sum to one")
        if np.any(var <= 0):
            raise ValueError("variances must be positive")
        if self.image_shape is not None and math.prod(self.image_shape) != mu.shape[1]:
            raise ValueError("image_shape does not match the mean dimension")
        for name, arr in (("weights", w), ("means", mu), ("variances", var)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def n_components(self) -> int:
        return len(self.weights)

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def marginal(self, scale: float, noise_var: float) -> "GmmPrior":
        """Law of ``scale * X + sqrt(noise_var) * Z`` for ``X`` from this prior."""
        return GmmPrior(self.weights, scale * self.means,
                        scale ** 2 * self.variances + noise_var, self.image_shape)

    def _component_logpdf(self, x):
        # (B, K)
        d2 = _sq_dist(x, self.means)
        return (np.log(np.maximum(self.weights, RESP_FLOOR))
                - 0.5 * self.dim * np.log(2 * np.pi * self.variances)
                - 0.5 * d2 / self.variances)

    def responsibilities(self, x):
        x2 = np.atleast_2d(x)
        lp = self._component_logpdf(x2)
        r = np.exp(lp - _logsumexp(lp, axis=1, keepdims=True))
        r = np.maximum(r, RESP_FLOOR)
        r /= r.sum(axis=1, keepdims=True)
        return r if np.ndim(x) > 1 else r[0]

    def log_density(self, x):
        x2 = np.atleast_2d(np.asarray(x, dtype=float))
        out = _logsumexp(self._component_logpdf(x2), axis=1)
        return out if np.ndim(x) > 1 else float(out[0])

    def score(self, x):
        """Gradient of the log density."""
        x = np.asarray(x, dtype=float)
        x2 = np.atleast_2d(x)
        r = self.responsibilities(x2)
        diff = self.means[None, :, :] - x2[:, None, :]            # (B, K, n)
        s = np.einsum("bk,bkn->bn", r / self.variances, diff)
        return s if x.ndim > 1 else s[0]

    def score_jvp(self, x, v):
        """Hessian of the log density applied to ``v`` (symmetric, so also the VJP)."""
        x = np.asarray(x, dtype=float)
        v = np.asarray(v, dtype=float)
        x2, v2 = np.atleast_2d(x), np.atleast_2d(v)
        r = self.responsibilities(x2)
        d = (self.means[None, :, :] - x2[:, None, :]) / self.variances[None, :, None]
        s = np.einsum("bk,bkn->bn", r, d)
        dv = np.einsum("bkn,bn->bk", d, v2) - np.einsum("bn,bn->b", s, v2)[:, None]
        out = (-np.einsum("bk,k->b", r, 1.0 / self.variances)[:, None] * v2
               + np.einsum("bk,bkn->bn", r * dv, d))
        return out if x.ndim > 1 else out[0]

    def sample(self, rng, size=None):
        return gmm_sample(self, rng, size)


def _logsumexp(a, axis=1, keepdims=False):
    m = np.max(a, axis=axis, keepdims=True)
    out = m + np.log(np.sum(np.exp(a - m), axis=axis, keepdims=True))
    return out if keepdims else np.squeeze(out, axis=axis)


def _sq_dist(x, means):
    # ||x_b - mu_k||^2 without forming the (B, K, n) difference
    return (np.sum(x * x, axis=1)[:, None] - 2.0 * x @ means.T
            + np.sum(means * means, axis=1)[None, :]).clip(min=0.0)


@dataclass(frozen=True, eq=False)
class DiffusionSchedule:
    """DDPM tables indexed by ``t = 0..T``; index 0 holds ``alpha_bar = 1``."""

    betas: np.ndarray

    def __post_init__(self):
        b = np.concatenate([[0.0], np.asarray(self.betas, dtype=float)])
        b.setflags(write=False)
        object.__setattr__(self, "betas", b)
        alphas = 1.0 - b
        ab = np.cumprod(alphas)
        alphas.setflags(write=False)
        ab.setflags(write=False)
        object.__setattr__(self, "alphas", alphas)
        object.__setattr__(self, "alpha_bars", ab)

    @property
    def T(self) -> int:
        return len(self.betas) - 1


def make_schedule(T: int = 1000, beta_first: float = 1e-4, beta_last: float = 0.02) -> DiffusionSchedule:
    if T < 1 or not (0 < beta_first <= beta_last < 1):
        raise ValueError("need T >= 1 and 0 < beta_first <= beta_last < 1")
    return DiffusionSchedule(np.linspace(beta_first, beta_last, T))


@dataclass(frozen=True, eq=False)
class FlowPrior:
    """Flow-matching pair: ``X_0 ~ N(0, I)``, ``X_1 ~ base``, linear interpolation."""

    base: GmmPrior


def gmm_log_density(p: GmmPrior, x):
    return p.log_density(x)


def _check_t(sch, t):
    if not 1 <= t <= sch.T:
        raise ValueError(f"timestep {t} outside [1, {sch.T}]")


def gmm_eps_model(p: GmmPrior, sch: DiffusionSchedule, x_t, t: int):
    """Exact noise prediction ``-sqrt(1 - abar_t) * grad log p_t(x_t)``."""
    _check_t(sch, t)
    ab = sch.alpha_bars[t]
    marg = p.marginal(math.sqrt(ab), 1.0 - ab)
    return -math.sqrt(1.0 - ab) * marg.score(x_t)


def gmm_posterior_mean(p: GmmPrior, sch: DiffusionSchedule, x_t, t: int):
    """Tweedie denoiser ``E[x_0 | x_t]``."""
    ab = sch.alpha_bars[t]
    eps = gmm_eps_model(p, sch, x_t, t)
    return (np.asarray(x_t) - math.sqrt(1.0 - ab) * eps) / math.sqrt(ab)


def gmm_posterior_mean_jvp(p: GmmPrior, sch: DiffusionSchedule, x_t, t: int, v):
    """Jacobian of the Tweedie denoiser times ``v``.  The Jacobian is symmetric."""
    _check_t(sch, t)
    ab = sch.alpha_bars[t]
    marg = p.marginal(math.sqrt(ab), 1.0 - ab)
    v = np.asarray(v, dtype=float)
    return (v + (1.0 - ab) * marg.score_jvp(x_t, v)) / math.sqrt(ab)


def gmm_flow_velocity(fp: FlowPrior, x, t: float):
    """Velocity ``(E[X_1 | X_t = x] - x) / (1 - t)`` of the linear interpolation path."""
    if not 0.0 <= t < 1.0:
        raise ValueError("flow velocity is defined for 0 <= t < 1")
    p = fp.base
    x = np.asarray(x, dtype=float)
    x2 = np.atleast_2d(x)
    marg = p.marginal(t, (1.0 - t) ** 2)
    r = marg.responsibilities(x2)                               # (B, K)
    gain = t * p.variances / marg.variances                     # (K,)
    # E[X1 | x, k] = mu_k + gain_k (x - t mu_k)
    cond = ((1.0 - t * gain)[None, :, None] * p.means[None, :, :]
            + gain[None, :, None] * x2[:, None, :])
    e1 = np.einsum("bk,bkn->bn", r, cond)
    v = (e1 - x2) / (1.0 - t)
    return v if x.ndim > 1 else v[0]


def gmm_sample(p: GmmPrior, rng, size=None):
    """Draw ``size`` samples (a single vector if ``size`` is None)."""
    m = 1 if size is None else int(size)
    k = rng.choice(p.n_components, size=m, p=p.weights)
    z = rng.standard_normal((m, p.dim))
    x = p.means[k] + np.sqrt(p.variances[k])[:, None] * z
    return x[0] if size is None else x


def fit_gmm_em(samples, K: int, iters: int = 100, seed: int = 0, tol: float = 0.0,
               history: list | None = None, image_shape=None) -> GmmPrior:
    """EM for an isotropic Gaussian mixture.

    Means are initialized at ``K`` distinct samples chosen with ``seed``.
    Variances are floored at ``VAR_FLOOR``.  If ``history`` is given, the
    log-likelihood before every M-step is appended to it.
    """
    X = np.asarray(samples, dtype=float)
    if X.ndim != 2 or X.shape[0] == 0:
        raise ValueError("samples must be a non-empty (N, n) array")
    N, n = X.shape
    if N < K:
        raise ValueError(f"need at least K={K} samples, got {N}")
    rng = np.random.default_rng(seed)
    means = X[np.sort(rng.choice(N, size=K, replace=False))].copy()
    var0 = max(float(np.mean((X - X.mean(axis=0)) ** 2)), VAR_FLOOR)
    variances = np.full(K, var0)
    weights = np.full(K, 1.0 / K)
    prev = -np.inf
    for _ in range(iters):
        lp = (np.log(np.maximum(weights, RESP_FLOOR)) - 0.5 * n * np.log(2 * np.pi * variances)
              - 0.5 * _sq_dist(X, means) / variances)
        norm = _logsumexp(lp, axis=1, keepdims=True)
        ll = float(norm.sum())
        if history is not None:
            history.append(ll)
        r = np.maximum(np.exp(lp - norm), RESP_FLOOR)
        r /= r.sum(axis=1, keepdims=True)
        nk = r.sum(axis=0)
        weights = nk / N
        means = (r.T @ X) / nk[:, None]
        variances = np.maximum(np.sum(r * _sq_dist(X, means), axis=0) / (n * nk), VAR_FLOOR)
        if tol > 0 and abs(ll - prev) <= tol * max(1.0, abs(ll)):
            break
        prev = ll
    weights = weights / weights.sum()
    return GmmPrior(weights, means, variances, image_shape)


@dataclass(frozen=True)
class EllipseSceneParams:
    """Sampling ranges for random ellipse phantoms.

    ``aspect_range`` bounds the minor/major axis ratio.  ``axis_range`` bounds
    the full major axis as a fraction of ``image_size``.
    """

    image_size: int = 64
    max_ellipses: int = 70
    value_range: tuple[float, float] = (0.1, 1.0)
    aspect_range: tuple[float, float] = (0.2, 1.0)
    axis_range: tuple[float, float] = (0.05, 0.4)
    angle_range: tuple[float, float] = (0.0, 180.0)
    center_radius: float = 0.5

    def __post_init__(self):
        if self.max_ellipses < 0:
            raise ValueError("max_ellipses must be >= 0")
        if self.image_size < 1:
            raise ValueError("image_size must be positive")


def _ellipse_draws(params: EllipseSceneParams, rng):
    count = int(rng.integers(0, params.max_ellipses + 1))
    R = params.center_radius * params.image_size
    draws = []
    for _ in range(count):
        rad = R * math.sqrt(rng.random())
        phi = 2 * math.pi * rng.random()
        major = 0.5 * params.image_size * rng.uniform(*params.axis_range)
        minor = major * rng.uniform(*params.aspect_range)
        angle = math.radians(rng.uniform(*params.angle_range))
        value = rng.uniform(*params.value_range)
        draws.append((rad * math.cos(phi), rad * math.sin(phi), major, minor, angle, value))
    return draws


def generate_ellipse_image(params: EllipseSceneParams, rng, return_centers: bool = False):
    """Superimpose a random number of filled ellipses and clip to [0, 1]."""
    n = params.image_size
    c = (n - 1) / 2
    xs = np.arange(n) - c
    X, Y = np.meshgrid(xs, -xs)
    img = np.zeros((n, n))
    draws = _ellipse_draws(params, rng)
    for cx, cy, a, b, ang, val in draws:
        ca, sa = math.cos(ang), math.sin(ang)
        u = (X - cx) * ca + (Y - cy) * sa
        v = -(X - cx) * sa + (Y - cy) * ca
        img[(u / a) ** 2 + (v / b) ** 2 <= 1.0] += val
    np.clip(img, 0.0, 1.0, out=img)
    if return_centers:
        return img, [(d[0], d[1]) for d in draws]
    return img


def ellipse_means_prior(K: int, image_size: int, variance: float, seed: int,
                        max_ellipses: int = 6) -> GmmPrior:
    """Equal-weight mixture whose means are ``K`` random ellipse phantoms."""
    rng = np.random.default_rng(seed)
    params = EllipseSceneParams(image_size=image_size, max_ellipses=max_ellipses)
    means = []
    while len(means) < K:
        img = generate_ellipse_image(params, rng)
        if img.any():
            means.append(img.ravel())
    return GmmPrior(np.full(K, 1.0 / K), np.array(means), np.full(K, float(variance)),
                    (image_size, image_size))
