"""Diffusion-based inverse problem solvers driven by the analytic GMM noise model.

Internally every solver works on flat vectors of length ``n``; operators are
applied through reshapes to ``A.in_shape``.  Results are returned in
``A.in_shape``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .linops import LinearOperator
from .priors import DiffusionSchedule, GmmPrior, make_schedule
from .variational import SolverFailure, gram_eigen, prox_data

__all__ = [
    "EpsModel",
    "DpsConfig",
    "DiffPirConfig",
    "RedDiffConfig",
    "DmPlugConfig",
    "AdamState",
    "adam_step",
    "timestep_sequence",
    "ddpm_sample",
    "ddim_generate",
    "ddim_jvp",
    "ddim_vjp",
    "dps",
    "dps_guidance_gradient",
    "diffpir",
    "diffpir_reinject",
    "diffpir_rho",
    "reddiff",
    "dmplug",
]

RESIDUAL_FLOOR = 1e-12


class EpsModel:
    """Exact noise-prediction model for a GMM prior under a DDPM schedule.

    Inputs are flat vectors ``(n,)`` or batches ``(B, n)``.
    """

    def __init__(self, prior: GmmPrior, schedule: DiffusionSchedule | None = None):
        self.prior = prior
        self.schedule = schedule or make_schedule()
        self._marginals = {}

    @property
    def dim(self) -> int:
        return self.prior.dim

    @property
    def T(self) -> int:
        return self.schedule.T

    def alpha_bar(self, t: int) -> float:
        return float(self.schedule.alpha_bars[t])

    def marginal(self, t: int) -> GmmPrior:
        if not 1 <= t <= self.T:
            raise ValueError(f"timestep {t} outside [1, {self.T}]")
        m = self._marginals.get(t)
        if m is None:
            ab = self.alpha_bar(t)
            m = self.prior.marginal(math.sqrt(ab), 1.0 - ab)
            self._marginals[t] = m
        return m

    def eps(self, x, t: int):
        ab = self.alpha_bar(t)
        return -math.sqrt(1.0 - ab) * self.marginal(t).score(x)

    def eps_jvp(self, x, t: int, v):
        ab = self.alpha_bar(t)
        return -math.sqrt(1.0 - ab) * self.marginal(t).score_jvp(x, v)

    def denoise(self, x, t: int, eps=None):
        """Tweedie estimate of ``x_0`` given ``x_t``."""
        ab = self.alpha_bar(t)
        if eps is None:
            eps = self.eps(x, t)
        return (x - math.sqrt(1.0 - ab) * eps) / math.sqrt(ab)

    def denoise_jvp(self, x, t: int, v):
        """Jacobian of :meth:`denoise` applied to ``v``; the Jacobian is symmetric."""
        ab = self.alpha_bar(t)
        return (v + (1.0 - ab) * self.marginal(t).score_jvp(x, v)) / math.sqrt(ab)


def _fwd(A: LinearOperator, x):
    return np.asarray(A.apply(x.reshape(A.in_shape)), dtype=float).ravel()


def _adj(A: LinearOperator, r):
    return np.asarray(A.adjoint(r.reshape(A.out_shape)), dtype=float).ravel()


def timestep_sequence(T: int, steps: int) -> np.ndarray:
    """Descending timesteps ``round(i T / steps)`` for ``i = steps..1``."""
    if steps < 1 or steps > T:
        raise ValueError(f"steps must lie in [1, {T}]")
    seq = np.unique(np.rint(np.arange(1, steps + 1) * T / steps).astype(int))
    return seq[::-1]


# ---------------------------------------------------------------------------
# unconditional samplers

def _ddpm_step(model: EpsModel, x, t, eps, noise):
    sch = model.schedule
    beta, alpha, ab = sch.betas[t], sch.alphas[t], sch.alpha_bars[t]
    return (x - beta / math.sqrt(1.0 - ab) * eps) / math.sqrt(alpha) + math.sqrt(beta) * noise


def ddpm_sample(model: EpsModel, rng, n_samples: int | None = None):
    """Ancestral sampling from ``x_T ~ N(0, I)`` down to ``x_0``."""
    shape = (model.dim,) if n_samples is None else (int(n_samples), model.dim)
    x = rng.standard_normal(shape)
    for t in range(model.T, 0, -1):
        eps = model.eps(x, t)
        x = _ddpm_step(model, x, t, eps, rng.standard_normal(shape))
    return x


def _ddim_schedule(model: EpsModel, k_steps: int):
    seq = timestep_sequence(model.T, k_steps)
    prev = np.append(seq[1:], 0)
    return list(zip(seq.tolist(), prev.tolist()))


def _ddim_coeffs(model, t, t_prev):
    a = math.sqrt(model.alpha_bar(t))
    b = math.sqrt(1.0 - model.alpha_bar(t))
    ab_prev = 1.0 if t_prev == 0 else model.alpha_bar(t_prev)
    a_p, b_p = math.sqrt(ab_prev), math.sqrt(1.0 - ab_prev)
    # x_prev = cx * x + ce * eps(x)
    return a_p / a, b_p - a_p * b / a


def ddim_generate(z, model: EpsModel, k_steps: int, return_path: bool = False):
    """Deterministic DDIM map ``G(z)`` over ``k_steps`` uniformly spaced timesteps."""
    if k_steps < 1:
        raise ValueError("k_steps must be >= 1")
    x = np.array(z, dtype=float)
    path = []
    for t, t_prev in _ddim_schedule(model, k_steps):
        path.append((x, t, t_prev))
        cx, ce = _ddim_coeffs(model, t, t_prev)
        x = cx * x + ce * model.eps(x, t)
    return (x, path) if return_path else x


def ddim_jvp(z, model: EpsModel, k_steps: int, v):
    """Forward-mode derivative of :func:`ddim_generate` at ``z`` in direction ``v``."""
    x = np.array(z, dtype=float)
    v = np.array(v, dtype=float)
    for t, t_prev in _ddim_schedule(model, k_steps):
        cx, ce = _ddim_coeffs(model, t, t_prev)
        v = cx * v + ce * model.eps_jvp(x, t, v)
        x = cx * x + ce * model.eps(x, t)
    return v


def ddim_vjp(path, model: EpsModel, w):
    """Reverse-mode derivative of :func:`ddim_generate` given its recorded path."""
    w = np.array(w, dtype=float)
    for x, t, t_prev in reversed(path):
        cx, ce = _ddim_coeffs(model, t, t_prev)
        w = cx * w + ce * model.eps_jvp(x, t, w)
    return w


# ---------------------------------------------------------------------------
# DPS

@dataclass
class DpsConfig:
    gamma: float = 1.0
    steps: int = 1000

    def __post_init__(self):
        if self.gamma < 0:
            raise ValueError("DPS guidance scale must be non-negative")


def dps_guidance_gradient(model: EpsModel, A: LinearOperator, y, x, t: int, eps=None):
    """Gradient of ``||y - A xhat_t(x)||^2`` w.r.t. ``x`` and the residual norm."""
    y = np.asarray(y, dtype=float).ravel()
    x_hat = model.denoise(x, t, eps)
    r = y - _fwd(A, x_hat)
    g = -2.0 * model.denoise_jvp(x, t, _adj(A, r))
    return g, float(np.linalg.norm(r))


def dps(y, A: LinearOperator, sigma_y: float, model: EpsModel, cfg: DpsConfig, rng):
    """Diffusion posterior sampling with step size ``gamma / ||y - A xhat||``.

    The random stream matches :func:`ddpm_sample`, so ``gamma = 0`` reproduces
    the unconditional trajectory bit for bit.
    """
    if sigma_y < 0:
        raise ValueError("sigma_y must be non-negative")
    if cfg.steps != model.T:
        raise ValueError("DPS runs the full schedule; build a schedule with T = steps")
    n = model.dim
    x = rng.standard_normal(n)
    for t in range(model.T, 0, -1):
        eps = model.eps(x, t)
        if cfg.gamma > 0:
            g, rnorm = dps_guidance_gradient(model, A, y, x, t, eps)
            gamma_t = cfg.gamma / max(rnorm, RESIDUAL_FLOOR)
        noise = rng.standard_normal(n)
        x = _ddpm_step(model, x, t, eps, noise)
        if cfg.gamma > 0:
            x = x - gamma_t * g
        if not np.all(np.isfinite(x)):
            raise SolverFailure(f"DPS diverged at t={t}")
    return x.reshape(A.in_shape)


# ---------------------------------------------------------------------------
# DiffPIR

@dataclass
class DiffPirConfig:
    lam: float = 1.0
    zeta: float = 0.5
    steps: int = 1000
    rho_rule: str = "eq_form"
    prox: str = "auto"

    def __post_init__(self):
        if self.lam <= 0:
            raise ValueError("DiffPIR lam must be positive")
        if not 0.0 <= self.zeta <= 1.0:
            raise ValueError("zeta must lie in [0, 1]")
        if self.rho_rule not in ("eq_form", "alg_form"):
            raise ValueError(f"unknown rho_rule {self.rho_rule!r}")


def diffpir_rho(lam: float, sigma_y: float, alpha_bar: float, rule: str = "eq_form") -> float:
    if rule == "eq_form":
        return lam * sigma_y ** 2 * alpha_bar / (1.0 - alpha_bar)
    return lam * sigma_y ** 2 / math.sqrt((1.0 - alpha_bar) / alpha_bar)


def diffpir_reinject(x_t, x_hat, ab_t: float, ab_prev: float, zeta: float, noise):
    """Move the data-consistent estimate back to noise level ``t_prev``."""
    eff = (x_t - math.sqrt(ab_t) * x_hat) / math.sqrt(1.0 - ab_t)
    if zeta == 1.0:
        mix = noise
    else:
        mix = math.sqrt(1.0 - zeta) * eff + math.sqrt(zeta) * noise
    return math.sqrt(ab_prev) * x_hat + math.sqrt(1.0 - ab_prev) * mix


def _prox_solver(A: LinearOperator, method: str):
    if method == "auto":
        method = "eigh" if A.in_size <= 4096 else "cg"
    if method == "eigh":
        return gram_eigen(A)
    if method == "cg":
        return None
    raise ValueError(f"unknown prox method {method!r}")


def diffpir(y, A: LinearOperator, sigma_y: float, model: EpsModel, cfg: DiffPirConfig, rng):
    """Half-quadratic splitting with Tweedie denoising and noise re-injection."""
    if sigma_y <= 0:
        raise ValueError("DiffPIR needs sigma_y > 0")
    gram = _prox_solver(A, cfg.prox)
    y = np.asarray(y, dtype=float).reshape(A.out_shape)
    n = model.dim
    x = rng.standard_normal(n)
    seq = timestep_sequence(model.T, cfg.steps)
    for i, t in enumerate(seq):
        t_prev = int(seq[i + 1]) if i + 1 < len(seq) else 0
        ab = model.alpha_bar(t)
        ab_prev = 1.0 if t_prev == 0 else model.alpha_bar(t_prev)
        p = model.denoise(x, t)
        rho = diffpir_rho(cfg.lam, sigma_y, ab, cfg.rho_rule)
        gamma = 0.0 if math.isinf(rho) else 1.0 / rho
        x_hat = prox_data(p.reshape(A.in_shape), A, y, gamma, gram=gram).ravel()
        x = diffpir_reinject(x, x_hat, ab, ab_prev, cfg.zeta, rng.standard_normal(n))
        if not np.all(np.isfinite(x)):
            raise SolverFailure(f"DiffPIR diverged at t={t}")
    return x.reshape(A.in_shape)


# ---------------------------------------------------------------------------
# Adam

@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, shape, **kw):
        return cls(np.zeros(shape), np.zeros(shape), **kw)


def adam_step(state: AdamState, grad, step_size: float):
    """One bias-corrected Adam update.  Returns ``(new_state, update)``; add
    ``update`` to the iterate."""
    grad = np.asarray(grad, dtype=float)
    if grad.shape != state.m.shape:
        raise ValueError("gradient shape does not match the optimizer state")
    t = state.t + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * grad
    v = state.beta2 * state.v + (1.0 - state.beta2) * grad * grad
    m_hat = m / (1.0 - state.beta1 ** t)
    v_hat = v / (1.0 - state.beta2 ** t)
    update = -step_size * m_hat / (np.sqrt(v_hat) + state.eps)
    return replace(state, m=m, v=v, t=t), update


# ---------------------------------------------------------------------------
# RED-diff

@dataclass
class RedDiffConfig:
    gamma: float = 1.0
    lam: float = 0.1
    lr: float = 0.05
    steps: int = 1000

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("RED-diff step size must be positive")


def reddiff(y, A: LinearOperator, model: EpsModel, cfg: RedDiffConfig, x_init, rng):
    """Annealed RED-diff: Adam on ``gamma/2 ||y - Ax||^2`` plus the
    stop-gradient denoising residual weighted by ``lam sqrt((1-abar)/abar)``."""
    y = np.asarray(y, dtype=float).ravel()
    x = np.array(x_init, dtype=float).ravel()
    if x.size != model.dim:
        raise ValueError("x_init has the wrong size")
    state = AdamState.zeros(x.shape)
    for t in timestep_sequence(model.T, cfg.steps):
        ab = model.alpha_bar(t)
        noise = rng.standard_normal(x.shape)
        z = math.sqrt(ab) * x + math.sqrt(1.0 - ab) * noise
        lam_t = cfg.lam * math.sqrt((1.0 - ab) / ab)
        g = cfg.gamma * _adj(A, _fwd(A, x) - y) + lam_t * (model.eps(z, t) - noise)
        state, upd = adam_step(state, g, cfg.lr)
        x = x + upd
        if not np.all(np.isfinite(x)):
            raise SolverFailure(f"RED-diff produced a non-finite iterate at t={t}")
    return x.reshape(A.in_shape)


# ---------------------------------------------------------------------------
# DMPlug

@dataclass
class DmPlugConfig:
    k_steps: int = 4
    lr: float = 0.01
    max_iters: int = 1500
    window: int = 50
    patience: int | None = 100

    def __post_init__(self):
        if self.k_steps < 1:
            raise ValueError("k_steps must be >= 1")


def dmplug(y, A: LinearOperator, model: EpsModel, cfg: DmPlugConfig, rng,
           trace: list | None = None):
    """Latent optimization of ``||A G(z) - y||^2`` through the DDIM generator.

    Early stopping tracks the variance of the reconstruction over a sliding
    window; the reconstruction where that variance was smallest is returned
    once it has not improved for ``patience`` iterations.  ``trace`` receives
    ``(iteration, loss, best_loss)``.
    """
    y = np.asarray(y, dtype=float).ravel()
    z = rng.standard_normal(model.dim)
    state = AdamState.zeros(z.shape)
    window = []
    best_var, best_x, since_best = math.inf, None, 0
    best_loss = math.inf
    x = None
    for it in range(cfg.max_iters):
        x, path = ddim_generate(z, model, cfg.k_steps, return_path=True)
        r = _fwd(A, x) - y
        loss = float(r @ r)
        if not math.isfinite(loss):
            raise SolverFailure(f"DMPlug loss became non-finite at iteration {it}")
        best_loss = min(best_loss, loss)
        if trace is not None:
            trace.append((it, loss, best_loss))
        if cfg.patience is not None:
            window.append(x)
            if len(window) > cfg.window:
                window.pop(0)
            if len(window) == cfg.window:
                w = np.asarray(window)
                var = float(np.mean(np.sum((w - w.mean(axis=0)) ** 2, axis=1)))
                if var < best_var:
                    best_var, best_x, since_best = var, x, 0
                else:
                    since_best += 1
                    if since_best >= cfg.patience:
                        return best_x.reshape(A.in_shape)
        g = ddim_vjp(path, model, 2.0 * _adj(A, r))
        state, upd = adam_step(state, g, cfg.lr)
        z = z + upd
    x = ddim_generate(z, model, cfg.k_steps)
    return x.reshape(A.in_shape)
