"""PnP-Flow: forward-backward splitting with a flow-matching denoiser.

The ``explicit`` variant takes a gradient step on the data term; the
``implicit`` variant replaces it with the proximal map of
``(gamma_n / 2) ||A . - y||^2``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .linops import LinearOperator
from .priors import FlowPrior, gmm_flow_velocity
from .variational import SolverFailure, gram_eigen, prox_data

__all__ = ["PnpFlowConfig", "pnpflow", "step_sizes"]


@dataclass
class PnpFlowConfig:
    gamma: float = 1.0
    steps: int = 100
    n_noise: int = 5
    alpha: float = 1.0
    variant: str = "implicit"
    prox: str = "auto"

    def __post_init__(self):
        if self.steps < 1 or self.n_noise < 1:
            raise ValueError("steps and n_noise must be >= 1")
        if self.gamma <= 0:
            raise ValueError("gamma must be positive")
        if self.variant not in ("explicit", "implicit"):
            raise ValueError(f"unknown variant {self.variant!r}")


def step_sizes(cfg: PnpFlowConfig) -> tuple[np.ndarray, np.ndarray]:
    """Times ``t_n = n / N`` and data weights ``gamma (1 - t_n)^alpha`` for ``n = 0..N``."""
    t = np.arange(cfg.steps + 1) / cfg.steps
    return t, cfg.gamma * (1.0 - t) ** cfg.alpha


def pnpflow(y, A: LinearOperator, fp: FlowPrior, cfg: PnpFlowConfig, rng, x_init):
    """Run PnP-Flow from ``x_init``; returns an array of ``A.in_shape``.

    Each step averages ``n_noise`` interpolate-then-denoise draws.  At the
    final time ``t = 1`` the denoiser is the identity, so the velocity is never
    evaluated there.
    """
    y = np.asarray(y, dtype=float).reshape(A.out_shape)
    x = np.array(x_init, dtype=float).reshape(A.in_shape)
    gram = None
    if cfg.variant == "implicit":
        method = cfg.prox
        if method == "auto":
            method = "eigh" if A.in_size <= 4096 else "cg"
        gram = gram_eigen(A) if method == "eigh" else None
    ts, gammas = step_sizes(cfg)
    n = A.in_size
    for t, g in zip(ts, gammas):
        if cfg.variant == "explicit":
            z = x - g * A.adjoint(A.apply(x) - y)
        else:
            z = prox_data(x, A, y, g, gram=gram)
        if not np.all(np.isfinite(z)):
            raise SolverFailure(f"PnP-Flow data step produced non-finite values at t={t:.3f}")
        if t >= 1.0:
            x = z
            break
        zf = z.ravel()
        noise = rng.standard_normal((cfg.n_noise, n))
        z_tilde = (1.0 - t) * noise + t * zf[None, :]
        x_tilde = z_tilde + (1.0 - t) * gmm_flow_velocity(fp, z_tilde, t)
        acc = np.zeros(n)
        for k in range(cfg.n_noise):
            acc += x_tilde[k]
        x = (acc / cfg.n_noise).reshape(A.in_shape)
    return x
