"""Variational reconstruction: 0.5 ||Ax - y||^2 + lam * R(x).

* ``solve_tv``: isotropic total variation via the Condat-Vu primal-dual method.
* ``solve_smooth``: smooth regularizers via accelerated gradient descent with
  objective-based momentum restarts.
* ``prox_data`` / ``cg_solve``: the quadratic data-term proximal map.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .linops import LinearOperator
from .priors import GmmPrior

__all__ = [
    "SolverFailure",
    "CgResult",
    "cg_solve",
    "prox_data",
    "GramEigen",
    "gram_eigen",
    "grad",
    "div",
    "tv_value",
    "Regularizer",
    "PdParams",
    "AgdParams",
    "solve_tv",
    "solve_smooth",
]

CG_TOL = 1e-10
CG_MAX_ITERS = 500


class SolverFailure(RuntimeError):
    """A solver diverged, broke down or failed to converge."""


@dataclass
class CgResult:
    x: np.ndarray
    iterations: int
    residual: float
    converged: bool


def cg_solve(spd_apply, b, tol: float = CG_TOL, max_iters: int = CG_MAX_ITERS,
             x0=None, raise_on_failure: bool = False) -> CgResult:
    """Conjugate gradient for ``M x = b`` with ``M`` given as a callable.

    Stops when ``||Mx - b|| / ||b|| <= tol``.  A non-positive curvature
    ``p^T M p`` raises :class:`SolverFailure`.
    """
    b = np.asarray(b, dtype=float)
    shape = b.shape
    b = b.ravel()
    bnorm = np.linalg.norm(b)
    x = np.zeros_like(b) if x0 is None else np.array(x0, dtype=float).ravel()
    if bnorm == 0:
        return CgResult(np.zeros(shape), 0, 0.0, True)
    r = b - np.asarray(spd_apply(x.reshape(shape))).ravel() if x0 is not None else b.copy()
    p = r.copy()
    rr = r @ r
    it = 0
    res = math.sqrt(rr) / bnorm
    while res > tol and it < max_iters:
        mp = np.asarray(spd_apply(p.reshape(shape))).ravel()
        curv = p @ mp
        if not curv > 0:
            raise SolverFailure(f"CG breakdown: curvature {curv:.3e} at iteration {it}")
        a = rr / curv
        x += a * p
        r -= a * mp
        rr_new = r @ r
        p = r + (rr_new / rr) * p
        rr = rr_new
        it += 1
        res = math.sqrt(rr) / bnorm
    converged = res <= tol
    if not converged and raise_on_failure:
        raise SolverFailure(f"CG did not converge in {max_iters} iterations (relative residual {res:.3e})")
    return CgResult(x.reshape(shape), it, res, converged)


class GramEigen:
    """Eigendecomposition of ``A^T A`` for repeated proximal solves on small problems."""

    def __init__(self, A: LinearOperator, rtol: float = 1e-10):
        M = A.to_dense()
        evals, self.vecs = np.linalg.eigh(M.T @ M)
        cut = rtol * max(evals.max(initial=0.0), 1e-300)
        self.null = evals <= cut
        self.evals = np.where(self.null, 0.0, evals)
        self.A = A

    def prox(self, z, y, gamma: float):
        z = np.asarray(z, dtype=float)
        if gamma == 0:
            return z.copy()
        c = self.vecs.T @ np.asarray(self.A.adjoint(y), dtype=float).ravel()
        c[self.null] = 0.0
        d = self.vecs.T @ z.ravel()
        rho = 1.0 / gamma
        return (self.vecs @ ((c + rho * d) / (self.evals + rho))).reshape(z.shape)


def gram_eigen(A: LinearOperator) -> GramEigen:
    """:class:`GramEigen` cached on the operator instance."""
    cached = getattr(A, "_gram_eigen", None)
    if cached is None:
        cached = GramEigen(A)
        A._gram_eigen = cached
    return cached


def prox_data(z, A: LinearOperator, y, gamma: float, tol: float = CG_TOL,
              max_iters: int = CG_MAX_ITERS, gram: GramEigen | None = None):
    """``argmin_x 0.5 ||x - z||^2 + (gamma / 2) ||A x - y||^2``.

    Solved by CG on ``(A^T A + I / gamma) x = A^T y + z / gamma`` warm-started
    at ``z``, or exactly through a precomputed :class:`GramEigen`.
    """
    if gamma < 0:
        raise ValueError("gamma must be non-negative")
    z = np.asarray(z, dtype=float)
    if gamma == 0:
        return z.copy()
    if gram is not None:
        return gram.prox(z, y, gamma)
    inv = 1.0 / gamma
    rhs = np.asarray(A.adjoint(y), dtype=float).reshape(z.shape) + inv * z
    res = cg_solve(lambda v: A.normal(v) + inv * v, rhs, tol=tol, max_iters=max_iters, x0=z)
    if not res.converged:
        raise SolverFailure(f"prox_data: CG stopped after {res.iterations} iterations "
                            f"with relative residual {res.residual:.3e}")
    return res.x


# ---------------------------------------------------------------------------
# total variation

def grad(x):
    """Forward differences along every axis, Neumann boundary.  Shape ``(ndim, *x.shape)``."""
    x = np.asarray(x, dtype=float)
    g = np.zeros((x.ndim,) + x.shape)
    for ax in range(x.ndim):
        sl_lo = [slice(None)] * x.ndim
        sl_hi = [slice(None)] * x.ndim
        sl_lo[ax] = slice(0, -1)
        sl_hi[ax] = slice(1, None)
        g[(ax, *sl_lo)] = x[tuple(sl_hi)] - x[tuple(sl_lo)]
    return g


def div(g):
    """Negative adjoint of :func:`grad`."""
    ndim = g.shape[0]
    out = np.zeros(g.shape[1:])
    for ax in range(ndim):
        p = g[ax]
        d = np.zeros_like(p)
        first = [slice(None)] * ndim
        last = [slice(None)] * ndim
        mid = [slice(None)] * ndim
        prev = [slice(None)] * ndim
        first[ax] = 0
        last[ax] = -1
        mid[ax] = slice(1, -1)
        prev[ax] = slice(0, -2)
        n = p.shape[ax]
        if n == 1:
            out += d
            continue
        d[tuple(first)] = p[tuple(first)]
        d[tuple(mid)] = p[tuple(mid)] - p[tuple(prev)]
        last_prev = [slice(None)] * ndim
        last_prev[ax] = -2
        d[tuple(last)] = -p[tuple(last_prev)]
        out += d
    return out


def tv_value(x) -> float:
    g = grad(x)
    return float(np.sum(np.sqrt(np.sum(g * g, axis=0))))


@dataclass
class PdParams:
    max_iters: int = 2000
    rel_tol: float = 1e-6
    tau: float | None = None
    sigma: float | None = None
    check_every: int = 10


def _tv_objective(x, A, y, lam):
    r = A.apply(x) - y
    return 0.5 * float(np.vdot(r, r)) + lam * tv_value(x)


def solve_tv(y, A: LinearOperator, lam: float, p: PdParams | None = None, x0=None,
             trace: list | None = None):
    """Minimize ``0.5 ||Ax - y||^2 + lam * TV(x)`` with Condat-Vu.

    Step sizes: ``sigma = 1 / ||D||^2`` and ``1/tau - sigma ||D||^2 = 1.01 ||A||^2 / 2``.
    ``trace`` receives ``(iteration, objective, relative_change)`` tuples.
    """
    if lam < 0:
        raise ValueError("lam must be non-negative")
    p = p or PdParams()
    y = np.asarray(y, dtype=float).reshape(A.out_shape)
    ndim = len(A.in_shape)
    d_norm2 = 4.0 * ndim
    L = A.norm() ** 2
    sigma = p.sigma if p.sigma is not None else 1.0 / d_norm2
    tau = p.tau if p.tau is not None else 1.0 / (sigma * d_norm2 + 1.01 * L / 2.0)
    if tau <= 0 or sigma <= 0 or 1.0 / tau - sigma * d_norm2 < L / 2.0:
        raise ValueError("step sizes violate the Condat-Vu condition")

    x = np.zeros(A.in_shape) if x0 is None else np.array(x0, dtype=float).reshape(A.in_shape)
    u = np.zeros((ndim,) + A.in_shape)
    for it in range(1, p.max_iters + 1):
        gx = A.adjoint(A.apply(x) - y) - div(u)
        x_new = x - tau * gx
        u = u + sigma * grad(2.0 * x_new - x)
        if lam > 0:
            mag = np.sqrt(np.sum(u * u, axis=0))
            u = u / np.maximum(1.0, mag / lam)
        else:
            u[:] = 0.0
        change = np.linalg.norm(x_new - x) / max(np.linalg.norm(x_new), 1e-12)
        x = x_new
        if not np.all(np.isfinite(x)):
            raise SolverFailure(f"solve_tv diverged at iteration {it}")
        if trace is not None and (it % p.check_every == 0 or change <= p.rel_tol):
            trace.append((it, _tv_objective(x, A, y, lam), change))
        if change <= p.rel_tol:
            break
    return x


# ---------------------------------------------------------------------------
# smooth regularizers

class Regularizer:
    """Smooth regularizers for :func:`solve_smooth` (``tv`` is handled by :func:`solve_tv`)."""

    kinds = ("tikhonov_identity", "tikhonov_gradient", "gmm_neglog", "tv")

    def __init__(self, kind: str, prior: GmmPrior | None = None):
        if kind not in self.kinds:
            raise ValueError(f"unknown regularizer {kind!r}")
        if kind == "gmm_neglog" and prior is None:
            raise ValueError("gmm_neglog needs a prior")
        self.kind = kind
        self.prior = prior

    @property
    def smooth(self) -> bool:
        return self.kind != "tv"

    def value(self, x) -> float:
        if self.kind == "tikhonov_identity":
            return 0.5 * float(np.vdot(x, x))
        if self.kind == "tikhonov_gradient":
            g = grad(x)
            return 0.5 * float(np.vdot(g, g))
        if self.kind == "gmm_neglog":
            return -self.prior.log_density(np.ravel(x))
        return tv_value(x)

    def gradient(self, x):
        if self.kind == "tikhonov_identity":
            return np.array(x, dtype=float)
        if self.kind == "tikhonov_gradient":
            return -div(grad(x))
        if self.kind == "gmm_neglog":
            return -self.prior.score(np.ravel(x)).reshape(np.shape(x))
        raise ValueError("TV has no gradient; use solve_tv")

    def lipschitz(self, ndim: int) -> float:
        if self.kind == "tikhonov_identity":
            return 1.0
        if self.kind == "tikhonov_gradient":
            return 4.0 * ndim
        if self.kind == "gmm_neglog":
            return float(np.max(1.0 / self.prior.variances))
        raise ValueError("TV is not smooth")


@dataclass
class AgdParams:
    max_iters: int = 1000
    rel_tol: float = 1e-8
    step: float | None = None


def solve_smooth(y, A: LinearOperator, lam: float, R: Regularizer, p: AgdParams | None = None,
                 x_init=None, trace: list | None = None):
    """Accelerated gradient descent with restart whenever the objective increases.

    Stops when ``||grad F(x)|| / max(1, ||x||) <= rel_tol``.  The returned
    iterate never has a larger objective than ``x_init``.
    """
    if lam < 0:
        raise ValueError("lam must be non-negative")
    if not R.smooth:
        raise ValueError("solve_smooth needs a smooth regularizer")
    p = p or AgdParams()
    y = np.asarray(y, dtype=float).reshape(A.out_shape)

    def objective(x):
        r = A.apply(x) - y
        return 0.5 * float(np.vdot(r, r)) + lam * R.value(x)

    def gradient(x):
        return A.adjoint(A.apply(x) - y) + lam * R.gradient(x)

    L = A.norm() ** 2 + lam * R.lipschitz(len(A.in_shape))
    step = p.step if p.step is not None else 1.0 / L
    x = np.zeros(A.in_shape) if x_init is None else np.array(x_init, dtype=float).reshape(A.in_shape)
    fx = objective(x)
    if not math.isfinite(fx):
        raise SolverFailure("non-finite objective at the initial point")
    x_prev = x.copy()
    t = 1.0
    for it in range(1, p.max_iters + 1):
        t_new = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * t * t))
        z = x + ((t - 1.0) / t_new) * (x - x_prev)
        x_new = z - step * gradient(z)
        f_new = objective(x_new)
        if not f_new <= fx:
            # momentum restart: plain gradient step from the last accepted point
            t_new = 1.0
            x_new = x - step * gradient(x)
            f_new = objective(x_new)
            if not math.isfinite(f_new):
                raise SolverFailure(f"solve_smooth: non-finite objective at iteration {it}")
            if f_new > fx:
                break
        x_prev, x, fx, t = x, x_new, f_new, t_new
        g = gradient(x)
        stat = np.linalg.norm(g) / max(1.0, np.linalg.norm(x))
        if trace is not None:
            trace.append((it, fx, stat))
        if stat <= p.rel_tol:
            break
    return x
