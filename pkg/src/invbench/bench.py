"""Experiment harness: problem construction, solver dispatch, tuning, sweeps, CSV output.

Experiment files are INI-style with one section per prior, problem and solver::

    [experiment]
    spec_version = 1
    test_seeds = 0-4
    val_seeds = 100-102

    [prior:ellipses]
    kind = ellipse_means
    components = 8
    image_size = 32
    variance = 0.002

    [problem:ct]
    operator = radon
    angles = 90
    image_size = 32
    sigma = 0.01
    truth = prior:ellipses

    [solver:tv]
    method = tv
    lam = 0.01
    grid.lam = 0.003, 0.01, 0.03

See ``data/default.cfg`` for every recognised key.  Seeds are derived by
hashing ``(master seed, seed key, stream, indices...)`` so that any single
row of the output can be recomputed in isolation.
"""

from __future__ import annotations

import configparser
import csv
import hashlib
import itertools
import json
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .diffusion import (DiffPirConfig, DmPlugConfig, DpsConfig, EpsModel, RedDiffConfig,
                        diffpir, dmplug, dps, reddiff)
from .io import atomic_write, read_gmm_csv, read_pgm
from .linops import (Blur, Downsample, Identity, LinearOperator, Mask, Radon, RadonGeometry,
                     fbp, gaussian_kernel, motion_blur_kernel, random_mask, uniform_angles)
from .metrics import NoiseModel, evaluate
from .pnpflow import PnpFlowConfig, pnpflow
from .priors import (EllipseSceneParams, FlowPrior, GmmPrior, ellipse_means_prior, fit_gmm_em,
                     generate_ellipse_image, make_schedule)
from .variational import AgdParams, PdParams, Regularizer, solve_smooth, solve_tv

__all__ = [
    "SPEC_VERSION",
    "CSV_COLUMNS",
    "PriorSpec",
    "ProblemSpec",
    "SolverSpec",
    "RunRecord",
    "Bench",
    "Experiment",
    "derive_seed",
    "add_noise",
    "perturb_angles",
    "grid_search",
    "run_experiment",
    "sweep_noise_to_zero",
    "stability_over_noise",
    "emit_csv",
    "read_csv",
    "load_experiment",
    "parse_experiment",
]

SPEC_VERSION = 1
CSV_COLUMNS = ("problem", "solver", "params", "seed", "psnr", "ssim", "dc", "wall_ms")
DIFFPIR_SIGMA_FLOOR = 1e-3

METHOD_PARAMS = {
    "fbp": {"filter"},
    "tv": {"lam", "max_iters", "rel_tol"},
    "smooth_reg": {"lam", "reg", "max_iters", "rel_tol"},
    "dps": {"gamma", "steps"},
    "diffpir": {"lam", "zeta", "steps", "rho_rule"},
    "reddiff": {"gamma", "lam", "lr", "steps"},
    "dmplug": {"k_steps", "lr", "max_iters", "window", "patience"},
    "pnpflow": {"gamma", "steps", "n_noise", "alpha", "variant"},
}
NEEDS_PRIOR = {"dps", "diffpir", "reddiff", "dmplug", "pnpflow"}


# ---------------------------------------------------------------------------
# specs

@dataclass(frozen=True)
class PriorSpec:
    """How to build a GMM prior: ``ellipse_means``, ``em_fit`` or ``file``."""

    name: str
    kind: str
    options: dict = field(default_factory=dict)

    def build(self) -> GmmPrior:
        o = self.options
        if self.kind == "ellipse_means":
            return ellipse_means_prior(int(o.get("components", 8)), int(o.get("image_size", 32)),
                                       float(o.get("variance", 0.002)), int(o.get("seed", 0)),
                                       int(o.get("max_ellipses", 6)))
        if self.kind == "em_fit":
            size = int(o.get("image_size", 32))
            params = EllipseSceneParams(image_size=size,
                                        max_ellipses=int(o.get("max_ellipses", 6)))
            rng = np.random.default_rng(int(o.get("seed", 0)))
            data = np.array([generate_ellipse_image(params, rng).ravel()
                             for _ in range(int(o.get("n_samples", 200)))])
            return fit_gmm_em(data, int(o.get("components", 8)), int(o.get("iters", 50)),
                              seed=int(o.get("seed", 0)), image_shape=(size, size))
        if self.kind == "file":
            return read_gmm_csv(o["path"])
        raise ValueError(f"prior {self.name!r}: unknown kind {self.kind!r}")


@dataclass(frozen=True)
class ProblemSpec:
    """A forward operator, a noise model and a ground-truth source.

    ``truth`` is ``prior:NAME``, ``ellipses`` or ``file:PATH``.  Problems with
    the same ``seed_key`` share ground truths and noise draws, which pairs
    matched and mismatched variants of one problem.
    """

    name: str
    operator: str = "radon"
    image_size: int = 32
    operator_options: dict = field(default_factory=dict)
    noise: NoiseModel = field(default_factory=NoiseModel)
    truth: str = "ellipses"
    label: str = ""
    angle_perturbation: float = 0.0
    seed_key: str | None = None

    @property
    def key(self) -> str:
        return self.seed_key or self.name

    @property
    def sigma(self) -> float:
        return self.noise.level

    def with_noise(self, kind: str | None = None, level: float | None = None,
                   name: str | None = None) -> "ProblemSpec":
        nm = NoiseModel(kind or self.noise.kind, self.noise.level if level is None else level)
        return replace(self, noise=nm, name=name or self.name, seed_key=self.key)


@dataclass(frozen=True)
class SolverSpec:
    """A reconstruction method with fixed ``params`` and an optional tuning ``grid``.

    ``rules`` maps a parameter to a coefficient ``c``; the parameter is then
    set to ``c * sigma`` for the problem at hand.
    """

    name: str
    method: str
    params: dict = field(default_factory=dict)
    prior: str | None = None
    grid: dict = field(default_factory=dict)
    rules: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.method not in METHOD_PARAMS:
            raise ValueError(f"solver {self.name!r}: unknown method {self.method!r}")
        allowed = METHOD_PARAMS[self.method]
        for group in (self.params, self.grid, self.rules):
            bad = set(group) - allowed
            if bad:
                raise ValueError(f"solver {self.name!r}: unknown parameters {sorted(bad)}")
        for k, vals in self.grid.items():
            if len(vals) == 0:
                raise ValueError(f"solver {self.name!r}: empty grid for {k!r}")
        needs = self.method in NEEDS_PRIOR or (
            self.method == "smooth_reg" and self.params.get("reg", "gmm_neglog") == "gmm_neglog")
        if needs and self.prior is None:
            raise ValueError(f"solver {self.name!r}: method {self.method!r} needs a prior")

    def grid_points(self) -> list[dict]:
        keys = list(self.grid)
        return [dict(zip(keys, combo)) for combo in itertools.product(*(self.grid[k] for k in keys))]


@dataclass
class RunRecord:
    problem: str
    solver: str
    params: dict
    seed: int
    psnr: float
    ssim: float
    dc: float | None
    wall_ms: float
    grid_index: int = 0
    noise_index: int = 0
    error: str | None = None
    truth_prior: str | None = None
    recon_prior: str | None = None

    @property
    def ok(self) -> bool:
        return self.error is None

    def params_json(self) -> str:
        d = dict(self.params)
        if self.noise_index:
            d["_noise_index"] = self.noise_index
        if self.truth_prior is not None:
            d["_truth_prior"] = self.truth_prior
        if self.recon_prior is not None:
            d["_recon_prior"] = self.recon_prior
        if self.error is not None:
            d["_error"] = self.error
        return json.dumps(d, sort_keys=True)

    def sort_key(self):
        return (self.problem, self.solver, self.grid_index, self.seed, self.noise_index)


@dataclass
class Experiment:
    priors: dict
    problems: dict
    solvers: dict
    test_seeds: list
    val_seeds: list
    name: str = "experiment"


# ---------------------------------------------------------------------------
# seeds and noise

def derive_seed(*parts) -> int:
    """64-bit seed from the SHA-256 of the ``|``-joined string forms of ``parts``."""
    h = hashlib.sha256("|".join(str(p) for p in parts).encode("utf-8")).digest()
    return int.from_bytes(h[:8], "little")


def add_noise(y_clean, nm: NoiseModel, rng) -> np.ndarray:
    """Gaussian: ``y + s eta``.  Signal-dependent: ``y + d sqrt|y| eta`` with
    ``d^2 = s^2 m / sum|y|`` so both have total variance ``m s^2``."""
    y = np.asarray(y_clean, dtype=float)
    if nm.level == 0:
        return y.copy()
    eta = rng.standard_normal(y.shape)
    if nm.kind == "gaussian":
        return y + nm.level * eta
    total = float(np.sum(np.abs(y)))
    if total == 0:
        return y + nm.level * eta
    delta = nm.level * math.sqrt(y.size / total)
    return y + delta * np.sqrt(np.abs(y)) * eta


def perturb_angles(geom: RadonGeometry, max_deg: float, rng) -> RadonGeometry:
    """Shift every angle by an independent draw from ``U(-max_deg, max_deg)``."""
    if max_deg < 0:
        raise ValueError("max_deg must be non-negative")
    if max_deg == 0:
        return geom
    shifts = rng.uniform(-max_deg, max_deg, size=geom.n_angles)
    angles = np.asarray(geom.angles) + shifts
    if np.any(np.diff(angles) <= 0):
        raise ValueError("perturbation reorders the angles; reduce max_deg")
    return replace(geom, angles=tuple(angles))


# ---------------------------------------------------------------------------
# problem instances

@dataclass
class Instance:
    A: LinearOperator          # operator the solvers see
    x_true: np.ndarray
    y: np.ndarray
    geom: RadonGeometry | None


class Bench:
    """Resolves names to priors and operators and runs single evaluations.

    Built priors, operators and noise models are cached per instance.
    """

    def __init__(self, priors: dict | None = None, master_seed: int = 0, jobs: int = 1):
        self.prior_specs = {}
        self._priors = {}
        for name, p in (priors or {}).items():
            if isinstance(p, GmmPrior):
                self._priors[name] = p
            else:
                self.prior_specs[name] = p
        self.master_seed = int(master_seed)
        self.jobs = max(1, int(jobs))
        self._ops = {}
        self._models = {}

    def prior(self, name: str) -> GmmPrior:
        if name not in self._priors:
            if name not in self.prior_specs:
                raise KeyError(f"unknown prior {name!r}")
            self._priors[name] = self.prior_specs[name].build()
        return self._priors[name]

    def eps_model(self, prior_name: str, T: int = 1000) -> EpsModel:
        key = (prior_name, T)
        if key not in self._models:
            self._models[key] = EpsModel(self.prior(prior_name), make_schedule(T))
        return self._models[key]

    def seed(self, *parts) -> int:
        return derive_seed(self.master_seed, *parts)

    # -- operators

    def geometry(self, p: ProblemSpec) -> RadonGeometry | None:
        if p.operator != "radon":
            return None
        o = p.operator_options
        return RadonGeometry(p.image_size, uniform_angles(int(o.get("angles", 90))),
                             int(o["detectors"]) if "detectors" in o else None)

    def operator(self, p: ProblemSpec) -> LinearOperator:
        o = p.operator_options
        key = (p.operator, p.image_size, tuple(sorted(o.items())), p.key)
        if key in self._ops:
            return self._ops[key]
        shape = (p.image_size, p.image_size)
        if p.operator == "radon":
            A = Radon(self.geometry(p))
        elif p.operator == "identity":
            A = Identity(shape)
        elif p.operator == "inpaint":
            rng = np.random.default_rng(self.seed(p.key, "mask"))
            A = Mask(random_mask(shape, float(o.get("missing", 0.6)), rng))
        elif p.operator == "blur":
            if o.get("kernel", "motion") == "motion":
                k = motion_blur_kernel(int(o.get("length", 9)), float(o.get("angle", 30.0)))
            else:
                k = gaussian_kernel(float(o.get("kernel_sigma", 1.0)))
            A = Blur(shape, k)
        elif p.operator == "downsample":
            A = Downsample(shape, int(o.get("factor", 2)))
        else:
            raise ValueError(f"problem {p.name!r}: unknown operator {p.operator!r}")
        self._ops[key] = A
        return A

    def truth(self, p: ProblemSpec, index: int) -> np.ndarray:
        shape = (p.image_size, p.image_size)
        if p.truth.startswith("prior:"):
            prior = self.prior(p.truth[6:])
            rng = np.random.default_rng(self.seed(p.key, "truth", index))
            return prior.sample(rng).reshape(shape)
        if p.truth == "ellipses":
            rng = np.random.default_rng(self.seed(p.key, "truth", index))
            return generate_ellipse_image(EllipseSceneParams(image_size=p.image_size), rng)
        if p.truth.startswith("file:"):
            img = read_pgm(p.truth[5:])
            if img.shape != shape:
                raise ValueError(f"problem {p.name!r}: truth image has shape {img.shape}")
            return img
        raise ValueError(f"problem {p.name!r}: unknown truth source {p.truth!r}")

    def instance(self, p: ProblemSpec, index: int, noise_index: int = 0) -> Instance:
        A = self.operator(p)
        x_true = self.truth(p, index)
        geom = self.geometry(p)
        A_data = A
        if p.angle_perturbation > 0:
            if geom is None:
                raise ValueError(f"problem {p.name!r}: angle perturbation needs a radon operator")
            rng = np.random.default_rng(self.seed(p.key, "angles", index, noise_index))
            A_data = Radon(perturb_angles(geom, p.angle_perturbation, rng))
        rng = np.random.default_rng(self.seed(p.key, "noise", index, noise_index))
        y = add_noise(A_data.apply(x_true), p.noise, rng)
        return Instance(A, x_true, y, geom)

    # -- solvers

    def initial_guess(self, inst: Instance) -> np.ndarray:
        if inst.geom is not None:
            return fbp(inst.y, inst.geom)
        return inst.A.adjoint(inst.y)

    def resolve_params(self, s: SolverSpec, p: ProblemSpec, point: dict | None = None) -> dict:
        params = dict(s.params)
        params.update(point or {})
        for k, c in s.rules.items():
            params[k] = float(c) * p.sigma
        return params

    def solve(self, p: ProblemSpec, s: SolverSpec, params: dict, inst: Instance, rng):
        A, y = inst.A, inst.y
        m = s.method
        if m == "fbp":
            if inst.geom is None:
                raise ValueError("fbp needs a radon operator")
            return fbp(y, inst.geom, params.get("filter", "ramp"))
        x0 = self.initial_guess(inst)
        if m == "tv":
            pd = PdParams(max_iters=int(params.get("max_iters", 2000)),
                          rel_tol=float(params.get("rel_tol", 1e-6)))
            return solve_tv(y, A, float(params.get("lam", 0.01)), pd, x0=x0)
        if m == "smooth_reg":
            kind = params.get("reg", "gmm_neglog")
            R = Regularizer(kind, self.prior(s.prior) if kind == "gmm_neglog" else None)
            agd = AgdParams(max_iters=int(params.get("max_iters", 1000)),
                            rel_tol=float(params.get("rel_tol", 1e-8)))
            return solve_smooth(y, A, float(params.get("lam", 0.01)), R, agd, x_init=x0)
        if m == "dps":
            steps = int(params.get("steps", 1000))
            model = self.eps_model(s.prior, steps)
            return dps(y, A, p.sigma, model, DpsConfig(float(params.get("gamma", 1.0)), steps), rng)
        if m == "diffpir":
            cfg = DiffPirConfig(lam=float(params.get("lam", 1.0)),
                                zeta=float(params.get("zeta", 0.5)),
                                steps=int(params.get("steps", 1000)),
                                rho_rule=params.get("rho_rule", "eq_form"))
            return diffpir(y, A, max(p.sigma, DIFFPIR_SIGMA_FLOOR), self.eps_model(s.prior),
                           cfg, rng)
        if m == "reddiff":
            cfg = RedDiffConfig(gamma=float(params.get("gamma", 1.0)),
                                lam=float(params.get("lam", 0.1)),
                                lr=float(params.get("lr", 0.05)),
                                steps=int(params.get("steps", 1000)))
            return reddiff(y, A, self.eps_model(s.prior), cfg, x0, rng)
        if m == "dmplug":
            patience = params.get("patience", 100)
            cfg = DmPlugConfig(k_steps=int(params.get("k_steps", 4)),
                               lr=float(params.get("lr", 0.01)),
                               max_iters=int(params.get("max_iters", 1500)),
                               window=int(params.get("window", 50)),
                               patience=None if patience in (None, "none") else int(patience))
            return dmplug(y, A, self.eps_model(s.prior), cfg, rng)
        if m == "pnpflow":
            cfg = PnpFlowConfig(gamma=float(params.get("gamma", 1.0)),
                                steps=int(params.get("steps", 100)),
                                n_noise=int(params.get("n_noise", 5)),
                                alpha=float(params.get("alpha", 1.0)),
                                variant=params.get("variant", "implicit"))
            return pnpflow(y, A, FlowPrior(self.prior(s.prior)), cfg, rng, x0)
        raise ValueError(f"unknown method {m!r}")

    def run_one(self, p: ProblemSpec, s: SolverSpec, params: dict, index: int,
                grid_index: int = 0, noise_index: int = 0) -> RunRecord:
        truth_prior = p.truth[6:] if p.truth.startswith("prior:") else None
        rec = RunRecord(p.name, s.name, params, index, math.nan, math.nan, None, 0.0,
                        grid_index, noise_index, None, truth_prior, s.prior)
        inst = self.instance(p, index, noise_index)
        rng = np.random.default_rng(self.seed(p.key, s.name, grid_index, index, noise_index))
        t0 = time.perf_counter()
        try:
            x = self.solve(p, s, params, inst, rng)
            if not np.all(np.isfinite(x)):
                raise FloatingPointError("reconstruction has non-finite entries")
        except (ArithmeticError, RuntimeError, ValueError, np.linalg.LinAlgError) as exc:
            rec.wall_ms = 1e3 * (time.perf_counter() - t0)
            rec.error = f"{type(exc).__name__}: {exc}"
            return rec
        rec.wall_ms = 1e3 * (time.perf_counter() - t0)
        rep = evaluate(x, inst.x_true, inst.y, inst.A, p.noise)
        rec.psnr, rec.ssim, rec.dc = rep.psnr_db, rep.ssim, rep.dc
        return rec

    def run_many(self, tasks) -> list[RunRecord]:
        """Run ``(problem, solver, params, index, grid_index, noise_index)`` tuples,
        preserving task order."""
        tasks = list(tasks)
        if self.jobs == 1 or len(tasks) < 2:
            return [self.run_one(*t) for t in tasks]
        with ProcessPoolExecutor(max_workers=self.jobs) as ex:
            return list(ex.map(_run_task, [(self, t) for t in tasks]))


def _run_task(arg):
    bench, task = arg
    return bench.run_one(*task)


# ---------------------------------------------------------------------------
# protocols

def _mean_sd(values):
    v = np.asarray([x for x in values if x is not None and math.isfinite(x)], dtype=float)
    if v.size == 0:
        return math.nan, math.nan
    return float(v.mean()), float(v.std(ddof=1)) if v.size > 1 else 0.0


def grid_search(problem: ProblemSpec, solver: SolverSpec, grid: dict | None, val_seeds,
                bench: Bench | None = None, report_all: bool = False):
    """Pick the grid point with the highest mean validation PSNR.

    Ties go to the earliest point.  Returns ``(best_params, best_index, table)``
    where ``table`` has one dict per point with ``mean_psnr``, ``sd_psnr`` and
    ``n_ok``; with ``report_all`` the validation records are returned as a
    fourth element.
    """
    bench = bench or Bench()
    grid = solver.grid if grid is None else grid
    if not grid or any(len(v) == 0 for v in grid.values()):
        raise ValueError("grid search needs a non-empty grid")
    keys = list(grid)
    points = [dict(zip(keys, c)) for c in itertools.product(*(grid[k] for k in keys))]
    val_seeds = list(val_seeds)
    tasks = []
    for gi, pt in enumerate(points):
        params = bench.resolve_params(solver, problem, pt)
        tasks += [(problem, solver, params, s, gi, 0) for s in val_seeds]
    records = bench.run_many(tasks)
    table, best, best_i = [], -math.inf, None
    for gi, pt in enumerate(points):
        recs = [r for r in records if r.grid_index == gi and r.ok]
        mean, sd = _mean_sd([r.psnr for r in recs])
        table.append({"grid_index": gi, "params": pt, "mean_psnr": mean, "sd_psnr": sd,
                      "n_ok": len(recs)})
        if recs and mean > best:
            best, best_i = mean, gi
    if best_i is None:
        raise RuntimeError(f"grid search for {solver.name!r} on {problem.name!r}: every run failed")
    out = (bench.resolve_params(solver, problem, points[best_i]), best_i, table)
    return out + (records,) if report_all else out


def run_experiment(problem: ProblemSpec, solvers, test_seeds, bench: Bench | None = None,
                   val_seeds=None) -> list[RunRecord]:
    """Evaluate each solver on each test seed.

    Solvers with a grid are tuned on ``val_seeds`` first (when given).  Failed
    runs are kept with their error message.  Records are sorted by
    (problem, solver, grid index, seed).
    """
    bench = bench or Bench()
    tasks = []
    for s in solvers:
        if s.grid and val_seeds:
            params, gi, _ = grid_search(problem, s, s.grid, val_seeds, bench)
        else:
            params, gi = bench.resolve_params(s, problem), 0
        tasks += [(problem, s, params, seed, gi, 0) for seed in test_seeds]
    return sorted(bench.run_many(tasks), key=RunRecord.sort_key)


def sweep_noise_to_zero(problem: ProblemSpec, solvers, sigmas, test_seeds, val_seeds=None,
                        bench: Bench | None = None, plot_prefix: str | None = None):
    """PSNR as the noise level decreases, re-tuning every solver at each level.

    Returns ``(records, curves)`` with ``curves[solver] = [(sigma, mean_psnr), ...]``.
    With ``plot_prefix`` one ``<prefix>.<solver>.dat`` file (columns sigma, psnr)
    is written per solver.
    """
    sigmas = [float(s) for s in sigmas]
    if any(b >= a for a, b in zip(sigmas, sigmas[1:])):
        raise ValueError("sigma list must be strictly decreasing")
    bench = bench or Bench()
    records, curves = [], {s.name: [] for s in solvers}
    for sig in sigmas:
        p = problem.with_noise(level=sig, name=f"{problem.name}@sigma={sig:g}")
        recs = run_experiment(p, solvers, test_seeds, bench, val_seeds)
        records += recs
        for s in solvers:
            mean, _ = _mean_sd([r.psnr for r in recs if r.solver == s.name and r.ok])
            curves[s.name].append((sig, mean))
    if plot_prefix is not None:
        for name, pts in curves.items():
            write_plot_data(f"{plot_prefix}.{name}.dat", ("sigma", "psnr"), pts)
    return records, curves


def write_plot_data(path, columns, rows):
    with atomic_write(path) as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([repr(float(v)) for v in row])


def stability_over_noise(problem: ProblemSpec, solver: SolverSpec, n_realizations: int,
                         truth_seeds, bench: Bench | None = None, params: dict | None = None):
    """Spread of the metrics over independent noise draws for fixed ground truths.

    For every ground truth the sample standard deviation over ``n_realizations``
    noise draws is computed per metric.  Returns ``(summary, records)`` where
    ``summary[metric]`` holds ``mean``, ``sd_mean`` (average over images) and
    ``sd_max``.
    """
    if n_realizations < 2:
        raise ValueError("stability needs at least two noise realizations")
    bench = bench or Bench()
    if params is None:
        params = bench.resolve_params(solver, problem)
    truth_seeds = list(truth_seeds)
    tasks = [(problem, solver, params, t, 0, k)
             for t in truth_seeds for k in range(n_realizations)]
    records = sorted(bench.run_many(tasks), key=RunRecord.sort_key)
    summary = {}
    for metric in ("psnr", "ssim", "dc"):
        means, sds = [], []
        for t in truth_seeds:
            vals = [getattr(r, metric) for r in records if r.seed == t and r.ok]
            vals = [v for v in vals if v is not None and math.isfinite(v)]
            if len(vals) >= 2:
                arr = np.sort(np.asarray(vals))
                means.append(float(arr.mean()))
                sds.append(float(arr.std(ddof=1)))
        summary[metric] = {
            "mean": float(np.mean(means)) if means else math.nan,
            "sd_mean": float(np.mean(sds)) if sds else math.nan,
            "sd_max": float(np.max(sds)) if sds else math.nan,
        }
    return summary, records


# ---------------------------------------------------------------------------
# CSV

def _fmt(v):
    if v is None:
        return ""
    return repr(float(v))


def emit_csv(records, path):
    """Header plus one row per record; an undefined DC is an empty field."""
    with atomic_write(path) as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in records:
            w.writerow([r.problem, r.solver, r.params_json(), r.seed, _fmt(r.psnr),
                        _fmt(r.ssim), _fmt(r.dc), f"{r.wall_ms:.3f}"])


def read_csv(path) -> list[dict]:
    """Parse an emitted CSV; numbers become floats, an empty DC becomes None."""
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            out.append({
                "problem": row["problem"],
                "solver": row["solver"],
                "params": json.loads(row["params"]),
                "seed": int(row["seed"]),
                "psnr": float(row["psnr"]),
                "ssim": float(row["ssim"]),
                "dc": float(row["dc"]) if row["dc"] else None,
                "wall_ms": float(row["wall_ms"]),
            })
    return out


# ---------------------------------------------------------------------------
# experiment files

def _seed_list(text: str) -> list[int]:
    seeds = []
    for part in text.replace(" ", "").split(","):
        if not part:
            continue
        if "-" in part[1:]:
            a, b = part.split("-", 1)
            seeds += list(range(int(a), int(b) + 1))
        else:
            seeds.append(int(part))
    return seeds


def _value(text: str):
    text = text.strip()
    for conv in (int, float):
        try:
            return conv(text)
        except ValueError:
            pass
    return text


def _values(text: str) -> list:
    return [_value(v) for v in text.split(",") if v.strip()]


PROBLEM_KEYS = {"operator", "image_size", "noise", "sigma", "truth", "label",
                "angle_perturbation", "seed_key"}


def parse_experiment(text: str, base_dir: str = ".") -> Experiment:
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    cp.read_string(text)
    if not cp.has_section("experiment"):
        raise ValueError("missing [experiment] section")
    ex = cp["experiment"]
    version = int(ex.get("spec_version", "0"))
    if version != SPEC_VERSION:
        raise ValueError(f"unsupported spec_version {version} (expected {SPEC_VERSION})")
    priors, problems, solvers = {}, {}, {}
    for sec in cp.sections():
        if sec == "experiment":
            continue
        kind, _, name = sec.partition(":")
        body = dict(cp[sec])
        if not name:
            raise ValueError(f"section [{sec}] needs a name")
        if kind == "prior":
            opts = {k: v for k, v in body.items() if k != "kind"}
            if "path" in opts:
                opts["path"] = os.path.join(base_dir, opts["path"])
            priors[name] = PriorSpec(name, body.get("kind", "ellipse_means"), opts)
        elif kind == "problem":
            truth = body.get("truth", "ellipses")
            if truth.startswith("file:"):
                truth = "file:" + os.path.join(base_dir, truth[5:])
            problems[name] = ProblemSpec(
                name=name,
                operator=body.get("operator", "radon"),
                image_size=int(body.get("image_size", 32)),
                operator_options={k: _value(v) for k, v in body.items() if k not in PROBLEM_KEYS},
                noise=NoiseModel(body.get("noise", "gaussian"), float(body.get("sigma", 0.01))),
                truth=truth,
                label=body.get("label", ""),
                angle_perturbation=float(body.get("angle_perturbation", 0.0)),
                seed_key=body.get("seed_key"),
            )
        elif kind == "solver":
            params, grid, rules = {}, {}, {}
            for k, v in body.items():
                if k in ("method", "prior"):
                    continue
                if k.startswith("grid."):
                    grid[k[5:]] = _values(v)
                elif k.startswith("rule."):
                    rules[k[5:]] = float(v)
                else:
                    params[k] = _value(v)
            solvers[name] = SolverSpec(name, body["method"], params, body.get("prior"), grid, rules)
        else:
            raise ValueError(f"unknown section kind [{sec}]")
    for s in solvers.values():
        if s.prior is not None and s.prior not in priors:
            raise ValueError(f"solver {s.name!r} refers to unknown prior {s.prior!r}")
    for p in problems.values():
        if p.truth.startswith("prior:") and p.truth[6:] not in priors:
            raise ValueError(f"problem {p.name!r} refers to unknown prior {p.truth[6:]!r}")
    return Experiment(priors, problems, solvers,
                      _seed_list(ex.get("test_seeds", "0-4")),
                      _seed_list(ex.get("val_seeds", "1000-1002")),
                      ex.get("name", "experiment"))


def load_experiment(path) -> Experiment:
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    return parse_experiment(text, os.path.dirname(os.path.abspath(path)))


def run_bench(exp: Experiment, master_seed: int, jobs: int = 1, tune: bool = True):
    """Every solver on every problem of an experiment file."""
    bench = Bench(exp.priors, master_seed, jobs)
    records = []
    for p in exp.problems.values():
        records += run_experiment(p, list(exp.solvers.values()), exp.test_seeds, bench,
                                  exp.val_seeds if tune else None)
    return sorted(records, key=RunRecord.sort_key)
