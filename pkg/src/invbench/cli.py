"""Command-line entry point.

Every subcommand takes ``--seed`` (required), ``--out`` and ``--jobs``.  When
``--out`` is omitted the file goes to ``$INVBENCH_OUT/<default name>``.
Exit status: 0 on success, 1 on runtime failure, 2 on usage errors.
"""

from __future__ import annotations

import argparse
import csv
import glob
import json
import os
import sys
from dataclasses import replace

import numpy as np

from . import bench as bm
from .io import atomic_write, read_grid_csv, read_pgm, write_gmm_csv, write_grid_csv, write_pgm
from .priors import EllipseSceneParams, fit_gmm_em, generate_ellipse_image

ENV_OUT = "INVBENCH_OUT"


class UsageError(Exception):
    pass


def _common():
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("common options")
    g.add_argument("--seed", type=int, required=True, help="master seed (all randomness derives from it)")
    g.add_argument("--out", help=f"output path (default: ${ENV_OUT}/<name>)")
    g.add_argument("--jobs", type=int, default=1, help="worker processes (default 1)")
    return p


def _spec_arg(p):
    p.add_argument("--spec", required=True, help="experiment file")


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = argparse.ArgumentParser(
        prog="invbench",
        description="Benchmark generative and variational solvers on linear inverse problems.")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", required=True)

    p = sub.add_parser("gen-data", parents=[common], help="write random ellipse phantoms")
    p.add_argument("--count", type=int, default=10)
    p.add_argument("--image-size", type=int, default=64)
    p.add_argument("--max-ellipses", type=int, default=70)
    p.add_argument("--format", choices=("pgm", "csv"), default="pgm")

    p = sub.add_parser("fit-prior", parents=[common], help="fit a GMM prior by EM")
    p.add_argument("--data", help="directory of .pgm/.csv images (default: generate phantoms)")
    p.add_argument("--components", type=int, default=8)
    p.add_argument("--iters", type=int, default=100)
    p.add_argument("--count", type=int, default=200, help="phantoms to generate without --data")
    p.add_argument("--image-size", type=int, default=32)
    p.add_argument("--max-ellipses", type=int, default=6)

    p = sub.add_parser("solve", parents=[common], help="run solvers with their fixed parameters")
    _spec_arg(p)
    p.add_argument("--problem", action="append", help="restrict to these problems")
    p.add_argument("--solver", action="append", help="restrict to these solvers")

    p = sub.add_parser("bench", parents=[common], help="tune on validation seeds, evaluate on test seeds")
    _spec_arg(p)
    p.add_argument("--problem", action="append")
    p.add_argument("--solver", action="append")
    p.add_argument("--grid-table", help="also write the tuning tables as JSON lines")

    p = sub.add_parser("sweep-noise", parents=[common], help="PSNR as the noise level goes to zero")
    _spec_arg(p)
    p.add_argument("--problem", required=True)
    p.add_argument("--solver", action="append")
    p.add_argument("--sigmas", default="0.005,0.002,0.001,0.0",
                   help="strictly decreasing comma-separated list")

    p = sub.add_parser("stability", parents=[common], help="metric spread over noise realizations")
    _spec_arg(p)
    p.add_argument("--problem", required=True)
    p.add_argument("--solver", action="append")
    p.add_argument("--realizations", type=int, default=40)
    p.add_argument("--no-tune", action="store_true", help="skip validation tuning")

    p = sub.add_parser("mismatch", parents=[common], help="matched vs perturbed-angle vs signal-dependent noise")
    _spec_arg(p)
    p.add_argument("--problem", required=True)
    p.add_argument("--solver", action="append")
    p.add_argument("--max-deg", type=float, default=0.7)
    p.add_argument("--no-tune", action="store_true")
    return parser


def _out_path(args, default_name):
    if args.out:
        return args.out
    base = os.environ.get(ENV_OUT)
    if not base:
        raise UsageError(f"--out not given and ${ENV_OUT} is not set")
    return os.path.join(base, default_name)


def _load(args):
    if not os.path.isfile(args.spec):
        raise UsageError(f"spec file not found: {args.spec}")
    try:
        return bm.load_experiment(args.spec)
    except (ValueError, KeyError) as exc:
        raise UsageError(f"invalid spec {args.spec}: {exc}") from exc


def _pick(table, names, what):
    if not names:
        return list(table.values())
    missing = [n for n in names if n not in table]
    if missing:
        raise UsageError(f"unknown {what}: {', '.join(missing)}")
    return [table[n] for n in names]


def _stem(path):
    root, ext = os.path.splitext(path)
    return root if ext else path


def cmd_gen_data(args):
    out = _out_path(args, "phantoms")
    os.makedirs(out, exist_ok=True)
    rng = np.random.default_rng(args.seed)
    params = EllipseSceneParams(image_size=args.image_size, max_ellipses=args.max_ellipses)
    for i in range(args.count):
        img = generate_ellipse_image(params, rng)
        name = os.path.join(out, f"phantom_{i:04d}.{args.format}")
        (write_pgm if args.format == "pgm" else write_grid_csv)(name, img)
    print(f"wrote {args.count} phantoms to {out}")


def cmd_fit_prior(args):
    out = _out_path(args, "prior.csv")
    if args.data:
        files = sorted(glob.glob(os.path.join(args.data, "*.pgm"))
                       + glob.glob(os.path.join(args.data, "*.csv")))
        if not files:
            raise UsageError(f"no .pgm or .csv images in {args.data}")
        imgs = [read_pgm(f) if f.endswith(".pgm") else read_grid_csv(f) for f in files]
    else:
        rng = np.random.default_rng(args.seed)
        params = EllipseSceneParams(image_size=args.image_size, max_ellipses=args.max_ellipses)
        imgs = [generate_ellipse_image(params, rng) for _ in range(args.count)]
    shapes = {im.shape for im in imgs}
    if len(shapes) != 1:
        raise UsageError("training images differ in shape")
    shape = shapes.pop()
    prior = fit_gmm_em(np.array([im.ravel() for im in imgs]), args.components, args.iters,
                       seed=args.seed, image_shape=shape)
    write_gmm_csv(out, prior)
    print(f"wrote {prior.n_components}-component prior to {out}")


def _report(records):
    by = {}
    for r in records:
        by.setdefault((r.problem, r.solver), []).append(r)
    for (p, s), recs in sorted(by.items()):
        ok = [r.psnr for r in recs if r.ok]
        mean = f"{np.mean(ok):.2f}" if ok else "nan"
        print(f"{p:24s} {s:16s} psnr={mean} ok={len(ok)}/{len(recs)}")


def cmd_solve(args, tune=False):
    exp = _load(args)
    out = _out_path(args, "bench.csv" if tune else "solve.csv")
    problems = _pick(exp.problems, args.problem, "problem")
    solvers = _pick(exp.solvers, args.solver, "solver")
    bench = bm.Bench(exp.priors, args.seed, args.jobs)
    records, tables = [], []
    for p in problems:
        for s in solvers:
            if tune and s.grid:
                params, gi, table = bm.grid_search(p, s, s.grid, exp.val_seeds, bench)
                tables.append({"problem": p.name, "solver": s.name, "best": gi, "table": table})
            else:
                params, gi = bench.resolve_params(s, p), 0
            records += bench.run_many([(p, s, params, seed, gi, 0) for seed in exp.test_seeds])
    records.sort(key=bm.RunRecord.sort_key)
    bm.emit_csv(records, out)
    if tune and getattr(args, "grid_table", None):
        with atomic_write(args.grid_table) as fh:
            for t in tables:
                fh.write(json.dumps(t, sort_keys=True) + "\n")
    _report(records)
    return records


def cmd_sweep(args):
    exp = _load(args)
    out = _out_path(args, "sweep.csv")
    p = _pick(exp.problems, [args.problem], "problem")[0]
    solvers = _pick(exp.solvers, args.solver, "solver")
    try:
        sigmas = [float(v) for v in args.sigmas.split(",")]
    except ValueError as exc:
        raise UsageError(f"bad --sigmas: {exc}") from exc
    if any(b >= a for a, b in zip(sigmas, sigmas[1:])):
        raise UsageError("--sigmas must be strictly decreasing")
    bench = bm.Bench(exp.priors, args.seed, args.jobs)
    records, curves = bm.sweep_noise_to_zero(p, solvers, sigmas, exp.test_seeds, exp.val_seeds,
                                             bench, plot_prefix=_stem(out))
    bm.emit_csv(records, out)
    for name, pts in curves.items():
        print(name, " ".join(f"{s:g}:{v:.2f}" for s, v in pts))


def cmd_stability(args):
    exp = _load(args)
    out = _out_path(args, "stability.csv")
    p = _pick(exp.problems, [args.problem], "problem")[0]
    solvers = _pick(exp.solvers, args.solver, "solver")
    bench = bm.Bench(exp.priors, args.seed, args.jobs)
    records, rows = [], []
    for s in solvers:
        params = None
        if s.grid and not args.no_tune:
            params, _, _ = bm.grid_search(p, s, s.grid, exp.val_seeds, bench)
        summary, recs = bm.stability_over_noise(p, s, args.realizations, exp.test_seeds,
                                                bench, params)
        records += recs
        for metric, d in summary.items():
            rows.append((s.name, metric, d["mean"], d["sd_mean"], d["sd_max"]))
    bm.emit_csv(records, out)
    with atomic_write(_stem(out) + ".summary.csv") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("solver", "metric", "mean", "sd_mean", "sd_max"))
        for r in rows:
            w.writerow([r[0], r[1]] + [repr(float(v)) for v in r[2:]])
    for r in rows:
        print(f"{r[0]:16s} {r[1]:5s} mean={r[2]:.4g} sd_mean={r[3]:.4g} sd_max={r[4]:.4g}")


def cmd_mismatch(args):
    exp = _load(args)
    out = _out_path(args, "mismatch.csv")
    p = _pick(exp.problems, [args.problem], "problem")[0]
    solvers = _pick(exp.solvers, args.solver, "solver")
    variants = [p, replace(p, name=f"{p.name}+signal_noise", seed_key=p.key,
                              noise=bm.NoiseModel("signal_dependent", p.sigma))]
    if p.operator == "radon":
        variants.insert(1, replace(p, name=f"{p.name}+angles", seed_key=p.key,
                                      angle_perturbation=args.max_deg))
    bench = bm.Bench(exp.priors, args.seed, args.jobs)
    records = []
    for s in solvers:
        # tune on the matched problem and reuse the parameters everywhere
        if s.grid and not args.no_tune:
            params, gi, _ = bm.grid_search(p, s, s.grid, exp.val_seeds, bench)
        else:
            params, gi = bench.resolve_params(s, p), 0
        for v in variants:
            records += bench.run_many([(v, s, params, seed, gi, 0) for seed in exp.test_seeds])
    records.sort(key=bm.RunRecord.sort_key)
    bm.emit_csv(records, out)
    _report(records)


COMMANDS = {
    "gen-data": cmd_gen_data,
    "fit-prior": cmd_fit_prior,
    "solve": cmd_solve,
    "bench": lambda a: cmd_solve(a, tune=True),
    "sweep-noise": cmd_sweep,
    "stability": cmd_stability,
    "mismatch": cmd_mismatch,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.jobs < 1:
        parser.print_usage(sys.stderr)
        print("invbench: error: --jobs must be >= 1", file=sys.stderr)
        return 2
    try:
        COMMANDS[args.command](args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"invbench: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - report any runtime failure as exit 1
        print(f"invbench: {args.command} failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
