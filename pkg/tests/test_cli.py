import csv
import subprocess
import sys

import pytest

from invbench.bench import read_csv
from invbench.cli import COMMANDS, build_parser, main
from invbench.io import read_gmm_csv, read_pgm

SPEC = """
[experiment]
spec_version = 1
test_seeds = 0-1
val_seeds = 10-11

[prior:g]
kind = ellipse_means
components = 3
image_size = 16

[problem:ct]
operator = radon
image_size = 16
angles = 12
sigma = 0.01
truth = prior:g

[solver:fbp]
method = fbp

[solver:tik]
method = smooth_reg
reg = tikhonov_identity
rule.lam = 1
grid.max_iters = 50, 200
"""


@pytest.fixture
def spec(tmp_path):
    path = tmp_path / "s.cfg"
    path.write_text(SPEC)
    return str(path)


def _strip_wall(path):
    with open(path, newline="") as fh:
        return [row[:-1] for row in csv.reader(fh)]


def test_help_every_subcommand(capsys):
    for name in COMMANDS:
        assert main([name, "--help"]) == 0
        out = capsys.readouterr().out
        assert "--seed" in out and "--out" in out and "--jobs" in out
    assert main(["--help"]) == 0


def test_help_lists_subcommand_flags(capsys):
    main(["sweep-noise", "--help"])
    out = capsys.readouterr().out
    for flag in ("--spec", "--problem", "--solver", "--sigmas"):
        assert flag in out


def test_parse_errors_exit_2(spec, tmp_path):
    assert main([]) == 2
    assert main(["solve", "--spec", spec, "--out", str(tmp_path / "x.csv")]) == 2   # no seed
    assert main(["solve", "--spec", spec, "--seed", "1", "--bogus"]) == 2
    assert main(["nope", "--seed", "1"]) == 2


def test_missing_spec_exit_2(tmp_path, capsys):
    assert main(["solve", "--spec", str(tmp_path / "none.cfg"), "--seed", "1",
                 "--out", str(tmp_path / "r.csv")]) == 2
    assert "spec file not found" in capsys.readouterr().err
    assert not (tmp_path / "r.csv").exists()


def test_out_from_environment(spec, tmp_path, monkeypatch):
    monkeypatch.delenv("INVBENCH_OUT", raising=False)
    assert main(["solve", "--spec", spec, "--seed", "1"]) == 2
    monkeypatch.setenv("INVBENCH_OUT", str(tmp_path))
    assert main(["solve", "--spec", spec, "--seed", "1", "--solver", "fbp"]) == 0
    assert (tmp_path / "solve.csv").exists()


def test_solve_deterministic(spec, tmp_path):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    assert main(["solve", "--spec", spec, "--seed", "7", "--out", str(a)]) == 0
    assert main(["solve", "--spec", spec, "--seed", "7", "--out", str(b)]) == 0
    assert _strip_wall(a) == _strip_wall(b)
    assert len(read_csv(a)) == 4
    c = tmp_path / "c.csv"
    main(["solve", "--spec", spec, "--seed", "8", "--out", str(c)])
    assert _strip_wall(a) != _strip_wall(c)


def test_bench_writes_grid_table(spec, tmp_path):
    out, tab = tmp_path / "b.csv", tmp_path / "t.jsonl"
    assert main(["bench", "--spec", spec, "--seed", "1", "--solver", "tik",
                 "--out", str(out), "--grid-table", str(tab)]) == 0
    assert len(tab.read_text().splitlines()) == 1
    assert main(["bench", "--spec", spec, "--seed", "1", "--solver", "nope", "--out", str(out)]) == 2


def test_sweep_noise_plot_files(spec, tmp_path):
    out = tmp_path / "sw.csv"
    assert main(["sweep-noise", "--spec", spec, "--seed", "3", "--problem", "ct",
                 "--out", str(out)]) == 0
    for name in ("fbp", "tik"):
        lines = (tmp_path / f"sw.{name}.dat").read_text().splitlines()
        assert lines[0] == "sigma,psnr" and len(lines) == 5
    rows = read_csv(out)
    assert all(r["dc"] is None for r in rows if r["problem"].endswith("sigma=0"))
    assert main(["sweep-noise", "--spec", spec, "--seed", "3", "--problem", "ct",
                 "--sigmas", "0.001,0.01", "--out", str(out)]) == 2


def test_stability_and_mismatch(spec, tmp_path):
    out = tmp_path / "st.csv"
    assert main(["stability", "--spec", spec, "--seed", "2", "--problem", "ct", "--solver", "fbp",
                 "--realizations", "3", "--out", str(out)]) == 0
    assert len(read_csv(out)) == 6
    assert (tmp_path / "st.summary.csv").read_text().startswith("solver,metric,mean,sd_mean,sd_max")
    mm = tmp_path / "mm.csv"
    assert main(["mismatch", "--spec", spec, "--seed", "2", "--problem", "ct", "--solver", "fbp",
                 "--out", str(mm)]) == 0
    assert {r["problem"] for r in read_csv(mm)} == {"ct", "ct+angles", "ct+signal_noise"}


def test_gen_data_and_fit_prior(tmp_path):
    d = tmp_path / "data"
    assert main(["gen-data", "--seed", "4", "--count", "6", "--image-size", "8",
                 "--max-ellipses", "3", "--out", str(d)]) == 0
    imgs = sorted(d.iterdir())
    assert len(imgs) == 6 and read_pgm(imgs[0]).shape == (8, 8)
    prior_path = tmp_path / "prior.csv"
    assert main(["fit-prior", "--seed", "4", "--data", str(d), "--components", "2",
                 "--iters", "5", "--out", str(prior_path)]) == 0
    p = read_gmm_csv(prior_path)
    assert p.n_components == 2 and p.image_shape == (8, 8)


def test_runtime_failure_exit_1(tmp_path):
    bad = tmp_path / "bad.cfg"
    bad.write_text(SPEC.replace("kind = ellipse_means", "kind = file\npath = missing.csv"))
    assert main(["solve", "--spec", str(bad), "--seed", "1", "--solver", "tik",
                 "--out", str(tmp_path / "r.csv")]) == 1
    assert not (tmp_path / "r.csv").exists()


def test_console_module_entry(spec, tmp_path):
    res = subprocess.run([sys.executable, "-m", "invbench.cli", "solve", "--spec", spec],
                         capture_output=True, text=True)
    assert res.returncode == 2 and "--seed" in res.stderr


def test_parser_rejects_missing_subcommand():
    with pytest.raises(SystemExit):
        build_parser().parse_args(["--seed", "1"])
