"""File formats: 16-bit PGM, CSV grids and GMM parameter blocks.

Every writer goes through :func:`atomic_write`, so an interrupted run never
leaves a truncated file behind.
"""

from __future__ import annotations

import contextlib
import io
import os
import tempfile

import numpy as np

from .priors import GmmPrior

__all__ = [
    "atomic_write",
    "write_pgm",
    "read_pgm",
    "write_grid_csv",
    "read_grid_csv",
    "write_gmm_csv",
    "read_gmm_csv",
]


@contextlib.contextmanager
def atomic_write(path, mode="w"):
    """Write to a temporary file next to ``path`` and rename it into place on success."""
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=".tmp-", dir=directory)
    try:
        kw = {} if "b" in mode else {"newline": "", "encoding": "utf-8"}
        with os.fdopen(fd, mode, **kw) as fh:
            yield fh
        os.replace(tmp, path)
    except BaseException:
        with contextlib.suppress(FileNotFoundError):
            os.unlink(tmp)
        raise


def write_pgm(path, img):
    """Binary PGM with maxval 65535; values are clipped to [0, 1] first."""
    img = np.asarray(img, dtype=float)
    if img.ndim != 2:
        raise ValueError("PGM images must be 2-D")
    if not np.all(np.isfinite(img)):
        raise ValueError("image contains non-finite values")
    data = np.rint(np.clip(img, 0.0, 1.0) * 65535).astype(">u2")
    h, w = img.shape
    with atomic_write(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n65535\n".encode("ascii"))
        fh.write(data.tobytes())


def _pgm_tokens(buf):
    # header tokens, skipping comments; returns tokens and offset of the raster
    tokens, pos = [], 0
    while len(tokens) < 4:
        while buf[pos:pos + 1].isspace():
            pos += 1
        if buf[pos:pos + 1] == b"#":
            pos = buf.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace():
            pos += 1
        tokens.append(buf[start:pos].decode("ascii"))
    return tokens, pos + 1


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        buf = fh.read()
    tokens, off = _pgm_tokens(buf)
    if tokens[0] != "P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    dtype = ">u2" if maxval > 255 else "u1"
    data = np.frombuffer(buf, dtype=dtype, count=w * h, offset=off)
    return data.reshape(h, w).astype(float) / maxval


def _format_rows(arr):
    out = io.StringIO()
    np.savetxt(out, np.atleast_2d(arr), fmt="%.17g", delimiter=",")
    return out.getvalue()


def write_grid_csv(path, arr):
    """One row per image row (or per projection angle for sinograms)."""
    arr = np.asarray(arr, dtype=float)
    if arr.ndim != 2:
        raise ValueError("grid CSV needs a 2-D array")
    with atomic_write(path) as fh:
        fh.write(_format_rows(arr))


def read_grid_csv(path) -> np.ndarray:
    return np.atleast_2d(np.loadtxt(path, delimiter=",", ndmin=2))


def write_gmm_csv(path, prior: GmmPrior):
    """Header ``# gmm K=.. n=.. [shape=HxW]``, then weights, one mean per row, variances."""
    header = f"# gmm K={prior.n_components} n={prior.dim}"
    if prior.image_shape is not None:
        header += " shape=" + "x".join(str(s) for s in prior.image_shape)
    with atomic_write(path) as fh:
        fh.write(header + "\n")
        fh.write(_format_rows(prior.weights))
        fh.write(_format_rows(prior.means))
        fh.write(_format_rows(prior.variances))


def read_gmm_csv(path) -> GmmPrior:
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().split()
        rows = [ln for ln in fh if ln.strip()]
    if header[:2] != ["#", "gmm"]:
        raise ValueError(f"{path}: missing gmm header")
    meta = dict(tok.split("=", 1) for tok in header[2:])
    K, n = int(meta["K"]), int(meta["n"])
    shape = tuple(int(s) for s in meta["shape"].split("x")) if "shape" in meta else None
    if len(rows) != K + 2:
        raise ValueError(f"{path}: expected {K + 2} data rows, found {len(rows)}")
    table = [np.array([float(v) for v in r.split(",")]) for r in rows]
    means = np.array(table[1:K + 1])
    if means.shape != (K, n):
        raise ValueError(f"{path}: mean block has shape {means.shape}, expected {(K, n)}")
    return GmmPrior(table[0], means, table[K + 1], shape)
