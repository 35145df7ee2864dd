"""Linear forward operators with exact adjoints.

Every operator maps arrays of ``in_shape`` to arrays of ``out_shape``.  Flat
vectors of the right size are accepted as well and produce flat output, so
solvers can work either on images or on raveled vectors.

The Radon transform is discretized by sampling each ray at unit steps and
bilinearly interpolating the image.  The discretization is assembled once as
a sparse matrix, so the adjoint is its exact transpose.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

__all__ = [
    "RadonGeometry",
    "LinearOperator",
    "Identity",
    "MatrixOperator",
    "Radon",
    "Mask",
    "Blur",
    "Downsample",
    "Composition",
    "uniform_angles",
    "radon_apply",
    "fbp",
    "op_norm",
    "gaussian_kernel",
    "motion_blur_kernel",
    "random_mask",
]


@dataclass(frozen=True)
class RadonGeometry:
    """Parallel-beam geometry for a square image.

    Angles are in degrees.  Detector bins are centred on the rotation axis
    with ``detector_spacing`` pixels between bin centres.
    """

    image_size: int
    angles: tuple[float, ...]
    n_detectors: int | None = None
    detector_spacing: float = 1.0

    def __post_init__(self):
        angles = tuple(float(a) for a in self.angles)
        object.__setattr__(self, "angles", angles)
        if self.n_detectors is None:
            object.__setattr__(self, "n_detectors", int(self.image_size))
        if self.image_size < 1 or self.n_detectors < 1:
            raise ValueError("image_size and n_detectors must be positive")
        if len(angles) == 0:
            raise ValueError("geometry needs at least one angle")
        if any(b <= a for a, b in zip(angles, angles[1:])):
            raise ValueError("angles must be strictly increasing")
        if self.detector_spacing <= 0:
            raise ValueError("detector_spacing must be positive")

    @property
    def n_angles(self) -> int:
        return len(self.angles)

    @property
    def sino_shape(self) -> tuple[int, int]:
        return (self.n_angles, self.n_detectors)

    def detector_positions(self) -> np.ndarray:
        return (np.arange(self.n_detectors) - (self.n_detectors - 1) / 2) * self.detector_spacing


def uniform_angles(n: int) -> tuple[float, ...]:
    """``n`` angles uniformly spread over [0, 180) degrees."""
    return tuple(180.0 * np.arange(n) / n)


class LinearOperator:
    """Base class.  Subclasses implement ``_apply`` and ``_adjoint`` on
    arrays already reshaped to ``in_shape`` / ``out_shape``."""

    kind = "abstract"

    def __init__(self, in_shape, out_shape):
        self.in_shape = tuple(int(s) for s in in_shape)
        self.out_shape = tuple(int(s) for s in out_shape)
        self._norm = None

    @property
    def in_size(self) -> int:
        return math.prod(self.in_shape)

    @property
    def out_size(self) -> int:
        return math.prod(self.out_shape)

    def apply(self, x):
        x = np.asarray(x, dtype=float)
        if x.size != self.in_size:
            raise ValueError(f"{self.kind}: expected input of size {self.in_size} "
                             f"(shape {self.in_shape}), got shape {x.shape}")
        out = self._apply(x.reshape(self.in_shape))
        return out.ravel() if x.ndim == 1 and len(self.in_shape) != 1 else out

    def adjoint(self, y):
        y = np.asarray(y, dtype=float)
        if y.size != self.out_size:
            raise ValueError(f"{self.kind}: expected input of size {self.out_size} "
                             f"(shape {self.out_shape}), got shape {y.shape}")
        out = self._adjoint(y.reshape(self.out_shape))
        return out.ravel() if y.ndim == 1 and len(self.out_shape) != 1 else out

    def __call__(self, x):
        return self.apply(x)

    def normal(self, x):
        """``A^T A x``."""
        return self.adjoint(self.apply(x))

    def norm(self, iters: int = 100, seed: int = 0) -> float:
        """Cached spectral norm estimate."""
        if self._norm is None:
            self._norm = op_norm(self, iters=iters, seed=seed)
        return self._norm

    def to_dense(self) -> np.ndarray:
        """Dense matrix acting on raveled vectors.  Only for small operators."""
        eye = np.eye(self.in_size)
        return np.stack([self.apply(e) for e in eye], axis=1)

    def _apply(self, x):
        raise NotImplementedError

    def _adjoint(self, y):
        raise NotImplementedError

    def __repr__(self):
        return f"{type(self).__name__}(in_shape={self.in_shape}, out_shape={self.out_shape})"


class Identity(LinearOperator):
    kind = "identity"

    def __init__(self, shape):
        shape = (shape,) if np.isscalar(shape) else shape
        super().__init__(shape, shape)

    def _apply(self, x):
        return x.copy()

    def _adjoint(self, y):
        return y.copy()

    def norm(self, iters=100, seed=0):
        return 1.0


class MatrixOperator(LinearOperator):
    """Explicit matrix acting on raveled inputs."""

    kind = "matrix"

    def __init__(self, matrix, in_shape=None):
        matrix = np.asarray(matrix, dtype=float)
        if matrix.ndim != 2:
            raise ValueError("matrix must be 2-D")
        in_shape = (matrix.shape[1],) if in_shape is None else in_shape
        if math.prod(in_shape) != matrix.shape[1]:
            raise ValueError("in_shape does not match matrix columns")
        super().__init__(in_shape, (matrix.shape[0],))
        self.matrix = matrix

    def _apply(self, x):
        return self.matrix @ x.ravel()

    def _adjoint(self, y):
        return (self.matrix.T @ y).reshape(self.in_shape)

    def to_dense(self):
        return self.matrix.copy()


def _radon_matrix(geom: RadonGeometry) -> sp.csr_matrix:
    n = geom.image_size
    c = (n - 1) / 2
    n_samples = int(math.ceil(math.sqrt(2) * max(n, geom.n_detectors * geom.detector_spacing))) + 1
    u = np.arange(n_samples) - (n_samples - 1) / 2
    s = geom.detector_positions()
    theta = np.deg2rad(np.asarray(geom.angles))
    cos, sin = np.cos(theta)[:, None, None], np.sin(theta)[:, None, None]
    # sample points: s * (cos, sin) + u * (-sin, cos)
    px = s[None, :, None] * cos - u[None, None, :] * sin
    py = s[None, :, None] * sin + u[None, None, :] * cos
    col = px + c
    row = c - py
    c0 = np.floor(col)
    r0 = np.floor(row)
    fc = col - c0
    fr = row - r0
    c0 = c0.astype(np.int64)
    r0 = r0.astype(np.int64)
    ray = np.broadcast_to(np.arange(geom.n_angles * geom.n_detectors).reshape(
        geom.n_angles, geom.n_detectors, 1), col.shape)

    rows, cols, vals = [], [], []
    for dr, dc, w in ((0, 0, (1 - fr) * (1 - fc)), (0, 1, (1 - fr) * fc),
                      (1, 0, fr * (1 - fc)), (1, 1, fr * fc)):
        rr = r0 + dr
        cc = c0 + dc
        ok = (rr >= 0) & (rr < n) & (cc >= 0) & (cc < n) & (w > 0)
        rows.append(ray[ok])
        cols.append(rr[ok] * n + cc[ok])
        vals.append(w[ok])
    mat = sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                        shape=(geom.n_angles * geom.n_detectors, n * n))
    mat = mat.tocsr()
    mat.sum_duplicates()
    return mat


class Radon(LinearOperator):
    """Parallel-beam Radon transform, unit-step ray sampling, bilinear weights."""

    kind = "radon"

    def __init__(self, geom: RadonGeometry):
        super().__init__((geom.image_size, geom.image_size), geom.sino_shape)
        self.geom = geom
        self.matrix = _radon_matrix(geom)
        self._matrix_t = self.matrix.T.tocsr()

    def _apply(self, x):
        return (self.matrix @ x.ravel()).reshape(self.out_shape)

    def _adjoint(self, y):
        return (self._matrix_t @ y.ravel()).reshape(self.in_shape)

    def to_dense(self):
        return self.matrix.toarray()


class Mask(LinearOperator):
    """Pointwise multiplication by a binary mask (inpainting).  Self-adjoint."""

    kind = "inpaint_mask"

    def __init__(self, mask):
        mask = np.asarray(mask, dtype=float)
        if not np.all((mask == 0) | (mask == 1)):
            raise ValueError("mask must be binary")
        super().__init__(mask.shape, mask.shape)
        self.mask = mask

    def _apply(self, x):
        return x * self.mask

    def _adjoint(self, y):
        return y * self.mask

    def norm(self, iters=100, seed=0):
        return float(self.mask.max(initial=0.0))


def _kernel_spectrum(kernel, shape):
    """Transfer function of circular convolution with a centred kernel."""
    kernel = np.asarray(kernel, dtype=float)
    kh, kw = kernel.shape
    if kh > shape[0] or kw > shape[1]:
        raise ValueError("kernel larger than image")
    pad = np.zeros(shape)
    pad[:kh, :kw] = kernel
    pad = np.roll(pad, (-(kh // 2), -(kw // 2)), axis=(0, 1))
    return np.fft.rfft2(pad)


class Blur(LinearOperator):
    """Circular 2-D convolution with a fixed kernel."""

    kind = "blur_conv"

    def __init__(self, shape, kernel):
        super().__init__(shape, shape)
        self.kernel = np.asarray(kernel, dtype=float)
        self._h = _kernel_spectrum(self.kernel, self.in_shape)

    def _apply(self, x):
        return np.fft.irfft2(np.fft.rfft2(x) * self._h, s=self.in_shape)

    def _adjoint(self, y):
        return np.fft.irfft2(np.fft.rfft2(y) * np.conj(self._h), s=self.in_shape)


def gaussian_kernel(sigma: float, truncate: float = 4.0) -> np.ndarray:
    radius = max(int(math.ceil(truncate * sigma)), 1)
    t = np.arange(-radius, radius + 1)
    g = np.exp(-0.5 * (t / sigma) ** 2)
    k = np.outer(g, g)
    return k / k.sum()


def motion_blur_kernel(length: int = 9, angle_deg: float = 30.0) -> np.ndarray:
    """Normalized line kernel sampled with bilinear splatting."""
    size = length if length % 2 else length + 1
    k = np.zeros((size, size))
    c = size // 2
    a = np.deg2rad(angle_deg)
    for t in np.linspace(-(length - 1) / 2, (length - 1) / 2, 4 * length):
        x = c + t * np.cos(a)
        y = c - t * np.sin(a)
        x0, y0 = int(np.floor(x)), int(np.floor(y))
        fx, fy = x - x0, y - y0
        for dy, dx, w in ((0, 0, (1 - fy) * (1 - fx)), (0, 1, (1 - fy) * fx),
                          (1, 0, fy * (1 - fx)), (1, 1, fy * fx)):
            if 0 <= y0 + dy < size and 0 <= x0 + dx < size:
                k[y0 + dy, x0 + dx] += w
    return k / k.sum()


class Downsample(LinearOperator):
    """Gaussian low-pass (sigma = factor/2, circular) followed by stride subsampling."""

    kind = "downsample"

    def __init__(self, shape, factor: int):
        shape = tuple(int(s) for s in shape)
        if factor < 1 or shape[0] % factor or shape[1] % factor:
            raise ValueError("image shape must be divisible by the downsampling factor")
        super().__init__(shape, (shape[0] // factor, shape[1] // factor))
        self.factor = int(factor)
        self.blur = Blur(shape, gaussian_kernel(factor / 2.0))

    def _apply(self, x):
        return self.blur._apply(x)[::self.factor, ::self.factor]

    def _adjoint(self, y):
        up = np.zeros(self.in_shape)
        up[::self.factor, ::self.factor] = y
        return self.blur._adjoint(up)


class Composition(LinearOperator):
    """``ops[-1] @ ... @ ops[0]``: children are applied in list order."""

    kind = "composition"

    def __init__(self, ops):
        ops = list(ops)
        if not ops:
            raise ValueError("composition needs at least one operator")
        for a, b in zip(ops, ops[1:]):
            if a.out_size != b.in_size:
                raise ValueError(f"cannot chain {a!r} into {b!r}")
        super().__init__(ops[0].in_shape, ops[-1].out_shape)
        self.ops = ops

    def _apply(self, x):
        for op in self.ops:
            x = op.apply(x.reshape(op.in_shape))
        return x.reshape(self.out_shape)

    def _adjoint(self, y):
        for op in reversed(self.ops):
            y = op.adjoint(y.reshape(op.out_shape))
        return y.reshape(self.in_shape)


def random_mask(shape, missing: float, rng) -> np.ndarray:
    """Binary mask with exactly ``round(missing * size)`` zeros."""
    size = math.prod(shape)
    n_missing = int(round(missing * size))
    mask = np.ones(size)
    mask[rng.permutation(size)[:n_missing]] = 0.0
    return mask.reshape(shape)


def radon_apply(img, geom: RadonGeometry) -> np.ndarray:
    img = np.asarray(img, dtype=float)
    if img.shape != (geom.image_size, geom.image_size):
        raise ValueError(f"image shape {img.shape} does not match geometry size {geom.image_size}")
    return Radon(geom).apply(img)


def _ramp_response(length: int, spacing: float, filter_name: str):
    # band-limited ramp kernel sampled on |k| < length, zero-padded for linear convolution
    size = 1 << int(math.ceil(math.log2(2 * length)))
    k = np.arange(-(length - 1), length)
    h = np.zeros(k.shape)
    h[k == 0] = 1.0 / (4 * spacing ** 2)
    odd = (k % 2) != 0
    h[odd] = -1.0 / (np.pi * k[odd] * spacing) ** 2
    circ = np.zeros(size)
    circ[k % size] = h
    resp = np.real(np.fft.rfft(circ)) * spacing
    if filter_name == "hann":
        f = np.fft.rfftfreq(size)
        resp = resp * 0.5 * (1 + np.cos(2 * np.pi * f))
    elif filter_name != "ramp":
        raise ValueError(f"unknown filter {filter_name!r}")
    return size, resp


def fbp(sino, geom: RadonGeometry, filter: str = "ramp") -> np.ndarray:
    """Filtered backprojection with a band-limited ramp kernel and
    pixel-driven linear-interpolation backprojection.

    The filtered projections are evaluated beyond the detector span (where the
    measured projections are zero) so that pixels outside it still receive the
    negative tails of the filter.
    """
    sino = np.asarray(sino, dtype=float)
    if sino.size != geom.n_angles * geom.n_detectors:
        raise ValueError(f"sinogram shape {sino.shape} does not match geometry {geom.sino_shape}")
    sino = sino.reshape(geom.sino_shape)
    n = geom.image_size
    nd = geom.n_detectors
    reach = (n - 1) / math.sqrt(2) / geom.detector_spacing + 1
    pad = max(0, int(math.ceil(reach - (nd - 1) / 2)))
    length = nd + 2 * pad
    size, resp = _ramp_response(length, geom.detector_spacing, filter)
    padded = np.zeros((geom.n_angles, size))
    padded[:, pad:pad + nd] = sino
    filtered = np.fft.irfft(np.fft.rfft(padded, axis=1) * resp, n=size, axis=1)[:, :length]

    c = (n - 1) / 2
    xs = np.arange(n) - c
    X, Y = np.meshgrid(xs, -xs)
    out = np.zeros((n, n))
    for i, ang in enumerate(np.deg2rad(geom.angles)):
        s = X * np.cos(ang) + Y * np.sin(ang)
        idx = s / geom.detector_spacing + (length - 1) / 2
        i0 = np.floor(idx).astype(np.int64)
        f = idx - i0
        row = np.concatenate([[0.0], filtered[i], [0.0]])
        lo = np.clip(i0 + 1, 0, length + 1)
        hi = np.clip(i0 + 2, 0, length + 1)
        out += (1 - f) * row[lo] + f * row[hi]
    return out * (np.pi / geom.n_angles)


def op_norm(op: LinearOperator, iters: int = 100, seed: int = 0) -> float:
    """Power-iteration estimate of the spectral norm ``||A||_2``."""
    if iters < 1:
        raise ValueError("iters must be >= 1")
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(op.in_size)
    x /= np.linalg.norm(x)
    est = 0.0
    for _ in range(iters):
        ax = op.apply(x)
        est = max(est, float(np.linalg.norm(ax)))
        x = op.adjoint(ax).ravel()
        nx = np.linalg.norm(x)
        if nx == 0:
            return 0.0
        x /= nx
    return est
