"""Kaiser-Bessel gridding for radial trajectories and the Toeplitz normal operator.

The forward operator evaluates ``sum_x f(x) exp(-2 pi i <x, k_j>)`` at
non-Cartesian frequencies ``k_j`` (cycles per pixel, |k| <= 0.5) by
deapodization, zero-padding to an oversampled grid, FFT and convolution with
a tabulated Kaiser-Bessel window.  The adjoint runs the same path backwards.

The interpolation weights are assembled once per (trajectory, table, image
size) into a sparse matrix, so the adjoint is exact by construction.
"""

from __future__ import annotations

import functools
import hashlib
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.special import i0

from .core import fft2c, fft2c_adjoint

__all__ = [
    "RadialTrajectory",
    "KbTable",
    "PsfKernel",
    "build_kb_table",
    "kb_kernel",
    "kb_transform",
    "nufft_forward",
    "nufft_adjoint",
    "build_psf",
    "normal_apply",
    "direct_dft",
    "direct_adjoint_dft",
]


@dataclass(frozen=True, eq=False)
class RadialTrajectory:
    """Sample positions of one frame.

    ``samples`` has shape ``(spokes * samples_per_spoke, 2)`` holding
    ``(kx, ky)`` in cycles per pixel; spoke ``j`` occupies rows
    ``j * samples_per_spoke`` to ``(j + 1) * samples_per_spoke``.
    """

    samples: np.ndarray
    spokes: int
    samples_per_spoke: int
    spoke_times: np.ndarray = field(default=None)

    def __post_init__(self):
        s = np.asarray(self.samples, dtype=np.float64).reshape(-1, 2)
        object.__setattr__(self, "samples", s)
        if s.shape[0] != self.spokes * self.samples_per_spoke:
            raise ValueError("sample count does not equal spokes * samples_per_spoke")
        times = self.spoke_times
        times = np.zeros(self.spokes) if times is None else np.asarray(times, dtype=np.float64)
        if times.shape != (self.spokes,):
            raise ValueError("need one timestamp per spoke")
        if np.any(np.diff(times) < 0):
            raise ValueError("spoke timestamps must be nondecreasing")
        object.__setattr__(self, "spoke_times", times)

    @property
    def n_samples(self) -> int:
        return self.samples.shape[0]

    @functools.cached_property
    def key(self) -> str:
        return hashlib.sha1(self.samples.tobytes()).hexdigest()


@dataclass(frozen=True, eq=False)
class KbTable:
    """Tabulated separable Kaiser-Bessel window.

    ``table[i]`` is the window at radius ``i / resolution`` grid cells,
    normalized to 1 at the center.
    """

    kernel_width: int
    beta: float
    oversampling: float
    resolution: int
    table: np.ndarray

    def __call__(self, radius: np.ndarray) -> np.ndarray:
        """Window value at ``radius`` (grid cells) by linear table interpolation."""
        r = np.abs(np.asarray(radius, dtype=np.float64)) * self.resolution
        i = np.floor(r).astype(np.int64)
        frac = r - i
        inside = i < len(self.table) - 1
        i = np.where(inside, i, 0)
        val = self.table[i] * (1.0 - frac) + self.table[i + 1] * frac
        return np.where(inside, val, 0.0)

    def grid_size(self, n: int) -> int:
        g = int(math.ceil(self.oversampling * n))
        return g + (g - n) % 2

    def deapodization(self, n: int) -> np.ndarray:
        """Reciprocal kernel transform on an ``n x n`` image grid (real)."""
        return _deapodization(self.kernel_width, self.beta, self.grid_size(n), n)


def kb_kernel(radius, kernel_width: int = 6, beta: float = 13.8551) -> np.ndarray:
    """Kaiser-Bessel window ``I0(beta sqrt(1 - (2r/L)^2)) / I0(beta)``, zero for r >= L/2."""
    r = np.abs(np.asarray(radius, dtype=np.float64))
    arg = 1.0 - (2.0 * r / kernel_width) ** 2
    return np.where(arg > 0, i0(beta * np.sqrt(np.clip(arg, 0, None))), 0.0) / i0(beta)


def kb_transform(nu, kernel_width: int = 6, beta: float = 13.8551) -> np.ndarray:
    """Continuous Fourier transform of :func:`kb_kernel` at frequency ``nu`` (cycles/cell)."""
    nu = np.asarray(nu, dtype=np.float64)
    z = np.sqrt((beta**2 - (np.pi * kernel_width * nu) ** 2).astype(np.complex128))
    small = np.abs(z) < 1e-8
    z = np.where(small, 1.0, z)
    val = np.where(small, 1.0, np.sinh(z) / z).real
    return kernel_width * val / i0(beta)


@functools.lru_cache(maxsize=32)
def _deapodization(kernel_width: int, beta: float, grid: int, n: int) -> np.ndarray:
    x = np.arange(n) - n // 2
    t = kb_transform(x / grid, kernel_width, beta)
    t = np.where(np.abs(t) < 1e-8 * np.abs(t).max(), 1e-8 * np.abs(t).max(), t)
    d = 1.0 / np.outer(t, t)
    d.setflags(write=False)
    return d


def build_kb_table(L: int = 6, beta: float = 13.8551, oversampling: float = 1.5,
                   resolution: int = 1000) -> KbTable:
    """Precompute the Kaiser-Bessel look-up table.

    Parameters
    ----------
    L : int
        Kernel width in oversampled grid cells (even).
    beta : float
        Kaiser-Bessel shape parameter.
    oversampling : float
        Ratio of gridding grid size to image size, > 1.
    resolution : int
        Table entries per grid cell, at least 100.
    """
    if L < 2 or L % 2:
        raise ValueError("kernel width must be even and >= 2")
    if not oversampling > 1:
        raise ValueError("oversampling must exceed 1")
    if beta <= 0:
        raise ValueError("beta must be positive")
    if resolution < 100:
        raise ValueError("table resolution must be at least 100 entries per cell")
    radius = np.arange(int(L / 2 * resolution) + 1) / resolution
    table = kb_kernel(radius, L, beta)
    table.setflags(write=False)
    return KbTable(int(L), float(beta), float(oversampling), int(resolution), table)


# ---
# Interpolation matrices

_PLANS: dict[tuple, sp.csr_matrix] = {}
_MAX_PLANS = 256


def _check_traj(traj: RadialTrajectory):
    if np.any(np.abs(traj.samples) > 0.5 + 1e-12):
        raise ValueError("trajectory sample outside [-0.5, 0.5]")


def _interp_matrix(traj: RadialTrajectory, tbl: KbTable, n: int) -> sp.csr_matrix:
    key = (traj.key, tbl.kernel_width, tbl.beta, tbl.oversampling, tbl.resolution, n)
    mat = _PLANS.get(key)
    if mat is not None:
        return mat
    _check_traj(traj)
    g = tbl.grid_size(n)
    L = tbl.kernel_width
    pos = traj.samples * g + g // 2  # (M, 2) grid coordinates, (x, y)
    base = np.floor(pos).astype(np.int64) - L // 2 + 1
    offs = np.arange(L)
    px = base[:, 0:1] + offs  # (M, L)
    py = base[:, 1:2] + offs
    wx = tbl(px - pos[:, 0:1])
    wy = tbl(py - pos[:, 1:2])
    w = (wy[:, :, None] * wx[:, None, :]).reshape(len(pos), -1)
    cols = ((py % g)[:, :, None] * g + (px % g)[:, None, :]).reshape(len(pos), -1)
    rows = np.repeat(np.arange(len(pos)), L * L)
    mat = sp.csr_matrix((w.ravel(), (rows, cols.ravel())), shape=(len(pos), g * g))
    mat.sum_duplicates()
    if len(_PLANS) >= _MAX_PLANS:
        _PLANS.pop(next(iter(_PLANS)))
    _PLANS[key] = mat
    return mat


def _pad(img: np.ndarray, g: int) -> np.ndarray:
    n = img.shape[-1]
    p = (g - n) // 2
    out = np.zeros(img.shape[:-2] + (g, g), np.complex128)
    out[..., p:p + n, p:p + n] = img
    return out


def _crop(grid: np.ndarray, n: int) -> np.ndarray:
    p = (grid.shape[-1] - n) // 2
    return grid[..., p:p + n, p:p + n]


def _check_square(img: np.ndarray):
    if img.ndim < 2 or img.shape[-1] != img.shape[-2]:
        raise ValueError(f"expected square images, got shape {img.shape}")


def nufft_forward(img: np.ndarray, traj: RadialTrajectory, tbl: KbTable) -> np.ndarray:
    """Sample the Fourier transform of ``img`` along ``traj``.

    ``img`` may carry leading batch axes (e.g. coils); the result has shape
    ``batch + (n_samples,)``.
    """
    img = np.asarray(img, dtype=np.complex128)
    _check_square(img)
    n = img.shape[-1]
    g = tbl.grid_size(n)
    mat = _interp_matrix(traj, tbl, n)
    grid = fft2c(_pad(img * tbl.deapodization(n), g))
    flat = grid.reshape(-1, g * g)
    out = (mat @ flat.T).T
    return out.reshape(img.shape[:-2] + (traj.n_samples,))


def nufft_adjoint(samples: np.ndarray, traj: RadialTrajectory, tbl: KbTable, n: int) -> np.ndarray:
    """Exact adjoint of :func:`nufft_forward` onto an ``n x n`` image."""
    samples = np.asarray(samples, dtype=np.complex128)
    if samples.shape[-1] != traj.n_samples:
        raise ValueError(f"expected {traj.n_samples} samples, got {samples.shape[-1]}")
    g = tbl.grid_size(n)
    mat = _interp_matrix(traj, tbl, n)
    flat = samples.reshape(-1, traj.n_samples)
    grid = (mat.conj().T @ flat.T).T.reshape(samples.shape[:-1] + (g, g))
    return _crop(fft2c_adjoint(grid), n) * tbl.deapodization(n)


# ---
# Toeplitz normal operator

@dataclass(frozen=True, eq=False)
class PsfKernel:
    """Frequency-domain multiplier on the ``2n x 2n`` grid.

    Normalized so that it equals 1 at frequencies that are sampled exactly
    once when the trajectory lies on the doubled Cartesian grid.
    """

    grid: np.ndarray
    image_size: int


def build_psf(traj: RadialTrajectory, tbl: KbTable, image_size: int) -> PsfKernel:
    """Grid unit weights onto the doubled grid to get ``F q``."""
    n2 = 2 * image_size
    ones = np.ones(traj.n_samples, np.complex128)
    if traj.n_samples:
        q = nufft_adjoint(ones, traj, tbl, n2)
    else:
        q = np.zeros((n2, n2), np.complex128)
    grid = fft2c(q) / (n2 * n2)
    grid.setflags(write=False)
    return PsfKernel(grid, image_size)


def normal_apply(img: np.ndarray, psf: PsfKernel) -> np.ndarray:
    """``F* S* S F img`` as a zero-padded circular convolution with ``q``."""
    img = np.asarray(img, dtype=np.complex128)
    n = img.shape[-1]
    if img.shape[-2:] != (psf.image_size, psf.image_size):
        raise ValueError(f"PSF built for {psf.image_size}x{psf.image_size}, got {img.shape[-2:]}")
    return _crop(fft2c_adjoint(psf.grid * fft2c(_pad(img, 2 * n))), n)


# ---
# Direct (slow) transforms used as references

def direct_dft(img: np.ndarray, k: np.ndarray) -> np.ndarray:
    """Direct evaluation of ``sum_x img(x) exp(-2 pi i <x, k>)``."""
    img = np.asarray(img, dtype=np.complex128)
    ny, nx = img.shape
    y = np.arange(ny) - ny // 2
    x = np.arange(nx) - nx // 2
    ex = np.exp(-2j * np.pi * np.outer(k[:, 0], x))  # (M, nx)
    ey = np.exp(-2j * np.pi * np.outer(k[:, 1], y))  # (M, ny)
    return np.einsum("my,yx,mx->m", ey, img, ex)


def direct_adjoint_dft(values: np.ndarray, k: np.ndarray, n: int) -> np.ndarray:
    """Direct evaluation of ``sum_j values_j exp(2 pi i <k_j, x>)`` on an ``n x n`` grid."""
    x = np.arange(n) - n // 2
    ex = np.exp(2j * np.pi * np.outer(k[:, 0], x))
    ey = np.exp(2j * np.pi * np.outer(k[:, 1], x))
    return np.einsum("m,my,mx->yx", np.asarray(values, np.complex128), ey, ex)
