"""Shared domain types, the Sobolev coil weighting and dataset normalization.

Images are plain 2D ``complex128`` numpy arrays indexed ``[y, x]`` with the
spatial origin at pixel ``(n // 2, n // 2)``.  Fourier conventions used
throughout the package:

* forward transform is unnormalized, ``sum_x f(x) exp(-2 pi i <x, k>)``;
* inverse transform carries ``1 / (width * height)``;
* frequency grids are centered, DC sits at index ``n // 2``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "SobolevConfig",
    "WindowSpec",
    "Unknowns",
    "check_image",
    "fft2c",
    "ifft2c",
    "fft2c_adjoint",
    "frequency_grid",
    "sobolev_weights",
    "sobolev_weight_apply",
    "sobolev_weight_adjoint",
    "normalize_dataset",
    "dataset_norm",
    "inner_product",
]


def check_image(img: np.ndarray, name: str = "image") -> np.ndarray:
    """Validate a 2D image and return it as ``complex128``."""
    arr = np.asarray(img)
    if arr.ndim != 2:
        raise ValueError(f"{name} must be 2D, got shape {arr.shape}")
    if arr.shape[0] < 2 or arr.shape[1] < 2:
        raise ValueError(f"{name} must be at least 2x2, got {arr.shape}")
    arr = arr.astype(np.complex128, copy=False)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


# ---
# Centered FFTs (act on the last two axes)

def fft2c(x: np.ndarray) -> np.ndarray:
    """Unnormalized centered forward DFT."""
    x = np.fft.ifftshift(x, axes=(-2, -1))
    return np.fft.fftshift(np.fft.fft2(x, axes=(-2, -1)), axes=(-2, -1))


def ifft2c(x: np.ndarray) -> np.ndarray:
    """Centered inverse DFT including the ``1/(width*height)`` factor."""
    x = np.fft.ifftshift(x, axes=(-2, -1))
    return np.fft.fftshift(np.fft.ifft2(x, axes=(-2, -1)), axes=(-2, -1))


def fft2c_adjoint(x: np.ndarray) -> np.ndarray:
    """Exact adjoint of :func:`fft2c` (inverse DFT without normalization)."""
    npix = x.shape[-1] * x.shape[-2]
    return ifft2c(x) * npix


def frequency_grid(shape: tuple[int, int]) -> tuple[np.ndarray, np.ndarray]:
    """Normalized centered frequency coordinates ``(ky, kx)`` in [-0.5, 0.5)."""
    ny, nx = shape
    ky = (np.arange(ny) - ny // 2) / ny
    kx = (np.arange(nx) - nx // 2) / nx
    return np.meshgrid(ky, kx, indexing="ij")


# ---
# Sobolev weighting

@dataclass(frozen=True)
class SobolevConfig:
    """Parameters of the coil smoothness weight ``a^-1 (1 + b |k|^2)^(-m/2)``."""

    a: float = 100.0
    b: float = 32.0
    m: float = 16.0

    def __post_init__(self):
        if not (self.a > 0 and self.b > 0 and self.m >= 0):
            raise ValueError(f"invalid Sobolev parameters a={self.a}, b={self.b}, m={self.m}")


_WEIGHT_CACHE: dict[tuple, np.ndarray] = {}


def sobolev_weights(shape: tuple[int, int], cfg: SobolevConfig) -> np.ndarray:
    """Real frequency-domain weights, DC at the grid center."""
    key = (tuple(shape), cfg.a, cfg.b, cfg.m)
    w = _WEIGHT_CACHE.get(key)
    if w is None:
        ky, kx = frequency_grid(shape)
        w = (1.0 + cfg.b * (kx**2 + ky**2)) ** (-cfg.m / 2.0) / cfg.a
        w.setflags(write=False)
        _WEIGHT_CACHE[key] = w
    return w


def sobolev_weight_apply(khat: np.ndarray, cfg: SobolevConfig) -> np.ndarray:
    """Map frequency-domain coefficients to a smooth image, ``W khat``.

    Works on any array whose last two axes are the frequency grid, so a whole
    stack of coil maps can be transformed at once.
    """
    khat = np.asarray(khat, dtype=np.complex128)
    if not np.all(np.isfinite(khat)):
        raise ValueError("non-finite values in Sobolev input")
    return ifft2c(sobolev_weights(khat.shape[-2:], cfg) * khat)


def sobolev_weight_adjoint(img: np.ndarray, cfg: SobolevConfig) -> np.ndarray:
    """Exact adjoint ``W*`` of :func:`sobolev_weight_apply`."""
    img = np.asarray(img, dtype=np.complex128)
    if not np.all(np.isfinite(img)):
        raise ValueError("non-finite values in Sobolev input")
    npix = img.shape[-1] * img.shape[-2]
    return sobolev_weights(img.shape[-2:], cfg) * fft2c(img) / npix


# ---
# Unknowns

@dataclass(frozen=True)
class WindowSpec:
    """Ordered set of temporal offsets aggregated around a center frame."""

    offsets: tuple[int, ...] = (-2, -1, 0, 1, 2)

    def __post_init__(self):
        offs = tuple(int(s) for s in self.offsets)
        object.__setattr__(self, "offsets", offs)
        if 0 not in offs:
            raise ValueError("window must contain offset 0")
        if any(b <= a for a, b in zip(offs, offs[1:])):
            raise ValueError("window offsets must be strictly increasing")

    @classmethod
    def parse(cls, text: str) -> "WindowSpec":
        return cls(tuple(sorted(int(s) for s in text.split(",") if s.strip())))

    def clip(self, t: int, n_frames: int) -> "WindowSpec":
        """Drop offsets that point outside ``[0, n_frames - 1]``."""
        return WindowSpec(tuple(s for s in self.offsets if 0 <= t + s < n_frames))


@dataclass
class Unknowns:
    """Density plus one coil map per (window offset, coil).

    ``coils`` has shape ``(len(offsets), n_coils, ny, nx)``; row ``i`` belongs
    to ``offsets[i]``.  In the reconstruction code the coil maps are stored in
    preconditioned (frequency) coordinates.
    """

    density: np.ndarray
    coils: np.ndarray
    offsets: tuple[int, ...] = (0,)

    def __post_init__(self):
        self.density = np.asarray(self.density, dtype=np.complex128)
        self.coils = np.asarray(self.coils, dtype=np.complex128)
        self.offsets = tuple(int(s) for s in self.offsets)
        if self.coils.ndim != 4:
            raise ValueError(f"coils must be 4D (offset, coil, y, x), got {self.coils.shape}")
        if self.coils.shape[0] != len(self.offsets):
            raise ValueError("coil stack does not match the number of offsets")
        if self.coils.shape[2:] != self.density.shape:
            raise ValueError("coil maps and density differ in size")

    @classmethod
    def zeros(cls, shape: tuple[int, int], n_coils: int, offsets: Sequence[int] = (0,)) -> "Unknowns":
        offsets = tuple(offsets)
        return cls(np.zeros(shape, np.complex128),
                   np.zeros((len(offsets), n_coils) + tuple(shape), np.complex128), offsets)

    @classmethod
    def initial(cls, shape: tuple[int, int], n_coils: int, offsets: Sequence[int] = (0,)) -> "Unknowns":
        """Density of ones, coils of zeros."""
        x = cls.zeros(shape, n_coils, offsets)
        x.density[...] = 1.0
        return x

    @property
    def shape(self) -> tuple[int, int]:
        return self.density.shape

    @property
    def n_coils(self) -> int:
        return self.coils.shape[1]

    def index(self, offset: int) -> int:
        return self.offsets.index(offset)

    def copy(self) -> "Unknowns":
        return Unknowns(self.density.copy(), self.coils.copy(), self.offsets)

    def zeros_like(self) -> "Unknowns":
        return Unknowns(np.zeros_like(self.density), np.zeros_like(self.coils), self.offsets)

    def _check(self, other: "Unknowns"):
        if self.offsets != other.offsets or self.coils.shape != other.coils.shape:
            raise ValueError("Unknowns shape mismatch")

    def __add__(self, other: "Unknowns") -> "Unknowns":
        self._check(other)
        return Unknowns(self.density + other.density, self.coils + other.coils, self.offsets)

    def __sub__(self, other: "Unknowns") -> "Unknowns":
        self._check(other)
        return Unknowns(self.density - other.density, self.coils - other.coils, self.offsets)

    def __mul__(self, scalar) -> "Unknowns":
        return Unknowns(self.density * scalar, self.coils * scalar, self.offsets)

    __rmul__ = __mul__

    def __neg__(self) -> "Unknowns":
        return self * -1.0

    def flatten(self) -> np.ndarray:
        return np.concatenate([self.density.ravel(), self.coils.ravel()])

    @classmethod
    def unflatten(cls, vec: np.ndarray, like: "Unknowns") -> "Unknowns":
        nd = like.density.size
        return cls(vec[:nd].reshape(like.density.shape),
                   vec[nd:].reshape(like.coils.shape), like.offsets)

    def norm(self) -> float:
        return float(np.sqrt(inner_product(self, self).real))

    def all_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.density)) and np.all(np.isfinite(self.coils)))


def inner_product(x: Unknowns, y: Unknowns) -> complex:
    """``sum conj(x) * y`` over every component (conjugate-linear in ``x``)."""
    x._check(y)
    return complex(np.vdot(x.density, y.density) + np.vdot(x.coils, y.coils))


# ---
# Dataset normalization

def dataset_norm(frames: Iterable) -> float:
    """L2 norm of all samples of all frames and coils."""
    total = 0.0
    for fr in frames:
        total += float(np.sum(np.abs(fr.samples) ** 2))
    return float(np.sqrt(total))


def normalize_dataset(frames: list, target: float = 100.0,
                      per_frame: bool = False) -> tuple[list, float]:
    """Scale every sample by one global factor.

    By default the norm over the whole dataset becomes ``target``.  With
    ``per_frame`` the root-mean-square of the per-frame norms becomes
    ``target`` instead, which keeps the data scale independent of the series
    length.  Returns the rescaled frames and the applied factor.
    """
    if target <= 0:
        raise ValueError("target norm must be positive")
    frames = list(frames)
    if not frames:
        raise ValueError("no frames to normalize")
    norm = dataset_norm(frames)
    if norm == 0.0:
        raise ValueError("cannot normalize an all-zero dataset")
    if per_frame:
        norm /= np.sqrt(len(frames))
    scale = target / norm
    return [fr.scaled(scale) for fr in frames], scale
