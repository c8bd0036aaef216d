"""Nonlinear inversion: joint density / coil estimation by IRGNM.

The model maps preconditioned unknowns ``(rho, c~)`` to k-space samples

    y[s, l] = S_{t+s} F( D_s(rho) * W c~[s, l] )

where ``W`` is the Sobolev weighting and ``D_s`` an optional linear density
map (identity for plain NLINV, a motion warp for aggregated reconstruction).
:class:`BilinearModel` carries everything the Gauss-Newton solver needs; the
module-level functions are the single-frame special case.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .core import (SobolevConfig, Unknowns, inner_product, sobolev_weight_adjoint,
                   sobolev_weight_apply)
from .nufft import (KbTable, PsfKernel, RadialTrajectory, build_kb_table, build_psf,
                    normal_apply, nufft_adjoint, nufft_forward)

log = logging.getLogger(__name__)

__all__ = [
    "MultiCoilFrame",
    "IrgnmConfig",
    "ReconResult",
    "ReconstructionError",
    "DensityMap",
    "BilinearModel",
    "default_table",
    "forward",
    "jacobian_apply",
    "jacobian_adjoint_apply",
    "conjugate_gradient",
    "cg_normal_solve",
    "irgnm",
    "solve_irgnm",
    "compose_image",
]


class ReconstructionError(RuntimeError):
    """Raised when a frame's solve diverges (non-finite iterates)."""

    def __init__(self, message: str, frame_index: Optional[int] = None):
        self.frame_index = frame_index
        if frame_index is not None:
            message = f"frame {frame_index}: {message}"
        super().__init__(message)


@dataclass(frozen=True, eq=False)
class MultiCoilFrame:
    """Samples of one frame for all coils; ``samples`` has shape (coils, n_samples)."""

    frame_index: int
    samples: np.ndarray
    trajectory: RadialTrajectory

    def __post_init__(self):
        s = np.asarray(self.samples, dtype=np.complex128)
        if s.ndim == 1:
            s = s[None]
        if s.ndim != 2 or s.shape[0] < 1:
            raise ValueError("samples must have shape (coils, n_samples)")
        if s.shape[1] != self.trajectory.n_samples:
            raise ValueError("sample count does not match the trajectory")
        object.__setattr__(self, "samples", s)

    @property
    def n_coils(self) -> int:
        return self.samples.shape[0]

    def scaled(self, factor: float) -> "MultiCoilFrame":
        return MultiCoilFrame(self.frame_index, self.samples * factor, self.trajectory)

    def with_samples(self, samples: np.ndarray) -> "MultiCoilFrame":
        return MultiCoilFrame(self.frame_index, samples, self.trajectory)


@dataclass(frozen=True)
class IrgnmConfig:
    """Outer (Gauss-Newton) and inner (CG) iteration controls.

    The CG stopping threshold at Newton step ``n`` is
    ``cg_tolerance * alpha_n`` relative to the right-hand side norm.
    """

    alpha0: float = 1.0
    q: float = 1.0 / 3.0
    newton_steps: int = 6
    cg_max_iter: int = 200
    cg_tolerance: float = 1e-2

    def __post_init__(self):
        if not self.alpha0 > 0:
            raise ValueError("alpha0 must be positive")
        if not 0 < self.q < 1:
            raise ValueError("q must lie in (0, 1)")
        if self.newton_steps < 1:
            raise ValueError("need at least one Newton step")
        if self.cg_max_iter < 1 or not self.cg_tolerance > 0:
            raise ValueError("invalid CG settings")

    def alphas(self) -> list[float]:
        return [self.alpha0 * self.q**n for n in range(self.newton_steps)]


@dataclass
class ReconResult:
    unknowns: Unknowns
    composed: np.ndarray
    residual_norm: float
    residual_history: list[float] = field(default_factory=list)
    cg_iterations: list[int] = field(default_factory=list)


_DEFAULT_TABLE: Optional[KbTable] = None


def default_table() -> KbTable:
    global _DEFAULT_TABLE
    if _DEFAULT_TABLE is None:
        _DEFAULT_TABLE = build_kb_table()
    return _DEFAULT_TABLE


@dataclass(frozen=True, eq=False)
class DensityMap:
    """A real linear map acting on the density and its exact adjoint."""

    apply: Callable[[np.ndarray], np.ndarray]
    adjoint: Callable[[np.ndarray], np.ndarray]


class BilinearModel:
    """Forward model over a window of frames sharing one density.

    Parameters
    ----------
    frames : sequence of MultiCoilFrame
        One frame per window offset, in the order of ``offsets``.
    offsets : sequence of int
        Window offsets; must match the coil stack of the unknowns.
    sobolev : SobolevConfig
    tbl : KbTable, optional
    density_maps : sequence of DensityMap or None, optional
        Per-offset density transform; ``None`` entries mean identity.
    """

    def __init__(self, frames: Sequence[MultiCoilFrame], offsets: Sequence[int],
                 sobolev: SobolevConfig, tbl: Optional[KbTable] = None,
                 density_maps: Optional[Sequence[Optional[DensityMap]]] = None):
        self.frames = list(frames)
        self.offsets = tuple(offsets)
        if len(self.frames) != len(self.offsets):
            raise ValueError("need exactly one frame per offset")
        if len({fr.n_coils for fr in self.frames}) != 1:
            raise ValueError("all frames must have the same coil count")
        self.sobolev = sobolev
        self.tbl = tbl if tbl is not None else default_table()
        maps = list(density_maps) if density_maps is not None else [None] * len(self.frames)
        if len(maps) != len(self.frames):
            raise ValueError("need one density map per offset")
        self.density_maps = maps
        self._psfs: dict[int, PsfKernel] = {}

    @property
    def n_coils(self) -> int:
        return self.frames[0].n_coils

    def data(self) -> list[np.ndarray]:
        return [fr.samples for fr in self.frames]

    def psf(self, i: int, n: int) -> PsfKernel:
        psf = self._psfs.get(i)
        if psf is None or psf.image_size != n:
            psf = build_psf(self.frames[i].trajectory, self.tbl, n)
            self._psfs[i] = psf
        return psf

    def _check(self, x: Unknowns):
        if x.offsets != self.offsets:
            raise ValueError(f"unknowns carry offsets {x.offsets}, model expects {self.offsets}")
        if x.n_coils != self.n_coils:
            raise ValueError("coil count mismatch between unknowns and data")

    def _map(self, i: int, img: np.ndarray) -> np.ndarray:
        m = self.density_maps[i]
        return img if m is None else m.apply(img)

    def _map_adjoint(self, i: int, img: np.ndarray) -> np.ndarray:
        m = self.density_maps[i]
        return img if m is None else m.adjoint(img)

    def coil_images(self, x: Unknowns) -> np.ndarray:
        """``W c~`` for every (offset, coil)."""
        return sobolev_weight_apply(x.coils, self.sobolev)

    def forward(self, x: Unknowns) -> list[np.ndarray]:
        self._check(x)
        wc = self.coil_images(x)
        return [nufft_forward(self._map(i, x.density) * wc[i], fr.trajectory, self.tbl)
                for i, fr in enumerate(self.frames)]

    def residual(self, x: Unknowns) -> list[np.ndarray]:
        return [y - g for y, g in zip(self.data(), self.forward(x))]

    def linearize(self, x: Unknowns) -> "Linearization":
        self._check(x)
        return Linearization(self, x)


class Linearization:
    """Derivative of :class:`BilinearModel` at a fixed point ``x``."""

    def __init__(self, model: BilinearModel, x: Unknowns):
        self.model = model
        self.x = x
        self.n = x.shape[0]
        self.wc = model.coil_images(x)
        self.rho = [model._map(i, x.density) for i in range(len(model.frames))]

    def _images(self, h: Unknowns) -> list[np.ndarray]:
        model = self.model
        wh = model.coil_images(h)
        return [model._map(i, h.density) * self.wc[i] + self.rho[i] * wh[i]
                for i in range(len(model.frames))]

    def _back(self, grids: list[np.ndarray]) -> Unknowns:
        """Adjoint of :meth:`_images` given image-domain residuals per offset."""
        model = self.model
        density = None
        coils = np.empty_like(self.wc)
        for i, g in enumerate(grids):
            d = model._map_adjoint(i, np.sum(np.conj(self.wc[i]) * g, axis=0))
            density = d if density is None else density + d
            coils[i] = np.conj(self.rho[i]) * g
        coils = sobolev_weight_adjoint(coils, model.sobolev)
        return Unknowns(density, coils, self.x.offsets)

    def apply(self, h: Unknowns) -> list[np.ndarray]:
        return [nufft_forward(img, fr.trajectory, self.model.tbl)
                for img, fr in zip(self._images(h), self.model.frames)]

    def adjoint(self, residuals: Sequence[np.ndarray]) -> Unknowns:
        if len(residuals) != len(self.model.frames):
            raise ValueError("need one residual block per offset")
        grids = []
        for r, fr in zip(residuals, self.model.frames):
            r = np.asarray(r)
            if r.shape != fr.samples.shape:
                raise ValueError(f"residual shape {r.shape} != data shape {fr.samples.shape}")
            grids.append(nufft_adjoint(r, fr.trajectory, self.model.tbl, self.n))
        return self._back(grids)

    def normal(self, h: Unknowns) -> Unknowns:
        """``J* J h`` through the Toeplitz (PSF) path."""
        imgs = self._images(h)
        return self._back([normal_apply(img, self.model.psf(i, self.n))
                           for i, img in enumerate(imgs)])


# ---
# Single-frame operators

def _single(frame: MultiCoilFrame, x: Unknowns, sobolev, tbl) -> BilinearModel:
    if x.offsets != (0,):
        raise ValueError("single-frame operators need unknowns with offset 0 only")
    return BilinearModel([frame], (0,), sobolev, tbl)


def forward(x: Unknowns, frame: MultiCoilFrame, sobolev: SobolevConfig,
            tbl: Optional[KbTable] = None) -> np.ndarray:
    """Per-coil samples ``S F(rho * W c~_l)``, shape (coils, n_samples)."""
    return _single(frame, x, sobolev, tbl).forward(x)[0]


def jacobian_apply(x: Unknowns, h: Unknowns, frame: MultiCoilFrame, sobolev: SobolevConfig,
                   tbl: Optional[KbTable] = None) -> np.ndarray:
    return _single(frame, x, sobolev, tbl).linearize(x).apply(h)[0]


def jacobian_adjoint_apply(x: Unknowns, r: np.ndarray, frame: MultiCoilFrame,
                           sobolev: SobolevConfig, tbl: Optional[KbTable] = None) -> Unknowns:
    return _single(frame, x, sobolev, tbl).linearize(x).adjoint([r])


# ---
# Solvers

def conjugate_gradient(apply: Callable[[np.ndarray], np.ndarray], b: np.ndarray,
                       tol: float, max_iter: int) -> tuple[np.ndarray, int]:
    """CG for a Hermitian positive definite ``apply``; stops at ``|r| <= tol |b|``.

    Returns the solution and the number of iterations taken.
    """
    x = np.zeros_like(b)
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return x, 0
    r = b.copy()
    p = r.copy()
    rr = np.vdot(r, r).real
    for it in range(1, max_iter + 1):
        ap = apply(p)
        pap = np.vdot(p, ap).real
        if not np.isfinite(pap) or pap <= 0:
            if not np.isfinite(pap):
                raise FloatingPointError("non-finite value in CG")
            return x, it - 1
        step = rr / pap
        x += step * p
        r -= step * ap
        rr_new = np.vdot(r, r).real
        if not np.isfinite(rr_new):
            raise FloatingPointError("non-finite value in CG")
        if np.sqrt(rr_new) <= tol * bnorm:
            return x, it
        p = r + (rr_new / rr) * p
        rr = rr_new
    return x, max_iter


def cg_normal_solve(x: Unknowns, rhs: Unknowns, alpha: float,
                    operator: Callable[[Unknowns], Unknowns], cfg: IrgnmConfig,
                    tol: Optional[float] = None) -> Unknowns:
    """Solve ``(operator + alpha I) h = rhs`` by conjugate gradients.

    ``x`` only supplies the layout of the unknowns.  ``tol`` overrides
    ``cfg.cg_tolerance``.
    """
    h, _ = _cg_solve(x, rhs, alpha, operator, cfg, tol)
    return h


def _cg_solve(x, rhs, alpha, operator, cfg, tol=None):
    if not alpha > 0:
        raise ValueError("alpha must be positive")

    def apply(v):
        u = Unknowns.unflatten(v, x)
        return operator(u).flatten() + alpha * v

    vec, iters = conjugate_gradient(apply, rhs.flatten(),
                                    cfg.cg_tolerance if tol is None else tol, cfg.cg_max_iter)
    return Unknowns.unflatten(vec, x), iters


def _data_norm(res: list[np.ndarray]) -> float:
    return float(np.sqrt(sum(np.sum(np.abs(r) ** 2) for r in res)))


def solve_irgnm(model: BilinearModel, init: Unknowns, cfg: IrgnmConfig,
                frame_index: Optional[int] = None) -> tuple[Unknowns, list[float], list[int]]:
    """IRGNM with the Tikhonov anchor fixed at ``init``.

    Returns the final unknowns, the data residual norm before each step and
    after the last, and the CG iteration counts.
    """
    if not all(np.all(np.isfinite(y)) for y in model.data()):
        raise ReconstructionError("non-finite k-space data", frame_index)
    x0 = init
    x = init.copy()
    history, cg_counts = [], []
    for alpha in cfg.alphas():
        try:
            res = model.residual(x)
            history.append(_data_norm(res))
            lin = model.linearize(x)
            rhs = lin.adjoint(res) - alpha * (x - x0)
            h, iters = _cg_solve(x, rhs, alpha, lin.normal, cfg, cfg.cg_tolerance * alpha)
        except FloatingPointError as exc:
            raise ReconstructionError(str(exc), frame_index) from exc
        x = x + h
        cg_counts.append(iters)
        if not x.all_finite():
            raise ReconstructionError("non-finite iterate", frame_index)
        log.debug("alpha=%.3g cg=%d residual=%.4g", alpha, iters, history[-1])
    history.append(_data_norm(model.residual(x)))
    return x, history, cg_counts


def irgnm(frame: MultiCoilFrame, init: Unknowns, sobolev: SobolevConfig, cfg: IrgnmConfig,
          tbl: Optional[KbTable] = None) -> ReconResult:
    """Single-frame NLINV reconstruction."""
    model = _single(frame, init, sobolev, tbl)
    x, history, counts = solve_irgnm(model, init, cfg, frame.frame_index)
    return ReconResult(x, compose_image(x, sobolev), history[-1], history, counts)


def compose_image(x: Unknowns, sobolev: SobolevConfig) -> np.ndarray:
    """Density times root-sum-of-squares of the offset-0 coil images."""
    wc = sobolev_weight_apply(x.coils[x.index(0)], sobolev)
    return x.density * np.sqrt(np.sum(np.abs(wc) ** 2, axis=0))
