"""TV-L1 optical flow with an artifact-absorbing auxiliary image, and bicubic warps.

The flow ``u`` between a source and a destination image minimizes

    | src + grad(src) . u - dst + v |_1 + lam TV(u) + mu TV(v)

where ``v`` soaks up frame-specific artifacts of low total variation.  The
problem is solved coarse to fine; on every level the data term is
relinearized around the current warp a few times and each convex subproblem
is solved with a first-order primal-dual method.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.sparse as sp
from scipy import ndimage

__all__ = [
    "MotionField",
    "FlowConfig",
    "FlowProblem",
    "keys_kernel",
    "warp_matrix",
    "warp_bicubic",
    "warp_adjoint",
    "estimate_motion",
    "flow_objective",
    "gradient",
    "divergence",
]


@dataclass(frozen=True, eq=False)
class MotionField:
    """Per-pixel displacement in pixels; ``u[0]`` along x (columns), ``u[1]`` along y."""

    u: np.ndarray

    def __post_init__(self):
        u = np.asarray(self.u, dtype=np.float64)
        if u.ndim != 3 or u.shape[0] != 2:
            raise ValueError("motion field must have shape (2, ny, nx)")
        if not np.all(np.isfinite(u)):
            raise ValueError("motion field contains non-finite values")
        if np.max(np.abs(u), initial=0.0) > np.hypot(*u.shape[1:]):
            raise ValueError("displacement exceeds the image diagonal")
        object.__setattr__(self, "u", u)

    @classmethod
    def zeros(cls, shape: tuple[int, int]) -> "MotionField":
        return cls(np.zeros((2,) + tuple(shape)))

    @classmethod
    def constant(cls, shape: tuple[int, int], dx: float, dy: float) -> "MotionField":
        u = np.zeros((2,) + tuple(shape))
        u[0], u[1] = dx, dy
        return cls(u)

    @property
    def shape(self) -> tuple[int, int]:
        return self.u.shape[1:]

    def is_zero(self) -> bool:
        return not np.any(self.u)

    def magnitude(self) -> np.ndarray:
        return np.hypot(self.u[0], self.u[1])


@dataclass(frozen=True)
class FlowConfig:
    """TV-L1 weights and solver schedule.

    ``tau`` and ``sigma`` are the primal and dual step sizes; the dual
    operator is a stack of discrete gradients with squared norm at most 8, so
    ``8 * tau * sigma <= 1`` is required.
    """

    lam: float = 0.02
    mu: float = 1.0
    primal_dual_iters: int = 50
    tau: float = 1.0 / np.sqrt(8.0)
    sigma: float = 1.0 / np.sqrt(8.0)
    pyramid_levels: int = 4
    warps_per_level: int = 5
    median_size: int = 5
    max_step: Optional[float] = 1.0

    def __post_init__(self):
        if not (self.lam > 0 and self.mu > 0):
            raise ValueError("lam and mu must be positive")
        if self.tau <= 0 or self.sigma <= 0 or 8.0 * self.tau * self.sigma > 1.0 + 1e-12:
            raise ValueError("step sizes violate tau * sigma <= 1")
        if self.primal_dual_iters < 1 or self.pyramid_levels < 1 or self.warps_per_level < 1:
            raise ValueError("iteration counts must be positive")


@dataclass(frozen=True, eq=False)
class FlowProblem:
    src: np.ndarray
    dst: np.ndarray
    config: FlowConfig = FlowConfig()

    def __post_init__(self):
        src = np.asarray(self.src, dtype=np.float64)
        dst = np.asarray(self.dst, dtype=np.float64)
        if src.shape != dst.shape or src.ndim != 2:
            raise ValueError("source and destination must be 2D images of equal size")
        if not (np.all(np.isfinite(src)) and np.all(np.isfinite(dst))):
            raise ValueError("non-finite image values")
        object.__setattr__(self, "src", src)
        object.__setattr__(self, "dst", dst)

    @classmethod
    def from_complex(cls, src: np.ndarray, dst: np.ndarray,
                     config: FlowConfig = FlowConfig()) -> "FlowProblem":
        """Magnitudes of both images scaled to [0, 1] by their common maximum."""
        a, b = np.abs(src), np.abs(dst)
        top = max(a.max(), b.max())
        if top > 0:
            a, b = a / top, b / top
        return cls(a, b, config)


# ---
# Bicubic warping

def keys_kernel(t: np.ndarray, a: float = -0.5) -> np.ndarray:
    """Keys cubic convolution kernel."""
    t = np.abs(t)
    t2, t3 = t * t, t * t * t
    near = (a + 2) * t3 - (a + 3) * t2 + 1
    far = a * t3 - 5 * a * t2 + 8 * a * t - 4 * a
    return np.where(t <= 1, near, np.where(t < 2, far, 0.0))


def warp_matrix(field: MotionField) -> sp.csr_matrix:
    """Sparse matrix of ``img -> img(x + u(x))`` on the flattened grid.

    Source coordinates and tap indices are clamped to the grid.
    """
    ny, nx = field.shape
    yy, xx = np.meshgrid(np.arange(ny), np.arange(nx), indexing="ij")
    sx = np.clip(xx + field.u[0], 0, nx - 1).ravel()
    sy = np.clip(yy + field.u[1], 0, ny - 1).ravel()
    fx, fy = np.floor(sx), np.floor(sy)
    taps = np.arange(-1, 3)
    ix = fx[:, None] + taps  # (P, 4)
    iy = fy[:, None] + taps
    wx = keys_kernel(sx[:, None] - ix)
    wy = keys_kernel(sy[:, None] - iy)
    ix = np.clip(ix, 0, nx - 1).astype(np.int64)
    iy = np.clip(iy, 0, ny - 1).astype(np.int64)
    cols = (iy[:, :, None] * nx + ix[:, None, :]).reshape(len(sx), 16)
    w = (wy[:, :, None] * wx[:, None, :]).reshape(len(sx), 16)
    rows = np.repeat(np.arange(len(sx)), 16)
    mat = sp.csr_matrix((w.ravel(), (rows, cols.ravel())), shape=(ny * nx, ny * nx))
    mat.sum_duplicates()
    return mat


def _check_dims(img: np.ndarray, field: MotionField):
    if img.shape[-2:] != field.shape:
        raise ValueError(f"image {img.shape} and motion field {field.shape} differ in size")


def _apply(mat, img):
    flat = img.reshape(img.shape[:-2] + (-1,))
    out = (mat @ flat.reshape(-1, flat.shape[-1]).T).T
    return out.reshape(img.shape)


def warp_bicubic(img: np.ndarray, field: MotionField, mat: Optional[sp.csr_matrix] = None
                 ) -> np.ndarray:
    """``img(x + u(x))`` with Keys bicubic interpolation (real and imaginary parts alike)."""
    img = np.asarray(img)
    _check_dims(img, field)
    if field.is_zero():
        return img.copy()
    return _apply(warp_matrix(field) if mat is None else mat, img)


def warp_adjoint(img: np.ndarray, field: MotionField, mat: Optional[sp.csr_matrix] = None
                 ) -> np.ndarray:
    """Transpose of :func:`warp_bicubic` for the same field."""
    img = np.asarray(img)
    _check_dims(img, field)
    if field.is_zero():
        return img.copy()
    return _apply((warp_matrix(field) if mat is None else mat).T.tocsr(), img)


# ---
# Discrete differential operators (forward differences, Neumann boundary)

def gradient(f: np.ndarray) -> np.ndarray:
    g = np.zeros((2,) + f.shape)
    g[0, :, :-1] = f[:, 1:] - f[:, :-1]
    g[1, :-1, :] = f[1:, :] - f[:-1, :]
    return g


def divergence(p: np.ndarray) -> np.ndarray:
    """Negative adjoint of :func:`gradient`."""
    px, py = p[0], p[1]
    d = np.zeros(px.shape)
    d[:, :-1] += px[:, :-1]
    d[:, 1:] -= px[:, :-1]
    d[:-1, :] += py[:-1, :]
    d[1:, :] -= py[:-1, :]
    return d


def _tv(f: np.ndarray) -> float:
    g = gradient(f)
    return float(np.sum(np.hypot(g[0], g[1])))


def _project(p: np.ndarray, radius: float) -> np.ndarray:
    norm = np.maximum(1.0, np.hypot(p[0], p[1]) / radius)
    return p / norm


def _centered_gradient(f: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    gy, gx = np.gradient(f)
    return gx, gy


def _warp_real(img: np.ndarray, u: np.ndarray) -> np.ndarray:
    field = MotionField(u)
    return warp_bicubic(img, field)


def flow_objective(src: np.ndarray, dst: np.ndarray, u: np.ndarray, v: np.ndarray,
                   cfg: FlowConfig) -> float:
    """Objective with the exact (warped) data term."""
    resid = _warp_real(src, u) - dst + v
    return float(np.sum(np.abs(resid)) + cfg.lam * (_tv(u[0]) + _tv(u[1])) + cfg.mu * _tv(v))


def _solve_v(resid: np.ndarray, mu: float, iters: int) -> np.ndarray:
    """Minimize ``|resid + v|_1 + mu TV(v)`` over ``v`` with the motion held fixed."""
    tau = sigma = 1.0 / np.sqrt(8.0)
    v = np.zeros_like(resid)
    vb = v.copy()
    p = np.zeros((2,) + resid.shape)
    for _ in range(iters):
        p = _project(p + sigma * gradient(vb), mu)
        v_old = v
        a = v + tau * divergence(p) + resid
        v = np.sign(a) * np.maximum(np.abs(a) - tau, 0.0) - resid
        vb = 2 * v - v_old
    return v


def _solve_linearized(src, dst, u0, v, cfg, duals=None):
    """Primal-dual iterations for one linearization around ``u0``.

    The objective is divided by ``lam`` so the TV weight on ``u`` is one, and
    ``v`` is carried as ``w = (mu / lam) v`` so every dual ball has radius
    one; otherwise ``v`` runs unpenalized until its dual fills a ball of
    radius ``mu / lam``.  The dual handles the three total-variation terms,
    the primal prox is the pointwise L1 data term in closed form.  Returns the
    primal pair and the dual variables (to warm-start the next linearization).
    """
    warped = _warp_real(src, u0)
    ix, iy = _centered_gradient(warped)
    r0 = warped - ix * u0[0] - iy * u0[1] - dst
    ratio = cfg.mu / cfg.lam
    kv = 1.0 / ratio
    gg = ix * ix + iy * iy + kv * kv
    data_w = 1.0 / cfg.lam
    tau, sigma = cfg.tau, cfg.sigma
    thresh = tau * data_w * gg

    u = u0.copy()
    v = v * ratio
    ub, vb = u.copy(), v.copy()
    if duals is None:
        p1 = np.zeros((2,) + src.shape)
        p2 = np.zeros_like(p1)
        pv = np.zeros_like(p1)
    else:
        p1, p2, pv = duals
    for _ in range(cfg.primal_dual_iters):
        p1 = _project(p1 + sigma * gradient(ub[0]), 1.0)
        p2 = _project(p2 + sigma * gradient(ub[1]), 1.0)
        pv = _project(pv + sigma * gradient(vb), 1.0)

        u_old, v_old = u, v
        a1 = u_old[0] + tau * divergence(p1)
        a2 = u_old[1] + tau * divergence(p2)
        av = v_old + tau * divergence(pv)
        rho = ix * a1 + iy * a2 + kv * av + r0
        step = np.where(rho < -thresh, tau * data_w,
                        np.where(rho > thresh, -tau * data_w, -rho / gg))
        u = np.stack([a1 + step * ix, a2 + step * iy])
        v = av + step * kv
        ub = 2 * u - u_old
        vb = 2 * v - v_old
    if cfg.max_step is not None:
        # linearization is only trusted within this radius
        u = u0 + np.clip(u - u0, -cfg.max_step, cfg.max_step)
    return u, v * kv, (p1, p2, pv)


def _downsample(img: np.ndarray, shape) -> np.ndarray:
    smooth = ndimage.gaussian_filter(img, 0.6, mode="nearest")
    factors = (shape[0] / img.shape[0], shape[1] / img.shape[1])
    return ndimage.zoom(smooth, factors, order=1, mode="nearest", grid_mode=True)


def _pyramid(img: np.ndarray, shapes) -> dict:
    """Images for every level, each level smoothed and halved from the finer one."""
    out = {tuple(img.shape): img}
    cur = img
    for shape in shapes[-2::-1]:
        cur = _downsample(cur, shape)
        out[shape] = cur
    return out


def _resize_field(u: np.ndarray, shape) -> np.ndarray:
    fy, fx = shape[0] / u.shape[1], shape[1] / u.shape[2]
    out = np.empty((2,) + tuple(shape))
    out[0] = ndimage.zoom(u[0], (fy, fx), order=1, mode="nearest", grid_mode=True) * fx
    out[1] = ndimage.zoom(u[1], (fy, fx), order=1, mode="nearest", grid_mode=True) * fy
    return out


def _resize(img: np.ndarray, shape) -> np.ndarray:
    fy, fx = shape[0] / img.shape[0], shape[1] / img.shape[1]
    return ndimage.zoom(img, (fy, fx), order=1, mode="nearest", grid_mode=True)


def _pyramid_shapes(shape, levels):
    shapes = [tuple(shape)]
    for _ in range(levels - 1):
        ny, nx = shapes[-1]
        if min(ny, nx) < 16:
            break
        shapes.append(((ny + 1) // 2, (nx + 1) // 2))
    return shapes[::-1]


def estimate_motion(problem: FlowProblem, return_history: bool = False):
    """Estimate the displacement taking ``src`` onto ``dst``.

    The result satisfies ``src(x + u(x)) ~ dst(x)``.  With
    ``return_history`` the full-resolution objective after each pyramid
    level is returned as well.
    """
    cfg = problem.config
    src, dst = problem.src, problem.dst
    shapes = _pyramid_shapes(src.shape, cfg.pyramid_levels)
    src_pyr, dst_pyr = _pyramid(src, shapes), _pyramid(dst, shapes)
    u = np.zeros((2,) + shapes[0])
    history = []
    for shape in shapes:
        if u.shape[1:] != shape:
            u = _resize_field(u, shape)
        s, d = src_pyr[shape], dst_pyr[shape]
        if shape != src.shape:
            # smoothing dims small features; restore the [0, 1] contrast
            peak = max(s.max(), d.max())
            if peak > 0:
                s, d = s / peak, d / peak
        # the carried-over field competes with zero motion, each with its best v
        best = None
        for cand in ([u, np.zeros_like(u)] if np.any(u) else [u]):
            v_c = _solve_v(_warp_real(s, cand) - d, cfg.mu, 2 * cfg.primal_dual_iters)
            val = flow_objective(s, d, cand, v_c, cfg)
            if best is None or val < best:
                u, v, best = cand, v_c, val
        duals = None
        for _ in range(cfg.warps_per_level):
            u_new, v_new, duals = _solve_linearized(s, d, u, v, cfg, duals)
            # accept only steps that lower the exact objective, halving otherwise
            for _ in range(4):
                val = flow_objective(s, d, u_new, v_new, cfg)
                if val <= best:
                    u, v, best = u_new, v_new, val
                    break
                u_new, v_new = 0.5 * (u + u_new), 0.5 * (v + v_new)
            if cfg.median_size > 1:
                u_med = ndimage.median_filter(u, size=(1, cfg.median_size, cfg.median_size),
                                              mode="nearest")
                val = flow_objective(s, d, u_med, v, cfg)
                if val <= best:
                    u, best = u_med, val
        if return_history:
            uf = _resize_field(u, src.shape) if shape != src.shape else u
            vf = _resize(v, src.shape) if shape != src.shape else v
            history.append(flow_objective(src, dst, uf, vf, cfg))
    limit = np.hypot(*src.shape)
    field = MotionField(np.clip(u, -limit, limit))
    return (field, history) if return_history else field
