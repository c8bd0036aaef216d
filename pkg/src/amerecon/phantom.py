"""Rotating-tube motion phantom with analytic k-space.

Geometry is given in millimetres and converted to pixels of the
reconstruction grid (``fov / base_resolution`` mm per pixel); k-space
positions are in cycles per pixel, matching :mod:`amerecon.nufft`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.special import j1

from .core import ifft2c
from .nlinv import MultiCoilFrame
from .nufft import RadialTrajectory

__all__ = [
    "Tube",
    "PhantomSpec",
    "CoilModel",
    "AcquisitionSpec",
    "make_trajectory",
    "disc_kspace",
    "synth_coils",
    "coil_values",
    "tube_centers",
    "simulate_series",
    "render_truth",
    "support_mask",
]


@dataclass(frozen=True)
class Tube:
    orbit_radius: float  # mm
    tube_radius: float = 5.0  # mm
    amplitude: float = 1.0
    start_angle_deg: float = 0.0


def _default_tubes() -> tuple[Tube, ...]:
    return (Tube(25.0, 5.0, 1.0, 90.0),
            Tube(37.75, 5.0, 1.0, 210.0),
            Tube(55.0, 5.0, 1.0, 330.0))


@dataclass(frozen=True)
class PhantomSpec:
    """Tubes fixed on a disc that rotates about the field-of-view center.

    With ``toggle_shift`` set, rotation is replaced by a jump: the object is
    displaced by ``toggle_shift`` (mm, (x, y)) for ``toggle_on_frames`` out of
    every ``toggle_period_frames`` frames, starting at frame
    ``toggle_phase``.  This mimics a brief, repeated movement.
    """

    tubes: tuple[Tube, ...] = field(default_factory=_default_tubes)
    rotation_hz: float = 1.0
    fov: float = 256.0  # mm
    disc_radius: float = 80.0  # mm, signal-free support
    toggle_shift: Optional[tuple[float, float]] = None
    toggle_period_frames: int = 5
    toggle_on_frames: int = 2
    toggle_phase: int = 2

    def __post_init__(self):
        object.__setattr__(self, "tubes", tuple(self.tubes))
        if self.rotation_hz < 0:
            raise ValueError("rotation frequency must be nonnegative")
        for tb in self.tubes:
            if tb.orbit_radius + tb.tube_radius >= self.fov / 2:
                raise ValueError("tube leaves the field of view")
            if tb.tube_radius <= 0:
                raise ValueError("tube radius must be positive")


@dataclass(frozen=True)
class CoilModel:
    """Gaussian receive sensitivities with a linear phase.

    ``centers`` and ``width`` are in field-of-view units (FOV spans
    [-0.5, 0.5]); ``phase_gradients`` in cycles per FOV along (x, y).
    """

    centers: tuple[tuple[float, float], ...]
    width: float = 0.4
    phase_gradients: Optional[tuple[tuple[float, float], ...]] = None

    def __post_init__(self):
        object.__setattr__(self, "centers", tuple(tuple(map(float, c)) for c in self.centers))
        if len(self.centers) < 1:
            raise ValueError("need at least one coil")
        if not self.width > 0:
            raise ValueError("coil width must be positive")
        if self.phase_gradients is not None:
            g = tuple(tuple(map(float, p)) for p in self.phase_gradients)
            if len(g) != len(self.centers):
                raise ValueError("one phase gradient per coil")
            object.__setattr__(self, "phase_gradients", g)

    @property
    def count(self) -> int:
        return len(self.centers)

    @classmethod
    def ring(cls, count: int = 8, radius: float = 0.5, width: float = 0.4,
             phase: float = 0.5) -> "CoilModel":
        """Coils evenly spaced on a circle, each with a tangential phase ramp."""
        ang = 2 * np.pi * np.arange(count) / count
        centers = tuple((radius * np.cos(a), radius * np.sin(a)) for a in ang)
        grads = tuple((-phase * np.sin(a), phase * np.cos(a)) for a in ang)
        return cls(centers, width, grads)

    @classmethod
    def uniform(cls) -> "CoilModel":
        """A single, spatially constant coil."""
        return cls(((0.0, 0.0),), width=1e9)


@dataclass(frozen=True)
class AcquisitionSpec:
    base_resolution: int = 128
    spokes_per_frame: int = 9
    readout_oversampling: int = 2
    repetition_time: float = 2.28e-3  # s
    interleaves: int = 5
    frames: int = 25
    noise_sigma: float = 1e-3  # relative to the largest DC magnitude over coils
    seed: int = 0
    # recorded only
    echo_time: float = 1.48e-3
    flip_angle_deg: float = 8.0
    section_thickness_mm: float = 5.0

    def __post_init__(self):
        if self.base_resolution < 2 or self.base_resolution % 2:
            raise ValueError("base resolution must be even and >= 2")
        if self.spokes_per_frame < 1 or self.interleaves < 1 or self.readout_oversampling < 1:
            raise ValueError("invalid sampling parameters")
        if self.frames < 1:
            raise ValueError("need at least one frame")
        if self.noise_sigma < 0 or self.repetition_time <= 0:
            raise ValueError("invalid noise level or repetition time")

    @property
    def samples_per_spoke(self) -> int:
        return self.readout_oversampling * self.base_resolution

    @property
    def frame_duration(self) -> float:
        return self.spokes_per_frame * self.repetition_time


def make_trajectory(acq: AcquisitionSpec, t: int) -> RadialTrajectory:
    """Interleaved radial spokes of frame ``t``."""
    m = acq.spokes_per_frame
    step = 2 * np.pi / m
    theta = np.arange(m) * step + (t % acq.interleaves) * step / acq.interleaves
    ns = acq.samples_per_spoke
    k = (np.arange(ns) - ns // 2) / ns
    kx = np.outer(np.cos(theta), k)
    ky = np.outer(np.sin(theta), k)
    samples = np.stack([kx.ravel(), ky.ravel()], axis=1)
    times = (t * m + np.arange(m)) * acq.repetition_time
    return RadialTrajectory(samples, m, ns, times)


def disc_kspace(center, radius: float, amplitude: float, k) -> np.ndarray:
    """Fourier transform of a uniform disc at frequencies ``k``.

    ``center`` (x, y) and ``radius`` are in pixels, ``k`` has shape (..., 2)
    in cycles per pixel.  ``center`` may broadcast against ``k[..., 0]``.
    """
    if not radius > 0:
        raise ValueError("disc radius must be positive")
    k = np.asarray(k, dtype=np.float64)
    cx, cy = np.asarray(center[0], np.float64), np.asarray(center[1], np.float64)
    kr = np.hypot(k[..., 0], k[..., 1])
    arg = 2 * np.pi * radius * kr
    safe = np.where(kr > 0, kr, 1.0)
    mag = np.where(kr > 0, radius * j1(arg) / safe, np.pi * radius**2)
    return amplitude * mag * np.exp(-2j * np.pi * (k[..., 0] * cx + k[..., 1] * cy))


def coil_values(model: CoilModel, pos_fov: np.ndarray) -> np.ndarray:
    """Sensitivities at positions (..., 2) in FOV units; returns (coils, ...)."""
    pos = np.asarray(pos_fov, dtype=np.float64)
    out = []
    for l, c in enumerate(model.centers):
        d2 = (pos[..., 0] - c[0]) ** 2 + (pos[..., 1] - c[1]) ** 2
        val = np.exp(-d2 / (2 * model.width**2)).astype(np.complex128)
        if model.phase_gradients is not None:
            g = model.phase_gradients[l]
            val = val * np.exp(2j * np.pi * (g[0] * pos[..., 0] + g[1] * pos[..., 1]))
        out.append(val)
    return np.stack(out)


def synth_coils(model: CoilModel, size: int) -> np.ndarray:
    """Coil sensitivity maps on a ``size x size`` grid, shape (coils, size, size)."""
    x = (np.arange(size) - size // 2) / size
    xx, yy = np.meshgrid(x, x, indexing="xy")
    return coil_values(model, np.stack([xx, yy], axis=-1))


def tube_centers(phantom: PhantomSpec, times, frame_duration: float = 1.0) -> np.ndarray:
    """Tube centers in mm at ``times`` (s); shape (tubes, ..., 2)."""
    times = np.asarray(times, dtype=np.float64)
    out = []
    for tb in phantom.tubes:
        a0 = np.deg2rad(tb.start_angle_deg)
        if phantom.toggle_shift is None:
            ang = a0 + 2 * np.pi * phantom.rotation_hz * times
            pos = np.stack([tb.orbit_radius * np.cos(ang), tb.orbit_radius * np.sin(ang)], -1)
        else:
            frame = np.floor(times / frame_duration + 1e-9).astype(np.int64)
            on = ((frame - phantom.toggle_phase) % phantom.toggle_period_frames
                  < phantom.toggle_on_frames)
            base = np.array([tb.orbit_radius * np.cos(a0), tb.orbit_radius * np.sin(a0)])
            pos = base + on[..., None] * np.asarray(phantom.toggle_shift, np.float64)
        out.append(pos)
    return np.stack(out)


def _frame_midpoint(acq: AcquisitionSpec, t: int) -> float:
    return (t * acq.spokes_per_frame + (acq.spokes_per_frame - 1) / 2) * acq.repetition_time


def render_truth(phantom: PhantomSpec, coils: CoilModel, size: int, time: float,
                 frame_duration: float = 1.0) -> np.ndarray:
    """Band-limited object at ``time``, each tube weighted by the coil RSS at its center.

    The image is the inverse DFT of the analytic spectrum on the Cartesian
    grid, i.e. the object as seen by an ideal fully sampled acquisition.
    """
    px = phantom.fov / size
    k1 = (np.arange(size) - size // 2) / size
    kx, ky = np.meshgrid(k1, k1, indexing="xy")
    kk = np.stack([kx, ky], -1)
    centers = tube_centers(phantom, np.array(time), frame_duration)
    ksp = np.zeros((size, size), np.complex128)
    for tb, c in zip(phantom.tubes, centers):
        rss = np.sqrt(np.sum(np.abs(coil_values(coils, c / phantom.fov)) ** 2))
        ksp += rss * disc_kspace(c / px, tb.tube_radius / px, tb.amplitude, kk)
    return np.abs(ifft2c(ksp))


def support_mask(phantom: PhantomSpec, size: int, time: float,
                 frame_duration: float = 1.0) -> np.ndarray:
    """Pixels whose centers lie inside a tube."""
    px = phantom.fov / size
    x = (np.arange(size) - size // 2) * px
    xx, yy = np.meshgrid(x, x, indexing="xy")
    mask = np.zeros((size, size), bool)
    for tb, c in zip(phantom.tubes, tube_centers(phantom, np.array(time), frame_duration)):
        mask |= (xx - c[0]) ** 2 + (yy - c[1]) ** 2 <= tb.tube_radius**2
    return mask


def simulate_series(phantom: PhantomSpec, coils: CoilModel, acq: AcquisitionSpec
                    ) -> tuple[list[MultiCoilFrame], list[np.ndarray]]:
    """Simulate the multi-coil radial series and the matching truth images.

    Tubes move during a frame: every spoke sees the object at its own
    timestamp.  Each coil's sensitivity is taken at the tube center, which
    keeps the k-space analytic.
    """
    n = acq.base_resolution
    px = phantom.fov / n
    fd = acq.frame_duration
    frames, truth, clean = [], [], []
    for t in range(acq.frames):
        traj = make_trajectory(acq, t)
        m, ns = traj.spokes, traj.samples_per_spoke
        k = traj.samples.reshape(m, ns, 2)
        centers = tube_centers(phantom, traj.spoke_times, fd)  # (tubes, m, 2) mm
        data = np.zeros((coils.count, m, ns), np.complex128)
        for tb, c in zip(phantom.tubes, centers):
            sens = coil_values(coils, c / phantom.fov)  # (coils, m)
            disc = disc_kspace((c[:, 0:1] / px, c[:, 1:2] / px), tb.tube_radius / px,
                               tb.amplitude, k)  # (m, ns)
            data += sens[:, :, None] * disc[None]
        clean.append((traj, data.reshape(coils.count, -1)))
        truth.append(render_truth(phantom, coils, n, _frame_midpoint(acq, t), fd))
    if acq.noise_sigma > 0:
        dc = max(float(np.max(np.abs(d[:, traj.samples_per_spoke // 2::traj.samples_per_spoke])))
                 for traj, d in clean)
        sigma = acq.noise_sigma * dc
    for t, (traj, data) in enumerate(clean):
        if acq.noise_sigma > 0:
            noise = np.empty_like(data)
            for l in range(data.shape[0]):
                rng = np.random.default_rng([acq.seed, t, l])
                noise[l] = (rng.standard_normal(data.shape[1])
                            + 1j * rng.standard_normal(data.shape[1])) * (sigma / np.sqrt(2))
            data = data + noise
        frames.append(MultiCoilFrame(t, data, traj))
    return frames, truth
