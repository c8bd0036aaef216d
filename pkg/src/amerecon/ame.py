"""Aggregated motion estimation (AME) reconstruction and the series pipelines.

For a center frame ``t`` and window offsets ``K`` the unknowns are one
density and one set of coil maps per offset.  Frame ``t + s`` is explained by
the center density warped with the flow ``u_s`` times that frame's coils, so
the Gauss-Newton normal equations aggregate ``|K|`` frames of k-space data.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .core import SobolevConfig, Unknowns, WindowSpec
from .flow import (FlowConfig, FlowProblem, MotionField, estimate_motion,
                   warp_bicubic, warp_matrix)
from .nlinv import (BilinearModel, DensityMap, IrgnmConfig, MultiCoilFrame, ReconResult,
                    ReconstructionError, compose_image, irgnm, solve_irgnm)
from .nufft import KbTable, build_kb_table

log = logging.getLogger(__name__)

__all__ = [
    "AmeProblem",
    "PipelineConfig",
    "SeriesResult",
    "ame_forward",
    "ame_jacobian_apply",
    "ame_jacobian_adjoint_apply",
    "ame_normal_apply",
    "ame_reconstruct_frame",
    "precompute_nlinv",
    "estimate_flows",
    "run_pipeline",
    "reconstruct_series",
    "temporal_median",
]


def _density_map(field: MotionField) -> Optional[DensityMap]:
    if field.is_zero():
        return None
    mat = warp_matrix(field)
    mat_t = mat.T.tocsr()
    return DensityMap(lambda img: warp_bicubic(img, field, mat),
                      lambda img: warp_bicubic(img, field, mat_t))


@dataclass
class AmeProblem:
    """Everything needed to reconstruct one center frame from its window."""

    center_index: int
    offsets: tuple[int, ...]
    frames: list[MultiCoilFrame]
    flows: list[MotionField]
    init: Unknowns
    irgnm: IrgnmConfig = field(default_factory=lambda: IrgnmConfig(newton_steps=4))
    sobolev: SobolevConfig = field(default_factory=SobolevConfig)
    tbl: Optional[KbTable] = None

    def __post_init__(self):
        self.offsets = tuple(self.offsets)
        if not (len(self.frames) == len(self.flows) == len(self.offsets)):
            raise ValueError("frames, flows and offsets must correspond one to one")
        if 0 not in self.offsets:
            raise ValueError("window must contain offset 0")
        if not self.flows[self.offsets.index(0)].is_zero():
            raise ValueError("the flow at offset 0 must be zero")
        if self.init.offsets != self.offsets:
            raise ValueError("initial guess does not match the window")
        for f in self.flows:
            if f.shape != self.init.shape:
                raise ValueError("flow and image sizes differ")
        self._model: Optional[BilinearModel] = None

    @property
    def model(self) -> BilinearModel:
        if self._model is None:
            self._model = BilinearModel(self.frames, self.offsets, self.sobolev, self.tbl,
                                        [_density_map(f) for f in self.flows])
        return self._model


def ame_forward(x: Unknowns, problem: AmeProblem) -> list[np.ndarray]:
    return problem.model.forward(x)


def ame_jacobian_apply(x: Unknowns, h: Unknowns, problem: AmeProblem) -> list[np.ndarray]:
    """Per-offset samples (coils, n_samples) of the linearized aggregated model."""
    return problem.model.linearize(x).apply(h)


def ame_jacobian_adjoint_apply(x: Unknowns, residuals: Sequence[np.ndarray],
                               problem: AmeProblem) -> Unknowns:
    return problem.model.linearize(x).adjoint(residuals)


def ame_normal_apply(x: Unknowns, h: Unknowns, problem: AmeProblem) -> Unknowns:
    """``sum_s G_s'* G_s' h`` via the Toeplitz kernels."""
    return problem.model.linearize(x).normal(h)


def ame_reconstruct_frame(problem: AmeProblem) -> ReconResult:
    x, history, counts = solve_irgnm(problem.model, problem.init, problem.irgnm,
                                     problem.center_index)
    return ReconResult(x, compose_image(x, problem.sobolev), history[-1], history, counts)


# ---
# Series processing

@dataclass(frozen=True)
class PipelineConfig:
    sobolev: SobolevConfig = field(default_factory=SobolevConfig)
    nlinv: IrgnmConfig = field(default_factory=IrgnmConfig)
    ame: IrgnmConfig = field(default_factory=lambda: IrgnmConfig(newton_steps=4))
    flow: FlowConfig = field(default_factory=FlowConfig)
    kb_width: int = 6
    kb_beta: float = 13.8551
    kb_oversampling: float = 1.5
    kb_resolution: int = 1000
    median_width: int = 5
    ame_passes: int = 1

    def table(self) -> KbTable:
        return build_kb_table(self.kb_width, self.kb_beta, self.kb_oversampling,
                              self.kb_resolution)


@dataclass
class SeriesResult:
    images: list[np.ndarray]
    residual_norms: list[float]
    timing: dict = field(default_factory=dict)
    failures: dict[int, str] = field(default_factory=dict)
    precompute: list[np.ndarray] = field(default_factory=list)
    flows: dict[tuple[int, int], MotionField] = field(default_factory=dict)


def precompute_nlinv(frames: Sequence[MultiCoilFrame], n: int, cfg: PipelineConfig,
                     tbl: Optional[KbTable] = None, failures: Optional[dict] = None
                     ) -> list[Optional[ReconResult]]:
    """NLINV for every frame, each warm-started (and anchored) at the previous result."""
    tbl = tbl if tbl is not None else cfg.table()
    results: list[Optional[ReconResult]] = []
    prev: Optional[Unknowns] = None
    for fr in frames:
        init = prev if prev is not None else Unknowns.initial((n, n), fr.n_coils)
        try:
            res = irgnm(fr, init, cfg.sobolev, cfg.nlinv, tbl)
        except ReconstructionError as exc:
            log.warning("%s", exc)
            if failures is not None:
                failures[fr.frame_index] = str(exc)
            results.append(None)
            prev = None
            continue
        results.append(res)
        prev = res.unknowns
    return results


def estimate_flows(images: Sequence[np.ndarray], window: WindowSpec, cfg: FlowConfig
                   ) -> dict[tuple[int, int], MotionField]:
    """Flow from image ``t`` to ``t + s`` for every in-range nonzero offset."""
    flows = {}
    n_frames = len(images)
    for t in range(n_frames):
        for s in window.clip(t, n_frames).offsets:
            if s == 0:
                continue
            flows[(t, s)] = estimate_motion(FlowProblem.from_complex(images[t], images[t + s], cfg))
    return flows


def _zero_like(img: np.ndarray) -> MotionField:
    return MotionField.zeros(img.shape)


def run_pipeline(frames: Sequence[MultiCoilFrame], window: WindowSpec = WindowSpec(),
                 cfg: PipelineConfig = PipelineConfig(), n: Optional[int] = None,
                 precomputed: Optional[list] = None) -> SeriesResult:
    """NLINV precompute, pairwise flow estimation, then one AME solve per frame.

    Window offsets that fall outside the series are dropped for that frame;
    a frame left with the window ``{0}`` keeps its NLINV image.  A frame
    whose solve fails also keeps its NLINV image and is listed in
    ``failures``.
    """
    frames = list(frames)
    if not frames:
        raise ValueError("need at least one frame")
    n = n if n is not None else frames[0].trajectory.samples_per_spoke // 2
    tbl = cfg.table()
    n_frames = len(frames)
    failures: dict[int, str] = {}
    timing: dict = {"latency_frames": {}, "ready_after_frame": {}}

    t0 = time.perf_counter()
    pre = precomputed if precomputed is not None else precompute_nlinv(frames, n, cfg, tbl, failures)
    timing["precompute_s"] = time.perf_counter() - t0
    base_images = [r.composed if r is not None else np.zeros((n, n), np.complex128) for r in pre]

    images = list(base_images)
    residuals = [r.residual_norm if r is not None else float("nan") for r in pre]
    flows: dict = {}
    timing["flow_s"] = 0.0
    timing["ame_s"] = 0.0
    for _ in range(max(1, cfg.ame_passes)):
        t1 = time.perf_counter()
        flows = estimate_flows(images, window, cfg.flow)
        timing["flow_s"] += time.perf_counter() - t1
        t2 = time.perf_counter()
        new_images, new_res = [], []
        for t in range(n_frames):
            win = window.clip(t, n_frames)
            timing["latency_frames"][t] = max(win.offsets)
            timing["ready_after_frame"][t] = t + max(win.offsets)
            offs = tuple(s for s in win.offsets if pre[t + s] is not None)
            # nothing to aggregate: the precompute already is the answer
            if pre[t] is None or offs == (0,):
                new_images.append(images[t])
                new_res.append(residuals[t])
                continue
            init = Unknowns(pre[t].unknowns.density.copy(),
                            np.stack([pre[t + s].unknowns.coils[0] for s in offs]), offs)
            problem = AmeProblem(
                t, offs, [frames[t + s] for s in offs],
                [flows[(t, s)] if s else _zero_like(images[t]) for s in offs],
                init, cfg.ame, cfg.sobolev, tbl)
            try:
                res = ame_reconstruct_frame(problem)
            except ReconstructionError as exc:
                log.warning("%s", exc)
                failures[t] = str(exc)
                new_images.append(images[t])
                new_res.append(residuals[t])
                continue
            new_images.append(res.composed)
            new_res.append(res.residual_norm)
        timing["ame_s"] += time.perf_counter() - t2
        images, residuals = new_images, new_res
    timing["total_s"] = time.perf_counter() - t0
    return SeriesResult(images, residuals, timing, failures, base_images, flows)


def temporal_median(series: Sequence[np.ndarray], width: int = 5) -> list[np.ndarray]:
    """Per-pixel median of magnitudes over a centered temporal window.

    The window shrinks symmetrically near the ends of the series; each output
    keeps the phase of its center frame.
    """
    if not len(series):
        raise ValueError("empty series")
    if width < 1 or width % 2 == 0:
        raise ValueError("median width must be a positive odd number")
    stack = np.asarray(series)
    mags = np.abs(stack)
    half = width // 2
    out = []
    for t in range(len(stack)):
        h = min(half, t, len(stack) - 1 - t)
        if h == 0:
            out.append(stack[t].copy())
            continue
        med = np.median(mags[t - h:t + h + 1], axis=0)
        out.append(med * np.exp(1j * np.angle(stack[t])))
    return out


def reconstruct_series(frames: Sequence[MultiCoilFrame], method: str = "ame",
                       window: WindowSpec = WindowSpec(), cfg: PipelineConfig = PipelineConfig(),
                       n: Optional[int] = None) -> SeriesResult:
    """Run ``nlinv``, ``nlinv-med`` or ``ame`` over a whole series."""
    frames = list(frames)
    if not frames:
        raise ValueError("need at least one frame")
    n = n if n is not None else frames[0].trajectory.samples_per_spoke // 2
    if method == "ame":
        return run_pipeline(frames, window, cfg, n)
    if method not in ("nlinv", "nlinv-med"):
        raise ValueError(f"unknown method {method!r}")
    failures: dict[int, str] = {}
    t0 = time.perf_counter()
    pre = precompute_nlinv(frames, n, cfg, None, failures)
    images = [r.composed if r is not None else np.zeros((n, n), np.complex128) for r in pre]
    if method == "nlinv-med":
        images = temporal_median(images, cfg.median_width)
    return SeriesResult(images, [r.residual_norm if r is not None else float("nan") for r in pre],
                        {"total_s": time.perf_counter() - t0}, failures, list(images))
