"""Command-line interface: ``simulate``, ``reconstruct`` and ``metrics``.

Exit status is 0 on success, 1 for configuration or input errors and 2 when
some frames failed to reconstruct (the others are still written).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from ..ame import reconstruct_series
from ..core import WindowSpec, normalize_dataset
from ..phantom import simulate_series, support_mask
from .config import ConfigError, RunConfig, load_config
from .io import (DatasetError, DatasetManifest, atomic_write, read_dataset, read_series,
                 write_dataset, write_json, write_png, write_series)
from .metrics import compute_metrics
from .pca import pca_compress

log = logging.getLogger("amerecon")

EXIT_OK, EXIT_CONFIG, EXIT_FRAMES = 0, 1, 2


def _frame_midpoints(acq) -> np.ndarray:
    m = acq.spokes_per_frame
    return (np.arange(acq.frames) * m + (m - 1) / 2) * acq.repetition_time


def cmd_simulate(args, cfg: RunConfig) -> int:
    acq = cfg.acquisition
    if args.seed is not None:
        acq = dataclasses.replace(acq, seed=args.seed)
    frames, truth = simulate_series(cfg.phantom, cfg.coils.model(), acq)
    support = [support_mask(cfg.phantom, acq.base_resolution, t, acq.frame_duration)
               for t in _frame_midpoints(acq)]
    manifest = DatasetManifest(
        frames=acq.frames, coils=cfg.coils.count, spokes_per_frame=acq.spokes_per_frame,
        samples_per_spoke=acq.samples_per_spoke, base_resolution=acq.base_resolution,
        repetition_time_s=acq.repetition_time, interleaves=acq.interleaves,
        physics={"echo_time_s": acq.echo_time, "flip_angle_deg": acq.flip_angle_deg,
                 "fov_mm": cfg.phantom.fov, "section_thickness_mm": acq.section_thickness_mm},
        extra={"seed": acq.seed, "noise_sigma": acq.noise_sigma,
               "rotation_hz": cfg.phantom.rotation_hz})
    write_dataset(args.out, frames, manifest, truth, support)
    log.info("wrote %d frames to %s", acq.frames, args.out)
    return EXIT_OK


def cmd_reconstruct(args, cfg: RunConfig) -> int:
    data = read_dataset(args.dataset)
    if data.manifest.normalized:
        raise ConfigError("dataset is already normalized; refusing to normalize twice")
    window = WindowSpec.parse(args.window) if args.window else cfg.window()
    pipe = cfg.pipeline()
    if args.newton_steps is not None:
        key = "ame" if args.method == "ame" else "nlinv"
        pipe = dataclasses.replace(pipe, **{key: dataclasses.replace(getattr(pipe, key),
                                                                     newton_steps=args.newton_steps)})
    if args.ame_passes is not None:
        pipe = dataclasses.replace(pipe, ame_passes=args.ame_passes)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    handler = logging.FileHandler(out / "run.log", mode="w", encoding="utf-8")
    handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    logging.getLogger().addHandler(handler)
    try:
        frames, scale = normalize_dataset(data.frames, cfg.recon.normalize_target,
                                          cfg.recon.normalize_per_frame)
        kept = 1.0
        nv = args.virtual_channels if args.virtual_channels is not None else cfg.recon.virtual_channels
        if nv is not None and nv < data.manifest.coils:
            frames, kept = pca_compress(frames, nv)
            log.info("compressed %d coils to %d virtual channels, %.6f of energy kept",
                     data.manifest.coils, nv, kept)
        elif nv is not None and nv > data.manifest.coils and args.virtual_channels is not None:
            raise ConfigError(f"--virtual-channels {nv} exceeds the {data.manifest.coils} coils")
        result = reconstruct_series(frames, args.method, window, pipe, data.manifest.base_resolution)
        for t, msg in sorted(result.failures.items()):
            log.error("frame %d failed: %s", t, msg)
        info = {
            "method": args.method,
            "window": list(window.offsets),
            "normalization_scale": scale,
            "energy_kept": kept,
            "residual_norms": [float(r) for r in result.residual_norms],
            "failures": {str(k): v for k, v in result.failures.items()},
            "timing": _jsonable(result.timing),
            "config": cfg.to_dict(),
        }
        write_series(out, result.images, info, png=not args.no_png)
    finally:
        logging.getLogger().removeHandler(handler)
        handler.close()
    return EXIT_FRAMES if result.failures else EXIT_OK


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    return obj


def _load_roi(path: str, shape) -> np.ndarray:
    p = Path(path)
    if p.suffix == ".npy":
        roi = np.load(p)
    else:
        roi = np.frombuffer(p.read_bytes(), np.uint8)
        if roi.size != shape[0] * shape[1]:
            raise ConfigError(f"ROI file {path} does not match the image size")
    return np.asarray(roi).reshape(shape).astype(bool)


def cmd_metrics(args, cfg: RunConfig) -> int:
    images, meta = read_series(args.series)
    truth = support = None
    if args.truth:
        data = read_dataset(args.truth)
        if data.truth is None:
            log.warning("dataset %s has no truth images; RMSE skipped", args.truth)
        else:
            truth, support = data.truth, data.support
    roi = _load_roi(args.roi, images[0].shape) if args.roi else None
    report = compute_metrics(images, truth, support, args.profile_column, roi)
    summary = report.to_dict()
    summary["method"] = meta.get("method")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        write_json(out / "metrics.json", summary)
        prof = report.profile.astype("<f4")
        atomic_write(out / "profile.raw", prof.tobytes())
        peak = float(prof.max())
        write_png(out / "profile.png",
                  np.clip(np.round(prof / peak * 255 if peak > 0 else prof), 0, 255).astype(np.uint8))
    print(json.dumps(summary, indent=2))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON configuration file")
    common.add_argument("-v", "--verbose", action="store_true")
    p = argparse.ArgumentParser(prog="amerecon",
                                description="Motion-aggregated nonlinear radial MRI reconstruction")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", parents=[common], help="simulate a rotating-tube phantom dataset")
    s.add_argument("--out", required=True, help="dataset directory")
    s.add_argument("--seed", type=int, help="noise seed")

    r = sub.add_parser("reconstruct", parents=[common], help="reconstruct an image series")
    r.add_argument("dataset", help="dataset directory")
    r.add_argument("--method", default="ame", choices=["nlinv", "nlinv-med", "ame"])
    r.add_argument("--window", help='temporal offsets, e.g. "-2,-1,0,1,2"')
    r.add_argument("--newton-steps", type=int, help="Newton steps of the selected method")
    r.add_argument("--virtual-channels", type=int, help="PCA virtual channels")
    r.add_argument("--ame-passes", type=int, help="re-estimate motion from AME output this many times")
    r.add_argument("--no-png", action="store_true", help="skip the PNG renderings")
    r.add_argument("--out", required=True, help="output directory")

    m = sub.add_parser("metrics", parents=[common], help="image quality metrics of a series")
    m.add_argument("series", help="image series directory")
    m.add_argument("--truth", help="dataset directory with truth images")
    m.add_argument("--roi", help="object ROI mask (.npy or raw uint8)")
    m.add_argument("--profile-column", type=int, help="image column for the profile")
    m.add_argument("--out", help="directory for metrics.json and the profile")
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        handler = {"simulate": cmd_simulate, "reconstruct": cmd_reconstruct,
                   "metrics": cmd_metrics}[args.command]
        return handler(args, cfg)
    except (ConfigError, DatasetError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
