"""Dataset and image-series directories.

A dataset directory holds ``manifest.json`` plus little-endian float32
payloads: ``frame_<t>_coil_<l>.cfl`` (real, imaginary pairs in trajectory
order), ``traj_<t>.bin`` ((kx, ky) pairs) and ``spoke_times.bin`` (float64,
frames x spokes).  Simulated datasets also carry ``truth_<t>.raw`` and
``support_<t>.raw``.  Every file is written to a temporary name and renamed
into place.
"""

from __future__ import annotations

import io
import json
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
from PIL import Image

from ..nlinv import MultiCoilFrame
from ..nufft import RadialTrajectory

FORMAT_VERSION = 1
PathLike = Union[str, Path]


class DatasetError(ValueError):
    """Malformed or inconsistent dataset directory."""


def atomic_write(path: PathLike, data: bytes) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_json(path: PathLike, obj) -> None:
    atomic_write(path, (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode("utf-8"))


def _read_f32(path: Path, count: int) -> np.ndarray:
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise DatasetError(f"missing payload {path.name}") from exc
    if len(raw) != 4 * count:
        raise DatasetError(f"{path.name}: expected {4 * count} bytes, found {len(raw)}")
    return np.frombuffer(raw, dtype="<f4").astype(np.float64)


@dataclass
class DatasetManifest:
    frames: int
    coils: int
    spokes_per_frame: int
    samples_per_spoke: int
    base_resolution: int
    repetition_time_s: float
    interleaves: int
    physics: dict = field(default_factory=dict)
    normalized: bool = False
    scale: float = 1.0
    has_truth: bool = False
    extra: dict = field(default_factory=dict)
    version: int = FORMAT_VERSION

    def to_dict(self) -> dict:
        return {
            "kind": "dataset",
            "version": self.version,
            "frames": self.frames,
            "coils": self.coils,
            "spokes_per_frame": self.spokes_per_frame,
            "samples_per_spoke": self.samples_per_spoke,
            "base_resolution": self.base_resolution,
            "repetition_time_s": self.repetition_time_s,
            "interleaves": self.interleaves,
            "physics": {k: str(v) for k, v in self.physics.items()},
            "normalized": self.normalized,
            "scale": self.scale,
            "has_truth": self.has_truth,
            "extra": self.extra,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetManifest":
        if d.get("kind") != "dataset":
            raise DatasetError("directory is not a dataset (manifest kind is not 'dataset')")
        if d.get("version") != FORMAT_VERSION:
            raise DatasetError(f"unsupported dataset version {d.get('version')}")
        try:
            return cls(int(d["frames"]), int(d["coils"]), int(d["spokes_per_frame"]),
                       int(d["samples_per_spoke"]), int(d["base_resolution"]),
                       float(d["repetition_time_s"]), int(d["interleaves"]),
                       dict(d.get("physics", {})), bool(d.get("normalized", False)),
                       float(d.get("scale", 1.0)), bool(d.get("has_truth", False)),
                       dict(d.get("extra", {})))
        except (KeyError, TypeError, ValueError) as exc:
            raise DatasetError(f"invalid manifest: {exc}") from exc


@dataclass
class Dataset:
    manifest: DatasetManifest
    frames: list[MultiCoilFrame]
    truth: Optional[list[np.ndarray]] = None
    support: Optional[list[np.ndarray]] = None


def write_dataset(directory: PathLike, frames: Sequence[MultiCoilFrame], manifest: DatasetManifest,
                  truth: Optional[Sequence[np.ndarray]] = None,
                  support: Optional[Sequence[np.ndarray]] = None) -> Path:
    frames = list(frames)
    if not frames:
        raise DatasetError("refusing to write a dataset without frames")
    if manifest.frames != len(frames):
        raise DatasetError("manifest frame count does not match")
    for fr in frames:
        if fr.n_coils != manifest.coils or fr.trajectory.spokes != manifest.spokes_per_frame \
                or fr.trajectory.samples_per_spoke != manifest.samples_per_spoke:
            raise DatasetError(f"frame {fr.frame_index} does not match the manifest")
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    times = np.stack([fr.trajectory.spoke_times for fr in frames]).astype("<f8")
    for t, fr in enumerate(frames):
        for l in range(fr.n_coils):
            pairs = np.stack([fr.samples[l].real, fr.samples[l].imag], -1).astype("<f4")
            atomic_write(d / f"frame_{t}_coil_{l}.cfl", pairs.tobytes())
        atomic_write(d / f"traj_{t}.bin", fr.trajectory.samples.astype("<f4").tobytes())
    atomic_write(d / "spoke_times.bin", times.tobytes())
    n = manifest.base_resolution
    if truth is not None:
        for t, img in enumerate(truth):
            atomic_write(d / f"truth_{t}.raw", np.abs(np.asarray(img)).reshape(n, n).astype("<f4").tobytes())
    if support is not None:
        for t, m in enumerate(support):
            atomic_write(d / f"support_{t}.raw", np.asarray(m, np.uint8).reshape(n, n).tobytes())
    manifest.has_truth = truth is not None
    # the manifest goes last so a readable manifest implies complete payloads
    write_json(d / "manifest.json", manifest.to_dict())
    return d


def read_manifest(directory: PathLike) -> dict:
    path = Path(directory) / "manifest.json"
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise DatasetError(f"no manifest in {directory}") from exc
    except json.JSONDecodeError as exc:
        raise DatasetError(f"corrupt manifest in {directory}: {exc}") from exc


def read_dataset(directory: PathLike) -> Dataset:
    d = Path(directory)
    man = DatasetManifest.from_dict(read_manifest(d))
    m, ns = man.spokes_per_frame, man.samples_per_spoke
    count = m * ns
    times = _read_times(d / "spoke_times.bin", man.frames * m).reshape(man.frames, m)
    frames = []
    for t in range(man.frames):
        k = _read_f32(d / f"traj_{t}.bin", 2 * count).reshape(count, 2)
        traj = RadialTrajectory(k, m, ns, times[t])
        samples = np.empty((man.coils, count), np.complex128)
        for l in range(man.coils):
            pairs = _read_f32(d / f"frame_{t}_coil_{l}.cfl", 2 * count).reshape(count, 2)
            samples[l] = pairs[:, 0] + 1j * pairs[:, 1]
        frames.append(MultiCoilFrame(t, samples, traj))
    truth = support = None
    n = man.base_resolution
    if man.has_truth:
        truth = [_read_f32(d / f"truth_{t}.raw", n * n).reshape(n, n) for t in range(man.frames)]
        if all((d / f"support_{t}.raw").exists() for t in range(man.frames)):
            support = [np.frombuffer((d / f"support_{t}.raw").read_bytes(), np.uint8)
                       .reshape(n, n).astype(bool) for t in range(man.frames)]
    return Dataset(man, frames, truth, support)


def _read_times(path: Path, count: int) -> np.ndarray:
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise DatasetError("missing spoke_times.bin") from exc
    if len(raw) != 8 * count:
        raise DatasetError("spoke_times.bin has the wrong size")
    return np.frombuffer(raw, dtype="<f8").copy()


# ---
# Image series

def write_png(path: PathLike, img8: np.ndarray) -> None:
    buf = io.BytesIO()
    Image.fromarray(img8, mode="L").save(buf, format="PNG")
    atomic_write(path, buf.getvalue())


def write_series(directory: PathLike, images: Sequence[np.ndarray], info: dict,
                 png: bool = True) -> Path:
    """Raw float32 magnitudes and 8-bit PNGs scaled by the series maximum."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    mags = [np.abs(np.asarray(im)).astype("<f4") for im in images]
    if not mags:
        raise DatasetError("empty image series")
    shape = mags[0].shape
    peak = max(float(m.max()) for m in mags)
    for t, m in enumerate(mags):
        atomic_write(d / f"image_{t}.raw", m.tobytes())
        if png:
            scaled = m / peak if peak > 0 else m
            write_png(d / f"image_{t}.png", np.clip(np.round(scaled * 255), 0, 255).astype(np.uint8))
    meta = {"kind": "images", "version": FORMAT_VERSION, "frames": len(mags),
            "height": shape[0], "width": shape[1], "series_max": peak, **info}
    write_json(d / "manifest.json", meta)
    return d


def read_series(directory: PathLike) -> tuple[list[np.ndarray], dict]:
    d = Path(directory)
    meta = read_manifest(d)
    if meta.get("kind") != "images":
        raise DatasetError(f"{directory} is not an image series")
    h, w = int(meta["height"]), int(meta["width"])
    imgs = [_read_f32(d / f"image_{t}.raw", h * w).reshape(h, w) for t in range(int(meta["frames"]))]
    return imgs, meta
