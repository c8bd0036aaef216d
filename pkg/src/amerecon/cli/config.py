"""JSON run configuration with one section per module."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional, Union

from ..ame import PipelineConfig
from ..core import SobolevConfig, WindowSpec
from ..flow import FlowConfig
from ..nlinv import IrgnmConfig
from ..phantom import AcquisitionSpec, CoilModel, PhantomSpec, Tube


class ConfigError(ValueError):
    """Raised for unreadable, unknown or invalid configuration entries."""


@dataclass(frozen=True)
class CoilSettings:
    count: int = 8
    radius: float = 0.5
    width: float = 0.4
    phase: float = 0.5

    def model(self) -> CoilModel:
        return CoilModel.ring(self.count, self.radius, self.width, self.phase)


@dataclass(frozen=True)
class ReconSettings:
    window: str = "-2,-1,0,1,2"
    virtual_channels: Optional[int] = 10
    normalize_target: float = 100.0
    normalize_per_frame: bool = True
    median_width: int = 5
    ame_passes: int = 1


@dataclass(frozen=True)
class RunConfig:
    phantom: PhantomSpec = field(default_factory=PhantomSpec)
    coils: CoilSettings = field(default_factory=CoilSettings)
    acquisition: AcquisitionSpec = field(default_factory=AcquisitionSpec)
    sobolev: SobolevConfig = field(default_factory=SobolevConfig)
    nlinv: IrgnmConfig = field(default_factory=IrgnmConfig)
    ame: IrgnmConfig = field(default_factory=lambda: IrgnmConfig(newton_steps=4))
    flow: FlowConfig = field(default_factory=FlowConfig)
    nufft: dict = field(default_factory=lambda: {"kernel_width": 6, "beta": 13.8551,
                                                 "oversampling": 1.5, "resolution": 1000})
    recon: ReconSettings = field(default_factory=ReconSettings)

    def window(self) -> WindowSpec:
        return WindowSpec.parse(self.recon.window)

    def pipeline(self) -> PipelineConfig:
        nu = self.nufft
        return PipelineConfig(self.sobolev, self.nlinv, self.ame, self.flow,
                              int(nu["kernel_width"]), float(nu["beta"]),
                              float(nu["oversampling"]), int(nu["resolution"]),
                              self.recon.median_width, self.recon.ame_passes)

    def to_dict(self) -> dict:
        out = {}
        for f in dataclasses.fields(self):
            val = getattr(self, f.name)
            out[f.name] = dict(val) if isinstance(val, dict) else dataclasses.asdict(val)
        return out


_NUFFT_KEYS = {"kernel_width", "beta", "oversampling", "resolution"}


def _build(cls, values: dict, section: str):
    if not isinstance(values, dict):
        raise ConfigError(f"section {section!r} must be an object")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(values) - names
    if unknown:
        raise ConfigError(f"unknown keys in {section!r}: {sorted(unknown)}")
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {section!r}: {exc}") from exc


def _phantom(values: dict) -> PhantomSpec:
    values = dict(values)
    if "tubes" in values:
        try:
            values["tubes"] = tuple(Tube(**t) for t in values["tubes"])
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid tube entry: {exc}") from exc
    if values.get("toggle_shift") is not None:
        values["toggle_shift"] = tuple(values["toggle_shift"])
    return _build(PhantomSpec, values, "phantom")


def config_from_dict(data: dict) -> RunConfig:
    """Defaults overridden by ``data``; unknown sections or keys are errors."""
    if not isinstance(data, dict):
        raise ConfigError("configuration must be a JSON object")
    builders = {
        "phantom": _phantom,
        "coils": lambda v: _build(CoilSettings, v, "coils"),
        "acquisition": lambda v: _build(AcquisitionSpec, v, "acquisition"),
        "sobolev": lambda v: _build(SobolevConfig, v, "sobolev"),
        "nlinv": lambda v: _build(IrgnmConfig, v, "nlinv"),
        "ame": lambda v: _build(IrgnmConfig, {"newton_steps": 4, **v}, "ame"),
        "flow": lambda v: _build(FlowConfig, v, "flow"),
        "recon": lambda v: _build(ReconSettings, v, "recon"),
    }
    unknown = set(data) - set(builders) - {"nufft"}
    if unknown:
        raise ConfigError(f"unknown configuration sections: {sorted(unknown)}")
    kwargs: dict[str, Any] = {k: builders[k](v) for k, v in data.items() if k in builders}
    if "nufft" in data:
        nu = data["nufft"]
        if not isinstance(nu, dict) or set(nu) - _NUFFT_KEYS:
            raise ConfigError(f"nufft section accepts only {sorted(_NUFFT_KEYS)}")
        kwargs["nufft"] = {**RunConfig().nufft, **nu}
    cfg = RunConfig(**kwargs)
    try:
        cfg.window()
        cfg.pipeline().table()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return cfg


def load_config(path: Optional[Union[str, Path]]) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    return config_from_dict(data)
