"""Nonlinear inverse reconstruction for real-time radial MRI with aggregated motion estimation."""

from .ame import PipelineConfig, reconstruct_series, run_pipeline, temporal_median
from .core import SobolevConfig, Unknowns, WindowSpec, normalize_dataset
from .flow import FlowConfig, MotionField, estimate_motion
from .nlinv import IrgnmConfig, MultiCoilFrame, ReconstructionError, irgnm
from .phantom import AcquisitionSpec, CoilModel, PhantomSpec, simulate_series

__version__ = "0.1.0"
