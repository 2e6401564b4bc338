"""Unfolded WMMSE beamforming for multi-user MIMO interference networks.

Modules
-------
linalg       small batched complex linear algebra (Cholesky, solves, log-dets)
autodiff     reverse-mode tape over complex arrays with a gradient checker
channel      CSI sampling (Rayleigh / Rician, uniform / Gaussian placement) and dataset files
wmmse        classical WMMSE, truncated and fixed-multiplier variants, sum-rates
model        the unfolded network, diagnostics and checkpoints
train        unsupervised training with early stopping
experiments  evaluation harness
cli          ``uwmmse`` command
"""

__version__ = "0.1.0"

from .channel import ChannelSource, FadingSpec, NetworkConfig, SpatialSpec
from .model import ModelParams, forward, load_checkpoint, save_checkpoint
from .train import TrainConfig
from .wmmse import SolverOptions, run_truncated, run_wmmse, sum_rate

__all__ = [
    "__version__",
    "ChannelSource",
    "FadingSpec",
    "NetworkConfig",
    "SpatialSpec",
    "ModelParams",
    "forward",
    "load_checkpoint",
    "save_checkpoint",
    "TrainConfig",
    "SolverOptions",
    "run_truncated",
    "run_wmmse",
    "sum_rate",
]
