"""Toy anchor-based object detector on a small CPU autodiff engine.

Feature pyramids fuse backbone levels along parallel top-down paths with
residual skips and an optional bottom-up refinement pass; everything runs
on NumPy with reverse-mode automatic differentiation.
"""

from .config import RunConfig, load_run_config
from .engine import Parameter, Tensor
from .errors import (CheckpointMismatchError, ConfigError, ContractError,
                     NumericsError, ShapeError)
from .head import Detector, HeadConfig
from .pyramid import PyramidConfig, PyramidModel, export_topology

__version__ = "0.1.0"

__all__ = [
    "Tensor",
    "Parameter",
    "PyramidConfig",
    "PyramidModel",
    "export_topology",
    "HeadConfig",
    "Detector",
    "RunConfig",
    "load_run_config",
    "ShapeError",
    "ContractError",
    "ConfigError",
    "NumericsError",
    "CheckpointMismatchError",
    "__version__",
]
