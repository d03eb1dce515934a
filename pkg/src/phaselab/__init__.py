"""Desk-scale multi-phase pretraining laboratory."""

from .config import (
    ConfigError,
    MixtureSpec,
    ModelConfig,
    MuPParams,
    PhaseSpec,
    RunConfig,
    load_run_config,
)
from .kernels import BACKEND as KERNEL_BACKEND

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "KERNEL_BACKEND",
    "MixtureSpec",
    "ModelConfig",
    "MuPParams",
    "PhaseSpec",
    "RunConfig",
    "load_run_config",
    "__version__",
]
