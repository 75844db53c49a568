"""Decentralized control plane for sense-trigger-actuate routines on edge meshes,
run inside a deterministic discrete-event network simulator."""

from .kernels import BACKEND
from .model import Config, ConfigError, validate_config

__version__ = "0.1.0"

__all__ = ["BACKEND", "Config", "ConfigError", "validate_config", "__version__"]
