"""Variance-constrained autoencoders, their baselines, and a desk-scale experiment harness."""

from .config import ConfigError, ModelConfig, Objective, OptimizerConfig
from .models import AutoencoderPair, build_pair

__all__ = ["AutoencoderPair", "ConfigError", "ModelConfig", "Objective", "OptimizerConfig",
           "build_pair"]
__version__ = "0.1.0"
