"""
headswap

Two-stage head swapping: an Aligner reenacts the source head in the target's pose and
expression, a Blender transfers the target's colors onto it and fills the seam.
"""

from .checkpoint import Checkpoint
from .config import HeadSwapConfig, load_config
from .exceptions import (
    CheckpointError,
    ConfigurationError,
    EmptyRegionSignal,
    HeadSwapError,
    InpaintProviderError,
    InvalidArgumentError,
    NumericFailureError,
    ProviderError,
    StageError,
    UnavailableProviderError,
)
from .pipeline import SwapModels, SwapOutput, evaluate, swap, swap_safe
from .synthetic import SyntheticDataset, gen_synthetic
from .training import train_aligner, train_blender
from .types import InpaintOptions, Provenance, SwapOptions, SwapResult

__version__ = "0.1.0"
__all__ = [
    # Main interface
    "swap",
    "swap_safe",
    "evaluate",
    "gen_synthetic",
    "train_aligner",
    "train_blender",
    "load_config",
    "HeadSwapConfig",
    "SwapModels",
    "SwapOutput",
    "SyntheticDataset",
    "Checkpoint",

    # Exception types
    "HeadSwapError",
    "InvalidArgumentError",
    "ConfigurationError",
    "ProviderError",
    "UnavailableProviderError",
    "InpaintProviderError",
    "NumericFailureError",
    "CheckpointError",
    "StageError",
    "EmptyRegionSignal",

    # Type definitions
    "InpaintOptions",
    "SwapOptions",
    "SwapResult",
    "Provenance",
]
