"""Eigenbasis-guided mixture-of-experts routing on a small NumPy vision transformer."""
from .errors import (ConfigError, ContractError, CorruptionError, DegeneracyError, EmoeError, FormatError,
                     NumericError, ParameterError, ShapeError)
from .kernels import BACKEND
from .router import EigenBasis, EigenRouter, RouterParams, RoutingDecision
from .moe import Expert, MoELayer, moe_forward
from .baselines import LBLConfig, LinearGate
from .vit import ViT, ViTConfig

__version__ = "0.1.0"

__all__ = [
    "BACKEND", "ConfigError", "ContractError", "CorruptionError", "DegeneracyError", "EigenBasis", "EigenRouter",
    "EmoeError", "Expert", "FormatError", "LBLConfig", "LinearGate", "MoELayer", "NumericError", "ParameterError",
    "RouterParams", "RoutingDecision", "ShapeError", "ViT", "ViTConfig", "moe_forward",
]
