"""Multiresolution Transformer for session-based query suggestion.

A small reverse-mode autodiff core, Transformer and MTN models, a query-log
pipeline, training and evaluation harness, and a numerical oracle for the
unrolled dynamics.
"""

from .config import ConfigError, ModelConfig, desk_profile, load_config
from .mtn import MTNModel, SessionBatch, TransformerModel, build_model
from .tensor import Tape, Tensor, backward

__all__ = ["ConfigError", "ModelConfig", "desk_profile", "load_config", "MTNModel", "SessionBatch",
           "TransformerModel", "build_model", "Tape", "Tensor", "backward"]
__version__ = "0.1.0"
