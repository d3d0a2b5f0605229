"""Prompt-vector adaptation of a frozen dual-encoder model to video tasks."""

from .autograd import Parameter, Tensor, backward, finite_diff_check
from .model import ModelConfig, PromptedVideoModel, seeded_rng

__version__ = "0.1.0"

__all__ = [
    "Parameter",
    "Tensor",
    "backward",
    "finite_diff_check",
    "ModelConfig",
    "PromptedVideoModel",
    "seeded_rng",
    "__version__",
]
