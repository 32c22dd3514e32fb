"""Logit-lens inference and uncertainty metrics for GPT-2-family models."""

from .checkpoint import CheckpointBundle, ModelConfig, load_checkpoint, synthetic_checkpoint, write_checkpoint
from .lens import LensProfile, build_profile, cross_entropy_onehot, kl_divergence, residual_prediction
from .runtime import ForwardResult, ResidualTrace, SamplerConfig, forward, generate, sampled_token
from .tokenizer import BpeVocab

__version__ = "0.1.0"

__all__ = [
    "BpeVocab",
    "CheckpointBundle",
    "ForwardResult",
    "LensProfile",
    "ModelConfig",
    "ResidualTrace",
    "SamplerConfig",
    "build_profile",
    "cross_entropy_onehot",
    "forward",
    "generate",
    "kl_divergence",
    "load_checkpoint",
    "residual_prediction",
    "sampled_token",
    "synthetic_checkpoint",
    "write_checkpoint",
]
