"""Autoregressive text+image generation with continuous patch tokens.

A causal transformer emits text tokens through a softmax head and image
patch tokens through a small flow-matching MLP conditioned on its hidden
state. Images live in a normalized, optionally noise-regularized latent
space produced by an orthonormal patch projection.
"""

from .backbone import Backbone, KVCache, ModelConfig, RMSNorm
from .heads import FlowMatchingHead, FMHeadConfig, count_params
from .latents import (ChannelStats, PatchTokenizer, PatchTokenizerConfig,
                      decode_tokens, encode_image)
from .model import GenerativeModel
from .sampler import GuidanceSpec, SamplerConfig, generate
from .vocab import Vocabulary

__version__ = "0.1.0"

__all__ = [
    "Backbone",
    "ChannelStats",
    "FMHeadConfig",
    "FlowMatchingHead",
    "GenerativeModel",
    "GuidanceSpec",
    "KVCache",
    "ModelConfig",
    "PatchTokenizer",
    "PatchTokenizerConfig",
    "RMSNorm",
    "SamplerConfig",
    "Vocabulary",
    "count_params",
    "decode_tokens",
    "encode_image",
    "generate",
    "__version__",
]
