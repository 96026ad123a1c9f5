"""Chunk-level KV cache reuse for retrieval-augmented generation, at desk scale."""

from .model import LayeredKV, Model, ModelConfig, forward, init_model
from .rope import RotationFrequencies, apply_rope, shift_rope

__all__ = ["LayeredKV", "Model", "ModelConfig", "RotationFrequencies", "apply_rope", "forward", "init_model",
           "shift_rope"]
