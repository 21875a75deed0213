"""Mixture-of-LoRA-experts adapters with a hypernetwork-generated anomaly expert."""

from amoelora.adapters import AdapterConfig, AmoeLoraAdapter, Variant
from amoelora.model import ModelConfig, TinyTransformer

__version__ = "0.1.0"

__all__ = [
    "AdapterConfig",
    "AmoeLoraAdapter",
    "ModelConfig",
    "TinyTransformer",
    "Variant",
]
