"""Quantity-conditioned prompt tuning for zero-shot counting."""

from .config import (DecoderConfig, ModelConfig, TextEncoderConfig, TrainConfig,
                     VisionEncoderConfig, config_from_dict, config_to_dict,
                     load_config, save_config)
from .model import CountingModel, EncodedPair, build_model
from .quantity import HypothesisSet, QuantityEmbedder, make_delta, make_hypotheses

__version__ = "0.1.0"

__all__ = [
    "CountingModel", "DecoderConfig", "EncodedPair", "HypothesisSet",
    "ModelConfig", "QuantityEmbedder", "TextEncoderConfig", "TrainConfig",
    "VisionEncoderConfig", "build_model", "config_from_dict", "config_to_dict",
    "load_config", "make_delta", "make_hypotheses", "save_config",
]
