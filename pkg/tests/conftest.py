import sys
from pathlib import Path

import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from quantcount.config import (DecoderConfig, ModelConfig, TextEncoderConfig,
                               TrainConfig, VisionEncoderConfig)


def tiny_train_config(**overrides) -> TrainConfig:
    """Small, fast model for unit tests: 32x32 images, 4x4 grid."""
    model = ModelConfig(
        text=TextEncoderConfig(num_layers=2, width=32, num_heads=4, max_seq_len=8),
        vision=VisionEncoderConfig(image_size=32, patch_size=8, num_layers=3,
                                   width=48, num_heads=4, skip_stages=(1, 2)),
        decoder=DecoderConfig(width=32, num_heads=4, window_size=4),
        categories=("circles", "squares"),
        max_count=64,
    )
    defaults = dict(model=model, prompt_depth=2, prompt_length=2, k=5,
                    epochs=2, batch_size=4, seed=0)
    defaults.update(overrides)
    return TrainConfig(**defaults)


@pytest.fixture
def tiny_config():
    return tiny_train_config()


@pytest.fixture
def tiny_model(tiny_config):
    torch.manual_seed(0)
    from quantcount.model import build_model
    return build_model(tiny_config)


@pytest.fixture
def tiny_model_double():
    torch.manual_seed(0)
    from quantcount.model import build_model
    return build_model(tiny_train_config(precision="double"))
