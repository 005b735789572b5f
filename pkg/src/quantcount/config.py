"""Configuration dataclasses and JSON (de)serialization.

The training config file is a JSON document whose keys mirror the
``TrainConfig`` field names, with nested objects for the ``model`` block.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field


@dataclass
class TextEncoderConfig:
    num_layers: int = 12
    width: int = 32
    num_heads: int = 4
    max_seq_len: int = 8

    def validate(self):
        if self.num_layers < 1:
            raise ValueError("text num_layers must be >= 1")
        if self.width % self.num_heads != 0:
            raise ValueError("text width must be divisible by num_heads")
        if self.max_seq_len < 1:
            raise ValueError("max_seq_len must be >= 1")


@dataclass
class VisionEncoderConfig:
    image_size: int = 64
    patch_size: int = 8
    num_layers: int = 12
    width: int = 48
    num_heads: int = 4
    # 1-based encoder layers whose patch states feed the decoder upsampling
    skip_stages: tuple = (4, 8)

    def validate(self):
        if self.num_layers < 1:
            raise ValueError("vision num_layers must be >= 1")
        if self.width % self.num_heads != 0:
            raise ValueError("vision width must be divisible by num_heads")
        if self.image_size % self.patch_size != 0:
            raise ValueError("image_size must be divisible by patch_size")
        stages = tuple(self.skip_stages)
        if list(stages) != sorted(set(stages)):
            raise ValueError("skip_stages must be strictly increasing")
        if any(s < 1 or s >= self.num_layers for s in stages):
            raise ValueError("skip_stages must lie in [1, num_layers)")

    @property
    def grid_size(self) -> int:
        return self.image_size // self.patch_size


@dataclass
class DecoderConfig:
    width: int = 32
    num_heads: int = 4
    window_size: int = 4
    use_guidance: bool = True
    num_upsample_stages: int = 2

    def validate(self):
        if self.width % self.num_heads != 0:
            raise ValueError("decoder width must be divisible by num_heads")
        if self.window_size < 1:
            raise ValueError("window_size must be >= 1")
        if self.num_upsample_stages < 1:
            raise ValueError("num_upsample_stages must be >= 1")


@dataclass
class ModelConfig:
    text: TextEncoderConfig = field(default_factory=TextEncoderConfig)
    vision: VisionEncoderConfig = field(default_factory=VisionEncoderConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    categories: tuple = ("circles", "squares")
    max_count: int = 512

    def validate(self):
        self.text.validate()
        self.vision.validate()
        self.decoder.validate()
        if not self.categories:
            raise ValueError("at least one category is required")
        if self.max_count < 1:
            raise ValueError("max_count must be >= 1")

    @property
    def density_size(self) -> int:
        # decoder output resolution: grid upsampled 2x per stage
        return self.vision.grid_size * (2 ** self.decoder.num_upsample_stages)


@dataclass
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    optimizer: str = "adamw"
    lr: float = 1e-4
    weight_decay: float = 1e-2
    # global gradient-norm clip; 0 disables. Keeps the early count loss
    # (large targets, near-zero predictions) from collapsing the ReLU head.
    grad_clip: float = 1.0
    epochs: int = 50
    batch_size: int = 8
    k: int = 5
    lambda1: float = 0.1
    lambda2: float = 0.05
    beta: float = 0.1
    prompt_depth: int = 9
    prompt_length: int = 2
    seed: int = 0
    freeze_backbone: bool = False
    shared_vg: bool = False
    augment: bool = True
    precision: str = "single"
    data_dir: str = ""
    # optional cap on optimizer steps; 0 means run all epochs
    max_steps: int = 0

    def validate(self):
        self.model.validate()
        if self.optimizer != "adamw":
            raise ValueError("only the adamw optimizer is supported")
        if self.lr <= 0 or self.weight_decay < 0:
            raise ValueError("lr must be > 0 and weight_decay >= 0")
        if self.grad_clip < 0:
            raise ValueError("grad_clip must be >= 0")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.k < 1 or self.k % 2 == 0:
            raise ValueError("k must be odd and >= 1")
        if min(self.lambda1, self.lambda2, self.beta) < 0:
            raise ValueError("loss weights must be >= 0")
        depth = self.prompt_depth
        if not (1 <= depth <= self.model.text.num_layers):
            raise ValueError("prompt_depth must lie in [1, text num_layers]")
        if depth > self.model.vision.num_layers:
            raise ValueError("prompt_depth must not exceed vision num_layers")
        if self.prompt_length < 1:
            raise ValueError("prompt_length must be >= 1")
        if self.precision not in ("single", "double"):
            raise ValueError("precision must be 'single' or 'double'")
        if self.max_steps < 0:
            raise ValueError("max_steps must be >= 0")


def _build(cls, data: dict):
    if not isinstance(data, dict):
        raise ValueError(f"expected an object for {cls.__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(fields)
    if unknown:
        raise ValueError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    kwargs = {}
    for name, value in data.items():
        ftype = fields[name].type
        if name in ("text", "vision", "decoder", "model"):
            sub = {"text": TextEncoderConfig, "vision": VisionEncoderConfig,
                   "decoder": DecoderConfig, "model": ModelConfig}[name]
            kwargs[name] = _build(sub, value)
        elif ftype == "tuple":
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    return cls(**kwargs)


def config_from_dict(data: dict) -> TrainConfig:
    cfg = _build(TrainConfig, data)
    cfg.validate()
    return cfg


def config_to_dict(cfg: TrainConfig) -> dict:
    return dataclasses.asdict(cfg)


def load_config(path) -> TrainConfig:
    with open(path) as f:
        return config_from_dict(json.load(f))


def save_config(cfg: TrainConfig, path):
    with open(path, "w") as f:
        json.dump(config_to_dict(cfg), f, indent=2)
        f.write("\n")
