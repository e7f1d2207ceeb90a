"""Experiment configuration: one human-editable key-value tree per run,
with cross-component consistency checks before any heavy work starts.

Two configs ship with the package: "desk" (CPU-trainable defaults) and
"paper" (the reference-scale settings, documentation more than a recipe).
"""

from __future__ import annotations

import importlib.resources
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .codec import CodecConfig
from .errors import ConfigError
from .model import ModelConfig
from .schedule import GenerationConfig
from .training import TrainConfig

SCHEMA_VERSION = 1


@dataclass
class FeatureConfig:
    n_bands: int = 2
    adaptive: bool = True
    log_compress: bool = True

    def to_dict(self) -> dict:
        return {"n_bands": self.n_bands, "adaptive": self.adaptive,
                "log_compress": self.log_compress}

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureConfig":
        return cls(**d)


@dataclass
class PipelineConfig:
    codec: CodecConfig = field(default_factory=CodecConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    features: FeatureConfig = field(default_factory=FeatureConfig)
    generation: GenerationConfig = field(default_factory=GenerationConfig)
    schema_version: int = SCHEMA_VERSION

    def validate(self) -> "PipelineConfig":
        """Raise ConfigError naming the offending fields on any mismatch."""
        checks = [
            ("codec.n_codebooks", self.codec.n_codebooks, "model.n_codebooks", self.model.n_codebooks),
            ("codec.n_tokens", self.codec.n_tokens, "model.n_tokens", self.model.n_tokens),
            ("features.n_bands", self.features.n_bands, "model.n_bands", self.model.n_bands),
            ("features.n_bands", self.features.n_bands, "train.n_bands", self.train.n_bands),
            ("features.adaptive", self.features.adaptive, "train.adaptive_split", self.train.adaptive_split),
            ("features.log_compress", self.features.log_compress, "train.log_compress", self.train.log_compress),
            ("codec.n_codebooks", self.codec.n_codebooks,
             "len(generation.iters_per_codebook)", len(self.generation.iters_per_codebook)),
        ]
        for name_a, val_a, name_b, val_b in checks:
            if val_a != val_b:
                raise ConfigError(f"config mismatch: {name_a}={val_a} but {name_b}={val_b}")
        return self

    def to_dict(self) -> dict:
        gen = self.generation
        return {
            "schema_version": self.schema_version,
            "codec": self.codec.to_dict(),
            "model": self.model.to_dict(),
            "train": self.train.to_dict(),
            "features": self.features.to_dict(),
            "generation": {
                "iters_per_codebook": list(gen.iters_per_codebook),
                "cfg_weight": gen.cfg_weight,
                "temperature": gen.temperature,
                "causal_bias": gen.causal_bias,
                "seed": gen.seed,
                "top_k": gen.top_k,
                "include_prefix": gen.include_prefix,
            },
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        version = d.get("schema_version", SCHEMA_VERSION)
        if version != SCHEMA_VERSION:
            raise ConfigError(f"unsupported config schema version {version}")
        try:
            codec = CodecConfig.from_dict(d.get("codec", {}))
            model = ModelConfig.from_dict(d.get("model", {}))
            train = TrainConfig.from_dict(d.get("train", {}))
            features = FeatureConfig.from_dict(d.get("features", {}))
            gen_d = dict(d.get("generation", {}))
            if "iters_per_codebook" in gen_d:
                gen_d["iters_per_codebook"] = tuple(gen_d["iters_per_codebook"])
            generation = GenerationConfig(**gen_d)
        except TypeError as exc:
            raise ConfigError(f"bad config field: {exc}") from exc
        return cls(codec=codec, model=model, train=train, features=features,
                   generation=generation, schema_version=version)


def _named_config_path(name: str):
    res = importlib.resources.files("gesturedrums") / "configs" / f"{name}.config"
    return res if res.is_file() else None


def load_config(name_or_path) -> PipelineConfig:
    """Load "desk", "paper", or a path to a config file."""
    source = _named_config_path(str(name_or_path))
    if source is None:
        source = Path(name_or_path)
        if not source.is_file():
            raise ConfigError(f"no such config: {name_or_path!r} (not a shipped name or a file)")
    with open(source) as fh:
        data = yaml.safe_load(fh)
    if not isinstance(data, dict):
        raise ConfigError(f"config {name_or_path!r} is not a key-value tree")
    return PipelineConfig.from_dict(data).validate()


def save_config(cfg: PipelineConfig, path) -> None:
    with open(path, "w") as fh:
        yaml.safe_dump(cfg.to_dict(), fh, sort_keys=True)


def dumps_config(cfg: PipelineConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=True)
