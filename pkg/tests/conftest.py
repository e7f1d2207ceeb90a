import numpy as np
import pytest
import torch

from gesturedrums import synth
from gesturedrums.codec import SyntheticCodec
from gesturedrums.model import ModelConfig, init_model

torch.set_num_threads(2)


@pytest.fixture(scope="session")
def drum_clip():
    clip, _ = synth.generate_clip([41, 0], duration_s=2.0)
    return clip


@pytest.fixture(scope="session")
def drum_corpus():
    return [synth.generate_clip([42, i], duration_s=3.0)[0] for i in range(4)]


@pytest.fixture(scope="session")
def synthetic_codec():
    return SyntheticCodec(n_codebooks=4, n_tokens=64, hop=512)


@pytest.fixture(scope="session")
def tiny_model_config(synthetic_codec):
    return ModelConfig(
        n_layers=2,
        hidden=32,
        n_heads=2,
        n_codebooks=synthetic_codec.config.n_codebooks,
        n_tokens=synthetic_codec.config.n_tokens,
        n_bands=2,
    )


@pytest.fixture(scope="session")
def tiny_model(tiny_model_config):
    return init_model(tiny_model_config, seed=7)


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
