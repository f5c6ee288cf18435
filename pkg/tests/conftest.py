import numpy as np
import pytest

from speechseek.model import ModelConfig, build_model


def tiny_model_config(vocab_size: int = 12, **overrides) -> ModelConfig:
    """Small float64 model used by gradient and contract tests."""
    defaults = dict(
        vocab_size=vocab_size,
        feat_dim=6,
        d_model=16,
        n_heads=2,
        ff_dim=24,
        speech_layers=1,
        text_layers=1,
        decoder_layers=1,
        dtype="float64",
    )
    defaults.update(overrides)
    return ModelConfig(**defaults)


@pytest.fixture
def tiny_model():
    return build_model(tiny_model_config(), seed=7)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
