import numpy as np
import pytest
import torch

from config import CliConfig, DiffusionConfig, ModelConfig, TrainConfig


@pytest.fixture(autouse=True)
def _seed_torch():
    torch.manual_seed(0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_cfg() -> CliConfig:
    """A model small enough to train and sample in well under a second per step."""
    return CliConfig(
        model=ModelConfig(d_motion=4, d_model=8, d_inner=16, d_state=4, heads=2, d_text=8, text_tokens=2),
        diffusion=DiffusionConfig(steps=50, sample_steps=3, layers=1),
        train=TrainConfig(train_steps=3, batch_size=4, log_every=1),
    )
