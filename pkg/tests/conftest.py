import numpy as np
import pytest
import torch

torch.set_num_threads(1)  # small-op dispatch dominates; single thread is fastest here

from mri2pet.networks import NetConfig


@pytest.fixture(scope="session")
def toy_net_config() -> NetConfig:
    """Small dual-arm config used across network/training tests."""
    return NetConfig(
        base_channels=16,
        depth=2,
        channel_multipliers=(1, 2),
        attention_resolutions=(8,),
        attention_heads=2,
        in_slices=3,
        image_size=(16, 16),
        group_norm_groups=8,
        res_blocks=1,
        clinical_dim=13,
        time_embed_mult=4,
    )


@pytest.fixture()
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)
