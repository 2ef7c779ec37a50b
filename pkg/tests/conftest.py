import numpy as np
import pytest
import torch

from tokenrl.encoder import EncoderConfig, PyramidEncoder


@pytest.fixture(autouse=True)
def _seed_everything():
    torch.manual_seed(0)
    np.random.seed(0)


@pytest.fixture
def tiny_cfg():
    # 12x12 image, 2x2 grid of 6-pixel patches, one stage
    return EncoderConfig(image_size=12, input_channels=2, patch_size=6,
                         embed_dim=8, stages=1, blocks_per_stage=1, heads=2,
                         mlp_ratio=2, state_dim=4)


@pytest.fixture
def tiny_encoder(tiny_cfg):
    return PyramidEncoder(tiny_cfg, num_tasks=1)


@pytest.fixture
def default_cfg():
    return EncoderConfig()
