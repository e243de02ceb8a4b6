import numpy as np
import pytest
import torch

from pars_ssl.nn.layers import EncoderConfig
from pars_ssl.pars import ParsConfig

torch.set_num_threads(1)


@pytest.fixture
def toy_encoder():
    return EncoderConfig(n_blocks=2, model_dim=64, n_heads=2, ff_hidden=64, patch_len=50)


@pytest.fixture
def toy_pars():
    return ParsConfig(n_patches=8, patch_len=50, gamma_pos=0.8, window_len=400)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
