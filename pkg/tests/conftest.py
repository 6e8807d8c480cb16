import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, settings

from radepth.network import DualStreamNet, NetConfig

settings.register_profile("repo", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("repo")

torch.set_num_threads(1)


TINY = dict(image_size=(16, 16), patch=4, d_model=8, num_heads=2, num_blocks=2, mlp_ratio=2,
            max_contexts=2, taps=(0, 1), decoder_channels=4, refine_channels=4)


@pytest.fixture
def tiny_cfg():
    return NetConfig(**TINY)


@pytest.fixture
def tiny_net(tiny_cfg):
    net = DualStreamNet(tiny_cfg, seed=0)
    net.init_context_stream(seed=1)
    return net


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
