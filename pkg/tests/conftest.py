import numpy as np
import pytest
import torch

from tcpl.config import TrainConfig
from tcpl.data import generate_synthetic_pair

torch.set_num_threads(1)


def tiny_config(**overrides):
    raw = {
        "epochs": 3, "epoch_update_proto": 1, "lr0": 0.01, "M": 2, "D": 16,
        "backbone_channels": [8, 8, 16], "pool_sizes": [1, 2, 3],
        "batch_size": {"source": 8, "target_pl": 8}, "write_audit": False,
        "data": {"synthetic": {"C": 3, "per_class": 4, "image_size": 32,
                               "shift": {"hue_delta": 0.05, "texture_noise": 0.02, "background_swap": 0.3}}},
    }
    for key, value in overrides.items():
        node = raw
        parts = key.split("__")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = value
    return TrainConfig.from_dict(raw)


@pytest.fixture
def config():
    return tiny_config()


@pytest.fixture
def pair(config):
    return generate_synthetic_pair(config.data.synthetic)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
