import numpy as np
import pytest

from sgone.net import ModelConfig
from sgone.synthetic import SyntheticConfig, generate_synthetic_dataset


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_cfg():
    """<= 8 channels per block; used for gradient checks on 16 x 16 inputs."""
    return ModelConfig(stem_channels=[4, 6, 8], guidance_block_channels=[8, 8, 8], seg_channels=6)


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("synth")
    index = generate_synthetic_dataset(SyntheticConfig(image_size=32, per_category=8, seed=3,
                                                       min_radius=5, max_radius=8), root)
    return index
