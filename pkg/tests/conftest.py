import numpy as np
import pytest

from mimae import _kernels
from mimae.model import ModelConfig

# a model small enough for exhaustive finite differences: 4 patches of 4x4 pixels
TOY = ModelConfig(image_size=8, channels=1, patch_size=4, embed_dim=8, encoder_depth=1, decoder_dim=8,
                  decoder_depth=1, num_heads=2, latent_dim=8, approx_hidden_dim=8)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(params=_kernels.available_backends())
def backend(request):
    return _kernels.get_backend(request.param)


@pytest.fixture
def toy_config():
    return TOY


# 16 patches like the desk config, but cheap enough for multi-epoch runs
SMALL = ModelConfig(image_size=16, channels=1, patch_size=4, embed_dim=16, encoder_depth=1, decoder_dim=8,
                    decoder_depth=1, num_heads=2, latent_dim=16, approx_hidden_dim=16)


@pytest.fixture
def small_config():
    return SMALL


@pytest.fixture(scope="session")
def small_data():
    from mimae.io.dataset import SyntheticSpec, gen_synthetic

    return gen_synthetic(SyntheticSpec(num_images=48, image_size=16, class_count=4, seed=0))
