import numpy as np
import pytest

from core.rng import CounterRng
from core.tensorcore import default_dtype
from core.vae import VaeConfig


@pytest.fixture
def float64():
    """Builds every tensor and parameter in 64-bit for the duration of a test."""
    with default_dtype(np.float64):
        yield


@pytest.fixture
def rng():
    return CounterRng(1234, "tests")


@pytest.fixture
def tiny_config():
    """f4 symmetric codec: two down/up blocks, 4 base channels, 2 latent channels."""
    return VaeConfig(f_enc=4, f_dec=4, base_channels=4, latent_channels=2, channel_mult=(1, 1))


@pytest.fixture
def toy_run(tmp_path):
    """--set overrides for a seconds-scale run on 32x32 clips with the tiny codec."""
    return [
        f"data.dir={tmp_path / 'data'}",
        "data.count=3", "data.T=2", "data.H=32", "data.W=32", "data.val_count=1",
        "model.f_enc=4", "model.f_dec=8", "model.base_channels=4", "model.latent_channels=2",
        "model.channel_mult=[1, 1]",
        "loss.perceptual_channels=[4, 4, 4]",
        "train.batch_size=2", "train.pretrain_steps=2", "train.val_every=2", "train.log_every=1",
        "profile.calibrate_sizes=[32, 64]", "profile.measure_size=64",
    ]
