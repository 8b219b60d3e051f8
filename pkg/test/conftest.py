import logging

import numpy as np
import pytest
import torch

from noise_adapt import dsp
from noise_adapt.losses import PclConfig
from noise_adapt.models import DeskEncoder, GeneratorSpec
from noise_adapt.train import GanBundle, GanTrainConfig

logging.getLogger("noise_adapt").setLevel(logging.DEBUG)


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run slow tests")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long end-to-end runs, enabled by --runslow")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="need --runslow option to run")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tone():
    """One second of a 220 Hz harmonic tone."""
    t = np.arange(dsp.DEFAULT_SAMPLE_RATE) / dsp.DEFAULT_SAMPLE_RATE
    x = 0.3 * np.sin(2 * np.pi * 220 * t) + 0.1 * np.sin(2 * np.pi * 660 * t)
    return dsp.Waveform(x)


def write_corpus(root, names, rng, num_samples=4000):
    """Write short random WAV files named ``<name>.wav`` under ``root``."""
    root.mkdir(parents=True, exist_ok=True)
    for name in names:
        dsp.write_wav(root / f"{name}.wav", dsp.Waveform(0.1 * rng.standard_normal(num_samples)))


def tiny_bundle(seed=0, target_ids=(), **train_kwargs):
    """A GAN bundle small enough to train and simulate with in tests."""
    torch.manual_seed(seed)
    encoder = DeskEncoder(embed_dim=8, channels=(4, 4, 4)).eval()
    train_kwargs.setdefault("pcl", PclConfig(negatives=15, patches_per_layer=8, proj_dim=8))
    cfg = GanTrainConfig(seed=seed, **train_kwargs)
    stats = dsp.CompressionStats(0.0, 4.0)
    return GanBundle.create(encoder, stats, GeneratorSpec(base_channels=2), train_cfg=cfg, target_ids=target_ids)
