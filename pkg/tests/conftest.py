import os

import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, settings

from avforecast.net import NetConfig, AVPredictor

settings.register_profile("default", max_examples=25, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


def tiny_cfg(**kw) -> NetConfig:
    """A narrow network over 16x16 frames; keeps the architecture, shrinks widths."""
    base = dict(frame_size=16, channels=(4, 6, 8), embed_dim=16, z_dim=3, hidden=12, heads=4, ff_dim=16,
                disc_channels=(3, 4, 5), disc_feat=8, disc_audio=6, disc_hidden=10, audio_shape=(8, 3),
                max_len=32)
    base.update(kw)
    return NetConfig(**base)


@pytest.fixture
def tiny_model():
    return AVPredictor(tiny_cfg(), seed=3)


def random_batch(cfg: NetConfig, n: int, T: int, seed: int = 0):
    g = torch.Generator().manual_seed(seed)
    frames = torch.rand(n, T, cfg.frame_size, cfg.frame_size, generator=g, dtype=torch.float64)
    blocks = torch.rand(n, T, *cfg.audio_shape, generator=g, dtype=torch.float64) * 5
    noise = torch.randn(n, T, cfg.z_dim, generator=g, dtype=torch.float64)
    return frames, blocks, noise


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
