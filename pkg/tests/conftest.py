"""Shared fixtures and helpers for the test suite."""

import numpy as np
import pytest
import torch

from thoraxgen import DenoiserConfig, PhantomConfig, generate_phantom

torch.set_num_threads(1)


def tiny_denoiser_config(**overrides) -> DenoiserConfig:
    """Smallest config that exercises every block type (one level + attention)."""
    base = dict(resolution=8, in_channels=2, base_width=4,
                channel_multipliers=(1,), attention_levels=(0,),
                time_embed_dim=8, groups=4)
    base.update(overrides)
    return DenoiserConfig(**base)


def small_denoiser_config(**overrides) -> DenoiserConfig:
    """Two-level config at 16^3, fast enough for training tests."""
    base = dict(resolution=16, in_channels=3, base_width=8,
                channel_multipliers=(1, 2), attention_levels=(1,),
                time_embed_dim=32, groups=8)
    base.update(overrides)
    return DenoiserConfig(**base)


@pytest.fixture(scope="session")
def phantom_16():
    """One deterministic 16^3 phantom pair (volume, layout)."""
    return generate_phantom(7, PhantomConfig(resolution=16))


@pytest.fixture(scope="session")
def phantom_32():
    """One deterministic 32^3 phantom pair (volume, layout)."""
    return generate_phantom(7)


def randomize_output_conv(net, seed=0):
    """Give the zero-initialized output conv nonzero weights.

    Several tests need a random-weight network whose output actually
    depends on its inputs; a freshly initialized net predicts exactly
    zero because the final conv is zeroed.
    """
    rng = np.random.default_rng(seed)
    with torch.no_grad():
        conv = net.out_conv.conv
        w = rng.standard_normal(tuple(conv.weight.shape)) * 0.1
        conv.weight.copy_(torch.from_numpy(w.astype(np.float32)))
        b = rng.standard_normal(tuple(conv.bias.shape)) * 0.1
        conv.bias.copy_(torch.from_numpy(b.astype(np.float32)))
    return net
