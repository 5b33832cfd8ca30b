import numpy as np
import pytest
import torch
from hypothesis import settings

from voxmae.conv import ConvConfig, MaskedConvNet
from voxmae.nn_utils import seeded
from voxmae.vit import MaskedViT, ViTConfig

torch.set_num_threads(1)
settings.register_profile("default", deadline=None)
settings.load_profile("default")


def tiny_vit(**kw):
    base = dict(img_size=(16, 16, 16), patch_size=4, embed_dim=24, depth=1, n_heads=2,
                decoder_dim=12, decoder_depth=1, decoder_heads=2, norm_pix_targets=False)
    base.update(kw)
    with seeded(0):
        return MaskedViT(ViTConfig(**base))


def tiny_conv(**kw):
    base = dict(img_size=(32, 32, 32), stage_depths=(1, 1, 1), stage_dims=(8, 16, 16), kernel_size=3,
                mask_patch=16, decoder_dim=16)
    base.update(kw)
    with seeded(0):
        return MaskedConvNet(ConvConfig(**base))


def rand_batch(shape, seed=0, dtype=torch.float32):
    return torch.as_tensor(np.random.default_rng(seed).random(shape), dtype=dtype)


@pytest.fixture
def vit():
    return tiny_vit()


@pytest.fixture
def conv():
    return tiny_conv()


# one line per acceptance criterion, printed after the test session
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
