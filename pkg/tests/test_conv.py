import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import rand_batch, tiny_conv
from voxmae.conv import GRN, ConvBlock, ConvConfig, cell_to_grid, conv_mae_loss
from voxmae.errors import InvalidConfigError, InvalidInputError, InvalidLayoutError
from voxmae.patches import patchify


def test_zero_residual_is_identity():
    blk = ConvBlock(4, 3)
    with torch.no_grad():
        blk.pwconv2.weight.zero_()
        blk.pwconv2.bias.zero_()
    x = torch.randn(1, 4, 5, 5, 5)
    assert torch.equal(blk(x), x)


def test_grn_constant_input():
    grn = GRN(4)
    with torch.no_grad():
        grn.gamma.fill_(0.5)
        grn.beta.fill_(0.1)
    x = torch.full((1, 3, 3, 3, 4), 2.0)
    gx = torch.sqrt(torch.tensor(27 * 4.0))
    nx = gx / (gx + 1e-6)  # equal channel norms: the normaliser is (almost exactly) 1
    assert torch.allclose(grn(x), 0.5 * x * nx + 0.1 + x, atol=1e-6)


def test_block_translation_equivariance():
    torch.manual_seed(0)
    blk = ConvBlock(4, 3).eval()
    x = torch.randn(1, 4, 10, 10, 10)
    shifted = torch.roll(x, 1, dims=2)
    with torch.no_grad():
        a, b = blk(x), blk(shifted)
    assert torch.allclose(torch.roll(a, 1, dims=2)[:, :, 2:-2], b[:, :, 2:-2], atol=1e-6)


# ---------------------------------------------------------------- masked encoder


@settings(max_examples=8)
@given(st.integers(0, 10_000))
def test_masked_content_invariance(seed):
    m = tiny_conv()
    with torch.no_grad():
        for blk in list(m.stages[0]) + list(m.stages[1]):
            blk.grn.gamma.normal_()  # make GRN active so its visible-only pooling matters
    rng = np.random.default_rng(seed)
    x = rand_batch((2, 3, 32, 32, 32), seed)
    cells = m.draw_masks(2, rng)
    vm = cell_to_grid(cells, (32, 32, 32)).expand_as(x)
    x2 = x.clone()
    x2[vm] = torch.as_tensor(rng.normal(size=int(vm.sum())) * 10, dtype=x.dtype)
    with torch.no_grad():
        a = m.masked_encode(x, cells)
        b = m.masked_encode(x2, cells)
    for la, lb in zip(a, b):
        assert torch.equal(la, lb)


def test_full_mask_and_empty_mask(conv):
    x1, x2 = rand_batch((1, 3, 32, 32, 32), 1), rand_batch((1, 3, 32, 32, 32), 2)
    allm = torch.ones(1, 2, 2, 2, dtype=torch.bool)
    nonem = torch.zeros(1, 2, 2, 2, dtype=torch.bool)
    with torch.no_grad():
        for la, lb in zip(conv.masked_encode(x1, allm), conv.masked_encode(x2, allm)):
            assert torch.equal(la, lb) and not la.any()
        for la, lb in zip(conv.masked_encode(x1, nonem), conv.masked_encode(x1)):
            assert torch.equal(la, lb)


def test_misaligned_mask(conv):
    with pytest.raises(InvalidConfigError):
        conv.masked_encode(rand_batch((1, 3, 32, 32, 32)), torch.zeros(1, 4, 4, 4, dtype=torch.bool))
    with pytest.raises(InvalidConfigError):
        ConvConfig(img_size=(32, 32, 32), stage_depths=(1, 1, 1), stage_dims=(8, 8, 8), mask_patch=8).validate()


# ---------------------------------------------------------------- decoder


def test_decode_shape_and_zero_weights(conv):
    x = rand_batch((1, 3, 32, 32, 32))
    loss, recon, cells = conv.pretrain_forward(x, np.random.default_rng(0))
    assert recon.shape == x.shape
    with torch.no_grad():
        conv.decoder_pred.weight.zero_()
        conv.decoder_pred.bias.copy_(torch.randn(conv.decoder_pred.bias.shape))
        feats = conv.masked_encode(x, cells)
        out = conv.conv_decode(feats[-1], cells)
    tokens = patchify(out, 16)[0]
    assert torch.allclose(tokens, conv.decoder_pred.bias.expand_as(tokens), atol=0)


def test_mask_token_difference_is_local():
    m = tiny_conv(img_size=(64, 64, 64), stage_depths=(1, 1), stage_dims=(8, 16), mask_patch=16, kernel_size=3)
    x = rand_batch((1, 3, 64, 64, 64))
    cells = torch.zeros(1, 4, 4, 4, dtype=torch.bool)
    cells[0, 0, 0, 0] = True
    with torch.no_grad():
        feat = m.masked_encode(x, cells)[-1]
        a = m.conv_decode(feat, cells)
        m.mask_token.add_(1.0)
        b = m.conv_decode(feat, cells)
    diff = (a - b).abs().sum(dim=1)[0] > 0
    # deepest grid is 8^3 (stride 8); masked cell covers deep sites 0..1; kernel 3 adds one site
    assert diff[:24, :24, :24].any()
    assert not diff[24:].any() and not diff[:, 24:].any() and not diff[:, :, 24:].any()


# ---------------------------------------------------------------- loss


def test_conv_loss_examples():
    x = rand_batch((1, 3, 4, 4, 4))
    vm = torch.zeros(1, 4, 4, 4, dtype=torch.bool)
    vm[0, :2] = True
    recon = x.clone()
    recon[:, :, 2:] = 50.0
    assert conv_mae_loss(recon, x, vm).item() == 0.0
    assert conv_mae_loss(x + 0.5, x, vm).item() == pytest.approx(0.25, abs=1e-7)
    r = rand_batch((1, 3, 4, 4, 4), 9)
    loop = 0.0
    for c in range(3):
        for i, j, k in zip(*np.nonzero(vm[0].numpy())):
            loop += (r[0, c, i, j, k] - x[0, c, i, j, k]).item() ** 2
    assert conv_mae_loss(r, x, vm).item() == pytest.approx(loop / (32 * 3), rel=1e-6)
    with pytest.raises(InvalidLayoutError):
        conv_mae_loss(r, x, torch.zeros_like(vm))


def test_conv_visible_gradient_zero(conv):
    x = rand_batch((2, 3, 32, 32, 32))
    cells = conv.draw_masks(2, np.random.default_rng(1))
    feats = conv.masked_encode(x, cells)
    recon = conv.conv_decode(feats[-1], cells)
    recon.retain_grad()
    vm = cell_to_grid(cells, (32, 32, 32))
    conv_mae_loss(recon, x, vm).backward()
    vis = (~vm).expand_as(recon)
    assert recon.grad[vis].abs().max().item() == 0.0
    assert recon.grad[~vis].abs().max().item() > 0.0


EPS = 1e-4  # several encoder gradients are ~1e-8; smaller steps drown in float64 roundoff


def test_conv_finite_difference():
    m = tiny_conv().double()
    torch.manual_seed(0)
    with torch.no_grad():
        for p in m.parameters():  # O(1) weights so encoder gradients are well above roundoff
            p.normal_(0.0, 0.3)
    x = rand_batch((1, 3, 32, 32, 32), dtype=torch.float64)
    cells = m.draw_masks(1, np.random.default_rng(2))

    def f():
        return m.pretrain_forward(x, cell_mask=cells)[0]

    f().backward()
    named = dict(m.named_parameters())
    rng = np.random.default_rng(0)
    for name in ["stem.0.weight", "stages.0.0.dwconv.weight", "stages.0.0.grn.gamma", "downsample.1.1.weight",
                 "decoder_proj.weight", "mask_token", "decoder_pred.weight"]:
        p = named[name]
        g = p.grad.reshape(-1)
        idx = np.argsort(-g.abs().numpy())[:20]
        for i in rng.choice(idx, 3, replace=False):
            flat = p.data.view(-1)
            old = flat[i].item()
            flat[i] = old + EPS
            up = f().item()
            flat[i] = old - EPS
            down = f().item()
            flat[i] = old
            num, ana = (up - down) / (2 * EPS), g[i].item()
            assert abs(num - ana) / max(abs(num), abs(ana), 1e-12) <= 1e-4, (name, num, ana)


# ---------------------------------------------------------------- features


@settings(max_examples=10)
@given(st.integers(1, 3), st.tuples(*[st.integers(1, 3)] * 3))
def test_pyramid_shape_law(n_stages, mult):
    stride = 2 ** (n_stages + 1)
    size = tuple(stride * k for k in mult)
    m = tiny_conv(img_size=size, stage_depths=(1,) * n_stages, stage_dims=(4,) * n_stages, mask_patch=stride,
                  decoder_dim=4)
    x = rand_batch((1, 3) + size)
    with torch.no_grad():
        f = m.features(x)
    assert len(f.levels) == n_stages
    for s, lvl in enumerate(f.levels):
        assert tuple(lvl.shape[2:]) == tuple(n // 2 ** (s + 2) for n in size)
    assert f.strides == [2 ** (s + 2) for s in range(n_stages)]
    assert torch.allclose(f.pooled, f.levels[-1].mean(dim=(2, 3, 4)))


def test_constant_input_zero_blocks(conv):
    with torch.no_grad():
        for stage in conv.stages:
            for blk in stage:
                blk.pwconv2.weight.zero_()
                blk.pwconv2.bias.zero_()
        f = conv.features(torch.full((1, 3, 32, 32, 32), 0.7))
    for lvl in f.levels:
        flat = lvl.reshape(lvl.shape[1], -1)
        assert torch.allclose(flat, flat[:, :1].expand_as(flat), atol=1e-6)


def test_features_bad_shape(conv):
    with pytest.raises(InvalidInputError):
        conv.features(torch.zeros(1, 3, 24, 32, 32))


def test_default_conv_config():
    c = ConvConfig()
    assert c.mask_ratio == 0.6 and c.mask_patch == 32 and c.mask_grid() == (3, 3, 3)
    assert c.stage_strides() == [4, 8, 16, 32]
