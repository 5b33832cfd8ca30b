import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import rand_batch, tiny_vit
from voxmae.errors import InvalidInputError, InvalidLayoutError, NumericInputError
from voxmae.patches import full_layout, make_mask, patchify, stack_layouts
from voxmae.vit import ViTConfig, mae_loss, padded_pos_embed


def layouts(model, b, seed=0, ratio=None):
    rng = np.random.default_rng(seed)
    r = model.cfg.mask_ratio if ratio is None else ratio
    return [make_mask(model.grid.n_patches, r, rng) for _ in range(b)]


# ---------------------------------------------------------------- encoder


def test_depth_zero_is_projection_plus_pos():
    m = tiny_vit(depth=0).eval()
    x = rand_batch((2, 3, 16, 16, 16))
    tokens = patchify(x, 4)
    out = m.encode(tokens, m.pos_embed)
    assert torch.allclose(out, m.patch_embed(tokens) + m.pos_embed, atol=0, rtol=0)


def test_encode_permutation_equivariant(vit):
    vit.eval()
    x = rand_batch((1, 3, 16, 16, 16))
    tokens = patchify(x, 4)[:, :10]
    pos = vit.pos_embed[:10]
    perm = torch.as_tensor(np.random.default_rng(0).permutation(10))
    with torch.no_grad():
        a = vit.encode(tokens, pos)
        b = vit.encode(tokens[:, perm], pos[perm])
    assert torch.allclose(a[:, perm], b, atol=1e-6)


def test_encode_all_visible_shape(vit):
    x = rand_batch((2, 3, 16, 16, 16))
    ids_keep, _, _ = stack_layouts([full_layout(64)] * 2)
    assert vit.encode_masked(x, ids_keep).shape == (2, 64, 24)


def test_encode_nan():
    m = tiny_vit()
    tokens = torch.zeros(1, 4, m.grid.token_dim)
    tokens[0, 0, 0] = float("nan")
    with pytest.raises(NumericInputError):
        m.encode(tokens, m.pos_embed[:4])


# ---------------------------------------------------------------- decoder


def test_decode_depends_on_layout(vit):
    vit.eval()
    latent = torch.randn(1, 16, 24)
    l1, l2 = layouts(vit, 1, 1), layouts(vit, 1, 2)
    with torch.no_grad():
        a = vit.decode(latent, stack_layouts(l1)[1])
        b = vit.decode(latent, stack_layouts(l2)[1])
    assert a.shape == (1, 64, 192) and not torch.allclose(a, b)


def test_decode_one_visible_composition(vit):
    lay = make_mask(64, 63 / 64, np.random.default_rng(0))
    assert lay.n_keep == 1
    _, restore, _ = stack_layouts([lay])
    latent = torch.randn(1, 1, 24)
    captured = {}
    handle = vit.decoder_blocks[0].register_forward_pre_hook(lambda mod, inp: captured.setdefault("x", inp[0]))
    vit.decode(latent, restore)
    handle.remove()
    x = captured["x"] - vit.decoder_pos_embed
    kept = lay.keep_indices[0]
    assert torch.allclose(x[0, kept], vit.decoder_embed(latent)[0, 0], atol=1e-6)
    others = np.setdiff1d(np.arange(64), [kept])
    assert torch.allclose(x[0, others], vit.mask_token.expand(63, -1), atol=1e-6)


def test_decode_default_shape():
    m = tiny_vit(img_size=(96, 96, 96), patch_size=16, embed_dim=12, n_heads=2, decoder_dim=12)
    lat = torch.zeros(1, 54, 12)
    _, restore, _ = stack_layouts(layouts(m, 1, ratio=0.75))
    assert m.decode(lat, restore).shape == (1, 216, 12288)


def test_decode_inconsistent_layout(vit):
    with pytest.raises(InvalidInputError):
        vit.decode(torch.zeros(1, 10, 24), torch.zeros(1, 20, dtype=torch.long))


def test_padded_pos_embed():
    t = padded_pos_embed((2, 2, 2), 14)
    assert t.shape == (8, 14) and not t[:, 12:].any()


# ---------------------------------------------------------------- loss


def test_loss_examples():
    rng = torch.Generator().manual_seed(0)
    target = torch.randn(2, 8, 5, generator=rng)
    mask = torch.zeros(2, 8, dtype=torch.bool)
    mask[:, :3] = True
    pred = target.clone()
    pred[~mask] = 100.0
    assert mae_loss(pred, target, mask).item() == 0.0
    assert mae_loss(target + 1, target, mask).item() == pytest.approx(1.0, abs=1e-6)
    pred = torch.randn(2, 8, 5, generator=rng)
    loop = sum(((pred[b, i] - target[b, i]) ** 2).sum().item() for b in range(2) for i in range(8) if mask[b, i])
    assert mae_loss(pred, target, mask).item() == pytest.approx(loop / (6 * 5), rel=1e-6)
    with pytest.raises(InvalidLayoutError):
        mae_loss(pred, target, torch.zeros(2, 8, dtype=torch.bool))


def test_loss_norm_pix():
    target = torch.randn(1, 4, 6, dtype=torch.float64)
    mask = torch.ones(1, 4, dtype=torch.bool)
    z = (target - target.mean(-1, keepdim=True)) / (target.var(-1, keepdim=True) + 1e-6).sqrt()
    assert mae_loss(z, target, mask, norm_pix=True).item() == pytest.approx(0.0, abs=1e-20)


@settings(max_examples=10)
@given(st.integers(0, 1000), st.booleans())
def test_visible_gradient_zero(seed, norm_pix):
    m = tiny_vit(norm_pix_targets=norm_pix)
    x = rand_batch((2, 3, 16, 16, 16), seed)
    lays = layouts(m, 2, seed)
    ids_keep, restore, mask = stack_layouts(lays)
    pred = m.decode(m.encode_masked(x, ids_keep), restore)
    pred.retain_grad()
    loss = mae_loss(pred, patchify(x, 4), mask, norm_pix)
    loss.backward()
    assert pred.grad[~mask].abs().max().item() == 0.0
    assert pred.grad[mask].abs().max().item() > 0.0


def test_visible_input_changes_loss_target_does_not(vit):
    x = rand_batch((1, 3, 16, 16, 16))
    lays = layouts(vit, 1)
    loss, pred, mask = vit.pretrain_forward(x, layouts=lays)
    visible = lays[0].keep_indices[0]
    z, y, w = np.unravel_index(visible, (4, 4, 4))
    x2 = x.clone()
    x2[:, :, z * 4:(z + 1) * 4, y * 4:(y + 1) * 4, w * 4:(w + 1) * 4] += 0.5
    assert vit.pretrain_forward(x2, layouts=lays)[0].item() != loss.item()
    target = patchify(x, 4).clone()
    target[0, visible] += 7.0
    assert mae_loss(pred, target, mask).item() == loss.item()


def test_finite_difference_gradients():
    m = tiny_vit(depth=1).double()
    x = rand_batch((1, 3, 16, 16, 16), dtype=torch.float64)
    lays = layouts(m, 1, 3)

    def f():
        return m.pretrain_forward(x, layouts=lays)[0]

    m.zero_grad()
    f().backward()
    rng = np.random.default_rng(0)
    named = dict(m.named_parameters())
    checked = 0
    for name in ["patch_embed.weight", "blocks.0.attn.qkv.weight", "blocks.0.mlp.0.weight",
                 "decoder_embed.weight", "decoder_pred.weight", "mask_token", "norm.weight"]:
        p = named[name]
        g = p.grad.reshape(-1)
        idx = np.argsort(-g.abs().numpy())[:20]
        for i in rng.choice(idx, 4, replace=False):
            flat = p.data.view(-1)
            old = flat[i].item()
            eps = 1e-4
            flat[i] = old + eps
            up = f().item()
            flat[i] = old - eps
            down = f().item()
            flat[i] = old
            num = (up - down) / (2 * eps)
            ana = g[i].item()
            assert abs(num - ana) / max(abs(num), abs(ana), 1e-12) <= 1e-4, (name, i, num, ana)
            checked += 1
    assert checked == 28


# ---------------------------------------------------------------- training determinism


def test_eval_deterministic_and_batch_independent(vit):
    vit.eval()
    x = rand_batch((3, 3, 16, 16, 16))
    with torch.no_grad():
        a = vit.features(x).pooled
        b = vit.features(x[[2, 0, 1]]).pooled
        c = vit.features(x).pooled
    assert torch.equal(a, c)
    assert torch.allclose(a[[2, 0, 1]], b, atol=1e-6)


def test_loss_deterministic_with_seed(vit):
    x = rand_batch((2, 3, 16, 16, 16))
    a = vit.pretrain_forward(x, np.random.default_rng(5))[0]
    b = vit.pretrain_forward(x, np.random.default_rng(5))[0]
    assert a.item() == b.item()


# ---------------------------------------------------------------- features


def test_features_grid_and_pool():
    m = tiny_vit(img_size=(96, 96, 96), patch_size=16, embed_dim=12, n_heads=2).eval()
    x = rand_batch((1, 3, 96, 96, 96))
    with torch.no_grad():
        f = m.features(x)
    assert f.levels[-1].shape == (1, 12, 6, 6, 6)
    assert torch.allclose(f.pooled, f.levels[-1].mean(dim=(2, 3, 4)), atol=1e-6)


def test_features_constant_encoder(vit):
    with torch.no_grad():
        vit.norm.weight.zero_()
        vit.norm.bias.fill_(0.3)
        f = vit.features(rand_batch((1, 3, 16, 16, 16)))
    assert torch.allclose(f.pooled, f.levels[-1][0, :, 1, 2, 3].unsqueeze(0))
    assert torch.allclose(f.pooled, torch.full_like(f.pooled, 0.3))


def test_features_shape_mismatch(vit):
    with pytest.raises(InvalidInputError):
        vit.features(torch.zeros(1, 3, 8, 16, 16))


def test_default_config_values():
    c = ViTConfig()
    assert (c.embed_dim, c.depth, c.n_heads, c.decoder_dim, c.decoder_depth) == (768, 12, 12, 512, 8)
    assert c.mask_ratio == 0.75 and c.norm_pix_targets and c.patch_size == 16
