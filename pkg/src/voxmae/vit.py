"""Transformer masked autoencoder over cubic 3D patches."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import InvalidConfigError, InvalidInputError, InvalidLayoutError, NumericInputError
from .nn_utils import FeatureSet, init_weights
from .patches import PatchGrid, build_pos_embed, full_layout, make_mask, patchify, stack_layouts


@dataclass
class ViTConfig:
    img_size: Tuple[int, int, int] = (96, 96, 96)
    patch_size: int = 16
    in_chans: int = 3
    embed_dim: int = 768
    depth: int = 12
    n_heads: int = 12
    mlp_ratio: float = 4.0
    decoder_dim: int = 512
    decoder_depth: int = 8
    decoder_heads: int = 16
    mask_ratio: float = 0.75
    norm_pix_targets: bool = True

    def validate(self):
        if self.embed_dim % self.n_heads or self.embed_dim % 6:
            raise InvalidConfigError("embed_dim must be divisible by n_heads and by 6")
        if self.decoder_dim % self.decoder_heads:
            raise InvalidConfigError("decoder_dim must be divisible by decoder_heads")
        if not 0.0 < self.mask_ratio < 1.0:
            raise InvalidConfigError("mask_ratio must be in (0, 1)")
        PatchGrid.for_shape(self.img_size, self.patch_size, self.in_chans)
        return self


class Attention(nn.Module):
    def __init__(self, dim, n_heads):
        super().__init__()
        self.n_heads = n_heads
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x):
        b, n, c = x.shape
        qkv = self.qkv(x).reshape(b, n, 3, self.n_heads, c // self.n_heads).permute(2, 0, 3, 1, 4)
        q, k, v = qkv.unbind(0)
        attn = (q @ k.transpose(-2, -1)) * (q.shape[-1] ** -0.5)
        out = attn.softmax(dim=-1) @ v
        return self.proj(out.transpose(1, 2).reshape(b, n, c))


class Block(nn.Module):
    """Pre-norm transformer block."""

    def __init__(self, dim, n_heads, mlp_ratio=4.0):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, n_heads)
        self.norm2 = nn.LayerNorm(dim)
        hidden = int(dim * mlp_ratio)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


def padded_pos_embed(grid_dims, dim):
    """Sine-cosine table for dims not divisible by 6: trailing columns are zero."""
    usable = dim - dim % 6
    table = np.zeros((int(np.prod(grid_dims)), dim))
    if usable:
        table[:, :usable] = build_pos_embed(grid_dims, usable)
    return table


def mae_loss(pred, target, mask, norm_pix=False):
    """Mean squared error over masked tokens only.

    ``pred``/``target`` are (B, N, T); ``mask`` is (B, N) with True/1 at
    masked tokens.  With ``norm_pix`` each target token is standardised
    within itself first.
    """
    if pred.shape != target.shape:
        raise InvalidInputError(f"prediction {tuple(pred.shape)} vs target {tuple(target.shape)}")
    mask = mask.to(pred.dtype)
    n_masked = mask.sum()
    if n_masked.item() == 0:
        raise InvalidLayoutError("loss needs at least one masked token")
    if norm_pix:
        mean = target.mean(dim=-1, keepdim=True)
        var = target.var(dim=-1, keepdim=True)
        target = (target - mean) / (var + 1e-6) ** 0.5
    per_token = ((pred - target) ** 2).mean(dim=-1)
    return (per_token * mask).sum() / n_masked


class MaskedViT(nn.Module):
    """Asymmetric encoder/decoder MAE; the encoder only sees visible tokens."""

    arch = "vit"

    def __init__(self, cfg: ViTConfig):
        super().__init__()
        self.cfg = cfg.validate()
        self.grid = PatchGrid.for_shape(cfg.img_size, cfg.patch_size, cfg.in_chans)
        e, dd = cfg.embed_dim, cfg.decoder_dim

        self.patch_embed = nn.Linear(self.grid.token_dim, e)
        self.register_buffer(
            "pos_embed", torch.as_tensor(build_pos_embed(self.grid.grid_dims, e), dtype=torch.float32)
        )
        self.blocks = nn.ModuleList([Block(e, cfg.n_heads, cfg.mlp_ratio) for _ in range(cfg.depth)])
        self.norm = nn.LayerNorm(e)

        self.decoder_embed = nn.Linear(e, dd)
        self.mask_token = nn.Parameter(torch.zeros(dd))
        self.register_buffer(
            "decoder_pos_embed",
            torch.as_tensor(padded_pos_embed(self.grid.grid_dims, dd), dtype=torch.float32),
        )
        self.decoder_blocks = nn.ModuleList(
            [Block(dd, cfg.decoder_heads, cfg.mlp_ratio) for _ in range(cfg.decoder_depth)]
        )
        self.decoder_norm = nn.LayerNorm(dd)
        self.decoder_pred = nn.Linear(dd, self.grid.token_dim)

        self.apply(init_weights)
        nn.init.normal_(self.mask_token, std=0.02)

    # -- encoder -----------------------------------------------------------

    def encode(self, tokens_visible, pos_rows, return_hidden=False):
        """Latents for raw visible tokens (B, K, T) given their positional rows."""
        if tokens_visible.shape[-2] < 1:
            raise InvalidInputError("need at least one visible token")
        if not torch.isfinite(tokens_visible).all():
            raise NumericInputError("non-finite values in encoder input")
        x = self.patch_embed(tokens_visible) + pos_rows
        hidden = []
        for blk in self.blocks:
            x = blk(x)
            hidden.append(x)
        if self.blocks:
            x = self.norm(x)
            hidden[-1] = x
        else:
            hidden.append(x)
        return (x, hidden) if return_hidden else x

    def encode_masked(self, x, ids_keep):
        tokens = patchify(x, self.cfg.patch_size)
        idx = ids_keep.unsqueeze(-1)
        vis = torch.gather(tokens, 1, idx.expand(-1, -1, tokens.shape[-1]))
        pos = self.pos_embed.to(tokens.dtype)[ids_keep]
        return self.encode(vis, pos)

    # -- decoder -----------------------------------------------------------

    def decode(self, latent, ids_restore):
        """Insert mask tokens, unshuffle to original order, decode every token."""
        b, k, _ = latent.shape
        if ids_restore.shape[0] != b or ids_restore.shape[1] != self.grid.n_patches:
            raise InvalidInputError("restore indices do not match latent batch / patch count")
        n = ids_restore.shape[1]
        if k > n:
            raise InvalidInputError(f"{k} latent rows but only {n} patches")
        x = self.decoder_embed(latent)
        # mask tokens fill the tail of the shuffled sequence
        filler = self.mask_token.to(x.dtype).expand(b, n - k, -1)
        x = torch.cat([x, filler], dim=1)
        x = torch.gather(x, 1, ids_restore.unsqueeze(-1).expand(-1, -1, x.shape[-1]))
        x = x + self.decoder_pos_embed.to(x.dtype)
        for blk in self.decoder_blocks:
            x = blk(x)
        return self.decoder_pred(self.decoder_norm(x))

    # -- training ----------------------------------------------------------

    def draw_masks(self, batch_size, rng: np.random.Generator):
        return [make_mask(self.grid.n_patches, self.cfg.mask_ratio, rng) for _ in range(batch_size)]

    def pretrain_forward(self, x, rng=None, layouts=None):
        """Return ``(loss, pred_tokens, mask)`` for a batch (B, 3, D, H, W)."""
        if layouts is None:
            layouts = self.draw_masks(x.shape[0], rng)
        ids_keep, ids_restore, mask = stack_layouts(layouts)
        latent = self.encode_masked(x, ids_keep)
        pred = self.decode(latent, ids_restore)
        target = patchify(x, self.cfg.patch_size)
        return mae_loss(pred, target, mask, self.cfg.norm_pix_targets), pred, mask

    # -- downstream --------------------------------------------------------

    def features(self, x) -> FeatureSet:
        """Unmasked forward: pooled token mean plus every block's token grid."""
        if tuple(x.shape[-3:]) != tuple(self.cfg.img_size) or x.shape[1] != self.cfg.in_chans:
            raise InvalidInputError(
                f"input {tuple(x.shape)} does not match configured {self.cfg.in_chans}x{self.cfg.img_size}"
            )
        tokens = patchify(x, self.cfg.patch_size)
        pos = self.pos_embed.to(tokens.dtype)
        _, hidden = self.encode(tokens, pos, return_hidden=True)
        b = x.shape[0]
        d, h, w = self.grid.grid_dims
        grids = [t.transpose(1, 2).reshape(b, -1, d, h, w) for t in hidden]
        return FeatureSet(
            pooled=hidden[-1].mean(dim=1),
            levels=grids,
            strides=[self.cfg.patch_size] * len(grids),
            input=x,
        )

    def encoder_modules(self):
        return [self.patch_embed, self.blocks, self.norm]

    def layer_groups(self):
        """Encoder parameters grouped input->output: embedding, then one group per block."""
        groups = [list(self.patch_embed.parameters())]
        for blk in self.blocks:
            groups.append(list(blk.parameters()))
        if self.blocks:
            groups[-1] += list(self.norm.parameters())
        else:
            groups[0] += list(self.norm.parameters())
        return groups

    @property
    def feature_dim(self):
        return self.cfg.embed_dim
