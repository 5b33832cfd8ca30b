"""Cubic patch grids, random token masks and fixed 3D sine-cosine embeddings."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .errors import InvalidConfigError, InvalidInputError


@dataclass(frozen=True)
class PatchGrid:
    patch_size: int
    grid_dims: tuple
    channels: int = 3

    @classmethod
    def for_shape(cls, shape, p, channels=3):
        shape = tuple(int(s) for s in shape)
        if p < 1 or any(s % p for s in shape):
            raise InvalidInputError(f"shape {shape} not divisible by patch size {p}")
        return cls(int(p), tuple(s // p for s in shape), channels)

    @property
    def n_patches(self):
        d, h, w = self.grid_dims
        return d * h * w

    @property
    def token_dim(self):
        return self.channels * self.patch_size ** 3


def patchify(x, p: int):
    """(…, C, D, H, W) -> (…, n_patches, C·p³); cube order is raster (z, y, x).

    Each token is its cube flattened channel-major. Accepts numpy or torch.
    """
    *lead, c, d, h, w = x.shape
    if d % p or h % p or w % p:
        raise InvalidInputError(f"spatial shape {(d, h, w)} not divisible by patch size {p}")
    gd, gh, gw = d // p, h // p, w // p
    nl = len(lead)
    y = x.reshape(*lead, c, gd, p, gh, p, gw, p)
    perm = tuple(range(nl)) + tuple(nl + i for i in (1, 3, 5, 0, 2, 4, 6))
    y = y.permute(*perm) if isinstance(y, torch.Tensor) else y.transpose(perm)
    return y.reshape(*lead, gd * gh * gw, c * p ** 3)


def unpatchify(tokens, p: int, grid_dims, channels=3):
    """Exact inverse of :func:`patchify`."""
    *lead, n, dim = tokens.shape
    gd, gh, gw = grid_dims
    if n != gd * gh * gw or dim != channels * p ** 3:
        raise InvalidInputError(f"tokens {tuple(tokens.shape)} inconsistent with grid {grid_dims}, p={p}")
    nl = len(lead)
    y = tokens.reshape(*lead, gd, gh, gw, channels, p, p, p)
    perm = tuple(range(nl)) + tuple(nl + i for i in (3, 0, 4, 1, 5, 2, 6))
    y = y.permute(*perm) if isinstance(y, torch.Tensor) else y.transpose(perm)
    return y.reshape(*lead, channels, gd * p, gh * p, gw * p)


@dataclass
class MaskLayout:
    """Which tokens are hidden, plus the shuffle/restore bookkeeping.

    ``shuffle`` lists kept indices first, then masked ones;
    ``restore`` is its inverse so ``concat(kept, masked)[restore]`` is the
    original order.
    """

    mask_ratio: float
    n_patches: int
    shuffle: np.ndarray
    restore: np.ndarray
    n_masked: int

    @property
    def n_keep(self):
        return self.n_patches - self.n_masked

    @property
    def keep_indices(self):
        return self.shuffle[: self.n_keep]

    @property
    def masked_indices(self):
        return self.shuffle[self.n_keep:]

    @property
    def mask(self):
        """Boolean vector in original order, True where masked."""
        m = np.zeros(self.n_patches, dtype=bool)
        m[self.masked_indices] = True
        return m


def make_mask(n_patches: int, ratio: float, rng: np.random.Generator) -> MaskLayout:
    """Uniform random mask of ``floor(ratio * n)`` tokens via argsort of noise."""
    if n_patches < 1:
        raise InvalidInputError("n_patches must be >= 1")
    if not 0.0 < ratio < 1.0:
        raise InvalidConfigError(f"mask ratio must be in (0, 1), got {ratio}")
    n_masked = int(math.floor(ratio * n_patches))
    noise = rng.random(n_patches)
    shuffle = np.argsort(noise, kind="stable")
    restore = np.argsort(shuffle, kind="stable")
    return MaskLayout(float(ratio), int(n_patches), shuffle, restore, n_masked)


def full_layout(n_patches: int) -> MaskLayout:
    """Layout that keeps every token in original order."""
    idx = np.arange(n_patches)
    return MaskLayout(0.0, n_patches, idx, idx.copy(), 0)


def stack_layouts(layouts):
    """Batch tensors ``(ids_keep, ids_restore, mask)`` for same-size layouts."""
    n_keep = {l.n_keep for l in layouts}
    if len(n_keep) != 1:
        raise InvalidInputError("layouts in a batch must keep the same number of tokens")
    keep = torch.as_tensor(np.stack([l.keep_indices for l in layouts]), dtype=torch.long)
    restore = torch.as_tensor(np.stack([l.restore for l in layouts]), dtype=torch.long)
    mask = torch.as_tensor(np.stack([l.mask for l in layouts]))
    return keep, restore, mask


def sincos_1d(dim: int, positions) -> np.ndarray:
    """Standard 1D table: first half sin, second half cos, frequencies 1/10000^(2k/dim)."""
    if dim % 2:
        raise InvalidConfigError(f"1D embedding dim must be even, got {dim}")
    k = np.arange(dim // 2, dtype=np.float64)
    omega = 1.0 / 10000.0 ** (2.0 * k / dim)
    out = np.outer(np.asarray(positions, dtype=np.float64), omega)
    return np.concatenate([np.sin(out), np.cos(out)], axis=1)


def build_pos_embed(grid_dims, embed_dim: int) -> np.ndarray:
    """(n_patches, embed_dim) table; thirds encode z, y, x in that order."""
    if embed_dim % 6:
        raise InvalidConfigError(f"embed_dim must be divisible by 6, got {embed_dim}")
    third = embed_dim // 3
    gd, gh, gw = grid_dims
    zz, yy, xx = np.meshgrid(np.arange(gd), np.arange(gh), np.arange(gw), indexing="ij")
    parts = [sincos_1d(third, a.reshape(-1)) for a in (zz, yy, xx)]
    return np.concatenate(parts, axis=1)
