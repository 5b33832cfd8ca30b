"""Fully convolutional 3D masked autoencoder with visible-only semantics.

Sparse convolution is emulated by dense convolution with re-zeroing: masked
cells are zeroed at the input and after every block at each stage's
resolution, and global response normalisation only pools over visible
positions.  The encoder output therefore never depends on masked voxels.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import InvalidConfigError, InvalidInputError, InvalidLayoutError, NumericInputError
from .nn_utils import FeatureSet, LayerNorm3d
from .patches import make_mask, unpatchify


@dataclass
class ConvConfig:
    img_size: Tuple[int, int, int] = (96, 96, 96)
    in_chans: int = 3
    stage_depths: Tuple[int, ...] = (3, 3, 9, 3)
    stage_dims: Tuple[int, ...] = (96, 192, 384, 768)
    kernel_size: int = 7
    mask_patch: int = 32
    mask_ratio: float = 0.6
    decoder_dim: int = 512
    decoder_depth: int = 1

    @property
    def total_stride(self):
        return 2 ** (len(self.stage_depths) + 1)

    def stage_strides(self):
        return [4 * 2 ** s for s in range(len(self.stage_depths))]

    def mask_grid(self):
        return tuple(s // self.mask_patch for s in self.img_size)

    def validate(self):
        if len(self.stage_depths) != len(self.stage_dims) or not self.stage_depths:
            raise InvalidConfigError("stage_depths and stage_dims must be non-empty and equal length")
        if not 0.0 < self.mask_ratio < 1.0:
            raise InvalidConfigError("mask_ratio must be in (0, 1)")
        if self.kernel_size % 2 == 0:
            raise InvalidConfigError("kernel_size must be odd")
        if any(s % self.mask_patch for s in self.img_size):
            raise InvalidConfigError(f"img_size {self.img_size} not divisible by mask_patch {self.mask_patch}")
        if self.mask_patch % self.total_stride:
            raise InvalidConfigError(
                f"mask_patch {self.mask_patch} must be a multiple of the deepest stride {self.total_stride}"
            )
        return self


class GRN(nn.Module):
    """Global response normalisation on channels-last input.

    ``keep`` (B, d, h, w, 1) restricts the spatial L2 norm to visible sites.
    """

    def __init__(self, dim):
        super().__init__()
        self.gamma = nn.Parameter(torch.zeros(1, 1, 1, 1, dim))
        self.beta = nn.Parameter(torch.zeros(1, 1, 1, 1, dim))

    def forward(self, x, keep=None):
        xv = x if keep is None else x * keep
        gx = torch.sqrt((xv * xv).sum(dim=(1, 2, 3), keepdim=True))
        nx = gx / (gx.mean(dim=-1, keepdim=True) + 1e-6)
        return self.gamma * (x * nx) + self.beta + x


class ConvBlock(nn.Module):
    """Depthwise conv -> LN -> expand -> GELU -> GRN -> project, residual."""

    def __init__(self, dim, kernel_size=7, expansion=4):
        super().__init__()
        self.dwconv = nn.Conv3d(dim, dim, kernel_size, padding=kernel_size // 2, groups=dim)
        self.norm = nn.LayerNorm(dim, eps=1e-6)
        self.pwconv1 = nn.Linear(dim, expansion * dim)
        self.act = nn.GELU()
        self.grn = GRN(expansion * dim)
        self.pwconv2 = nn.Linear(expansion * dim, dim)

    def residual(self, x, keep=None):
        """The branch f(x) of x' = x + f(x); ``keep`` is (B, 1, d, h, w)."""
        y = self.dwconv(x)
        if keep is not None:
            y = y * keep
        y = y.permute(0, 2, 3, 4, 1)
        keep_cl = None if keep is None else keep.permute(0, 2, 3, 4, 1)
        y = self.pwconv2(self.grn(self.act(self.pwconv1(self.norm(y))), keep_cl))
        return y.permute(0, 4, 1, 2, 3)

    def forward(self, x, keep=None):
        out = x + self.residual(x, keep)
        return out if keep is None else out * keep


def cell_to_grid(cell_mask, out_shape):
    """Nearest-exact expansion of a (B, gd, gh, gw) boolean cell grid."""
    m = cell_mask.to(torch.float32).unsqueeze(1)
    return F.interpolate(m, size=tuple(out_shape), mode="nearest-exact") > 0.5


def conv_mae_loss(recon, x, voxel_mask):
    """MSE over voxels inside masked cells, all channels.

    ``voxel_mask`` is (B, D, H, W) or (B, 1, D, H, W), True where masked.
    """
    if recon.shape != x.shape:
        raise InvalidInputError(f"reconstruction {tuple(recon.shape)} vs input {tuple(x.shape)}")
    m = voxel_mask.reshape(x.shape[0], 1, *x.shape[2:]).to(recon.dtype)
    denom = m.sum() * x.shape[1]
    if denom.item() == 0:
        raise InvalidLayoutError("loss needs at least one masked voxel")
    return (((recon - x) ** 2) * m).sum() / denom


class MaskedConvNet(nn.Module):
    arch = "conv"

    def __init__(self, cfg: ConvConfig):
        super().__init__()
        self.cfg = cfg.validate()
        dims, k = cfg.stage_dims, cfg.kernel_size
        self.stem = nn.Sequential(nn.Conv3d(cfg.in_chans, dims[0], 4, stride=4), LayerNorm3d(dims[0]))
        self.downsample = nn.ModuleList()
        self.stages = nn.ModuleList()
        for i, (depth, dim) in enumerate(zip(cfg.stage_depths, dims)):
            if i == 0:
                self.downsample.append(nn.Identity())
            else:
                self.downsample.append(
                    nn.Sequential(LayerNorm3d(dims[i - 1]), nn.Conv3d(dims[i - 1], dim, 2, stride=2))
                )
            self.stages.append(nn.ModuleList([ConvBlock(dim, k) for _ in range(depth)]))

        s = cfg.total_stride
        self.decoder_proj = nn.Conv3d(dims[-1], cfg.decoder_dim, 1)
        self.mask_token = nn.Parameter(torch.zeros(1, cfg.decoder_dim, 1, 1, 1))
        self.decoder_blocks = nn.ModuleList([ConvBlock(cfg.decoder_dim, k) for _ in range(cfg.decoder_depth)])
        self.decoder_pred = nn.Conv3d(cfg.decoder_dim, s ** 3 * cfg.in_chans, 1)

        self.apply(self._init)
        nn.init.normal_(self.mask_token, std=0.02)

    @staticmethod
    def _init(m):
        if isinstance(m, (nn.Conv3d, nn.Linear)):
            nn.init.trunc_normal_(m.weight, std=0.02)
            if m.bias is not None:
                nn.init.zeros_(m.bias)

    # -- encoder -----------------------------------------------------------

    def masked_encode(self, x, cell_mask=None):
        """Per-stage features; ``cell_mask`` (B, gd, gh, gw) is True where hidden."""
        if not torch.isfinite(x).all():
            raise NumericInputError("non-finite values in encoder input")
        if cell_mask is not None:
            if tuple(cell_mask.shape[1:]) != self.cfg.mask_grid():
                raise InvalidConfigError(
                    f"mask grid {tuple(cell_mask.shape[1:])} misaligned with {self.cfg.mask_grid()}"
                )
            x = x * (~cell_to_grid(cell_mask, x.shape[2:])).to(x.dtype)
        outs = []
        for i, (down, blocks) in enumerate(zip(self.downsample, self.stages)):
            x = self.stem(x) if i == 0 else down(x)
            keep = None
            if cell_mask is not None:
                keep = (~cell_to_grid(cell_mask, x.shape[2:])).to(x.dtype)
                x = x * keep
            for blk in blocks:
                x = blk(x, keep)
            outs.append(x)
        return outs

    # -- decoder -----------------------------------------------------------

    def conv_decode(self, feat, cell_mask):
        """Fill masked cells of the deepest grid with the mask token and predict voxels."""
        expected = [self.cfg.stage_dims[-1]] + [n // self.cfg.total_stride for n in self.cfg.img_size]
        if list(feat.shape[1:]) != expected:
            raise InvalidInputError(f"deepest features {tuple(feat.shape)} do not match {expected}")
        x = self.decoder_proj(feat)
        if cell_mask is not None:
            m = cell_to_grid(cell_mask, x.shape[2:]).to(x.dtype)
            x = x * (1.0 - m) + self.mask_token.to(x.dtype) * m
        for blk in self.decoder_blocks:
            x = blk(x)
        pred = self.decoder_pred(x)
        b, t = pred.shape[:2]
        grid = pred.shape[2:]
        tokens = pred.reshape(b, t, -1).transpose(1, 2)
        return unpatchify(tokens, self.cfg.total_stride, grid, self.cfg.in_chans)

    # -- training ----------------------------------------------------------

    def draw_masks(self, batch_size, rng: np.random.Generator):
        grid = self.cfg.mask_grid()
        n = int(np.prod(grid))
        cells = np.stack([make_mask(n, self.cfg.mask_ratio, rng).mask.reshape(grid) for _ in range(batch_size)])
        return torch.as_tensor(cells)

    def pretrain_forward(self, x, rng=None, cell_mask=None):
        """Return ``(loss, reconstruction, cell_mask)``."""
        if cell_mask is None:
            cell_mask = self.draw_masks(x.shape[0], rng)
        feats = self.masked_encode(x, cell_mask)
        recon = self.conv_decode(feats[-1], cell_mask)
        loss = conv_mae_loss(recon, x, cell_to_grid(cell_mask, x.shape[2:]))
        return loss, recon, cell_mask

    # -- downstream --------------------------------------------------------

    def features(self, x) -> FeatureSet:
        if x.shape[1] != self.cfg.in_chans or any(n % self.cfg.total_stride for n in x.shape[2:]):
            raise InvalidInputError(f"input {tuple(x.shape)} incompatible with stride {self.cfg.total_stride}")
        levels = self.masked_encode(x)
        return FeatureSet(
            pooled=levels[-1].mean(dim=(2, 3, 4)),
            levels=levels,
            strides=self.cfg.stage_strides(),
            input=x,
        )

    def encoder_modules(self):
        return [self.stem, self.downsample, self.stages]

    def layer_groups(self):
        """Stem, then one group per stage (its downsampling layer included)."""
        groups = [list(self.stem.parameters())]
        for down, blocks in zip(self.downsample, self.stages):
            groups.append(list(down.parameters()) + list(blocks.parameters()))
        return groups

    @property
    def feature_dim(self):
        return self.cfg.stage_dims[-1]
