"""Downstream heads attachable to either backbone's :class:`FeatureSet`."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import InvalidConfigError, InvalidInputError
from .nn_utils import FeatureSet
from .volume import Volume

KINDS = ("multiclass", "binary", "segmentation", "zone_localisation", "regression")
LOSSES = ("cross_entropy", "dice_plus_cross_entropy", "dice_only", "mean_squared_error")
_ALLOWED_LOSSES = {
    "multiclass": {"cross_entropy"},
    "binary": {"cross_entropy"},
    "zone_localisation": {"cross_entropy"},
    "segmentation": {"dice_plus_cross_entropy", "dice_only"},
    "regression": {"mean_squared_error"},
}


@dataclass
class TaskSpec:
    """Declarative description of one downstream task.

    ``target`` names the label field the task reads; ``class_edges`` maps an
    ordinal value v to class ``sum(v >= e for e in class_edges)``.
    """

    name: str
    kind: str
    target: str
    n_classes: int = 2
    class_edges: Tuple[float, ...] = ()
    head_style: Optional[str] = None
    input_modalities: Tuple[bool, bool, bool] = (True, True, True)
    loss: str = "cross_entropy"
    adaptation: str = "full_llrd"

    def validate(self):
        if self.kind not in KINDS:
            raise InvalidConfigError(f"unknown task kind {self.kind!r}")
        if self.loss not in _ALLOWED_LOSSES[self.kind]:
            raise InvalidConfigError(f"loss {self.loss!r} incompatible with kind {self.kind!r}")
        if self.adaptation not in ("linear_probe", "full_llrd"):
            raise InvalidConfigError(f"unknown adaptation {self.adaptation!r}")
        if self.kind in ("segmentation", "zone_localisation"):
            if self.head_style not in ("unetr3d_like", "upernet_like"):
                raise InvalidConfigError(f"{self.name}: dense task needs head_style")
            if self.kind == "zone_localisation" and self.head_style != "unetr3d_like":
                raise InvalidConfigError("zone localisation uses the unetr3d_like dense path")
        if self.kind in ("multiclass", "binary") and self.class_edges:
            if len(self.class_edges) + 1 != self.n_classes:
                raise InvalidConfigError(f"{self.name}: {len(self.class_edges)} edges for {self.n_classes} classes")
        if self.kind == "binary" and self.n_classes != 2:
            raise InvalidConfigError("binary tasks have n_classes == 2")
        if not any(self.input_modalities):
            raise InvalidConfigError("at least one input modality must be enabled")
        return self

    def remap(self, value):
        if not self.class_edges:
            return int(value)
        return int(sum(value >= e for e in self.class_edges))


def adapt_input_modalities(v: Volume, spec: TaskSpec) -> Volume:
    """Zero the channels a task does not use (e.g. T2w-only segmentation)."""
    mask = tuple(bool(m) for m in spec.input_modalities)
    if not any(mask):
        raise InvalidConfigError("at least one input modality must be enabled")
    data = v.data.copy()
    for c, keep in enumerate(mask):
        if not keep:
            data[c] = 0
    new_mask = tuple(a and b for a, b in zip(v.modality_mask, mask))
    return replace(v, data=data, modality_mask=new_mask)


def zero_channels(x: torch.Tensor, modalities) -> torch.Tensor:
    keep = torch.tensor([float(m) for m in modalities], dtype=x.dtype).view(1, -1, 1, 1, 1)
    return x * keep


# ---------------------------------------------------------------------------
# pooled heads


class ClsHead(nn.Module):
    """Linear -> BatchNorm -> ReLU -> Linear."""

    def __init__(self, in_dim, n_classes, hidden=None):
        super().__init__()
        hidden = hidden or max(16, in_dim // 2)
        self.in_dim = in_dim
        self.fc1 = nn.Linear(in_dim, hidden)
        self.bn = nn.BatchNorm1d(hidden)
        self.fc2 = nn.Linear(hidden, n_classes)

    def forward(self, feats):
        pooled = feats.pooled if isinstance(feats, FeatureSet) else feats
        if pooled.shape[-1] != self.in_dim:
            raise InvalidInputError(f"pooled dim {pooled.shape[-1]} != head dim {self.in_dim}")
        return self.fc2(F.relu(self.bn(self.fc1(pooled))))


class RegHead(nn.Module):
    """BatchNorm -> Linear, rescaled by fixed target statistics (identity by default)."""

    def __init__(self, in_dim):
        super().__init__()
        self.in_dim = in_dim
        self.bn = nn.BatchNorm1d(in_dim)
        self.fc = nn.Linear(in_dim, 1)
        self.register_buffer("target_mean", torch.zeros(()))
        self.register_buffer("target_scale", torch.ones(()))

    def set_target_stats(self, mean, scale):
        self.target_mean.fill_(float(mean))
        self.target_scale.fill_(float(scale) if scale > 0 else 1.0)

    def normalised(self, feats):
        pooled = feats.pooled if isinstance(feats, FeatureSet) else feats
        if pooled.shape[-1] != self.in_dim:
            raise InvalidInputError(f"pooled dim {pooled.shape[-1]} != head dim {self.in_dim}")
        return self.fc(self.bn(pooled)).squeeze(-1)

    def forward(self, feats):
        return self.normalised(feats) * self.target_scale + self.target_mean


# ---------------------------------------------------------------------------
# dense heads


def _norm(ch):
    return nn.GroupNorm(math.gcd(ch, 8), ch)


class ConvNormAct(nn.Sequential):
    def __init__(self, cin, cout, k=3):
        super().__init__(nn.Conv3d(cin, cout, k, padding=k // 2), _norm(cout), nn.LeakyReLU(0.01))


class UpBlock(nn.Module):
    """``n_up`` rounds of (2x transposed conv + conv block)."""

    def __init__(self, cin, cout, n_up):
        super().__init__()
        layers = []
        c = cin
        for _ in range(n_up):
            layers += [nn.ConvTranspose3d(c, cout, 2, stride=2), ConvNormAct(cout, cout)]
            c = cout
        if n_up == 0:
            layers.append(ConvNormAct(cin, cout))
        self.body = nn.Sequential(*layers)

    def forward(self, x):
        return self.body(x)


def _log2(n, what):
    k = int(round(math.log2(n))) if n > 0 else -1
    if k < 0 or 2 ** k != n:
        raise InvalidConfigError(f"{what} must be a power of two, got {n}")
    return k


def _assign_skips(strides, targets):
    """Pick a feature level for every decoder stride, deepest target first."""
    cands = list(range(len(strides) - 1)) or [len(strides) - 1]
    out = []
    if len(set(strides)) == 1:
        m, n = len(targets), len(cands)
        for k in range(len(targets)):
            i = int(math.floor(n * (m - k) / (m + 1) + 0.5)) - 1
            out.append(cands[min(max(i, 0), n - 1)])
        return out
    for s in targets:
        ok = [i for i in cands if strides[i] >= s]
        # no shallower level is coarse enough: upsample from the deepest one
        out.append(min(ok, key=lambda i: strides[i]) if ok else len(strides) - 1)
    return out


class UNETRHead(nn.Module):
    """Transposed-convolution decoder from the deepest grid to full resolution.

    Each intermediate stride receives a skip built from a shallower feature
    level (upsampled to that stride); full resolution receives a skip from
    the input volume itself.
    """

    def __init__(self, level_channels, strides, out_channels, in_chans=3, width=16):
        super().__init__()
        self.strides = list(strides)
        self.level_channels = list(level_channels)
        s_max = self.strides[-1]
        k = _log2(s_max, "deepest stride")
        for s in self.strides:
            _log2(s, "feature stride")
        self.targets = [2 ** j for j in range(k - 1, 0, -1)]
        self.skip_levels = _assign_skips(self.strides, self.targets)

        def ch(s):
            return width * min(s, 8)

        self.bottleneck = ConvNormAct(level_channels[-1], ch(s_max))
        self.skips = nn.ModuleList()
        self.ups = nn.ModuleList()
        self.fuse = nn.ModuleList()
        prev = ch(s_max)
        for s, li in zip(self.targets, self.skip_levels):
            r = self.strides[li]
            if r < s:
                raise InvalidConfigError(f"level stride {r} finer than decoder stride {s}")
            self.skips.append(UpBlock(level_channels[li], ch(s), _log2(r // s, "stride ratio")))
            self.ups.append(nn.ConvTranspose3d(prev, ch(s), 2, stride=2))
            self.fuse.append(ConvNormAct(2 * ch(s), ch(s)))
            prev = ch(s)
        self.input_skip = ConvNormAct(in_chans, width)
        self.up_last = nn.ConvTranspose3d(prev, width, 2, stride=2) if k > 0 else nn.Conv3d(prev, width, 1)
        self.fuse_last = ConvNormAct(2 * width, width)
        self.out = nn.Conv3d(width, out_channels, 1)
        self.feature_dim = width

    def dense_features(self, feats: FeatureSet):
        if feats.input is None:
            raise InvalidInputError("UNETR head needs the input volume for its full-resolution skip")
        if len(feats.levels) != len(self.strides):
            raise InvalidInputError(f"expected {len(self.strides)} feature levels, got {len(feats.levels)}")
        x = self.bottleneck(feats.levels[-1])
        for li, skip, up, fuse in zip(self.skip_levels, self.skips, self.ups, self.fuse):
            x = fuse(torch.cat([up(x), skip(feats.levels[li])], dim=1))
        x = self.up_last(x)
        return self.fuse_last(torch.cat([x, self.input_skip(feats.input)], dim=1))

    def forward(self, feats: FeatureSet):
        return self.out(self.dense_features(feats))


class ViTNeck(nn.Module):
    """Turn same-stride token grids into a 4-level pyramid (x4, x2, x1, /2)."""

    def __init__(self, dim, patch_size, n_out=4):
        super().__init__()
        ups = [2, 1, 0, -1][4 - n_out:]
        self.ops = nn.ModuleList()
        self.out_strides = []
        for u in ups:
            s = patch_size // 2 ** u if u >= 0 else patch_size * 2
            if u > 0:
                layers = []
                for i in range(u):
                    layers += [nn.ConvTranspose3d(dim, dim, 2, stride=2)]
                    if i < u - 1:
                        layers += [_norm(dim), nn.GELU()]
                self.ops.append(nn.Sequential(*layers))
            elif u == 0:
                self.ops.append(nn.Identity())
            else:
                self.ops.append(nn.MaxPool3d(2))
            self.out_strides.append(s)

    def forward(self, levels):
        n = len(self.ops)
        idx = [int(round((len(levels) - 1) * (i + 1) / n)) for i in range(n)]
        return [op(levels[i]) for op, i in zip(self.ops, idx)]


class UperNetHead(nn.Module):
    """Pyramid pooling on the deepest level plus top-down multi-level fusion."""

    def __init__(self, level_channels, strides, out_channels, width=32, pool_scales=(1, 2),
                 use_ppm=True, neck=None):
        super().__init__()
        self.neck = neck
        if neck is not None:
            level_channels = [level_channels[-1]] * len(neck.ops)
            strides = neck.out_strides
        self.strides = list(strides)
        if self.strides != sorted(self.strides):
            raise InvalidConfigError("pyramid strides must increase with depth")
        self.use_ppm = use_ppm
        deep = level_channels[-1]
        if use_ppm:
            self.ppm = nn.ModuleList([nn.Conv3d(deep, width, 1) for _ in pool_scales])
            self.pool_scales = tuple(pool_scales)
            self.ppm_bottleneck = ConvNormAct(deep + width * len(pool_scales), width)
        else:
            self.ppm_lateral = nn.Conv3d(deep, width, 1)
        self.laterals = nn.ModuleList([nn.Conv3d(c, width, 1) for c in level_channels[:-1]])
        self.fpn_convs = nn.ModuleList([ConvNormAct(width, width) for _ in level_channels[:-1]])
        self.fuse = ConvNormAct(width * len(level_channels), width)
        self.out = nn.Conv3d(width, out_channels, 1)

    def _deepest(self, x):
        if not self.use_ppm:
            return self.ppm_lateral(x)
        pooled = [x]
        for conv, s in zip(self.ppm, self.pool_scales):
            y = conv(F.adaptive_avg_pool3d(x, s))
            pooled.append(F.interpolate(y, size=x.shape[2:], mode="trilinear", align_corners=False))
        return self.ppm_bottleneck(torch.cat(pooled, dim=1))

    def forward(self, feats: FeatureSet):
        levels = self.neck(feats.levels) if self.neck is not None else feats.levels
        if len(levels) != len(self.strides):
            raise InvalidInputError(f"expected {len(self.strides)} pyramid levels, got {len(levels)}")
        lat = [l_conv(x) for l_conv, x in zip(self.laterals, levels[:-1])] + [self._deepest(levels[-1])]
        for i in range(len(lat) - 2, -1, -1):
            lat[i] = lat[i] + F.interpolate(lat[i + 1], size=lat[i].shape[2:], mode="trilinear",
                                            align_corners=False)
        outs = [conv(x) for conv, x in zip(self.fpn_convs, lat[:-1])] + [lat[-1]]
        size = outs[0].shape[2:]
        outs = [outs[0]] + [F.interpolate(o, size=size, mode="trilinear", align_corners=False) for o in outs[1:]]
        logits = self.out(self.fuse(torch.cat(outs, dim=1)))
        full = tuple(n * self.strides[0] for n in size)
        if self.strides[0] == 1:
            return logits
        return F.interpolate(logits, size=full, mode="trilinear", align_corners=False)


def zone_aggregate(features, zone_map, n_zones, reduce="mean"):
    """Per-zone pooled features.

    ``features`` (B, C, D, H, W), ``zone_map`` (B, D, H, W) integer ids with 0
    as background.  Returns ``(pooled (B, Z, C), present (B, Z))``; absent
    zones pool to zero.
    """
    b, c = features.shape[:2]
    flat = features.reshape(b, c, -1)
    z = zone_map.reshape(b, -1).long()
    onehot = F.one_hot(z, n_zones + 1)[..., 1:].to(features.dtype)  # (B, V, Z)
    counts = onehot.sum(dim=1)  # (B, Z)
    present = counts > 0
    if reduce == "mean":
        pooled = torch.einsum("bcv,bvz->bzc", flat, onehot) / counts.clamp(min=1).unsqueeze(-1)
    elif reduce == "max":
        neg = torch.finfo(features.dtype).min
        masked = flat.unsqueeze(-1).masked_fill(onehot.unsqueeze(1) == 0, neg)  # (B, C, V, Z)
        pooled = masked.amax(dim=2).transpose(1, 2)
        pooled = pooled.masked_fill(~present.unsqueeze(-1), 0.0)
    else:
        raise InvalidConfigError(f"unknown zone reduction {reduce!r}")
    return pooled, present


class ZoneHead(nn.Module):
    """UNETR dense path, zone-wise pooling of pre-logit features, shared 2-way classifier.

    ``forward`` returns ``(logits (B, Z, 2), present (B, Z))``; logits of
    absent zones are NaN.
    """

    def __init__(self, level_channels, strides, n_zones, in_chans=3, width=16, reduce="mean"):
        super().__init__()
        self.dense = UNETRHead(level_channels, strides, 2, in_chans, width)
        del self.dense.out
        self.n_zones = n_zones
        self.reduce = reduce
        self.classifier = nn.Linear(width, 2)

    def forward(self, feats: FeatureSet, zone_map):
        if zone_map is None or not (zone_map > 0).any():
            raise InvalidInputError("zone map has no zones")
        dense = self.dense.dense_features(feats)
        if tuple(zone_map.shape[-3:]) != tuple(dense.shape[-3:]):
            raise InvalidInputError(f"zone map {tuple(zone_map.shape)} vs features {tuple(dense.shape)}")
        pooled, present = zone_aggregate(dense, zone_map, self.n_zones, self.reduce)
        logits = self.classifier(pooled)
        logits = logits.masked_fill(~present.unsqueeze(-1), float("nan"))
        return logits, present


# ---------------------------------------------------------------------------


def build_head(task: TaskSpec, backbone, n_zones=27):
    """Instantiate the head a task needs for ``backbone``."""
    task.validate()
    dim = backbone.feature_dim
    if task.kind in ("multiclass", "binary"):
        return ClsHead(dim, task.n_classes)
    if task.kind == "regression":
        return RegHead(dim)
    if backbone.arch == "vit":
        n = backbone.cfg.depth or 1
        channels, strides = [dim] * n, [backbone.cfg.patch_size] * n
    else:
        channels, strides = list(backbone.cfg.stage_dims), backbone.cfg.stage_strides()
    in_chans = backbone.cfg.in_chans
    if task.kind == "zone_localisation":
        return ZoneHead(channels, strides, n_zones, in_chans)
    if task.head_style == "unetr3d_like":
        return UNETRHead(channels, strides, task.n_classes, in_chans)
    if backbone.arch == "vit":
        p = backbone.cfg.patch_size
        n_out = min(4, int(math.log2(p)) + 2)
        neck = ViTNeck(dim, p, n_out)
        return UperNetHead(channels, strides, task.n_classes, neck=neck)
    return UperNetHead(channels, strides, task.n_classes)


class TaskModel(nn.Module):
    """Backbone plus one head; the unit trained by the adaptation engine."""

    def __init__(self, backbone, head, task: TaskSpec):
        super().__init__()
        self.backbone = backbone
        self.head = head
        self.task = task

    def forward(self, x, zone_map=None):
        x = zero_channels(x, self.task.input_modalities)
        feats = self.backbone.features(x)
        if self.task.kind == "zone_localisation":
            return self.head(feats, zone_map)
        return self.head(feats)

    def encoder_parameters(self):
        return [p for g in self.backbone.layer_groups() for p in g]

    def layer_groups(self):
        """Encoder groups (input to output) followed by the head group."""
        return self.backbone.layer_groups() + [list(self.head.parameters())]
