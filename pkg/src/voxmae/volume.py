"""Volume records, preprocessing, augmentation and cohort splits."""

from __future__ import annotations

import math
import warnings
import zlib
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage

from .errors import DegenerateVolumeError, InvalidConfigError, InvalidInputError

MODALITIES = ("t2w", "dwi", "adc")


@dataclass
class Volume:
    """A 3-channel volume, channels ordered (T2w, DWI, ADC)."""

    data: np.ndarray
    spacing_mm: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    subject_id: str = ""
    modality_mask: Tuple[bool, bool, bool] = (True, True, True)

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 4 or self.data.shape[0] != 3:
            raise InvalidInputError(f"volume data must be (3, D, H, W), got {self.data.shape}")
        self.spacing_mm = tuple(float(s) for s in self.spacing_mm)
        self.modality_mask = tuple(bool(m) for m in self.modality_mask)
        if len(self.spacing_mm) != 3 or len(self.modality_mask) != 3:
            raise InvalidInputError("spacing_mm and modality_mask must be triples")

    @property
    def shape(self):
        return self.data.shape[1:]


def resample_isotropic(v: Volume, target_spacing=(1.0, 1.0, 1.0)) -> Volume:
    """Trilinear resampling onto a grid of ``target_spacing`` (mm)."""
    target = tuple(float(t) for t in target_spacing)
    if any(s <= 0 for s in v.spacing_mm) or any(t <= 0 for t in target):
        raise InvalidInputError(f"spacing must be positive: {v.spacing_mm} -> {target}")
    out_shape = tuple(
        int(math.floor(n * s / t + 0.5)) for n, s, t in zip(v.shape, v.spacing_mm, target)
    )
    if min(out_shape) < 1:
        raise DegenerateVolumeError(f"resampling {v.shape} gives empty grid {out_shape}")
    if out_shape == tuple(v.shape):
        data = v.data.copy()
    else:
        data = resize_array(v.data, out_shape, order=1)
    return replace(v, data=data, spacing_mm=target)


def resize_array(arr: np.ndarray, out_shape, order=1) -> np.ndarray:
    """Resize a (C, D, H, W) array; order 1 is trilinear, order 0 nearest."""
    t = torch.from_numpy(np.ascontiguousarray(arr, dtype=np.float64))[None]
    if order == 0:
        out = F.interpolate(t, size=tuple(out_shape), mode="nearest-exact")
    else:
        out = F.interpolate(t, size=tuple(out_shape), mode="trilinear", align_corners=False)
    return out[0].numpy().astype(arr.dtype, copy=False)


def normalize_intensity(v: Volume, clip_percentiles: Optional[Tuple[float, float]] = None) -> Volume:
    """Per-channel min-max scaling to [0, 1].

    Channels whose modality is absent are zeroed.  A constant channel maps to
    zeros and emits a ``UserWarning``.  ``clip_percentiles`` (e.g. (0.5, 99.5))
    clips each channel before scaling.
    """
    out = np.zeros(v.data.shape, dtype=np.float32)
    for c in range(3):
        if not v.modality_mask[c]:
            continue
        ch = v.data[c].astype(np.float64)
        if clip_percentiles is not None:
            lo_p, hi_p = np.percentile(ch, clip_percentiles)
            ch = np.clip(ch, lo_p, hi_p)
        lo, hi = ch.min(), ch.max()
        if not hi > lo:
            warnings.warn(
                f"{v.subject_id or 'volume'}: channel {MODALITIES[c]} is constant; normalised to zero",
                UserWarning,
                stacklevel=2,
            )
            continue
        out[c] = (ch - lo) / (hi - lo)
    return replace(v, data=out)


def preprocess(v: Volume, clip_percentiles=None) -> Volume:
    return normalize_intensity(resample_isotropic(v, (1.0, 1.0, 1.0)), clip_percentiles)


# ---------------------------------------------------------------------------
# augmentation


@dataclass
class AugmentConfig:
    zoom_range: Tuple[float, float] = (0.9, 1.1)
    crop_size: Tuple[int, int, int] = (96, 96, 96)
    flip_prob: float = 0.5
    flip_axis: int = 0


@dataclass(frozen=True)
class AugmentParams:
    """Concrete draws for one augmentation call."""

    zoom: float
    zoomed_shape: Tuple[int, int, int]
    offset: Tuple[int, int, int]
    crop_size: Tuple[int, int, int]
    flip: bool
    flip_axis: int


def sample_rng(seed: int, subject_id: str, epoch: int) -> np.random.Generator:
    """Generator keyed on (seed, subject, epoch) so worker scheduling cannot matter."""
    return np.random.default_rng([int(seed), zlib.crc32(subject_id.encode()), int(epoch)])


def draw_augment(shape, cfg: AugmentConfig, rng: np.random.Generator) -> AugmentParams:
    lo, hi = cfg.zoom_range
    zoom = float(rng.uniform(lo, hi)) if hi > lo else float(lo)
    zoomed = tuple(int(math.floor(n * zoom + 0.5)) for n in shape)
    crop = tuple(int(c) for c in cfg.crop_size)
    if any(c > z for c, z in zip(crop, zoomed)):
        raise InvalidConfigError(f"crop {crop} larger than zoomed volume {zoomed}")
    offset = tuple(int(rng.integers(0, z - c + 1)) for c, z in zip(crop, zoomed))
    flip = bool(rng.random() < cfg.flip_prob)
    return AugmentParams(zoom, zoomed, offset, crop, flip, cfg.flip_axis)


def apply_augment(arr: np.ndarray, p: AugmentParams, order=1) -> np.ndarray:
    """Apply drawn parameters to a (C, D, H, W) or (D, H, W) array."""
    squeeze = arr.ndim == 3
    a = arr[None] if squeeze else arr
    if p.zoomed_shape != tuple(a.shape[1:]):
        a = resize_array(a, p.zoomed_shape, order=order)
    sl = tuple(slice(o, o + c) for o, c in zip(p.offset, p.crop_size))
    a = a[(slice(None),) + sl]
    if p.flip:
        a = np.flip(a, axis=1 + p.flip_axis)
    a = np.ascontiguousarray(a)
    return a[0] if squeeze else a


def augment(v: Volume, cfg: AugmentConfig, rng: np.random.Generator, label: Optional[np.ndarray] = None):
    """Zoom, random crop, then axial flip; ``label`` gets the same geometry.

    Returns the augmented volume, or ``(volume, label)`` when a label is given.
    """
    p = draw_augment(v.shape, cfg, rng)
    out = replace(v, data=apply_augment(v.data, p, order=1))
    if label is None:
        return out
    return out, apply_augment(label, p, order=0)


def center_crop_or_pad(arr: np.ndarray, size) -> np.ndarray:
    """Crop (centred) or zero-pad the trailing three axes to ``size``."""
    out = arr
    for ax, target in zip(range(arr.ndim - 3, arr.ndim), size):
        n = out.shape[ax]
        if n > target:
            start = (n - target) // 2
            out = np.take(out, np.arange(start, start + target), axis=ax)
        elif n < target:
            pad = [(0, 0)] * out.ndim
            before = (target - n) // 2
            pad[ax] = (before, target - n - before)
            out = np.pad(out, pad)
    return out


# ---------------------------------------------------------------------------
# splits


@dataclass
class SplitManifest:
    train_ids: list
    val_ids: list
    test_ids: list
    seed: int
    ratios: Tuple[float, float, float] = (0.7, 0.1, 0.2)

    def sizes(self):
        return len(self.train_ids), len(self.val_ids), len(self.test_ids)

    def split_of(self, subject_id):
        for name, ids in (("train", self.train_ids), ("val", self.val_ids), ("test", self.test_ids)):
            if subject_id in ids:
                return name
        raise KeyError(subject_id)


def make_splits(ids: Sequence, ratios=(0.7, 0.1, 0.2), seed: int = 0) -> SplitManifest:
    """Seeded shuffle then contiguous train/val/test partition.

    Validation and test sizes are rounded half-up; train absorbs the rest.
    """
    ids = list(ids)
    if not ids:
        raise InvalidInputError("cannot split an empty cohort")
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise InvalidConfigError(f"ratios must be 3 non-negative values summing to 1, got {ratios}")
    if len(set(ids)) != len(ids):
        raise InvalidInputError("subject ids must be unique")
    n = len(ids)
    n_val = int(math.floor(n * ratios[1] + 0.5))
    n_test = int(math.floor(n * ratios[2] + 0.5))
    n_train = n - n_val - n_test
    order = np.random.default_rng(seed).permutation(n)
    shuffled = [ids[i] for i in order]
    return SplitManifest(
        train_ids=shuffled[:n_train],
        val_ids=shuffled[n_train:n_train + n_val],
        test_ids=shuffled[n_train + n_val:],
        seed=int(seed),
        ratios=tuple(float(r) for r in ratios),
    )
