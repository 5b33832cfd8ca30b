"""Procedural prostate-like phantoms with exact ground truth.

Each subject is a spherical gland with an inner transition zone, a bladder
above it, a rectum behind it, and zero or more spherical lesions inside the
gland.  Lesions are dark on T2w/ADC and bright on DWI.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Tuple

import numpy as np

from .errors import GeometryError, InvalidConfigError
from .volume import Volume

ANATOMY_LABELS = {1: "transition_zone", 2: "peripheral_zone", 3: "bladder", 4: "rectum"}
N_ZONES = 27
_MAX_RETRIES = 50


@dataclass
class PhantomSpec:
    n_subjects: int = 64
    grid_size: Tuple[int, int, int] = (32, 32, 32)
    gland_radius_range: Tuple[float, float] = (7.0, 11.0)
    lesion_count_range: Tuple[int, int] = (0, 2)
    lesion_radius_range: Tuple[float, float] = (2.0, 4.0)
    noise_level: float = 0.03
    seed: int = 0


@dataclass
class PhantomLabels:
    gland: np.ndarray
    anatomy: np.ndarray
    lesion: np.ndarray
    zones: np.ndarray
    grade: int
    gleason: int
    volume_ml: float
    zone_positive: np.ndarray

    @property
    def lesion_present(self) -> int:
        return int(self.lesion.any())


@dataclass
class Subject:
    volume: Volume
    labels: PhantomLabels


def _sphere(coords, center, radius):
    zz, yy, xx = coords
    return (zz - center[0]) ** 2 + (yy - center[1]) ** 2 + (xx - center[2]) ** 2 <= radius ** 2


def lesion_grade(radius: float, contrast: float, radius_range, contrast_range=(0.2, 0.6)) -> int:
    """PIRADS-like score in {2..5} for one lesion; larger/brighter scores higher."""
    r_lo, r_hi = radius_range
    c_lo, c_hi = contrast_range
    r_n = (radius - r_lo) / (r_hi - r_lo) if r_hi > r_lo else 1.0
    c_n = (contrast - c_lo) / (c_hi - c_lo)
    s = float(np.clip(0.5 * (r_n + c_n), 0.0, 1.0))
    return 2 + min(int(s * 4), 3)


def gleason_group(contrast: float, contrast_range=(0.2, 0.6)) -> int:
    """Grade-group surrogate in {0..4} driven by lesion contrast only."""
    c_lo, c_hi = contrast_range
    c_n = float(np.clip((contrast - c_lo) / (c_hi - c_lo), 0.0, 1.0))
    return min(int(c_n * 5), 4)


def zone_map(gland: np.ndarray) -> np.ndarray:
    """3 levels (base/mid/apex) x 3x3 axial sectors over the gland bounding box.

    Zone ids are 1..27, 0 outside the gland.
    """
    zones = np.zeros(gland.shape, dtype=np.int16)
    idx = np.nonzero(gland)
    if len(idx[0]) == 0:
        return zones
    thirds = []
    for ax in range(3):
        lo, hi = idx[ax].min(), idx[ax].max() + 1
        pos = (idx[ax] - lo) * 3 // (hi - lo)
        thirds.append(np.minimum(pos, 2))
    zones[idx] = 1 + thirds[0] * 9 + thirds[1] * 3 + thirds[2]
    return zones


def _one_subject(spec: PhantomSpec, rng: np.random.Generator, subject_id: str) -> Subject:
    shape = tuple(int(s) for s in spec.grid_size)
    coords = np.ogrid[: shape[0], : shape[1], : shape[2]]
    grid_c = np.array(shape, dtype=float) / 2.0 - 0.5

    for _ in range(_MAX_RETRIES):
        r_g = float(rng.uniform(*spec.gland_radius_range))
        jitter = rng.uniform(-2.0, 2.0, size=3)
        c_g = grid_c + jitter
        n_lesions = int(rng.integers(spec.lesion_count_range[0], spec.lesion_count_range[1] + 1))
        lesions = []
        ok = True
        for _ in range(n_lesions):
            r_l = float(rng.uniform(*spec.lesion_radius_range))
            room = r_g - r_l - 1.0
            if room < 0:
                ok = False
                break
            direction = rng.normal(size=3)
            direction /= np.linalg.norm(direction) + 1e-12
            dist = room * rng.uniform(0.0, 1.0) ** (1.0 / 3.0)
            contrast = float(rng.uniform(0.2, 0.6))
            lesions.append((c_g + direction * dist, r_l, contrast))
        if ok:
            break
    else:
        raise GeometryError(
            f"{subject_id}: lesions do not fit inside the gland after {_MAX_RETRIES} attempts"
        )

    gland = _sphere(coords, c_g, r_g)
    if not gland.any():
        raise GeometryError(f"{subject_id}: gland has no voxels")
    tz = _sphere(coords, c_g + np.array([0.0, -0.25 * r_g, 0.0]), 0.55 * r_g) & gland
    bladder = _sphere(coords, c_g + np.array([-(r_g + 0.6 * r_g + 1.0), 0.0, 0.0]), 0.6 * r_g) & ~gland
    zz, yy, xx = coords
    rectum = (((yy - (c_g[1] + r_g + 0.35 * r_g + 1.0)) ** 2 + (xx - c_g[2]) ** 2) <= (0.35 * r_g) ** 2)
    rectum = np.broadcast_to(rectum, shape) & ~gland & ~bladder

    anatomy = np.zeros(shape, dtype=np.int16)
    anatomy[gland] = 2
    anatomy[tz] = 1
    anatomy[bladder] = 3
    anatomy[rectum] = 4

    lesion = np.zeros(shape, dtype=bool)
    lesion_contrast = np.zeros(shape, dtype=np.float32)
    grade, gleason = 1, 0
    for center, r_l, contrast in lesions:
        m = _sphere(coords, center, r_l) & gland
        lesion |= m
        lesion_contrast[m] = np.maximum(lesion_contrast[m], contrast)
        grade = max(grade, lesion_grade(r_l, contrast, spec.lesion_radius_range))
        gleason = max(gleason, gleason_group(contrast))
    if lesions and not lesion.any():
        grade, gleason = 1, 0

    t2 = np.full(shape, 0.2, dtype=np.float32)
    dwi = np.full(shape, 0.1, dtype=np.float32)
    adc = np.full(shape, 0.3, dtype=np.float32)
    t2[anatomy == 2], dwi[anatomy == 2], adc[anatomy == 2] = 0.75, 0.3, 0.7
    t2[anatomy == 1], dwi[anatomy == 1], adc[anatomy == 1] = 0.5, 0.35, 0.55
    t2[bladder], dwi[bladder], adc[bladder] = 0.95, 0.05, 0.95
    t2[rectum], dwi[rectum], adc[rectum] = 0.1, 0.15, 0.2
    t2 -= lesion_contrast
    dwi += lesion_contrast
    adc -= lesion_contrast
    data = np.stack([t2, dwi, adc]).astype(np.float32)
    if spec.noise_level > 0:
        data += rng.normal(0.0, spec.noise_level, size=data.shape).astype(np.float32)

    zones = zone_map(gland)
    zone_pos = np.zeros(N_ZONES, dtype=np.int8)
    hit = np.unique(zones[lesion])
    zone_pos[hit[hit > 0] - 1] = 1

    labels = PhantomLabels(
        gland=gland,
        anatomy=anatomy,
        lesion=lesion,
        zones=zones,
        grade=int(grade),
        gleason=int(gleason),
        volume_ml=float(gland.sum()) * 0.001,
        zone_positive=zone_pos,
    )
    return Subject(Volume(data, (1.0, 1.0, 1.0), subject_id, (True, True, True)), labels)


def generate_phantoms(spec: PhantomSpec) -> List[Subject]:
    """Deterministic synthetic cohort; subject ``i`` depends only on (seed, i)."""
    if spec.n_subjects < 1:
        raise InvalidConfigError("n_subjects must be >= 1")
    lo, hi = spec.lesion_count_range
    if lo < 0 or hi < lo:
        raise InvalidConfigError(f"bad lesion_count_range {spec.lesion_count_range}")
    for name in ("gland_radius_range", "lesion_radius_range"):
        a, b = getattr(spec, name)
        if a <= 0 or b < a:
            raise InvalidConfigError(f"bad {name} {(a, b)}")
    width = max(3, len(str(spec.n_subjects - 1)))
    return [
        _one_subject(spec, np.random.default_rng([spec.seed, i]), f"sub-{i:0{width}d}")
        for i in range(spec.n_subjects)
    ]
