"""NIfTI volume I/O and the on-disk cohort manifest.

Cohort layout::

    <root>/manifest.tsv
    <root>/<subject_id>/{t2w,dwi,adc}.nii.gz
    <root>/<subject_id>/{gland,anatomy,lesion,zones}.nii.gz

The manifest is tab-separated with a header row; paths are relative to the
root.  Scalar labels (grade, gleason, volume_ml) and the split live in the
manifest too.
"""

from __future__ import annotations

import csv
import os
from pathlib import Path

import nibabel as nib
import numpy as np

from .errors import InvalidInputError
from .phantoms import N_ZONES, PhantomLabels, Subject
from .volume import MODALITIES, SplitManifest, Volume

LABEL_MAPS = ("gland", "anatomy", "lesion", "zones")
MANIFEST_FIELDS = (
    ["subject_id", "split"]
    + list(MODALITIES)
    + list(LABEL_MAPS)
    + ["grade", "gleason", "volume_ml", "spacing_mm"]
)


def save_nifti(arr: np.ndarray, path, spacing=(1.0, 1.0, 1.0)):
    affine = np.diag([float(s) for s in spacing] + [1.0])
    img = nib.Nifti1Image(np.asarray(arr), affine)
    img.header.set_zooms(tuple(float(s) for s in spacing))
    nib.save(img, str(path))
    return Path(path)


def load_nifti(path):
    """Return ``(array, spacing)`` for a 3D NIfTI file."""
    img = nib.load(str(path))
    arr = np.asanyarray(img.dataobj)
    spacing = tuple(float(z) for z in img.header.get_zooms()[:3])
    return arr, spacing


def save_volume(v: Volume, directory):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = {}
    for c, name in enumerate(MODALITIES):
        p = directory / f"{name}.nii.gz"
        save_nifti(v.data[c].astype(np.float32), p, v.spacing_mm)
        paths[name] = p
    return paths


def load_volume(paths: dict, subject_id="") -> Volume:
    """Stack per-modality files; a missing/empty path yields a zeroed, masked channel."""
    chans, mask, spacing, shape = [], [], None, None
    for name in MODALITIES:
        p = paths.get(name)
        if p:
            arr, sp = load_nifti(p)
            if shape is not None and arr.shape != shape:
                raise InvalidInputError(f"{subject_id}: modality {name} shape {arr.shape} != {shape}")
            shape, spacing = arr.shape, sp
            chans.append(arr.astype(np.float32))
            mask.append(True)
        else:
            chans.append(None)
            mask.append(False)
    if shape is None:
        raise InvalidInputError(f"{subject_id}: no modality files")
    data = np.stack([c if c is not None else np.zeros(shape, np.float32) for c in chans])
    return Volume(data, spacing, subject_id, tuple(mask))


def write_cohort(subjects, root, splits: SplitManifest | None = None):
    """Write subjects as NIfTI files plus ``manifest.tsv``; returns the manifest path."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    rows = []
    for s in subjects:
        sid = s.volume.subject_id
        d = root / sid
        save_volume(s.volume, d)
        lab = s.labels
        for name in LABEL_MAPS:
            save_nifti(getattr(lab, name).astype(np.int16), d / f"{name}.nii.gz", s.volume.spacing_mm)
        row = {
            "subject_id": sid,
            "split": splits.split_of(sid) if splits is not None else "",
            "grade": lab.grade,
            "gleason": lab.gleason,
            "volume_ml": repr(lab.volume_ml),
            "spacing_mm": ",".join(repr(x) for x in s.volume.spacing_mm),
        }
        for name in list(MODALITIES) + list(LABEL_MAPS):
            row[name] = f"{sid}/{name}.nii.gz"
        rows.append(row)
    path = root / "manifest.tsv"
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=MANIFEST_FIELDS, delimiter="\t")
        w.writeheader()
        w.writerows(rows)
    return path


def read_manifest(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh, delimiter="\t"))
    missing = set(MANIFEST_FIELDS) - set(rows[0].keys() if rows else MANIFEST_FIELDS)
    if missing:
        raise InvalidInputError(f"manifest {path} lacks columns {sorted(missing)}")
    return rows


def read_cohort(root):
    """Load a cohort written by :func:`write_cohort`.

    Returns ``(subjects, splits)``; ``splits`` is None when the manifest has no
    split column values.
    """
    root = Path(root)
    rows = read_manifest(root / "manifest.tsv")
    subjects = []
    split_ids = {"train": [], "val": [], "test": []}
    for row in rows:
        sid = row["subject_id"]
        paths = {m: (root / row[m]) if row[m] else None for m in MODALITIES}
        v = load_volume(paths, sid)
        maps = {}
        for name in LABEL_MAPS:
            arr, _ = load_nifti(root / row[name]) if row[name] else (None, None)
            maps[name] = arr
        gland = maps["gland"].astype(bool)
        lesion = maps["lesion"].astype(bool)
        zones = maps["zones"].astype(np.int16)
        zone_pos = np.zeros(N_ZONES, dtype=np.int8)
        hit = np.unique(zones[lesion])
        zone_pos[hit[hit > 0] - 1] = 1
        labels = PhantomLabels(
            gland=gland,
            anatomy=maps["anatomy"].astype(np.int16),
            lesion=lesion,
            zones=zones,
            grade=int(row["grade"]),
            gleason=int(row["gleason"]),
            volume_ml=float(row["volume_ml"]),
            zone_positive=zone_pos,
        )
        subjects.append(Subject(v, labels))
        if row["split"] in split_ids:
            split_ids[row["split"]].append(sid)
    splits = None
    if any(split_ids.values()):
        splits = SplitManifest(split_ids["train"], split_ids["val"], split_ids["test"], seed=-1)
    return subjects, splits


def ensure_dir(path):
    os.makedirs(path, exist_ok=True)
    return Path(path)
