"""Downstream task catalogue and conversion of phantom subjects into tensors."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Dict, List, Optional

import numpy as np
import torch

from .errors import InvalidConfigError, InvalidInputError
from .heads import TaskSpec, adapt_input_modalities
from .phantoms import ANATOMY_LABELS
from .volume import center_crop_or_pad, preprocess

T2W_ONLY = (True, False, False)

CATALOGUE: Dict[str, TaskSpec] = {
    t.name: t
    for t in [
        # ordinal score {<=2, 3, 4, 5}
        TaskSpec("PIRADS-Cls", "multiclass", "grade", 4, (3, 4, 5)),
        TaskSpec("PIRADS-Bin3", "binary", "grade", 2, (3,)),
        TaskSpec("PIRADS-Bin4", "binary", "grade", 2, (4,)),
        TaskSpec("Grading-Cls", "multiclass", "gleason", 5, (1, 2, 3, 4)),
        TaskSpec("Grading-Bin2", "binary", "gleason", 2, (2,)),
        TaskSpec("Grading-Bin3", "binary", "gleason", 2, (3,)),
        TaskSpec("LesionPresence", "binary", "grade", 2, (2,)),
        TaskSpec("LesionSegAll", "segmentation", "lesion", 2, head_style="unetr3d_like",
                 loss="dice_plus_cross_entropy"),
        TaskSpec("GlandSeg", "segmentation", "gland", 2, head_style="unetr3d_like",
                 loss="dice_plus_cross_entropy"),
        TaskSpec("AnatomySeg", "segmentation", "anatomy", len(ANATOMY_LABELS) + 1,
                 head_style="unetr3d_like", input_modalities=T2W_ONLY, loss="dice_plus_cross_entropy"),
        TaskSpec("Volume-Reg", "regression", "volume_ml", 1, loss="mean_squared_error"),
        TaskSpec("PCa-Loc", "zone_localisation", "zone_positive", 2, head_style="unetr3d_like"),
    ]
}


def get_task(name: str, overrides: Optional[Dict[str, TaskSpec]] = None) -> TaskSpec:
    pool = dict(CATALOGUE)
    pool.update(overrides or {})
    if name not in pool:
        raise InvalidConfigError(f"unknown task {name!r}; available: {', '.join(sorted(pool))}")
    return pool[name].validate()


@dataclass
class TaskData:
    """Stacked tensors for one split of one task."""

    ids: List[str]
    images: torch.Tensor
    targets: torch.Tensor
    zones: Optional[torch.Tensor] = None

    def __len__(self):
        return len(self.ids)

    def subset(self, idx):
        idx = torch.as_tensor(np.asarray(idx, dtype=np.int64))
        return TaskData(
            [self.ids[i] for i in idx.tolist()],
            self.images[idx],
            self.targets[idx],
            None if self.zones is None else self.zones[idx],
        )


def _target(task: TaskSpec, labels):
    raw = getattr(labels, task.target)
    if task.kind in ("multiclass", "binary"):
        return task.remap(raw)
    if task.kind == "regression":
        return float(raw)
    if task.kind == "zone_localisation":
        return np.asarray(raw, dtype=np.int64)
    return np.asarray(raw, dtype=np.int64)


def build_task_data(subjects, ids, task: TaskSpec, crop_size=None) -> TaskData:
    """Preprocess subjects with ids ``ids`` into a :class:`TaskData` block."""
    by_id = {s.volume.subject_id: s for s in subjects}
    imgs, tgts, zones = [], [], []
    for sid in ids:
        if sid not in by_id:
            raise InvalidInputError(f"subject {sid!r} not in cohort")
        s = by_id[sid]
        v = adapt_input_modalities(preprocess(s.volume), task)
        data = v.data
        y = _target(task, s.labels)
        z = s.labels.zones
        if crop_size is not None and tuple(data.shape[1:]) != tuple(crop_size):
            data = center_crop_or_pad(data, crop_size)
            z = center_crop_or_pad(z, crop_size)
            if task.kind == "segmentation":
                y = center_crop_or_pad(y, crop_size)
        imgs.append(data.astype(np.float32))
        tgts.append(y)
        zones.append(np.asarray(z, dtype=np.int64))
    if not imgs:
        raise InvalidInputError(f"task {task.name}: empty split")
    images = torch.as_tensor(np.stack(imgs))
    if task.kind == "regression":
        targets = torch.as_tensor(np.asarray(tgts, dtype=np.float32))
    else:
        targets = torch.as_tensor(np.stack([np.asarray(t) for t in tgts]).astype(np.int64))
    zt = torch.as_tensor(np.stack(zones)) if task.kind == "zone_localisation" else None
    return TaskData(list(ids), images, targets, zt)


def build_splits(subjects, manifest, task: TaskSpec, crop_size=None):
    return {
        name: build_task_data(subjects, ids, task, crop_size)
        for name, ids in (("train", manifest.train_ids), ("val", manifest.val_ids), ("test", manifest.test_ids))
    }
