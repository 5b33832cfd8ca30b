"""Reusable experiment recipes: cohort setup, brief pretraining, downstream smoke runs."""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from typing import Dict

import numpy as np

from . import metrics as M
from .adapt import data_efficiency_sweep, finetune, run_repeats
from .checkpoint import build_backbone
from .config import AdaptConfig, PretrainConfig
from .phantoms import PhantomSpec, generate_phantoms
from .pretrain import pretrain
from .tasks import build_splits, get_task
from .volume import make_splits, preprocess

TINY_VIT = dict(img_size=(32, 32, 32), patch_size=8, embed_dim=48, depth=2, n_heads=4,
                decoder_dim=48, decoder_depth=1, decoder_heads=4, norm_pix_targets=False)
TINY_CONV = dict(img_size=(32, 32, 32), stage_depths=(1, 1, 1), stage_dims=(16, 32, 64),
                 mask_patch=16, decoder_dim=64)


@dataclass
class SmokeSettings:
    arch: str = "vit"
    n_subjects: int = 64
    seed: int = 0
    pretrain_steps: int = 100
    epochs: int = 30
    base_lr: float = 1e-3
    llrd_decay: float = 0.75
    batch_size: int = 8
    zone_runs: int = 3


def cohort(n_subjects=64, seed=0, grid=(32, 32, 32), split_seed=0):
    subjects = generate_phantoms(PhantomSpec(n_subjects=n_subjects, grid_size=grid, seed=seed))
    manifest = make_splits([s.volume.subject_id for s in subjects], (0.7, 0.1, 0.2), split_seed)
    return subjects, manifest


def brief_pretrain(arch, subjects, ids, steps=100, seed=0, lr=3e-3):
    cfg = TINY_VIT if arch == "vit" else TINY_CONV
    model = build_backbone(arch, cfg, seed)
    by_id = {s.volume.subject_id: s for s in subjects}
    vols = [preprocess(by_id[i].volume) for i in ids]
    pc = PretrainConfig(steps=steps, batch_size=4, lr=lr, warmup_steps=10, checkpoint_every=0,
                        seed=seed, augment=False)
    history = pretrain(model, vols, pc)
    return model, history


def overfit_smoke(arch="vit", steps=200, seed=0, lr=3e-3, batch_size=2):
    """Pretrain on a single phantom; returns initial loss, final loss (mean of last 10 steps), ratio, seconds."""
    t0 = time.time()
    subject = generate_phantoms(PhantomSpec(n_subjects=1, grid_size=(32, 32, 32), seed=seed))[0]
    cfg = TINY_VIT if arch == "vit" else TINY_CONV
    model = build_backbone(arch, cfg, seed)
    pc = PretrainConfig(steps=steps, batch_size=batch_size, lr=lr, warmup_steps=10, checkpoint_every=0,
                        seed=seed, augment=False)
    history = pretrain(model, [preprocess(subject.volume)], pc)
    final = float(np.mean(history[-10:]))
    return {"initial_loss": history[0], "final_loss": final, "ratio": final / history[0],
            "seconds": time.time() - t0}


def downstream_smoke(s: SmokeSettings) -> Dict[str, dict]:
    """The four end-to-end checks on a phantom cohort; returns per-check results."""
    t0 = time.time()
    subjects, manifest = cohort(s.n_subjects, s.seed)
    backbone, history = brief_pretrain(s.arch, subjects, manifest.train_ids, s.pretrain_steps, s.seed)
    acfg = AdaptConfig(regime="full_llrd", base_lr=s.base_lr, llrd_decay=s.llrd_decay, epochs=s.epochs,
                       batch_size=s.batch_size, warmup_epochs=2, seed=s.seed, runs=s.zone_runs)
    out = {"pretrain": {"initial_loss": history[0], "final_loss": history[-1], "seconds": time.time() - t0}}

    def run(name, runs=1):
        task = get_task(name)
        splits = build_splits(subjects, manifest, task)
        t = time.time()
        if runs == 1:
            rec, _ = finetune(task, backbone, acfg, splits)
            recs = [rec]
        else:
            recs = run_repeats(task, backbone, replace(acfg, runs=runs), splits)
        return recs, splits, time.time() - t

    recs, _, dt = run("LesionPresence")
    out["lesion_cls"] = {"test_auc": recs[0].test_metrics["auc"], "seconds": dt}

    recs, _, dt = run("GlandSeg")
    out["gland_seg"] = {"test_dice": recs[0].test_metrics["dice"], "seconds": dt}

    recs, splits, dt = run("Volume-Reg")
    train_mean = float(splits["train"].targets.mean())
    baseline = M.mae_value(np.full(len(splits["test"]), train_mean), splits["test"].targets.numpy())
    out["volume_reg"] = {"test_mae": recs[0].test_metrics["mae"], "baseline_mae": baseline, "seconds": dt}

    recs, _, dt = run("PCa-Loc", runs=s.zone_runs)
    aucs = [r.test_metrics["auc"] for r in recs]
    tt = M.paired_ttest(aucs, [0.5] * len(aucs))
    out["zone_loc"] = {"test_aucs": aucs, "t": tt.t, "p": tt.p, "degenerate": tt.degenerate, "seconds": dt}
    out["total_seconds"] = time.time() - t0
    return out


def data_efficiency_smoke(arch="vit", n_subjects=183, task_name="LesionPresence", sizes=(8, 16, 32, 64, 128),
                          epochs=10, runs=3, seed=0, pretrain_steps=100):
    """Limited-data sweep on phantoms; the default cohort leaves exactly 128 training subjects."""
    t0 = time.time()
    subjects, manifest = cohort(n_subjects, seed)
    backbone, _ = brief_pretrain(arch, subjects, manifest.train_ids, pretrain_steps, seed)
    task = get_task(task_name)
    splits = build_splits(subjects, manifest, task)
    acfg = AdaptConfig(regime="full_llrd", epochs=epochs, batch_size=8, warmup_epochs=1, seed=seed, runs=runs,
                       sweep_sizes=tuple(sizes))
    rows = data_efficiency_sweep(task, backbone, acfg, splits)
    return {"rows": rows, "train_pool": len(splits["train"]), "seconds": time.time() - t0}
