"""Masked-autoencoder pretraining loop for either backbone.

Every random draw at step ``k`` (batch members, augmentation, masks) is keyed
on ``(seed, k)``, so a run resumed from a checkpoint at step ``k`` continues
exactly as the uninterrupted run would.
"""

from __future__ import annotations

import csv
import math
from pathlib import Path
from typing import List, Optional

import numpy as np
import torch

from .checkpoint import load_checkpoint, save_checkpoint
from .config import PretrainConfig, to_dict
from .errors import InvalidConfigError, NonFiniteLossError
from .volume import AugmentConfig, augment, sample_rng


def make_pretrain_optimizer(model, cfg: PretrainConfig):
    opt = torch.optim.AdamW(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay, betas=(0.9, 0.95))
    warm = min(cfg.warmup_steps, max(cfg.steps - 1, 0))

    def factor(step):
        if step < warm:
            return (step + 1) / warm
        prog = (step - warm) / max(1, cfg.steps - warm)
        return 0.5 * (1.0 + math.cos(math.pi * min(prog, 1.0)))

    return opt, torch.optim.lr_scheduler.LambdaLR(opt, factor)


def step_batch(volumes, step: int, cfg: PretrainConfig, aug: Optional[AugmentConfig]):
    """Batch tensor for ``step`` plus the generator used for its masks."""
    rng = np.random.default_rng([int(cfg.seed), int(step), 1])
    n = len(volumes)
    idx = rng.choice(n, size=cfg.batch_size, replace=n < cfg.batch_size)
    arrays = []
    for i in idx:
        v = volumes[int(i)]
        if cfg.augment and aug is not None:
            v = augment(v, aug, sample_rng(cfg.seed, v.subject_id, step))
        arrays.append(v.data.astype(np.float32))
    return torch.as_tensor(np.stack(arrays)), rng


def pretrain_step(model, x, rng, opt, sched=None):
    """One gradient step on the masked reconstruction loss; returns the loss."""
    model.train()
    loss, _, _ = model.pretrain_forward(x, rng)
    if not torch.isfinite(loss):
        raise NonFiniteLossError(f"non-finite pretraining loss {loss.item()}")
    opt.zero_grad(set_to_none=True)
    loss.backward()
    opt.step()
    if sched is not None:
        sched.step()
    return float(loss.item())


def _reset_curve(path, keep_before: int):
    """Start the curve file, keeping rows for steps < ``keep_before``."""
    rows = []
    if keep_before > 0 and path.exists():
        with open(path, newline="") as fh:
            rows = [r for r in csv.DictReader(fh) if int(r["step"]) < keep_before]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "loss"])
        w.writerows([r["step"], r["loss"]] for r in rows)


def _append_curve(path, rows):
    with open(path, "a", newline="") as fh:
        csv.writer(fh).writerows([s, repr(l)] for s, l in rows)


def read_loss_curve(path) -> List[float]:
    with open(path, newline="") as fh:
        return [float(r["loss"]) for r in csv.DictReader(fh)]


def pretrain(model, volumes, cfg: PretrainConfig, aug: Optional[AugmentConfig] = None,
             out_dir=None, resume=None, stop_at=None):
    """Run MAE pretraining up to ``cfg.steps`` (or ``stop_at``); returns the loss history.

    Checkpoints go to ``out_dir/checkpoints`` every ``cfg.checkpoint_every``
    steps and at the end; the loss curve to ``out_dir/loss_curve.csv``.
    """
    opt, sched = make_pretrain_optimizer(model, cfg)
    start = 0
    if resume is not None:
        payload = load_checkpoint(resume)
        if payload["arch"] != model.arch or payload["config"] != to_dict(model.cfg):
            raise InvalidConfigError(
                f"cannot resume {payload['arch']} checkpoint {resume} into a {model.arch} model "
                "with a different configuration"
            )
        model.load_state_dict(payload["state_dict"])
        opt.load_state_dict(payload["optimizer"])
        sched.load_state_dict(payload["scheduler"])
        start = int(payload["step"])
    end = cfg.steps if stop_at is None else min(stop_at, cfg.steps)
    ckpt_dir = Path(out_dir) / "checkpoints" if out_dir is not None else None
    curve = Path(out_dir) / "loss_curve.csv" if out_dir is not None else None
    history, pending = [], []

    def checkpoint(step, name):
        if ckpt_dir is None:
            return None
        extra = {"pretrain": to_dict(cfg)}
        p = save_checkpoint(ckpt_dir / name, model, seed=cfg.seed, step=step, optimizer=opt,
                            scheduler=sched, extra=extra)
        return p

    def flush():
        if curve is not None and pending:
            _append_curve(curve, pending)
        pending.clear()

    if curve is not None:
        curve.parent.mkdir(parents=True, exist_ok=True)
        _reset_curve(curve, start)

    for step in range(start, end):
        x, rng = step_batch(volumes, step, cfg, aug)
        try:
            loss = pretrain_step(model, x, rng, opt, sched)
        except NonFiniteLossError as err:
            flush()
            err.checkpoint_path = checkpoint(step, "abort.pt")
            raise
        history.append(loss)
        pending.append((step, loss))
        if cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
            flush()
            checkpoint(step + 1, f"step_{step + 1:06d}.pt")
    flush()
    checkpoint(end, "last.pt")
    return history
