"""Linear probing and layer-wise-decayed finetuning of a pretrained backbone."""

from __future__ import annotations

import copy
import csv
import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
import torch
import torch.nn.functional as F

from . import metrics as M
from .config import AdaptConfig, to_dict
from .errors import InvalidConfigError, InvalidInputError, NonFiniteLossError, UndefinedMetricError
from .heads import TaskModel, TaskSpec, build_head
from .nn_utils import params_checksum, seeded
from .tasks import TaskData

DICE_EPS = 1e-5


def llrd_rates(n_layers: int, base_lr: float, decay: float) -> List[float]:
    """Rate for layer l (0 = embedding, n_layers = head) is base_lr * decay**(n_layers - l)."""
    if n_layers < 1:
        raise InvalidConfigError("need at least one layer")
    if not 0.0 < decay <= 1.0:
        raise InvalidConfigError(f"LLRD decay must lie in (0, 1], got {decay}")
    return [base_lr * decay ** (n_layers - l) for l in range(n_layers + 1)]


def dice_ce_loss(logits, labels, mode="dice+ce"):
    """Soft Dice on softmax probabilities (all classes, smoothed) and/or cross-entropy.

    ``logits`` is (B, C, ...), ``labels`` (B, ...) integer.
    """
    if mode not in ("dice", "ce", "dice+ce"):
        raise InvalidConfigError(f"unknown mode {mode!r}")
    n_classes = logits.shape[1]
    if labels.shape != logits.shape[:1] + logits.shape[2:]:
        raise InvalidInputError(f"labels {tuple(labels.shape)} vs logits {tuple(logits.shape)}")
    if labels.min() < 0 or labels.max() >= n_classes:
        raise InvalidInputError(f"labels outside 0..{n_classes - 1}")
    total = logits.new_zeros(())
    if mode in ("ce", "dice+ce"):
        total = total + F.cross_entropy(logits, labels)
    if mode in ("dice", "dice+ce"):
        probs = logits.softmax(dim=1)
        onehot = F.one_hot(labels, n_classes).movedim(-1, 1).to(probs.dtype)
        dims = (0,) + tuple(range(2, logits.ndim))
        inter = (probs * onehot).sum(dims)
        denom = probs.sum(dims) + onehot.sum(dims)
        total = total + (1.0 - (2.0 * inter + DICE_EPS) / (denom + DICE_EPS)).mean()
    return total


_SEG_MODES = {"dice_plus_cross_entropy": "dice+ce", "dice_only": "dice"}


def task_loss(task: TaskSpec, model: TaskModel, out, targets):
    if task.kind in ("multiclass", "binary"):
        return F.cross_entropy(out, targets)
    if task.kind == "segmentation":
        return dice_ce_loss(out, targets, _SEG_MODES[task.loss])
    if task.kind == "zone_localisation":
        logits, present = out
        return F.cross_entropy(logits[present], targets[present])
    head = model.head
    # MSE in standardised target units
    return F.mse_loss((out - head.target_mean) / head.target_scale,
                      (targets - head.target_mean) / head.target_scale)


# ---------------------------------------------------------------------------
# optimisation


def resolve_regime(task: TaskSpec, cfg: AdaptConfig) -> str:
    regime = cfg.regime or task.adaptation
    if regime not in ("linear_probe", "full_llrd"):
        raise InvalidConfigError(f"unknown regime {regime!r}")
    return regime


def param_groups(model: TaskModel, regime: str, cfg: AdaptConfig):
    """Optimizer groups; a linear probe never hands encoder tensors to the optimizer."""
    if regime == "linear_probe":
        for p in model.encoder_parameters():
            p.requires_grad_(False)
        return [{"params": list(model.head.parameters()), "lr": cfg.base_lr}]
    groups = model.layer_groups()
    rates = llrd_rates(len(groups) - 1, cfg.base_lr, cfg.llrd_decay)
    return [{"params": g, "lr": r} for g, r in zip(groups, rates) if g]


def make_optimizer(groups, cfg: AdaptConfig):
    return torch.optim.AdamW(groups, lr=cfg.base_lr, weight_decay=cfg.weight_decay)


def make_scheduler(opt, cfg: AdaptConfig, steps_per_epoch: int):
    total = max(1, cfg.epochs * steps_per_epoch)
    warm = min(cfg.warmup_epochs * steps_per_epoch, total - 1)

    def factor(step):
        if cfg.schedule == "constant":
            return 1.0
        if step < warm:
            return (step + 1) / warm
        prog = (step - warm) / max(1, total - warm)
        return 0.5 * (1.0 + math.cos(math.pi * min(prog, 1.0)))

    return torch.optim.lr_scheduler.LambdaLR(opt, factor)


def epoch_batches(n: int, batch_size: int, seed: int, epoch: int):
    """Seeded shuffled batches; a trailing singleton batch is dropped (BatchNorm)."""
    order = np.random.default_rng([int(seed), int(epoch)]).permutation(n)
    batches = [order[i:i + batch_size] for i in range(0, n, batch_size)]
    if len(batches) > 1 and len(batches[-1]) == 1:
        batches = batches[:-1]
    return batches


def forward(model: TaskModel, images, zones=None):
    return model(images, zones)


def train_epoch(model, task, data: TaskData, opt, sched, cfg: AdaptConfig, seed, epoch, regime):
    model.train()
    if regime == "linear_probe":
        model.backbone.eval()
    losses = []
    for idx in epoch_batches(len(data), cfg.batch_size, seed, epoch):
        idx_t = torch.as_tensor(idx)
        zones = None if data.zones is None else data.zones[idx_t]
        out = forward(model, data.images[idx_t], zones)
        loss = task_loss(task, model, out, data.targets[idx_t])
        if not torch.isfinite(loss):
            raise NonFiniteLossError(f"non-finite loss at epoch {epoch}")
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        sched.step()
        losses.append(loss.item())
    return float(np.mean(losses)) if losses else float("nan")


# ---------------------------------------------------------------------------
# prediction and scoring


@torch.no_grad()
def predict(model: TaskModel, data: TaskData, batch_size=8):
    """Eval-mode outputs for a split, plus the mean task loss."""
    model.eval()
    task = model.task
    outs, losses, weights = [], [], []
    for i in range(0, len(data), batch_size):
        sl = slice(i, i + batch_size)
        zones = None if data.zones is None else data.zones[sl]
        out = forward(model, data.images[sl], zones)
        losses.append(task_loss(task, model, out, data.targets[sl]).item())
        weights.append(len(data.ids[sl]))
        if task.kind in ("multiclass", "binary"):
            outs.append(out.softmax(dim=-1))
        elif task.kind == "segmentation":
            outs.append(out.argmax(dim=1))
        elif task.kind == "zone_localisation":
            logits, present = out
            outs.append((logits.softmax(dim=-1)[..., 1], present))
        else:
            outs.append(out)
    loss = float(np.average(losses, weights=weights))
    if task.kind == "zone_localisation":
        probs = torch.cat([o[0] for o in outs]).numpy()
        present = torch.cat([o[1] for o in outs]).numpy()
        return (probs, present), loss
    return torch.cat(outs).numpy(), loss


def _operating_points(out, s, y, level):
    for key, fix in (("sens_at_spec80", "spec"), ("spec_at_sens80", "sens")):
        op = M.fixed_operating_point(s, y, fix, level)
        out[key] = op.value
        out[key + "_threshold"] = op.threshold


def score(task: TaskSpec, preds, data: TaskData, level=0.80) -> Dict[str, float]:
    """All reported metrics for one split."""
    y = data.targets.numpy()
    out: Dict[str, float] = {}
    if task.kind == "binary":
        s = preds[:, 1]
        out["accuracy"] = float(np.mean((s > 0.5) == (y == 1)))
        try:
            out["auc"] = M.roc_auc(s, y)
            _operating_points(out, s, y, level)
        except UndefinedMetricError:
            out["auc"] = float("nan")
    elif task.kind == "multiclass":
        pred = preds.argmax(axis=1)
        out["accuracy"] = float(np.mean(pred == y))
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", M.DegenerateMetricWarning)
            out["qwk"] = M.qwk(y, pred, task.n_classes)
    elif task.kind == "segmentation":
        out["dice"] = M.mean_dice(preds, y, task.n_classes)
    elif task.kind == "zone_localisation":
        probs, present = preds
        s, lab = probs[present], y[present]
        try:
            out["auc"] = M.roc_auc(s, lab)
            _operating_points(out, s, lab, level)
        except UndefinedMetricError:
            out["auc"] = float("nan")
    else:
        out["mae"] = M.mae_value(preds, y)
    return out


SELECTION_METRIC = {
    "binary": "auc",
    "multiclass": "qwk",
    "segmentation": "dice",
    "zone_localisation": "auc",
    "regression": "mae",
}


def selection_value(task: TaskSpec, metrics: Dict[str, float], loss: float) -> float:
    """Higher is better; undefined validation AUC falls back to negative loss."""
    key = SELECTION_METRIC[task.kind]
    if task.kind == "regression":
        return -metrics["mae"]
    v = metrics.get(key, float("nan"))
    return -loss if not np.isfinite(v) else v


# ---------------------------------------------------------------------------


@dataclass
class RunRecord:
    task: str
    regime: str
    seed: int
    train_losses: List[float] = field(default_factory=list)
    val_losses: List[float] = field(default_factory=list)
    val_selection: List[float] = field(default_factory=list)
    best_epoch: int = -1
    best_value: float = float("-inf")
    encoder_checksum_before: str = ""
    encoder_checksum_after: str = ""
    test_metrics: Dict[str, float] = field(default_factory=dict)
    state_dict: Optional[dict] = None

    def to_json(self) -> str:
        d = {k: v for k, v in self.__dict__.items() if k != "state_dict"}
        return json.dumps(d, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text):
        return cls(**json.loads(text))


def build_task_model(task: TaskSpec, backbone, seed: int, reg_targets=None):
    backbone = copy.deepcopy(backbone)
    with seeded(seed):
        head = build_head(task, backbone)
    if task.kind == "regression" and reg_targets is not None:
        t = np.asarray(reg_targets, dtype=np.float64)
        head.set_target_stats(t.mean(), t.std())
    return TaskModel(backbone, head, task)


def finetune(task: TaskSpec, backbone, cfg: AdaptConfig, splits: Dict[str, TaskData], seed=None,
             level=0.80) -> tuple:
    """Train one run; returns ``(RunRecord, best TaskModel)``.

    The returned model carries the weights of the epoch with the best
    validation selection metric.
    """
    task.validate()
    for name in ("train", "val"):
        if name not in splits or len(splits[name]) == 0:
            raise InvalidInputError(f"empty {name} split")
    seed = cfg.seed if seed is None else seed
    regime = resolve_regime(task, cfg)
    train = splits["train"]
    reg_targets = train.targets.numpy() if task.kind == "regression" else None
    model = build_task_model(task, backbone, seed, reg_targets)

    record = RunRecord(task.name, regime, int(seed))
    record.encoder_checksum_before = params_checksum(model.encoder_parameters())
    groups = param_groups(model, regime, cfg)
    opt = make_optimizer(groups, cfg)
    steps = len(epoch_batches(len(train), cfg.batch_size, seed, 0))
    sched = make_scheduler(opt, cfg, steps)

    best_state = copy.deepcopy(model.state_dict())
    best_loss = float("inf")
    with seeded(seed):
        for epoch in range(cfg.epochs):
            record.train_losses.append(train_epoch(model, task, train, opt, sched, cfg, seed, epoch, regime))
            preds, vloss = predict(model, splits["val"], cfg.batch_size)
            value = selection_value(task, score(task, preds, splits["val"], level), vloss)
            record.val_losses.append(vloss)
            record.val_selection.append(float(value))
            # ties on the selection metric (e.g. saturated AUC) go to the lower validation loss
            if value > record.best_value or (value == record.best_value and vloss < best_loss):
                record.best_value = float(value)
                best_loss = vloss
                record.best_epoch = epoch
                best_state = copy.deepcopy(model.state_dict())
    model.load_state_dict(best_state)
    record.encoder_checksum_after = params_checksum(model.encoder_parameters())
    record.state_dict = best_state
    if "test" in splits and len(splits["test"]):
        preds, _ = predict(model, splits["test"], cfg.batch_size)
        record.test_metrics = score(task, preds, splits["test"], level)
    return record, model


def run_repeats(task, backbone, cfg: AdaptConfig, splits, level=0.80):
    """``cfg.runs`` finetunes differing only by seed (cfg.seed, cfg.seed+1, ...)."""
    return [finetune(task, backbone, cfg, splits, seed=cfg.seed + r, level=level)[0] for r in range(cfg.runs)]


def nested_subsets(pool_size: int, sizes, seed: int):
    """Index sets for each size; every smaller set is a prefix of the larger ones."""
    sizes = sorted(int(s) for s in sizes)
    if sizes and sizes[-1] > pool_size:
        raise InvalidConfigError(f"sweep size {sizes[-1]} exceeds training pool of {pool_size}")
    order = np.random.default_rng([int(seed), 7919]).permutation(pool_size)
    return {s: np.sort(order[:s]) for s in sizes}


def data_efficiency_sweep(task, backbone, cfg: AdaptConfig, splits, sizes=None, metric=None, level=0.80):
    """One finetune per (size, seed); returns rows ``{size, mean, std, values}``."""
    sizes = tuple(sizes or cfg.sweep_sizes)
    metric = metric or SELECTION_METRIC[task.kind]
    subsets = nested_subsets(len(splits["train"]), sizes, cfg.seed)
    rows = []
    for size in sorted(subsets):
        sub = dict(splits, train=splits["train"].subset(subsets[size]))
        values = []
        for r in range(cfg.runs):
            rec, _ = finetune(task, backbone, cfg, sub, seed=cfg.seed + r, level=level)
            values.append(rec.test_metrics[metric])
        mean, std = M.mean_std(values)
        rows.append({"size": size, "metric": metric, "mean": mean, "std": std, "values": values,
                     "ids": list(sub["train"].ids)})
    return rows


def write_curve(rows, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["size", "metric", "mean", "std", "n_runs", "values"])
        for r in rows:
            std = "" if r["std"] is None else repr(r["std"])
            w.writerow([r["size"], r["metric"], repr(r["mean"]), std, len(r["values"]),
                        ";".join(repr(v) for v in r["values"])])
    return path


def read_curve(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [
        {
            "size": int(r["size"]),
            "metric": r["metric"],
            "mean": float(r["mean"]),
            "std": float(r["std"]) if r["std"] else None,
            "values": [float(v) for v in r["values"].split(";")],
        }
        for r in rows
    ]
