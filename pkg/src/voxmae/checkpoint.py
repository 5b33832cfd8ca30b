"""Checkpoint files shared by pretraining and adaptation."""

from __future__ import annotations

import io
from pathlib import Path

import torch

from .config import from_dict, to_dict
from .conv import ConvConfig, MaskedConvNet
from .errors import InvalidConfigError, InvalidInputError
from .nn_utils import seeded
from .vit import MaskedViT, ViTConfig

CHECKPOINT_VERSION = "voxmae-checkpoint/1"
_ARCHS = {"vit": (ViTConfig, MaskedViT), "conv": (ConvConfig, MaskedConvNet)}


def build_backbone(arch: str, cfg, seed: int = 0):
    if arch not in _ARCHS:
        raise InvalidConfigError(f"unknown backbone arch {arch!r}; expected one of {sorted(_ARCHS)}")
    cfg_cls, model_cls = _ARCHS[arch]
    if isinstance(cfg, dict):
        cfg = from_dict(cfg_cls, cfg)
    with seeded(seed):
        return model_cls(cfg)


def save_checkpoint(path, model, *, seed=0, step=0, optimizer=None, scheduler=None, extra=None):
    """Write weights, full backbone config, seed and step counter."""
    payload = {
        "version": CHECKPOINT_VERSION,
        "arch": model.arch,
        "config": to_dict(model.cfg),
        "seed": int(seed),
        "step": int(step),
        "state_dict": model.state_dict(),
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "scheduler": scheduler.state_dict() if scheduler is not None else None,
        "extra": extra or {},
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.BytesIO()
    torch.save(payload, buf)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(buf.getvalue())
    tmp.replace(path)
    return path


def load_checkpoint(path):
    payload = torch.load(str(path), map_location="cpu", weights_only=False)
    if not isinstance(payload, dict) or payload.get("version") != CHECKPOINT_VERSION:
        raise InvalidInputError(f"{path}: not a {CHECKPOINT_VERSION} file")
    return payload


def backbone_from_checkpoint(path_or_payload, expect_arch=None):
    payload = path_or_payload if isinstance(path_or_payload, dict) else load_checkpoint(path_or_payload)
    if expect_arch is not None and payload["arch"] != expect_arch:
        raise InvalidConfigError(
            f"checkpoint architecture {payload['arch']!r} does not match expected {expect_arch!r}"
        )
    model = build_backbone(payload["arch"], payload["config"], payload["seed"])
    model.load_state_dict(payload["state_dict"])
    return model, payload
