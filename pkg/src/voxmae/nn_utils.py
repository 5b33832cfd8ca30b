"""Small torch helpers shared by the backbones, heads and training loops."""

from __future__ import annotations

import contextlib
import hashlib
from dataclasses import dataclass, field
from typing import List, Optional

import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass
class FeatureSet:
    """What a backbone hands to a task head.

    ``pooled`` is (B, C).  ``levels`` are dense maps ordered shallow to deep,
    each (B, C_l, d, h, w), with ``strides`` giving their downsampling factor
    relative to the input.  ``grid`` is the deepest level.
    """

    pooled: torch.Tensor
    levels: List[torch.Tensor]
    strides: List[int]
    input: Optional[torch.Tensor] = None

    @property
    def grid(self):
        return self.levels[-1]


@contextlib.contextmanager
def seeded(seed: int):
    """Run a block under a fixed torch seed without disturbing the global RNG."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(int(seed))
        yield


def params_checksum(params) -> str:
    """SHA-256 over raw parameter bytes, in iteration order."""
    h = hashlib.sha256()
    for p in params:
        h.update(p.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def state_checksum(module: nn.Module) -> str:
    h = hashlib.sha256()
    for k, v in sorted(module.state_dict().items()):
        h.update(k.encode())
        h.update(v.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


class LayerNorm3d(nn.Module):
    """LayerNorm over the channel axis of a (B, C, D, H, W) tensor."""

    def __init__(self, dim, eps=1e-6):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(dim))
        self.bias = nn.Parameter(torch.zeros(dim))
        self.eps = eps

    def forward(self, x):
        x = x.permute(0, 2, 3, 4, 1)
        x = F.layer_norm(x, (x.shape[-1],), self.weight, self.bias, self.eps)
        return x.permute(0, 4, 1, 2, 3)


def init_weights(m):
    if isinstance(m, nn.Linear):
        nn.init.xavier_uniform_(m.weight)
        if m.bias is not None:
            nn.init.zeros_(m.bias)
    elif isinstance(m, nn.LayerNorm):
        nn.init.ones_(m.weight)
        nn.init.zeros_(m.bias)
