"""Semantic and position conditions for the denoiser.

The built-in :class:`ConditionEncoder` is a small two-level point U-Net
standing in for a large pretrained segmentation backbone.  Any callable
mapping (positions, features) to N x C_s can be used instead through
:meth:`ConditionBundle.from_external`.

The position encoder (one offset perceptron per resolution level) is owned by
the condition encoder and handed to the denoiser unchanged, so both networks
see identical position conditions.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .blocks import DenoisingPointNet, mlp2
from .geometry import (IndexCache, NeighborTable, PointCloud, self_neighbors, transition_down,
                       transition_up)

log = logging.getLogger(__name__)


class PositionEncoder(nn.Module):
    """Per-level offset perceptrons: 3 -> C -> C with a ReLU between."""

    def __init__(self, widths: Sequence[int]):
        super().__init__()
        self.widths = tuple(widths)
        self.deltas = nn.ModuleList(mlp2(3, c, c) for c in self.widths)

    def __getitem__(self, level: int) -> nn.Module:
        return self.deltas[level]

    def __len__(self):
        return len(self.deltas)


def position_condition(positions, table: NeighborTable, delta: nn.Module) -> torch.Tensor:
    """P_ij = delta(I_j - I_i) for a self table over ``positions``."""
    pos = np.asarray(positions, dtype=np.float64)
    if table.query_count != pos.shape[0] or table.reference_size != pos.shape[0]:
        raise ValueError(f"table {table.indices.shape} does not match {pos.shape[0]} positions")
    offsets = pos[table.indices] - pos[:, None, :]
    param = next(delta.parameters())
    return delta(torch.from_numpy(offsets).to(param))


@dataclass(eq=False)
class ConditionBundle:
    semantic: torch.Tensor
    posenc: PositionEncoder
    version: str
    source: str = "built-in"

    def __post_init__(self):
        if not torch.all(torch.isfinite(self.semantic)):
            raise ValueError("semantic condition must be finite")

    @property
    def n_points(self) -> int:
        return self.semantic.shape[0]

    @classmethod
    def from_external(cls, backbone: Callable, cloud: PointCloud, posenc: PositionEncoder,
                      dtype=torch.float32) -> "ConditionBundle":
        sem = torch.as_tensor(np.asarray(backbone(cloud.positions, cloud.features)), dtype=dtype)
        if sem.ndim != 2 or sem.shape[0] != cloud.n_points:
            raise ValueError(f"external backbone returned {tuple(sem.shape)} for {cloud.n_points} points")
        return cls(sem, posenc, cloud.version, source="external")


class ConditionEncoder(nn.Module):
    """Two-level encoder/decoder over points with a linear class head for pretraining."""

    def __init__(self, n_classes: int, widths: Sequence[int], semantic_dim: int,
                 k: int = 16, ratio: float = 0.25, in_dim: int = 3,
                 posenc: PositionEncoder | None = None):
        super().__init__()
        widths = tuple(widths)
        if len(widths) < 1:
            raise ValueError("need at least one width")
        self.k, self.ratio, self.in_dim = k, ratio, in_dim
        self.widths = widths
        self.posenc = posenc if posenc is not None else PositionEncoder(widths)
        if len(self.posenc) < len(widths) or any(
                a != b for a, b in zip(self.posenc.widths, widths)):
            raise ValueError("position encoder widths do not cover the encoder levels")
        levels = len(widths) - 1
        self.stem = nn.Linear(in_dim, widths[0])
        self.blocks = nn.ModuleList([DenoisingPointNet(widths[0])])
        self.down = nn.ModuleList(nn.Linear(widths[l - 1], widths[l]) for l in range(1, levels + 1))
        self.blocks.extend(DenoisingPointNet(widths[l]) for l in range(1, levels + 1))
        self.up = nn.ModuleList(nn.Linear(widths[l], widths[l - 1]) for l in range(levels, 0, -1))
        self.up_blocks = nn.ModuleList(DenoisingPointNet(widths[l - 1]) for l in range(levels, 0, -1))
        self.norms = nn.ModuleList(nn.LayerNorm(widths[l]) for l in range(levels + 1))
        self.up_norms = nn.ModuleList(nn.LayerNorm(widths[l - 1]) for l in range(levels, 0, -1))
        self.out = nn.Linear(widths[0], semantic_dim)
        self.head = nn.Linear(semantic_dim, n_classes)

    def _inputs(self, cloud: PointCloud) -> torch.Tensor:
        x = cloud.positions if cloud.features is None else np.concatenate(
            [cloud.positions, cloud.features], axis=1)
        if x.shape[1] != self.in_dim:
            raise ValueError(f"encoder expects {self.in_dim} input channels, got {x.shape[1]}")
        return torch.from_numpy(x).to(self.stem.weight)

    def _block(self, block, norm, f, cloud, cache, level):
        table = self_neighbors(cloud, self.k, cache, level)
        pc = position_condition(cloud.positions, table, self.posenc[level])
        return norm(f + block(f, pc, table))

    def forward(self, cloud: PointCloud, cache: IndexCache | None = None):
        """Returns (pre-head semantic features N x C_s, class logits N x M)."""
        cache = cache if cache is not None else IndexCache()
        f = F.relu(self.stem(self._inputs(cloud)))
        f = self._block(self.blocks[0], self.norms[0], f, cloud, cache, 0)
        clouds, skips = [cloud], [f]
        for l, proj in enumerate(self.down, start=1):
            coarse, f, _ = transition_down(clouds[-1], f, self.ratio, self.k, cache, l, proj)
            f = self._block(self.blocks[l], self.norms[l], f, coarse, cache, l)
            clouds.append(coarse)
            skips.append(f)
        for i, (proj, block, norm) in enumerate(zip(self.up, self.up_blocks, self.up_norms)):
            l = len(self.down) - i
            f = transition_up(proj(f), clouds[l], clouds[l - 1], skips[l - 1], cache, l)
            f = self._block(block, norm, f, clouds[l - 1], cache, l - 1)
        sem = self.out(f)
        return sem, self.head(F.relu(sem))


def encode_semantic(cloud: PointCloud, encoder: ConditionEncoder, cache: IndexCache | None = None,
                    use_logits: bool = False) -> ConditionBundle:
    """Frozen forward pass of the condition encoder for one cloud."""
    with torch.no_grad():
        sem, logits = encoder(cloud, cache)
    return ConditionBundle((logits if use_logits else sem).detach(), encoder.posenc, cloud.version)


@dataclass
class PretrainHistory:
    loss: list = field(default_factory=list)
    accuracy: list = field(default_factory=list)


def pretrain_condition(dataset, encoder: ConditionEncoder, epochs: int, lr: float = 1e-2,
                       weight_decay: float = 1e-4) -> PretrainHistory:
    """Supervised segmentation fit of the encoder and its head (cross-entropy, AdamW, full batch per scene)."""
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    history = PretrainHistory()
    if epochs <= 0:
        return history
    opt = torch.optim.AdamW(encoder.parameters(), lr=lr, weight_decay=weight_decay)
    caches = [IndexCache() for _ in dataset]
    targets = [torch.as_tensor(np.asarray(lab, dtype=np.int64)) for _, lab in dataset]
    encoder.train()
    for epoch in range(epochs):
        total, correct, count = 0.0, 0, 0
        for (cloud, _), target, cache in zip(dataset, targets, caches):
            opt.zero_grad()
            _, logits = encoder(cloud, cache)
            loss = F.cross_entropy(logits, target)
            loss.backward()
            opt.step()
            total += loss.item()
            correct += int((logits.argmax(dim=1) == target).sum())
            count += target.numel()
        history.loss.append(total / len(dataset))
        history.accuracy.append(correct / count)
        log.debug("pretrain epoch %d loss %.4f acc %.3f", epoch, history.loss[-1], history.accuracy[-1])
    encoder.eval()
    return history


def freeze(module: nn.Module) -> nn.Module:
    for p in module.parameters():
        p.requires_grad_(False)
    module.eval()
    return module
