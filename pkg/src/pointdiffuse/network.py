"""Denoising U-Net and the reverse-diffusion sampler.

Layout for ``levels = L``: a Noisy Label Embedding stem at full resolution;
encoder levels 1..L-1 = transition down + Denoising PointNet, level L =
transition down + Point Frequency Transformer; the first decoder level =
transition up + Point Frequency Transformer, the rest = transition up +
Denoising PointNet; a linear noise head.  Every level adds a projected
sinusoidal time embedding.  All neighbour and sample indices go through one
:class:`IndexCache` per cloud.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .blocks import DenoisingPointNet, NoisyLabelEmbedding, PointFrequencyTransformer
from .condition import ConditionBundle, PositionEncoder, position_condition
from .config import Config
from .geometry import (IndexCache, PointCloud, canonical_order, self_neighbors, transition_down,
                       transition_up)
from .schedule import NoiseSchedule, decode_labels, reverse_step


def time_embedding(t: float, dim: int, dtype=torch.float64) -> torch.Tensor:
    """Interleaved (sin(t w_k), cos(t w_k)) with w_k = 10000^(-2k/dim)."""
    if dim % 2:
        raise ValueError("time embedding dim must be even")
    if t < 0:
        raise ValueError("t must be >= 0")
    k = np.arange(dim // 2, dtype=np.float64)
    ang = t * 10000.0 ** (-2.0 * k / dim)
    out = np.empty(dim)
    out[0::2], out[1::2] = np.sin(ang), np.cos(ang)
    return torch.tensor(out, dtype=dtype)


def level_widths(channels) -> tuple[int, ...]:
    """Widths of resolution levels 0..L (the stem shares level 1's width)."""
    return (channels[0],) + tuple(channels)


class DenoiseNet(nn.Module):
    def __init__(self, n_classes: int, channels, semantic_dim: int, time_dim: int = 32,
                 k: int = 16, ratio: float = 0.25, semantic_skip: bool = True):
        super().__init__()
        channels = tuple(int(c) for c in channels)
        if not channels or any(c < 1 for c in channels):
            raise ValueError(f"bad channel plan {channels}")
        self.n_classes, self.k, self.ratio, self.time_dim = n_classes, k, ratio, time_dim
        self.levels = len(channels)
        w = self.widths = level_widths(channels)
        L = self.levels
        self.stem = NoisyLabelEmbedding(n_classes, w[0], semantic_dim)
        self.semantic_skip = nn.Linear(semantic_dim, w[0]) if semantic_skip else None
        self.down = nn.ModuleList(nn.Linear(w[l - 1], w[l]) for l in range(1, L + 1))
        self.enc = nn.ModuleList(
            PointFrequencyTransformer(w[l]) if l == L else DenoisingPointNet(w[l]) for l in range(1, L + 1))
        self.up = nn.ModuleList(nn.Linear(w[l], w[l - 1]) for l in range(L, 0, -1))
        self.dec = nn.ModuleList(
            PointFrequencyTransformer(w[l - 1]) if l == L else DenoisingPointNet(w[l - 1])
            for l in range(L, 0, -1))
        # Time projections: stem, encoder levels 1..L, decoder levels L..1.
        self.time_proj = nn.ModuleList(
            [nn.Linear(time_dim, w[0])]
            + [nn.Linear(time_dim, w[l]) for l in range(1, L + 1)]
            + [nn.Linear(time_dim, w[l - 1]) for l in range(L, 0, -1)])
        # Per-point layer norms after the stem and every level keep activations O(1).
        self.norms = nn.ModuleList(
            [nn.LayerNorm(w[0])]
            + [nn.LayerNorm(w[l]) for l in range(1, L + 1)]
            + [nn.LayerNorm(w[l - 1]) for l in range(L, 0, -1)])
        self.head = nn.Linear(w[0], n_classes)

    @classmethod
    def from_config(cls, cfg: Config, n_classes: int) -> "DenoiseNet":
        return cls(n_classes, cfg.channels, _semantic_width(cfg, n_classes), cfg.time_dim, cfg.k,
                   cfg.ratio, cfg.semantic_skip)

    def _level(self, f, block, cloud, bundle, cache, level):
        table = self_neighbors(cloud, self.k, cache, level)
        pc = position_condition(cloud.positions, table, bundle.posenc[level])
        if isinstance(block, DenoisingPointNet):
            # The point's own feature must survive the neighbourhood max-pool: per-point
            # noise is independent across points.
            return f + block(f, pc, table)
        return block(f, pc, table)

    def forward(self, x_t, t: int, cloud: PointCloud, bundle: ConditionBundle,
                cache: IndexCache | None = None):
        if bundle.version != cloud.version or bundle.n_points != cloud.n_points:
            raise ValueError("condition bundle was built on a different cloud")
        if x_t.shape != (cloud.n_points, self.n_classes):
            raise ValueError(f"labels {tuple(x_t.shape)} do not match cloud/classes")
        if len(bundle.posenc) < self.levels + 1:
            raise ValueError("position encoder has fewer levels than the network")
        cache = cache if cache is not None else IndexCache()
        temb = time_embedding(t, self.time_dim, dtype=x_t.dtype)
        times, norms = iter(self.time_proj), iter(self.norms)
        sem = bundle.semantic.to(x_t)
        sem = F.layer_norm(sem, sem.shape[-1:])

        table = self_neighbors(cloud, self.k, cache, 0)
        pc = position_condition(cloud.positions, table, bundle.posenc[0])
        f = self.stem(x_t, sem, pc, table)
        if self.semantic_skip is not None:
            f = f + self.semantic_skip(sem)
        f = next(norms)(f + next(times)(temb))

        clouds, skips = [cloud], [f]
        for l in range(1, self.levels + 1):
            coarse, f, _ = transition_down(clouds[-1], f, self.ratio, self.k, cache, l, self.down[l - 1])
            f = f + next(times)(temb)
            f = next(norms)(self._level(f, self.enc[l - 1], coarse, bundle, cache, l))
            clouds.append(coarse)
            skips.append(f)

        for i, l in enumerate(range(self.levels, 0, -1)):
            f = transition_up(self.up[i](f), clouds[l], clouds[l - 1], skips[l - 1], cache, l)
            f = f + next(times)(temb)
            f = next(norms)(self._level(f, self.dec[i], clouds[l - 1], bundle, cache, l - 1))
        return self.head(f)


def _semantic_width(cfg: Config, n_classes: int) -> int:
    return n_classes if cfg.semantic_source == "logits" else cfg.semantic_dim


def predict_noise(x_t, t: int, cloud: PointCloud, bundle: ConditionBundle, model: DenoiseNet,
                  cache: IndexCache | None = None):
    return model(x_t, t, cloud, bundle, cache)


def init_params(cfg: Config, n_classes: int, seed: int = 0, zero_init: bool = True,
                dtype=torch.float32) -> DenoiseNet:
    """Kaiming-uniform weights, zero biases; PFT output projections and the head start at zero."""
    model = DenoiseNet.from_config(cfg, n_classes).to(dtype)
    reset_parameters(model, seed)
    if zero_init:
        for m in model.modules():
            if isinstance(m, PointFrequencyTransformer):
                nn.init.zeros_(m.out.weight)
                nn.init.zeros_(m.out.bias)
        nn.init.zeros_(model.head.weight)
        nn.init.zeros_(model.head.bias)
    return model


def reset_parameters(module: nn.Module, seed: int):
    """Deterministic Kaiming-uniform init of every Linear, independent of the global RNG."""
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for m in module.modules():
            if isinstance(m, nn.Linear):
                bound = math.sqrt(6.0 / m.in_features)
                m.weight.copy_(torch.rand(m.weight.shape, generator=gen, dtype=torch.float64)
                               .mul_(2 * bound).sub_(bound))
                if m.bias is not None:
                    m.bias.zero_()


def canonical_normal(positions, n_classes: int, gen: torch.Generator, dtype) -> torch.Tensor:
    """Gaussian draw assigned to points through their canonical (coordinate-sorted) rank.

    Reordering the input therefore reorders the draw with it.
    """
    order = canonical_order(positions)
    rank = np.empty_like(order)
    rank[order] = np.arange(order.size)
    draw = torch.randn(order.size, n_classes, generator=gen, dtype=torch.float64)
    return draw[torch.from_numpy(rank)].to(dtype)


@dataclass
class SampleTrace:
    seed: int
    steps: int
    noise_norms: list = field(default_factory=list)
    snapshots: list = field(default_factory=list)

    def __len__(self):
        return len(self.noise_norms)


def sample_labels(cloud: PointCloud, bundle: ConditionBundle, sched: NoiseSchedule, seed: int,
                  model: DenoiseNet, cache: IndexCache | None = None, keep_snapshots: int = 0):
    """Run the reverse chain from x_T ~ N(0, I) and decode the final labels."""
    cache = cache if cache is not None else IndexCache()
    dtype = next(model.parameters()).dtype
    gen = torch.Generator().manual_seed(int(seed))
    trace = SampleTrace(seed=int(seed), steps=sched.T)
    x = canonical_normal(cloud.positions, model.n_classes, gen, dtype)
    with torch.no_grad():
        for t in range(sched.T, 0, -1):
            eps_hat = model(x, t, cloud, bundle, cache)
            z = canonical_normal(cloud.positions, model.n_classes, gen, dtype) if t > 1 else None
            x = reverse_step(x, eps_hat, t, z, sched)
            trace.noise_norms.append(float(eps_hat.norm()))
            if len(trace.snapshots) < keep_snapshots:
                trace.snapshots.append(x.clone())
    return decode_labels(x), trace
