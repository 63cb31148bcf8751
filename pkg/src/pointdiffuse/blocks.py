"""Noisy Label Embedding, Point Frequency Transformer and Denoising PointNet.

All three blocks take per-point features (N x C), a position condition
(N x K x C) aligned with a self-inclusive :class:`NeighborTable`, and the
table itself.
"""
from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .geometry import NeighborTable, group
from .spectral import fft_pair, ifft_pair


def mlp2(c_in: int, c_hidden: int, c_out: int, out_bias: bool = True) -> nn.Sequential:
    return nn.Sequential(nn.Linear(c_in, c_hidden), nn.ReLU(), nn.Linear(c_hidden, c_out, bias=out_bias))


def _check(feats: torch.Tensor, pos_cond: torch.Tensor, table: NeighborTable, channels: int):
    n = feats.shape[0]
    if table.query_count != n or table.reference_size != n:
        raise ValueError(f"table {table.indices.shape} does not match {n} points")
    if pos_cond.shape != (n, table.k, channels):
        raise ValueError(f"position condition {tuple(pos_cond.shape)} != {(n, table.k, channels)}")


class NoisyLabelEmbedding(nn.Module):
    """Lift noisy labels to features and re-weight neighbours by semantic/position agreement.

    x_i = MLP(x_t);  y_i = sum_j W((S_ij - S_i) + P_ij) * (x_ij + P_ij);  f_i = y_i + x_i
    """

    def __init__(self, n_classes: int, channels: int, semantic_dim: int,
                 use_semantic: bool = True, use_position: bool = True):
        super().__init__()
        self.channels = channels
        self.use_semantic = use_semantic
        self.use_position = use_position
        self.embed = mlp2(n_classes, channels, channels)
        # Only semantic differences are used, so an adapter bias would cancel.
        self.adapter = (nn.Linear(semantic_dim, channels, bias=False)
                        if semantic_dim != channels else nn.Identity())
        self.weight_fn = mlp2(channels, channels, channels)

    def forward(self, x_t, semantic, pos_cond, table: NeighborTable):
        _check(x_t, pos_cond, table, self.channels)
        if semantic.shape[0] != x_t.shape[0]:
            raise ValueError("semantic condition rows do not match labels")
        x = self.embed(x_t)
        s = self.adapter(semantic)
        rel = group(s, table) - s[:, None, :] if self.use_semantic else torch.zeros_like(pos_cond)
        p = pos_cond if self.use_position else torch.zeros_like(pos_cond)
        w = self.weight_fn(rel + p)
        y = (w * (group(x, table) + p)).sum(dim=1)
        return y + x


class PointFrequencyTransformer(nn.Module):
    """Vector attention on the spectra of the features (point axis) and position condition (neighbour axis).

    Attention logits come from the concatenated (re, im) parts; the softmax over
    neighbours gives real weights applied alike to both parts.  The inverse
    transform's real part goes through an output projection and a residual.
    """

    def __init__(self, channels: int):
        super().__init__()
        self.channels = channels
        self.to_q = nn.Linear(channels, channels, bias=False)
        self.to_k = nn.Linear(channels, channels, bias=False)
        self.to_v = nn.Linear(channels, channels, bias=False)
        # Softmax over neighbours is blind to a per-channel output bias.
        self.attn = mlp2(2 * channels, channels, channels, out_bias=False)
        self.out = nn.Linear(channels, channels)

    def forward(self, f, pos_cond, table: NeighborTable, return_weights: bool = False):
        _check(f, pos_cond, table, self.channels)
        fr, fi = fft_pair(f, None, axis=0)
        pr, pi = fft_pair(pos_cond, None, axis=1)
        qr, qi = self.to_q(fr), self.to_q(fi)
        kr, ki = group(self.to_k(fr), table), group(self.to_k(fi), table)
        vr, vi = group(self.to_v(fr), table) + pr, group(self.to_v(fi), table) + pi
        logits = self.attn(torch.cat([kr - qr[:, None] + pr, ki - qi[:, None] + pi], dim=-1))
        w = F.softmax(logits, dim=1)
        zr, zi = ifft_pair((w * vr).sum(dim=1), (w * vi).sum(dim=1), axis=0)
        out = f + self.out(zr)
        return (out, w) if return_weights else out


class DenoisingPointNet(nn.Module):
    """Shared perceptron on (neighbour feature + position condition), max over neighbours."""

    def __init__(self, channels: int):
        super().__init__()
        self.channels = channels
        self.mlp = mlp2(channels, channels, channels)

    def forward(self, f, pos_cond, table: NeighborTable):
        _check(f, pos_cond, table, self.channels)
        return self.mlp(group(f, table) + pos_cond).max(dim=1).values
