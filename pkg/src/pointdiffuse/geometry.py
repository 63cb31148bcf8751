"""Point-set primitives: neighbour search, sampling, grouping and resolution changes.

Everything here indexes into a :class:`PointCloud`.  Index computations run in
float64 numpy and are brute force; feature computations accept torch tensors so
gradients flow through grouping, pooling and interpolation.

The :class:`IndexCache` is the unit of sharing between layers that work at the
same resolution: a neighbour table or a sample set is computed once per
(level, point-set version) and reused by every consumer.
"""
from __future__ import annotations

import hashlib
import math
import threading
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Hashable

import numpy as np
import torch

INTERP_NEIGHBORS = 3
INTERP_EPS = 1e-8
_KNN_CHUNK = 2048


@dataclass(eq=False)
class PointCloud:
    positions: np.ndarray
    features: np.ndarray | None = None

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=np.float64)
        if pos.ndim != 2 or pos.shape[1] != 3:
            raise ValueError(f"positions must be N x 3, got {pos.shape}")
        if pos.shape[0] < 1:
            raise ValueError("empty cloud")
        if not np.all(np.isfinite(pos)):
            raise ValueError("positions must be finite")
        self.positions = pos
        if self.features is not None:
            feats = np.asarray(self.features, dtype=np.float64)
            if feats.ndim != 2 or feats.shape[0] != pos.shape[0]:
                raise ValueError(f"features must be N x C, got {feats.shape}")
            self.features = feats

    @property
    def n_points(self) -> int:
        return self.positions.shape[0]

    @cached_property
    def version(self) -> str:
        # Content hash: equal point sets share cache entries, edited ones never do.
        return hashlib.sha1(np.ascontiguousarray(self.positions).tobytes()).hexdigest()

    def subset(self, indices) -> "PointCloud":
        idx = np.asarray(indices, dtype=np.int64)
        feats = None if self.features is None else self.features[idx]
        return PointCloud(self.positions[idx], feats)


@dataclass(frozen=True, eq=False)
class NeighborTable:
    indices: np.ndarray  # Q x K, int64
    reference_size: int

    @property
    def k(self) -> int:
        return self.indices.shape[1]

    @property
    def query_count(self) -> int:
        return self.indices.shape[0]

    def rows(self, which) -> "NeighborTable":
        return NeighborTable(self.indices[np.asarray(which, dtype=np.int64)], self.reference_size)


def _sq_dists(query: np.ndarray, reference: np.ndarray) -> np.ndarray:
    # Explicit per-axis sum keeps every entry bit-identical however the rows are batched.
    d = query[:, None, :] - reference[None, :, :]
    return d[..., 0] * d[..., 0] + d[..., 1] * d[..., 1] + d[..., 2] * d[..., 2]


def knn(query, reference, k: int) -> NeighborTable:
    """k nearest reference points per query, ascending distance, ties to the lower index."""
    q = np.asarray(query, dtype=np.float64).reshape(-1, 3)
    r = np.asarray(reference, dtype=np.float64).reshape(-1, 3)
    if k > r.shape[0]:
        raise ValueError(f"insufficient reference points: k={k} > {r.shape[0]}")
    if k < 1:
        raise ValueError("k must be >= 1")
    if not (np.all(np.isfinite(q)) and np.all(np.isfinite(r))):
        raise ValueError("coordinates must be finite")
    out = np.empty((q.shape[0], k), dtype=np.int64)
    for lo in range(0, q.shape[0], _KNN_CHUNK):
        d = _sq_dists(q[lo:lo + _KNN_CHUNK], r)
        out[lo:lo + _KNN_CHUNK] = np.argsort(d, axis=1, kind="stable")[:, :k]
    return NeighborTable(out, r.shape[0])


def fps(positions, m: int, start: int = 0) -> np.ndarray:
    """Greedy farthest point sampling seeded at ``start``; ties go to the lower index."""
    pos = np.asarray(positions, dtype=np.float64)
    n = pos.shape[0]
    if not 1 <= m <= n:
        raise ValueError(f"cannot sample m={m} from {n} points")
    if not 0 <= start < n:
        raise ValueError(f"start index {start} out of range")
    chosen = np.empty(m, dtype=np.int64)
    chosen[0] = start
    min_d = np.full(n, np.inf)
    min_d[start] = -1.0
    last = start
    for i in range(1, m):
        diff = pos - pos[last]
        d = diff[:, 0] * diff[:, 0] + diff[:, 1] * diff[:, 1] + diff[:, 2] * diff[:, 2]
        np.minimum(min_d, d, out=min_d)
        min_d[chosen[:i]] = -1.0
        last = int(np.argmax(min_d))
        chosen[i] = last
    return chosen


def canonical_order(positions) -> np.ndarray:
    """Point indices sorted lexicographically by (x, y, z); independent of input order."""
    pos = np.asarray(positions, dtype=np.float64)
    return np.lexsort((pos[:, 2], pos[:, 1], pos[:, 0]))


def canonical_start(positions) -> int:
    return int(canonical_order(positions)[0])


def group(values, table: NeighborTable):
    """Gather ``values[table.indices]`` -> Q x K x C (numpy or torch, matching the input)."""
    idx = table.indices
    n = values.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError(f"neighbor index out of range for {n} values")
    if isinstance(values, torch.Tensor):
        return values[torch.from_numpy(idx).to(values.device)]
    return np.asarray(values)[idx]


class IndexCache:
    """Shared neighbour/sample indices keyed by (kind, level, point-set version).

    With ``enabled=False`` every request recomputes, which is the unshared
    baseline; the invocation counters make the difference measurable.
    """

    def __init__(self, enabled: bool = True):
        self.enabled = enabled
        self._store: dict[Hashable, object] = {}
        self._key_locks: dict[Hashable, threading.Lock] = {}
        self._lock = threading.Lock()
        self.hits = 0
        self.misses = 0
        self.knn_calls = 0
        self.fps_calls = 0

    def _bump(self, name: str):
        with self._lock:
            setattr(self, name, getattr(self, name) + 1)

    def fetch(self, key: Hashable, build: Callable[[], object]):
        if not self.enabled:
            self._bump("misses")
            return build()
        with self._lock:
            if key in self._store:
                self.hits += 1
                return self._store[key]
            key_lock = self._key_locks.setdefault(key, threading.Lock())
        with key_lock:
            with self._lock:
                if key in self._store:
                    self.hits += 1
                    return self._store[key]
            value = build()
            with self._lock:
                self._store[key] = value
                self.misses += 1
            return value

    def knn(self, query, reference, k: int) -> NeighborTable:
        self._bump("knn_calls")
        return knn(query, reference, k)

    def fps(self, positions, m: int, start: int = 0) -> np.ndarray:
        self._bump("fps_calls")
        return fps(positions, m, start)

    @property
    def invocations(self) -> int:
        return self.knn_calls + self.fps_calls

    def clear(self):
        with self._lock:
            self._store.clear()
            self._key_locks.clear()


def self_neighbors(cloud: PointCloud, k: int, cache: IndexCache, level: int) -> NeighborTable:
    """Self-inclusive kNN table of a level's points (row j=0 is the point itself)."""
    k = min(k, cloud.n_points)
    return cache.fetch(("self", level, cloud.version, k),
                       lambda: cache.knn(cloud.positions, cloud.positions, k))


def sample_indices(cloud: PointCloud, m: int, cache: IndexCache, level: int) -> np.ndarray:
    start = canonical_start(cloud.positions)
    return cache.fetch(("samples", level, cloud.version, m),
                       lambda: cache.fps(cloud.positions, m, start))


def pool_neighbors(fine: PointCloud, samples: np.ndarray, k: int, cache: IndexCache,
                   level: int) -> NeighborTable:
    """Neighbourhoods of the sampled points inside the fine cloud.

    Sampled points belong to the fine cloud, so their rows of the fine
    self-table are exactly their kNN; when sharing is on the table is reused.
    """
    k = min(k, fine.n_points)
    if cache.enabled:
        return self_neighbors(fine, k, cache, level - 1).rows(samples)
    return cache.knn(fine.positions[samples], fine.positions, k)


def interp_neighbors(fine: PointCloud, coarse: PointCloud, cache: IndexCache,
                     level: int) -> NeighborTable:
    k = min(INTERP_NEIGHBORS, coarse.n_points)
    return cache.fetch(("interp", level, fine.version, coarse.version),
                       lambda: cache.knn(fine.positions, coarse.positions, k))


def coarse_count(n: int, ratio: float) -> int:
    if not 0.0 < ratio <= 1.0:
        raise ValueError(f"ratio must be in (0, 1], got {ratio}")
    return max(1, math.ceil(ratio * n))


def transition_down(cloud: PointCloud, feats, ratio: float, k: int, cache: IndexCache,
                    level: int, proj: Callable | None = None):
    """Farthest-point downsample, then max-pool projected features over each sample's neighbours.

    Returns ``(coarse_cloud, coarse_feats, sample_indices)``.
    """
    if cloud.n_points < 1 or feats.shape[0] == 0:
        raise ValueError("empty cloud")
    if feats.shape[0] != cloud.n_points:
        raise ValueError("feature rows do not match cloud size")
    m = coarse_count(cloud.n_points, ratio)
    samples = sample_indices(cloud, m, cache, level)
    table = pool_neighbors(cloud, samples, k, cache, level)
    projected = feats if proj is None else proj(feats)
    pooled = group(projected, table)
    pooled = pooled.max(dim=1).values if isinstance(pooled, torch.Tensor) else pooled.max(axis=1)
    return cloud.subset(samples), pooled, samples


def interp_weights(fine: PointCloud, coarse: PointCloud, table: NeighborTable) -> np.ndarray:
    diff = fine.positions[:, None, :] - coarse.positions[table.indices]
    d = np.sqrt((diff * diff).sum(-1))
    w = 1.0 / (d + INTERP_EPS)
    return w / w.sum(axis=1, keepdims=True)


def transition_up(coarse_feats, coarse: PointCloud | np.ndarray, fine: PointCloud, skip,
                  cache: IndexCache, level: int):
    """Inverse-distance interpolation from the 3 nearest coarse points plus an additive skip."""
    if coarse_feats.shape[0] == 0:
        raise ValueError("no coarse points to interpolate from")
    if not isinstance(coarse, PointCloud):
        coarse = PointCloud(coarse)
    if coarse.n_points != coarse_feats.shape[0]:
        raise ValueError("coarse features do not match coarse positions")
    if skip is not None and skip.shape[0] != fine.n_points:
        raise ValueError("skip features do not match fine cloud")
    table = interp_neighbors(fine, coarse, cache, level)
    w = interp_weights(fine, coarse, table)
    grouped = group(coarse_feats, table)
    if isinstance(grouped, torch.Tensor):
        w = torch.from_numpy(w).to(grouped)
        out = (grouped * w[..., None]).sum(dim=1)
    else:
        out = (grouped * w[..., None]).sum(axis=1)
    return out if skip is None else out + skip
