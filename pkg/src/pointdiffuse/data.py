"""Synthetic labelled scenes, grid subsampling, augmentation, test-time perturbations and PDPC files."""
from __future__ import annotations

import io
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geometry import PointCloud

PRIMITIVES = ("blob", "plane", "box")


class FormatError(ValueError):
    """Malformed file; ``code`` is one of bad_magic, bad_version, truncated."""

    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code


@dataclass
class ClassGenerator:
    center: tuple
    spread: float
    count: int
    primitive: str = "blob"


@dataclass
class SceneSpec:
    classes: list[ClassGenerator]
    noise: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if len(self.classes) < 2:
            raise ValueError("a scene needs at least two classes")
        for g in self.classes:
            if g.count < 1:
                raise ValueError("every class needs at least one point")
            if g.primitive not in PRIMITIVES:
                raise ValueError(f"unknown primitive {g.primitive!r}")

    @property
    def n_classes(self) -> int:
        return len(self.classes)


def _balanced(n_points: int, n_classes: int) -> list[int]:
    base, extra = divmod(n_points, n_classes)
    return [base + (c < extra) for c in range(n_classes)]


def preset(name: str, n_classes: int = 3, n_points: int = 256, seed: int = 0) -> SceneSpec:
    """``separable``: far-apart primitives; ``hard``: overlapping class boundaries."""
    if name == "separable":
        radius, spread = 2.5, 0.5
    elif name == "hard":
        radius, spread = 0.6, 0.5
    else:
        raise ValueError(f"unknown preset {name!r}")
    counts = _balanced(n_points, n_classes)
    gens = []
    for c in range(n_classes):
        ang = 2.0 * np.pi * c / n_classes
        center = (radius * np.cos(ang), radius * np.sin(ang), 0.0)
        gens.append(ClassGenerator(center, spread, counts[c], PRIMITIVES[c % len(PRIMITIVES)]))
    return SceneSpec(gens, noise=0.01, seed=seed)


def _primitive(rng: np.random.Generator, kind: str, n: int, spread: float) -> np.ndarray:
    if kind == "blob":
        d = rng.normal(size=(n, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True) + 1e-12
        return d * spread * rng.uniform(size=(n, 1)) ** (1.0 / 3.0)
    if kind == "plane":
        xy = rng.uniform(-spread, spread, size=(n, 2))
        return np.column_stack([xy, np.zeros(n)])
    face = rng.integers(0, 6, size=n)
    pts = rng.uniform(-spread, spread, size=(n, 3))
    pts[np.arange(n), face // 2] = np.where(face % 2 == 0, -spread, spread)
    return pts * 0.6


def generate_scene(spec: SceneSpec) -> tuple[PointCloud, np.ndarray]:
    rng = np.random.default_rng(spec.seed)
    pos, lab = [], []
    for c, g in enumerate(spec.classes):
        pts = _primitive(rng, g.primitive, g.count, g.spread) + np.asarray(g.center, dtype=np.float64)
        pos.append(pts + rng.normal(scale=spec.noise, size=pts.shape))
        lab.append(np.full(g.count, c, dtype=np.int64))
    pos, lab = np.concatenate(pos), np.concatenate(lab)
    order = rng.permutation(pos.shape[0])
    # Round through float32 so PDPC files hold the scene losslessly.
    positions = pos[order].astype(np.float32).astype(np.float64)
    return PointCloud(positions), lab[order]


def grid_subsample(cloud: PointCloud, labels=None, cell: float = 0.04, max_points: int = 80000):
    """Keep, per occupied voxel, the input point nearest the voxel's centre (ties: lower index)."""
    if cell <= 0:
        raise ValueError("cell size must be positive")
    pos = cloud.positions
    vox = np.floor(pos / cell).astype(np.int64)
    centre = (vox + 0.5) * cell
    d = ((pos - centre) ** 2).sum(axis=1)
    order = np.lexsort((np.arange(pos.shape[0]), d, vox[:, 2], vox[:, 1], vox[:, 0]))
    sv = vox[order]
    first = np.ones(order.size, dtype=bool)
    first[1:] = np.any(sv[1:] != sv[:-1], axis=1)
    keep = order[first]
    if keep.size > max_points:
        keep = keep[np.unique(np.linspace(0, keep.size - 1, max_points).round().astype(np.int64))]
    out = cloud.subset(keep)
    return out, (None if labels is None else np.asarray(labels)[keep])


AUGMENT_OPS = ("scale", "flip_x", "flip_y", "jitter")


def augment(cloud: PointCloud, labels, ops, seed: int = 0):
    """Apply the listed geometric ops in order; random parameters come from ``seed``."""
    rng = np.random.default_rng(seed)
    pos = cloud.positions.copy()
    for op in ops:
        if op == "scale":
            pos = pos * rng.uniform(0.8, 1.2)
        elif op == "flip_x":
            pos[:, 0] = -pos[:, 0]
        elif op == "flip_y":
            pos[:, 1] = -pos[:, 1]
        elif op == "jitter":
            pos = pos + np.clip(rng.normal(scale=0.01, size=pos.shape), -0.05, 0.05)
        else:
            raise ValueError(f"unknown augmentation {op!r}; choose from {AUGMENT_OPS}")
    return PointCloud(pos, cloud.features), labels


def training_views(cloud: PointCloud, labels, n_views: int, seed: int = 0, ops=("scale", "jitter")):
    """The scene itself followed by ``n_views - 1`` seeded augmented copies."""
    if n_views < 1:
        raise ValueError("n_views must be >= 1")
    return [(cloud, labels)] + [augment(cloud, labels, ops, seed=seed + v) for v in range(1, n_views)]


PERTURB_KINDS = ("none", "permute", "rotate_z", "shift", "scale", "jitter")


def perturb(cloud: PointCloud, kind: str, magnitude=None, labels=None, seed: int = 0):
    """Test-time perturbation; returns ``(cloud, labels)``.

    permute: ``magnitude`` is an explicit permutation or None for a seeded one;
    rotate_z: angle in radians; shift: offset added to every coordinate;
    scale: factor; jitter: Gaussian sigma, clipped at 5 sigma.
    """
    pos = cloud.positions
    if kind == "none":
        return cloud, labels
    if kind == "permute":
        perm = (np.random.default_rng(seed).permutation(cloud.n_points) if magnitude is None
                else np.asarray(magnitude, dtype=np.int64))
        if sorted(perm.tolist()) != list(range(cloud.n_points)):
            raise ValueError("not a permutation of the points")
        return cloud.subset(perm), (None if labels is None else np.asarray(labels)[perm])
    if kind == "rotate_z":
        c, s = np.cos(magnitude), np.sin(magnitude)
        rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
        new = pos @ rot.T
    elif kind == "shift":
        new = pos + float(magnitude)
    elif kind == "scale":
        new = pos * float(magnitude)
    elif kind == "jitter":
        sigma = float(magnitude)
        if sigma == 0.0:
            return PointCloud(pos.copy(), cloud.features), labels
        noise = np.random.default_rng(seed).normal(scale=sigma, size=pos.shape)
        new = pos + np.clip(noise, -5 * sigma, 5 * sigma)
    else:
        raise ValueError(f"unknown perturbation {kind!r}; choose from {PERTURB_KINDS}")
    return PointCloud(new, cloud.features), labels


# ---------------------------------------------------------------------------
# PDPC files: b"PDPC", u32 version, u64 N, u32 M, u32 flags (bit0: labels),
# N x 3 f32 positions, then N u16 labels when flagged; all little-endian.

PDPC_MAGIC = b"PDPC"
PDPC_VERSION = 1
_HEADER = struct.Struct("<4sIQII")


def save_cloud(path: str | Path, cloud: PointCloud, labels=None, n_classes: int | None = None):
    flags = 0
    if labels is not None:
        labels = np.asarray(labels)
        if labels.shape != (cloud.n_points,):
            raise ValueError("one label per point required")
        if labels.size and (labels.min() < 0 or labels.max() > 0xFFFF):
            raise ValueError("labels must fit in u16")
        flags |= 1
        if n_classes is None:
            n_classes = int(labels.max()) + 1 if labels.size else 0
    n_classes = n_classes or 0
    buf = io.BytesIO()
    buf.write(_HEADER.pack(PDPC_MAGIC, PDPC_VERSION, cloud.n_points, n_classes, flags))
    buf.write(cloud.positions.astype("<f4").tobytes())
    if labels is not None:
        buf.write(labels.astype("<u2").tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_cloud(path: str | Path, return_classes: bool = False):
    blob = Path(path).read_bytes()
    if len(blob) < 4 or blob[:4] != PDPC_MAGIC:
        raise FormatError("bad_magic", "bad magic")
    if len(blob) < _HEADER.size:
        raise FormatError("truncated", "truncated payload")
    _, version, n, n_classes, flags = _HEADER.unpack_from(blob)
    if version != PDPC_VERSION:
        raise FormatError("bad_version", f"unsupported version {version}")
    need = _HEADER.size + 12 * n + (2 * n if flags & 1 else 0)
    if len(blob) < need:
        raise FormatError("truncated", "truncated payload")
    off = _HEADER.size
    pos = np.frombuffer(blob, dtype="<f4", count=3 * n, offset=off).reshape(n, 3).astype(np.float64)
    labels = None
    if flags & 1:
        labels = np.frombuffer(blob, dtype="<u2", count=n, offset=off + 12 * n).astype(np.int64)
    cloud = PointCloud(pos)
    return (cloud, labels, n_classes) if return_classes else (cloud, labels)
