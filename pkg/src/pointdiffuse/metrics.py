"""Segmentation metrics and the step-sweep / perturbation reports (CSV + SVG)."""
from __future__ import annotations

import csv
import io
import math
import statistics
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import perturb
from .geometry import IndexCache


@dataclass
class EvalReport:
    iou: list  # per class; NaN for classes absent from both prediction and ground truth
    miou: float
    accuracy: float
    n_points: int
    metadata: dict = field(default_factory=dict)

    def present(self) -> list[int]:
        return [c for c, v in enumerate(self.iou) if not math.isnan(v)]


def miou(pred, gt, n_classes: int, **metadata) -> EvalReport:
    """Per-class IoU; the mean skips classes that appear in neither labelling."""
    pred, gt = np.asarray(pred, dtype=np.int64), np.asarray(gt, dtype=np.int64)
    if pred.shape != gt.shape or pred.ndim != 1:
        raise ValueError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
    if pred.size and (min(pred.min(), gt.min()) < 0 or max(pred.max(), gt.max()) >= n_classes):
        raise ValueError(f"labels must lie in [0, {n_classes})")
    iou = []
    for c in range(n_classes):
        p, g = pred == c, gt == c
        union = int(np.sum(p | g))
        iou.append(int(np.sum(p & g)) / union if union else float("nan"))
    present = [v for v in iou if not math.isnan(v)]
    mean = float(np.mean(present)) if present else float("nan")
    acc = float(np.mean(pred == gt)) if pred.size else float("nan")
    return EvalReport(iou, mean, acc, int(pred.size), dict(metadata))


def _write_csv(path, header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text, encoding="utf-8")
    return text


def line_plot_svg(xs, ys, xlabel: str, ylabel: str, title: str = "", width: int = 420, height: int = 300) -> str:
    """A minimal self-contained SVG line chart."""
    left, right, top, bottom = 60, 20, 30, 45
    pw, ph = width - left - right, height - top - bottom
    x0, x1 = min(xs), max(xs)
    finite = [y for y in ys if not math.isnan(y)] or [0.0]
    y0, y1 = min(finite), max(finite)
    if x1 == x0:
        x0, x1 = x0 - 1, x1 + 1
    if y1 - y0 < 1e-9:
        y0, y1 = y0 - 0.05, y1 + 0.05

    def px(x):
        return left + (x - x0) / (x1 - x0) * pw

    def py(y):
        return top + (1 - (y - y0) / (y1 - y0)) * ph

    pts = " ".join(f"{px(x):.1f},{py(y):.1f}" for x, y in zip(xs, ys) if not math.isnan(y))
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="11">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<line x1="{left}" y1="{top + ph}" x2="{left + pw}" y2="{top + ph}" stroke="black"/>',
        f'<line x1="{left}" y1="{top}" x2="{left}" y2="{top + ph}" stroke="black"/>',
        f'<polyline points="{pts}" fill="none" stroke="#1f77b4" stroke-width="2"/>',
    ]
    for x, y in zip(xs, ys):
        if not math.isnan(y):
            parts.append(f'<circle cx="{px(x):.1f}" cy="{py(y):.1f}" r="3" fill="#1f77b4"/>')
        parts.append(f'<text x="{px(x):.1f}" y="{top + ph + 15}" text-anchor="middle">{x:g}</text>')
    for y in (y0, y1):
        parts.append(f'<text x="{left - 5}" y="{py(y) + 4:.1f}" text-anchor="end">{y:.3f}</text>')
    parts += [
        f'<text x="{left + pw / 2}" y="{height - 8}" text-anchor="middle">{xlabel}</text>',
        f'<text x="15" y="{top + ph / 2}" text-anchor="middle" transform="rotate(-90 15 {top + ph / 2})">{ylabel}</text>',
        f'<text x="{width / 2}" y="18" text-anchor="middle" font-size="13">{title}</text>',
        "</svg>",
    ]
    return "\n".join(parts) + "\n"


def evaluate(pipe, dataset, seed: int = 0, T: int | None = None) -> EvalReport:
    """Sample every scene and pool the points into one report."""
    preds, gts = [], []
    for cloud, labels in dataset:
        pred, _ = pipe.sample(cloud, seed=seed, T=T)
        preds.append(pred)
        gts.append(np.asarray(labels))
    return miou(np.concatenate(preds), np.concatenate(gts), pipe.n_classes, seed=seed,
                T=pipe.cfg.T if T is None else T, gamma=pipe.cfg.gamma, config=pipe.cfg.digest())


@dataclass
class SweepRow:
    steps: int
    miou: float
    seconds: float


def sweep_steps(pipe, dataset, steps, seed: int = 0, repeats: int = 3, csv_path=None, svg_path=None):
    """mIoU and median per-scene sampling time for each step count.

    Conditioning and index construction are done once per scene beforehand, so
    the timing covers the reverse chain alone.
    """
    prepared = []
    for cloud, labels in dataset:
        cache = IndexCache(pipe.cfg.cache)
        prepared.append((cloud, np.asarray(labels), cache, pipe.condition(cloud, cache)))
    rows = []
    for T in steps:
        preds, gts, times = [], [], []
        for cloud, labels, cache, bundle in prepared:
            pred = None
            for _ in range(max(1, repeats)):
                t0 = time.perf_counter()
                pred, _ = pipe.sample(cloud, seed=seed, T=T, cache=cache, bundle=bundle)
                times.append(time.perf_counter() - t0)
            preds.append(pred)
            gts.append(labels)
        report = miou(np.concatenate(preds), np.concatenate(gts), pipe.n_classes)
        rows.append(SweepRow(int(T), report.miou, statistics.median(times)))
    _write_csv(csv_path, ("steps", "miou", "seconds"),
               [(r.steps, f"{r.miou:.6f}", f"{r.seconds:.6f}") for r in rows])
    if svg_path is not None:
        Path(svg_path).write_text(line_plot_svg([r.steps for r in rows], [r.miou for r in rows],
                                                "sampling steps", "mIoU", "mIoU vs sampling steps"),
                                  encoding="utf-8")
    return rows


PERTURBATIONS = (
    ("none", "none", None),
    ("permute", "permute", None),
    ("rot pi/2", "rotate_z", math.pi / 2),
    ("rot pi", "rotate_z", math.pi),
    ("rot 3pi/2", "rotate_z", 3 * math.pi / 2),
    ("shift +0.2", "shift", 0.2),
    ("shift -0.2", "shift", -0.2),
    ("scale x0.8", "scale", 0.8),
    ("scale x1.2", "scale", 1.2),
    ("jitter", "jitter", 0.01),
)


def run_perturbation_suite(pipe, dataset, seed: int = 0, csv_path=None, jitter_sigma: float = 0.01):
    """mIoU under each test-time perturbation; returns [(name, mIoU)] with 10 rows."""
    rows = []
    for name, kind, mag in PERTURBATIONS:
        if kind == "jitter":
            mag = jitter_sigma
        preds, gts = [], []
        for i, (cloud, labels) in enumerate(dataset):
            moved, lab = perturb(cloud, kind, mag, labels=np.asarray(labels), seed=seed + i)
            pred, _ = pipe.sample(moved, seed=seed)
            preds.append(pred)
            gts.append(lab)
        rows.append((name, miou(np.concatenate(preds), np.concatenate(gts), pipe.n_classes).miou))
    _write_csv(csv_path, ("perturbation", "miou"), [(n, f"{m:.6f}") for n, m in rows])
    return rows
