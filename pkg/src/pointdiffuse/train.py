"""Training objective, denoiser training loop and a finite-difference gradient checker."""
from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import Config
from .geometry import IndexCache, PointCloud
from .schedule import (NoiseSchedule, encode_labels, forward_sample, make_linear_schedule,
                       predict_x0, reverse_step)

log = logging.getLogger(__name__)

TRAIN_LOG_COLUMNS = ("epoch", "step", "loss", "grad_norm", "seconds")


def total_loss(eps, eps_hat, x0, x_prev_hat, gamma: float, label_loss: str = "mse"):
    """gamma * MSE(eps, eps_hat) + (1 - gamma) * label term.

    ``label_loss='mse'`` compares x0 with the generated x_{t-1}; ``'ce'`` treats
    ``x_prev_hat`` as class logits (pass the x_0 estimate) against argmax(x0).
    """
    if not 0.0 < gamma < 1.0:
        raise ValueError(f"gamma must lie in (0, 1), got {gamma}")
    if eps.shape != eps_hat.shape or x0.shape != x_prev_hat.shape:
        raise ValueError("loss inputs are not aligned")
    noise_term = torch.mean((eps - eps_hat) ** 2)
    if label_loss == "mse":
        label_term = torch.mean((x0 - x_prev_hat) ** 2)
    elif label_loss == "ce":
        label_term = F.cross_entropy(x_prev_hat, x0.argmax(dim=1))
    else:
        raise ValueError(f"unknown label loss {label_loss!r}")
    return gamma * noise_term + (1.0 - gamma) * label_term


@dataclass(eq=False)
class TrainScene:
    cloud: PointCloud
    labels: np.ndarray
    x0: torch.Tensor
    bundle: object
    cache: IndexCache


def prepare_scenes(pipe, dataset) -> list[TrainScene]:
    """Condition every scene once with the frozen encoder; each scene keeps its own index cache."""
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    scenes = []
    for cloud, labels in dataset:
        cache = IndexCache(pipe.cfg.cache)
        bundle = pipe.condition(cloud, cache)
        x0 = encode_labels(labels, pipe.n_classes, pipe.cfg.scale, dtype=pipe.dtype)
        scenes.append(TrainScene(cloud, np.asarray(labels), x0, bundle, cache))
    return scenes


def scene_loss(model, scene: TrainScene, sched: NoiseSchedule, cfg: Config, gen: torch.Generator):
    t = int(torch.randint(1, sched.T + 1, (1,), generator=gen))
    eps = torch.randn(scene.x0.shape, generator=gen, dtype=torch.float64).to(scene.x0)
    x_t = forward_sample(scene.x0, t, eps, sched)
    eps_hat = model(x_t, t, scene.cloud, scene.bundle, scene.cache)
    if cfg.label_loss == "ce":
        label_pred = predict_x0(x_t, eps_hat, t, sched)
    else:
        label_pred = reverse_step(x_t, eps_hat, t, None, sched)
    return total_loss(eps, eps_hat, scene.x0, label_pred, cfg.gamma, cfg.label_loss)


def train_step(batch, model, optimizer, cfg: Config, sched: NoiseSchedule, gen: torch.Generator):
    """One optimiser update over a batch of scenes; returns (loss, grad norm)."""
    if len(batch) == 0:
        raise ValueError("empty batch")
    optimizer.zero_grad()
    loss = sum(scene_loss(model, s, sched, cfg, gen) for s in batch) / len(batch)
    loss.backward()
    grads = [p.grad.detach().reshape(-1) for p in model.parameters() if p.grad is not None]
    grad_norm = float(torch.cat(grads).norm()) if grads else 0.0
    optimizer.step()
    return loss.item(), grad_norm


def make_optimizer(model: nn.Module, cfg: Config):
    params = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    sched = torch.optim.lr_scheduler.MultiStepLR(opt, milestones=list(cfg.milestones), gamma=cfg.lr_decay)
    return opt, sched


@dataclass
class TrainHistory:
    loss: list = field(default_factory=list)
    grad_norm: list = field(default_factory=list)


def train_denoiser(pipe, dataset, cfg: Config | None = None, log_path: str | Path | None = None,
                   scenes: list[TrainScene] | None = None, max_steps: int | None = None) -> TrainHistory:
    """Train only the denoiser; the condition encoder (and its position encoder) stay frozen."""
    cfg = cfg or pipe.cfg
    scenes = scenes if scenes is not None else prepare_scenes(pipe, dataset)
    sched = make_linear_schedule(cfg.T, cfg.beta_start, cfg.beta_end)
    model = pipe.dnet
    model.train()
    opt, lr_sched = make_optimizer(model, cfg)
    gen = torch.Generator().manual_seed(cfg.seed)
    history = TrainHistory()
    writer = None
    fh = None
    if log_path is not None:
        fh = open(log_path, "w", newline="")
        writer = csv.writer(fh)
        writer.writerow(TRAIN_LOG_COLUMNS)
    start = time.perf_counter()
    step = 0
    try:
        for epoch in range(cfg.epochs):
            # One epoch is one ordered pass over the scenes.
            for first in range(0, len(scenes), cfg.batch):
                batch = scenes[first:first + cfg.batch]
                loss, gnorm = train_step(batch, model, opt, cfg, sched, gen)
                history.loss.append(loss)
                history.grad_norm.append(gnorm)
                if writer is not None:
                    writer.writerow([epoch, step, f"{loss:.6g}", f"{gnorm:.6g}",
                                     f"{time.perf_counter() - start:.3f}"])
                step += 1
                if max_steps is not None and step >= max_steps:
                    return history
            lr_sched.step()
            if epoch % 20 == 0:
                log.info("epoch %d loss %.4f", epoch, history.loss[-1])
    finally:
        model.eval()
        if fh is not None:
            fh.close()
    return history


# ---------------------------------------------------------------------------
# gradient checking

@dataclass
class GradReport:
    block: str
    max_rel_err: float
    n_params: int
    tol: float
    skipped: int = 0

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tol and self.skipped <= MAX_SKIP_FRACTION * self.n_params

    def line(self) -> str:
        return (f"{self.block} max_rel_err={self.max_rel_err:.3e} pass={str(self.passed).lower()}"
                f" skipped={self.skipped}/{self.n_params}")


MICRO = {
    "linear": dict(n=6, c=5),
    "nle": dict(n=16, c=8, k=4, m=3, s=6),
    "pft": dict(n=13, c=8, k=4),
    "dpn": dict(n=16, c=8, k=4),
    "net": dict(n=12, m=3, k=4, channels=(4, 8), ratio=0.5, time_dim=4, semantic_dim=4),
}
DEFAULT_TOL = {"linear": 1e-6, "nle": 1e-4, "pft": 1e-4, "dpn": 1e-4, "net": 1e-3}
DEFAULT_H = {"linear": 1e-4, "nle": 1e-4, "pft": 1e-4, "dpn": 1e-4, "net": 1e-4}
# Entries whose central difference changes between h and h/2 straddle a ReLU or
# max-pool switch; they are reported as skipped and may not exceed this share.
MAX_SKIP_FRACTION = 0.25
MICRO_WEIGHT_SCALE = 0.5


def _micro_problem(block: str, micro: dict, seed: int):
    """Build (module, closure returning a scalar loss) in float64."""
    from .blocks import DenoisingPointNet, NoisyLabelEmbedding, PointFrequencyTransformer
    from .condition import ConditionBundle, PositionEncoder, position_condition
    from .geometry import knn
    from .network import init_params, level_widths, reset_parameters

    gen = torch.Generator().manual_seed(seed)
    rng = np.random.default_rng(seed)

    def randn(*shape):
        return torch.randn(*shape, generator=gen, dtype=torch.float64)

    if block == "linear":
        module = nn.Linear(micro["c"], 3).double()
        reset_parameters(module, seed)
        x, r = randn(micro["n"], micro["c"]), randn(micro["n"], 3)
        return module, lambda: (module(x) * r).sum()

    if block == "net":
        cfg = Config(levels=len(micro["channels"]), channels=tuple(micro["channels"]), k=micro["k"],
                     ratio=micro["ratio"], time_dim=micro["time_dim"], semantic_dim=micro["semantic_dim"])
        module = init_params(cfg, micro["m"], seed=seed, zero_init=False, dtype=torch.float64)
        with torch.no_grad():
            for p in module.parameters():
                if p.ndim == 1:
                    p.copy_(0.1 * randn(*p.shape))
                else:
                    p.mul_(MICRO_WEIGHT_SCALE)
        cloud = PointCloud(rng.normal(size=(micro["n"], 3)))
        posenc = PositionEncoder(level_widths(cfg.channels)).double()
        reset_parameters(posenc, seed + 1)
        posenc.requires_grad_(False)
        bundle = ConditionBundle(randn(micro["n"], micro["semantic_dim"]), posenc, cloud.version)
        x_t, r = randn(micro["n"], micro["m"]), randn(micro["n"], micro["m"])
        cache = IndexCache()
        return module, lambda: (module(x_t, 3, cloud, bundle, cache) * r).sum()

    n, c, k = micro["n"], micro["c"], micro["k"]
    pos = rng.normal(size=(n, 3))
    table = knn(pos, pos, k)
    delta = PositionEncoder([c]).double()
    reset_parameters(delta, seed + 1)
    with torch.no_grad():
        pc = position_condition(pos, table, delta[0])
    r = randn(n, c)
    if block == "nle":
        module = NoisyLabelEmbedding(micro["m"], c, micro["s"]).double()
        x_t, sem = randn(n, micro["m"]), randn(n, micro["s"])
        loss = lambda: (module(x_t, sem, pc, table) * r).sum()
    elif block == "pft":
        module = PointFrequencyTransformer(c).double()
        f = randn(n, c)
        loss = lambda: (module(f, pc, table) * r).sum()
    elif block == "dpn":
        module = DenoisingPointNet(c).double()
        f = randn(n, c)
        loss = lambda: (module(f, pc, table) * r).sum()
    else:
        raise ValueError(f"unknown block {block!r}; choose from {sorted(MICRO)}")
    reset_parameters(module, seed)
    with torch.no_grad():
        for p in module.parameters():
            if p.ndim == 1:
                p.copy_(0.1 * randn(*p.shape))
    return module, loss


def grad_check(block: str, micro: dict | None = None, h: float | None = None, tol: float | None = None,
               seed: int = 0, corrupt: bool = False) -> GradReport:
    """Compare autograd parameter gradients with central differences over every scalar parameter.

    Relative error per entry is |a - n| / max(|a|, |n|, 1e-8).  An entry whose
    difference quotient moves by more than ``tol`` between step h and h/2 sits
    on a non-differentiable point and is skipped (counted in the report).
    ``corrupt`` doubles the largest analytic entry to confirm the checker can fail.
    """
    if block not in MICRO:
        raise ValueError(f"unknown block {block!r}; choose from {sorted(MICRO)}")
    micro = {**MICRO[block], **(micro or {})}
    h = DEFAULT_H[block] if h is None else h
    tol = DEFAULT_TOL[block] if tol is None else tol
    module, loss_fn = _micro_problem(block, micro, seed)
    params = [p for p in module.parameters() if p.requires_grad]
    module.zero_grad()
    loss_fn().backward()
    analytic = [p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p) for p in params]
    if corrupt:
        flat = torch.cat([a.reshape(-1) for a in analytic])
        target = int(flat.abs().argmax())
        for a in analytic:
            if target < a.numel():
                a.view(-1)[target] *= 2.0
                break
            target -= a.numel()

    def rel(a, b):
        return abs(a - b) / max(abs(a), abs(b), 1e-8)

    worst, skipped = 0.0, 0
    with torch.no_grad():
        for p, a in zip(params, analytic):
            flat = p.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()

                def central(step):
                    flat[i] = orig + step
                    up = loss_fn().item()
                    flat[i] = orig - step
                    down = loss_fn().item()
                    flat[i] = orig
                    return (up - down) / (2 * step)

                num = central(h)
                ana = a.view(-1)[i].item()
                err = rel(ana, num)
                if err >= tol and rel(num, central(h / 2)) >= tol:
                    skipped += 1
                    continue
                worst = max(worst, err)
    return GradReport(block, worst, sum(p.numel() for p in params), tol, skipped)
