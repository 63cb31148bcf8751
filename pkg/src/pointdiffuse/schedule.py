"""Variance schedule, forward noising, reverse denoising step and the label codec.

Label fields are plain ``N x M`` tensors (or arrays); steps ``t`` are 1-based.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray
    rhos: np.ndarray

    @classmethod
    def from_betas(cls, betas) -> "NoiseSchedule":
        b = np.asarray(betas, dtype=np.float64).reshape(-1)
        if b.size < 1:
            raise ValueError("schedule needs at least one step")
        if np.any(b < 0.0) or np.any(b >= 1.0):
            raise ValueError("betas must lie in [0, 1)")
        a = 1.0 - b
        return cls(betas=b, alphas=a, alpha_bars=np.cumprod(a), rhos=np.sqrt(b))

    @property
    def T(self) -> int:
        return self.betas.size

    def check_step(self, t: int):
        if not 1 <= t <= self.T:
            raise ValueError(f"step t={t} outside [1, {self.T}]")

    def beta(self, t: int) -> float:
        return float(self.betas[t - 1])

    def alpha(self, t: int) -> float:
        return float(self.alphas[t - 1])

    def alpha_bar(self, t: int) -> float:
        return float(self.alpha_bars[t - 1])


def make_linear_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    if T < 1:
        raise ValueError("T must be >= 1")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    return NoiseSchedule.from_betas(np.linspace(beta_start, beta_end, T))


def forward_step(x_prev, t: int, eps, sched: NoiseSchedule):
    """One Markov noising step q(x_t | x_{t-1})."""
    sched.check_step(t)
    b = sched.beta(t)
    return math.sqrt(1.0 - b) * x_prev + math.sqrt(b) * eps


def forward_sample(x0, t: int, eps, sched: NoiseSchedule):
    """Closed-form draw of x_t given x_0."""
    sched.check_step(t)
    ab = sched.alpha_bar(t)
    return math.sqrt(ab) * x0 + math.sqrt(1.0 - ab) * eps


def reverse_step(x_t, eps_hat, t: int, z, sched: NoiseSchedule):
    """x_{t-1} from x_t and the predicted noise; ``z`` is ignored at t=1 and may be None."""
    sched.check_step(t)
    b, a, ab = sched.beta(t), sched.alpha(t), sched.alpha_bar(t)
    if b == 0.0:
        mean = x_t / math.sqrt(a)
    else:
        mean = (x_t - (b / math.sqrt(1.0 - ab)) * eps_hat) / math.sqrt(a)
    if t == 1 or z is None:
        return mean
    return mean + math.sqrt(b) * z


def predict_x0(x_t, eps_hat, t: int, sched: NoiseSchedule):
    """Clean-label estimate implied by a noise prediction."""
    sched.check_step(t)
    ab = sched.alpha_bar(t)
    return (x_t - math.sqrt(1.0 - ab) * eps_hat) / math.sqrt(ab)


def encode_labels(classes, n_classes: int, scale: float = 1.0, dtype=torch.float32) -> torch.Tensor:
    """Class indices -> rows holding +scale at the class and -scale elsewhere."""
    c = torch.as_tensor(np.asarray(classes, dtype=np.int64))
    if c.numel() and (int(c.min()) < 0 or int(c.max()) >= n_classes):
        raise ValueError(f"class index out of range for {n_classes} classes")
    x = torch.full((c.shape[0], n_classes), -float(scale), dtype=dtype)
    x[torch.arange(c.shape[0]), c] = float(scale)
    return x


def decode_labels(x) -> np.ndarray:
    """Row-wise argmax; ties resolve to the lower class index."""
    if isinstance(x, torch.Tensor):
        x = x.detach().cpu().numpy()
    return np.argmax(np.asarray(x), axis=1).astype(np.int64)
