"""Condition encoder + denoiser bundled with their config, plus checkpoint I/O."""
from __future__ import annotations

from pathlib import Path

import numpy as np
import torch

from .checkpoint import dumps, load_checkpoint, save_checkpoint
from .condition import (ConditionBundle, ConditionEncoder, PositionEncoder, encode_semantic, freeze,
                        pretrain_condition)
from .config import Config
from .geometry import IndexCache, PointCloud
from .network import DenoiseNet, init_params, level_widths, reset_parameters, sample_labels
from .schedule import make_linear_schedule
from .train import train_denoiser

# The built-in condition encoder works on the first three resolution levels.
CONDITION_LEVELS = 3


class PointDiffuse:
    def __init__(self, cfg: Config, n_classes: int, cond: ConditionEncoder, dnet: DenoiseNet):
        self.cfg, self.n_classes = cfg, n_classes
        self.cond, self.dnet = cond, dnet
        self.dtype = next(dnet.parameters()).dtype

    @property
    def posenc(self) -> PositionEncoder:
        return self.cond.posenc

    @classmethod
    def build(cls, cfg: Config, n_classes: int, in_dim: int = 3, seed: int | None = None) -> "PointDiffuse":
        cfg.validate()
        seed = cfg.seed if seed is None else seed
        widths = level_widths(cfg.channels)
        posenc = PositionEncoder(widths)
        cond = ConditionEncoder(n_classes, widths[:CONDITION_LEVELS], cfg.semantic_dim, cfg.k, cfg.ratio,
                                in_dim, posenc)
        reset_parameters(cond, seed + 1)
        dnet = init_params(cfg, n_classes, seed=seed)
        return cls(cfg, n_classes, cond, dnet)

    def pretrain(self, dataset, epochs: int | None = None):
        """Fit the condition encoder, then freeze it (and the shared position encoder)."""
        self.cond.requires_grad_(True)
        hist = pretrain_condition(dataset, self.cond, self.cfg.pretrain_epochs if epochs is None else epochs,
                                  self.cfg.pretrain_lr, self.cfg.weight_decay)
        freeze(self.cond)
        return hist

    def condition(self, cloud: PointCloud, cache: IndexCache | None = None) -> ConditionBundle:
        freeze(self.cond)
        return encode_semantic(cloud, self.cond, cache, use_logits=self.cfg.semantic_source == "logits")

    def train(self, dataset, log_path=None, max_steps: int | None = None):
        freeze(self.cond)
        return train_denoiser(self, dataset, self.cfg, log_path, max_steps=max_steps)

    def sample(self, cloud: PointCloud, seed: int = 0, T: int | None = None, cache: IndexCache | None = None,
               bundle: ConditionBundle | None = None):
        """Predicted classes for ``cloud`` and the sampler trace."""
        cache = cache if cache is not None else IndexCache(self.cfg.cache)
        bundle = bundle if bundle is not None else self.condition(cloud, cache)
        sched = make_linear_schedule(self.cfg.T if T is None else T, self.cfg.beta_start, self.cfg.beta_end)
        self.dnet.eval()
        return sample_labels(cloud, bundle, sched, seed, self.dnet, cache)

    # -- serialisation ---------------------------------------------------

    def to_arrays(self) -> dict[str, np.ndarray]:
        out = {f"cond.{k}": v.detach().cpu().numpy() for k, v in self.cond.state_dict().items()}
        out.update({f"dnet.{k}": v.detach().cpu().numpy() for k, v in self.dnet.state_dict().items()})
        return out

    def condition_bytes(self) -> bytes:
        """Serialised condition parameters, used to check the freeze contract."""
        return dumps({k: v for k, v in self.to_arrays().items() if k.startswith("cond.")})

    def load_arrays(self, arrays: dict[str, np.ndarray]):
        for prefix, module in (("cond.", self.cond), ("dnet.", self.dnet)):
            state = module.state_dict()
            names = {k[len(prefix):] for k in arrays if k.startswith(prefix)}
            if names != set(state):
                missing, extra = set(state) - names, names - set(state)
                raise ValueError(f"checkpoint mismatch for {prefix[:-1]}: missing {sorted(missing)[:3]}, "
                                 f"unexpected {sorted(extra)[:3]}")
            module.load_state_dict({k: torch.from_numpy(arrays[prefix + k]).to(v.dtype) for k, v in state.items()})
        freeze(self.cond)

    def save(self, path: str | Path):
        save_checkpoint(path, self.to_arrays())

    @classmethod
    def load(cls, path: str | Path, cfg: Config, n_classes: int, in_dim: int = 3) -> "PointDiffuse":
        pipe = cls.build(cfg, n_classes, in_dim)
        pipe.load_arrays(load_checkpoint(path))
        return pipe
