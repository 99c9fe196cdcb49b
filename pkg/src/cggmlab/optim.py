"""Optimizers over named parameter groups.

Group learning rates can be overridden per group; an override key matches a
group either exactly (``"encoder-2"``) or by prefix before the dash
(``"classifier"`` covers every ``classifier-i`` group).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractError

KINDS = ("gd", "sgd-momentum", "adam", "adamw")
SCHEDULES = ("none", "step", "cosine")


@dataclass
class OptimizerConfig:
    kind: str = "adam"
    lr: float = 1e-3
    group_lrs: dict = field(default_factory=dict)
    momentum: float = 0.9
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0
    clip: float | None = None
    schedule: str = "none"
    step_size: int = 10
    gamma: float = 0.1
    warmup: int = 0
    total: int = 1
    min_lr: float = 0.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"optimizer kind must be one of {KINDS}")
        if not self.lr > 0:
            raise ConfigError("learning rate must be positive")
        if any(v < 0 for v in self.group_lrs.values()):
            raise ConfigError("group learning rates must be non-negative")
        if not all(0.0 <= b < 1.0 for b in self.betas) or not 0.0 <= self.momentum < 1.0:
            raise ConfigError("betas and momentum must lie in [0, 1)")
        if self.clip is not None and not self.clip > 0:
            raise ConfigError("clip threshold must be positive")
        if self.schedule not in SCHEDULES:
            raise ConfigError(f"schedule must be one of {SCHEDULES}")
        if self.step_size < 1 or self.total < 1 or self.warmup < 0:
            raise ConfigError("invalid schedule parameters")


def schedule_factor(cfg: OptimizerConfig, epoch: int) -> float:
    """Learning-rate multiplier for a (0-based) epoch."""
    if cfg.schedule == "step":
        return cfg.gamma ** (epoch // cfg.step_size)
    if cfg.schedule == "cosine":
        if epoch < cfg.warmup:
            return (epoch + 1) / (cfg.warmup + 1)
        span = max(1, cfg.total - cfg.warmup)
        progress = min(1.0, (epoch - cfg.warmup) / span)
        floor = cfg.min_lr / cfg.lr
        return floor + (1.0 - floor) * 0.5 * (1.0 + math.cos(math.pi * progress))
    return 1.0


def grad_norm(params) -> float:
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float(np.sum(p.grad * p.grad))
    return math.sqrt(total)


class Optimizer:
    def __init__(self, groups: dict, config: OptimizerConfig):
        """``groups`` maps a group name to its parameter tensors (or (name, tensor) pairs)."""
        self.config = config
        self.groups = {}
        for name, params in groups.items():
            self.groups[name] = [p[1] if isinstance(p, tuple) else p for p in params]
        self.base_lrs = {name: self._group_lr(name) for name in self.groups}
        self.factor = 1.0
        self.state: dict[int, dict] = {}
        self.steps = 0

    def _group_lr(self, name):
        overrides = self.config.group_lrs
        if name in overrides:
            return float(overrides[name])
        prefix = name.split("-")[0]
        if prefix in overrides:
            return float(overrides[prefix])
        return self.config.lr

    def lr(self, group: str) -> float:
        return self.base_lrs[group] * self.factor

    def set_epoch(self, epoch: int):
        self.factor = schedule_factor(self.config, epoch)

    def parameters(self):
        return [p for ps in self.groups.values() for p in ps]

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def step(self):
        """Apply one update to every parameter that has a gradient.

        Parameters without a gradient (e.g. an encoder whose modality was
        dropped for the whole batch) are skipped; a step with no gradients
        at all is a contract violation.
        """
        params = self.parameters()
        if all(p.grad is None for p in params):
            raise ContractError("optimizer step without any gradients; run backward first")
        clip_scale = 1.0
        if self.config.clip is not None:
            norm = grad_norm(params)
            if norm > self.config.clip:
                clip_scale = self.config.clip / norm
        self.steps += 1
        for name, group in self.groups.items():
            lr = self.lr(name)
            for p in group:
                if p.grad is None:
                    continue
                g = p.grad * clip_scale if clip_scale != 1.0 else p.grad
                p.data = p.data - self._update(p, g, lr)

    def _update(self, p, g, lr):
        cfg = self.config
        if cfg.kind == "gd":
            return lr * g
        st = self.state.setdefault(id(p), {"t": 0})
        if cfg.kind == "sgd-momentum":
            buf = st.get("m")
            buf = g.copy() if buf is None else cfg.momentum * buf + g
            st["m"] = buf
            return lr * buf
        b1, b2 = cfg.betas
        st["t"] += 1
        m = st.get("m", np.zeros_like(g))
        v = st.get("v", np.zeros_like(g))
        if cfg.kind == "adam" and cfg.weight_decay:
            g = g + cfg.weight_decay * p.data
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        st["m"], st["v"] = m, v
        mhat = m / (1 - b1 ** st["t"])
        vhat = v / (1 - b2 ** st["t"])
        update = lr * mhat / (np.sqrt(vhat) + cfg.eps)
        if cfg.kind == "adamw" and cfg.weight_decay:
            update = update + lr * cfg.weight_decay * p.data
        return update


def zero_grad(model):
    model.zero_grad()
