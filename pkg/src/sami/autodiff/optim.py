"""AdamW with decoupled weight decay, and warmup + decay learning-rate schedules."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..errors import ConfigError, ContractError


@dataclass
class OptimizerState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.0
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adamw_step(params, state, lr=None, skip_missing=False):
    """One AdamW update over ``params`` (a list of ``(name, Tensor)``).

    Decay is applied to the weights first (``w -= lr * wd * w``) and the
    bias-corrected Adam step second, so with ``weight_decay=0`` this is Adam.
    """
    lr = state.lr if lr is None else lr
    for name, p in params:
        if p.grad is None and not skip_missing:
            raise ContractError(f"parameter '{name}' has no gradient")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in params:
        g = p.grad
        if g is None:
            continue
        if g.shape != p.shape:
            raise ContractError(f"gradient for '{name}' has shape {g.shape}, parameter {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        else:
            v = state.v[name]
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        state.m[name] = m
        state.v[name] = v
        w = p.data
        if state.weight_decay:
            w = w - lr * state.weight_decay * w
        mhat = m / c1
        vhat = v / c2
        p.data = (w - lr * mhat / (np.sqrt(vhat) + state.eps)).astype(p.dtype, copy=False)


class AdamW:
    """Thin stateful wrapper binding a parameter list to an :class:`OptimizerState`."""

    def __init__(self, named_params, lr=1e-3, betas=(0.9, 0.999), weight_decay=0.0, eps=1e-8,
                 skip_missing=False):
        self.params = list(named_params)
        self.state = OptimizerState(lr=lr, beta1=betas[0], beta2=betas[1],
                                    weight_decay=weight_decay, eps=eps)
        self.skip_missing = skip_missing

    def zero_grad(self):
        for _, p in self.params:
            p.grad = None

    def step(self, lr=None):
        adamw_step(self.params, self.state, lr=lr, skip_missing=self.skip_missing)

    def grad_norm(self):
        sq = sum(float(np.sum(p.grad.astype(np.float64) ** 2))
                 for _, p in self.params if p.grad is not None)
        return math.sqrt(sq)

    def state_tensors(self):
        table = {}
        for name, _ in self.params:
            if name in self.state.m:
                table[f"opt.m.{name}"] = self.state.m[name]
                table[f"opt.v.{name}"] = self.state.v[name]
        return table

    def load_state_tensors(self, table, step):
        for name, _ in self.params:
            if f"opt.m.{name}" in table:
                self.state.m[name] = np.array(table[f"opt.m.{name}"])
                self.state.v[name] = np.array(table[f"opt.v.{name}"])
        self.state.step = int(step)


@dataclass
class ScheduleConfig:
    """Linear warmup to ``base_lr`` then decay to ``floor``.

    ``kind`` selects the decay shape: ``cosine`` (pretraining) or ``linear``
    (promptable-segmentation finetuning).
    """

    base_lr: float
    warmup_steps: int
    total_steps: int
    floor: float = 0.0
    kind: str = "cosine"

    def __post_init__(self):
        if self.total_steps < 1:
            raise ConfigError("total_steps must be positive")
        if not 0 <= self.warmup_steps <= self.total_steps:
            raise ConfigError(
                f"warmup_steps={self.warmup_steps} must lie in [0, total_steps={self.total_steps}]")
        if self.kind not in ("cosine", "linear"):
            raise ConfigError(f"unknown schedule kind '{self.kind}'")


def lr_at(step, cfg):
    """Learning rate at ``step``; steps past ``total_steps`` are clamped to ``floor``."""
    if step < 0:
        raise ConfigError("step must be non-negative")
    if step >= cfg.total_steps:
        return cfg.floor
    if step < cfg.warmup_steps:
        return cfg.base_lr * step / cfg.warmup_steps
    span = cfg.total_steps - cfg.warmup_steps
    t = (step - cfg.warmup_steps) / span
    if cfg.kind == "cosine":
        frac = 0.5 * (1.0 + math.cos(math.pi * t))
    else:
        frac = 1.0 - t
    return cfg.floor + (cfg.base_lr - cfg.floor) * frac
