"""Optimizers, learning-rate schedules and early stopping."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable

import torch
from torch import Tensor, nn

from .errors import ConfigInvalid, NonFiniteGradient, ShapeMismatch, StepOutOfRange


@dataclass
class ScheduleConfig:
    """Three-stage (warmup, hold, cosine decay) or warmup + cosine schedule.

    ``kind="three_stage"`` uses the phase fractions of ``total_steps``;
    ``kind="warmup_cosine"`` warms up for ``warmup_steps`` and then decays
    to zero at ``total_steps``.
    """

    peak_lr: float
    total_steps: int
    kind: str = "three_stage"
    warmup: float = 0.1
    hold: float = 0.4
    decay: float = 0.5
    warmup_steps: int = 0

    def __post_init__(self):
        if self.total_steps < 1:
            raise ConfigInvalid("total_steps must be >= 1")
        if self.kind == "three_stage":
            if min(self.warmup, self.hold, self.decay) < 0 or abs(
                self.warmup + self.hold + self.decay - 1.0
            ) > 1e-9:
                raise ConfigInvalid("schedule phase fractions must sum to 1")
        elif self.kind == "warmup_cosine":
            if not 0 <= self.warmup_steps <= self.total_steps:
                raise ConfigInvalid("warmup_steps must lie in [0, total_steps]")
        else:
            raise ConfigInvalid(f"unknown schedule kind {self.kind!r}")


def lr_at(step: float, cfg: ScheduleConfig) -> float:
    T = cfg.total_steps
    if not 0 <= step <= T:
        raise StepOutOfRange(f"step {step} outside [0, {T}]")
    eta = cfg.peak_lr
    if cfg.kind == "warmup_cosine":
        w = cfg.warmup_steps
        if step < w:
            return eta * step / w
        span = T - w
        return eta * 0.5 * (1.0 + math.cos(math.pi * (step - w) / span)) if span else eta
    w_end = cfg.warmup * T
    h_end = (cfg.warmup + cfg.hold) * T
    if step < w_end:
        return eta * step / w_end
    if step <= h_end:
        return eta
    return eta * 0.5 * (1.0 + math.cos(math.pi * (step - h_end) / (cfg.decay * T)))


def _named(params) -> dict[str, nn.Parameter]:
    if isinstance(params, nn.Module):
        params = params.named_parameters()
    return {n: p for n, p in params if p.requires_grad}


class _Optimizer:
    def __init__(self, params: nn.Module | Iterable[tuple[str, nn.Parameter]]):
        self.params = _named(params)
        self.steps = 0

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def _grads(self):
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            if g.shape != p.shape:
                raise ShapeMismatch(f"gradient for {name} has shape {tuple(g.shape)}")
            if not torch.isfinite(g).all():
                raise NonFiniteGradient(f"non-finite gradient for {name}")
            yield name, p, g

    def state_tensors(self) -> dict[str, Tensor]:
        raise NotImplementedError

    def load_state_tensors(self, tensors: dict[str, Tensor]) -> None:
        raise NotImplementedError


class Adam(_Optimizer):
    def __init__(self, params, betas=(0.9, 0.999), eps: float = 1e-8):
        super().__init__(params)
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.m = {n: torch.zeros_like(p) for n, p in self.params.items()}
        self.v = {n: torch.zeros_like(p) for n, p in self.params.items()}

    @torch.no_grad()
    def step(self, lr: float) -> None:
        if lr < 0:
            raise ValueError("learning rate must be non-negative")
        self.steps += 1
        t = self.steps
        c1 = 1.0 - self.beta1**t
        c2 = 1.0 - self.beta2**t
        for name, p, g in self._grads():
            m, v = self.m[name], self.v[name]
            m.mul_(self.beta1).add_(g, alpha=1.0 - self.beta1)
            v.mul_(self.beta2).addcmul_(g, g, value=1.0 - self.beta2)
            denom = (v / c2).sqrt_().add_(self.eps)
            p.addcdiv_(m, denom, value=-lr / c1)

    def state_tensors(self) -> dict[str, Tensor]:
        out = {"optim.steps": torch.tensor([float(self.steps)])}
        out.update({f"optim.m.{n}": t for n, t in self.m.items()})
        out.update({f"optim.v.{n}": t for n, t in self.v.items()})
        return out

    def load_state_tensors(self, tensors: dict[str, Tensor]) -> None:
        self.steps = int(tensors["optim.steps"].item())
        for n in self.params:
            self.m[n].copy_(tensors[f"optim.m.{n}"])
            self.v[n].copy_(tensors[f"optim.v.{n}"])


class SGDMomentum(_Optimizer):
    """v <- mu * v + g;  w <- w - lr * v."""

    def __init__(self, params, momentum: float = 0.9):
        super().__init__(params)
        self.momentum = momentum
        self.velocity = {n: torch.zeros_like(p) for n, p in self.params.items()}

    @torch.no_grad()
    def step(self, lr: float) -> None:
        if lr < 0:
            raise ValueError("learning rate must be non-negative")
        self.steps += 1
        for name, p, g in self._grads():
            v = self.velocity[name]
            v.mul_(self.momentum).add_(g)
            p.add_(v, alpha=-lr)

    def state_tensors(self) -> dict[str, Tensor]:
        out = {"optim.steps": torch.tensor([float(self.steps)])}
        out.update({f"optim.velocity.{n}": t for n, t in self.velocity.items()})
        return out

    def load_state_tensors(self, tensors: dict[str, Tensor]) -> None:
        self.steps = int(tensors["optim.steps"].item())
        for n in self.params:
            self.velocity[n].copy_(tensors[f"optim.velocity.{n}"])


class EarlyStopping:
    """Stop once ``patience`` consecutive epochs bring no new strict minimum."""

    def __init__(self, patience: int = 6):
        self.patience = patience
        self.best = math.inf
        self.best_epoch = -1
        self.since_best = 0
        self.epoch = -1

    def update(self, loss: float) -> bool:
        """Record one epoch's validation loss; return True when training should stop."""
        self.epoch += 1
        if loss < self.best:
            self.best, self.best_epoch, self.since_best = loss, self.epoch, 0
        else:
            self.since_best += 1
        return self.since_best >= self.patience

    @property
    def improved(self) -> bool:
        return self.since_best == 0
