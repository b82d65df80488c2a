"""AdamW and momentum SGD over named parameters, plus a milestone schedule."""

from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np

from .nn import Parameter


class MissingGradientError(RuntimeError):
    pass


class MultiStepSchedule:
    """lr = base_lr * gamma ** (number of milestones <= epoch)."""

    def __init__(self, base_lr: float, milestones: Sequence[int] = (), gamma: float = 0.1):
        self.base_lr = float(base_lr)
        self.milestones = sorted(int(m) for m in milestones)
        self.gamma = gamma

    def lr_at(self, epoch: int) -> float:
        passed = 0
        for m in self.milestones:
            if epoch >= m:
                passed += 1
        return self.base_lr * self.gamma**passed


class Optimizer:
    def __init__(
        self,
        named_params: Iterable[tuple[str, Parameter]],
        lr: float,
        weight_decay: float = 0.0,
        lr_mult: dict[str, float] | None = None,
    ):
        self.named_params = list(named_params)
        names = [n for n, _ in self.named_params]
        if len(set(names)) != len(names):
            raise ValueError("parameter names must be unique")
        # per-parameter multiplier on the base lr, matched by name prefix
        lr_mult = lr_mult or {}
        self.mults = [next((v for k, v in lr_mult.items() if n.startswith(k)), 1.0) for n in names]
        self.lr = float(lr)
        self.weight_decay = float(weight_decay)
        self.step_count = 0

    def zero_grad(self) -> None:
        for _, p in self.named_params:
            p.grad = None

    def _grads(self) -> list[np.ndarray]:
        grads = []
        for name, p in self.named_params:
            if p.grad is None:
                raise MissingGradientError(f"parameter {name!r} has no gradient")
            grads.append(p.grad)
        return grads

    def step(self) -> None:
        raise NotImplementedError


class AdamW(Optimizer):
    """Adam with decoupled weight decay: p <- p - lr*wd*p - lr*mhat/(sqrt(vhat)+eps)."""

    def __init__(self, named_params, lr=1e-4, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.01, lr_mult=None):
        super().__init__(named_params, lr, weight_decay, lr_mult)
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.m = [np.zeros_like(p.data) for _, p in self.named_params]
        self.v = [np.zeros_like(p.data) for _, p in self.named_params]

    def step(self) -> None:
        grads = self._grads()
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1**t
        c2 = 1.0 - self.beta2**t
        for (_, p), g, m, v, mult in zip(self.named_params, grads, self.m, self.v, self.mults):
            lr = self.lr * mult
            if self.weight_decay:
                p.data *= 1.0 - lr * self.weight_decay
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


class SGD(Optimizer):
    """Heavy-ball momentum with coupled L2 weight decay."""

    def __init__(self, named_params, lr=0.01, momentum=0.9, weight_decay=0.0, lr_mult=None):
        super().__init__(named_params, lr, weight_decay, lr_mult)
        self.momentum = momentum
        self.buf = [np.zeros_like(p.data) for _, p in self.named_params]

    def step(self) -> None:
        grads = self._grads()
        self.step_count += 1
        for (_, p), g, b, mult in zip(self.named_params, grads, self.buf, self.mults):
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            b *= self.momentum
            b += g
            p.data -= self.lr * mult * b
