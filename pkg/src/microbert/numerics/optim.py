"""AdamW, global-norm gradient clipping and a reduce-on-plateau LR schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Optional, Sequence

import numpy as np

from .autograd import Tensor


class NonFiniteGradientError(FloatingPointError):
    """An optimizer step was refused because a gradient contains NaN/inf."""


def default_no_decay(name: str) -> bool:
    """Biases and layer-norm parameters are exempt from weight decay."""
    return name.rsplit(".", 1)[-1] in ("bias", "gamma", "beta")


@dataclass
class OptimizerState:
    """Moments and step count shared by every parameter of one optimizer."""

    lr: float = 3e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.05
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adamw_update(
    param: np.ndarray,
    grad: np.ndarray,
    m: np.ndarray,
    v: np.ndarray,
    t: int,
    lr: float,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
    weight_decay: float = 0.0,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """One bias-corrected AdamW update for step number ``t`` (1-based).

    Returns new (param, m, v); the inputs are not modified.
    """
    beta1, beta2 = betas
    dtype = param.dtype
    param = param * dtype.type(1.0 - lr * weight_decay)
    m = beta1 * m + (1.0 - beta1) * grad
    v = beta2 * v + (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1**t)
    v_hat = v / (1.0 - beta2**t)
    param = param - (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(dtype)
    return param.astype(dtype), m.astype(dtype), v.astype(dtype)


@dataclass
class ParamGroup:
    names: list[str]
    lr: float
    weight_decay: float


class AdamW:
    """AdamW over named tensors, with optional per-group learning rates.

    ``groups`` is a sequence of ``(params, lr)`` pairs where ``params`` maps
    names to tensors; with a single mapping all parameters share ``lr``.
    Parameters whose ``.grad`` is ``None`` are skipped entirely for that step.
    """

    def __init__(
        self,
        params: Mapping[str, Tensor] | Sequence[tuple[Mapping[str, Tensor], float]],
        lr: float = 3e-3,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.05,
        no_decay: Callable[[str], bool] = default_no_decay,
    ):
        if lr <= 0:
            raise ValueError(f"learning rate must be positive, got {lr}")
        if isinstance(params, Mapping):
            groups_in = [(params, lr)]
        else:
            groups_in = list(params)
        self.params: dict[str, Tensor] = {}
        self.groups: list[ParamGroup] = []
        for mapping, group_lr in groups_in:
            names = []
            for name, tensor in mapping.items():
                if name in self.params:
                    raise ValueError(f"parameter {name!r} appears in two groups")
                self.params[name] = tensor
                names.append(name)
            self.groups.append(ParamGroup(names, group_lr, weight_decay))
        self.no_decay = no_decay
        self.state = OptimizerState(lr=lr, betas=betas, eps=eps, weight_decay=weight_decay)
        for name, tensor in self.params.items():
            self.state.m[name] = np.zeros_like(tensor.data)
            self.state.v[name] = np.zeros_like(tensor.data)

    @property
    def lr(self) -> float:
        return self.groups[0].lr

    def set_lr(self, lr: float, group: Optional[int] = None) -> None:
        targets = self.groups if group is None else [self.groups[group]]
        for g in targets:
            g.lr = lr
        if group in (None, 0):
            self.state.lr = lr

    def zero_grad(self) -> None:
        for tensor in self.params.values():
            tensor.grad = None

    def step(self) -> None:
        """Apply one update; refuses (state untouched) on any non-finite grad."""
        for name, tensor in self.params.items():
            if tensor.grad is not None and not np.all(np.isfinite(tensor.grad)):
                raise NonFiniteGradientError(f"non-finite gradient for parameter {name!r}")
        st = self.state
        st.t += 1
        for group in self.groups:
            for name in group.names:
                tensor = self.params[name]
                if tensor.grad is None:
                    continue
                wd = 0.0 if self.no_decay(name) else group.weight_decay
                tensor.data, st.m[name], st.v[name] = adamw_update(
                    tensor.data, tensor.grad, st.m[name], st.v[name], st.t,
                    group.lr, st.betas, st.eps, wd,
                )


def global_norm(grads: Iterable[np.ndarray]) -> float:
    total = 0.0
    for g in grads:
        total += float(np.sum(np.square(g, dtype=np.float64)))
    return math.sqrt(total)


def clip_gradients(grads: Sequence[np.ndarray], max_norm: float) -> list[np.ndarray]:
    """Scale all grads by ``max_norm / norm`` when their joint L2 norm exceeds it."""
    if max_norm <= 0:
        raise ValueError(f"max_norm must be positive, got {max_norm}")
    norm = global_norm(grads)
    if norm <= max_norm:
        return list(grads)
    scale = max_norm / norm
    return [(g * scale).astype(g.dtype) for g in grads]


def clip_grad_norm(params: Iterable[Tensor], max_norm: float) -> float:
    """In-place variant over tensors' ``.grad``; returns the pre-clip norm."""
    with_grad = [p for p in params if p.grad is not None]
    grads = [p.grad for p in with_grad]
    norm = global_norm(grads)
    for p, g in zip(with_grad, clip_gradients(grads, max_norm)):
        p.grad = g
    return norm


@dataclass
class PlateauSchedule:
    """Multiply the LR by ``factor`` after ``patience`` epochs without improvement.

    Lower metrics are better.  The LR never drops below ``min_lr``.
    """

    lr: float = 3e-3
    patience: int = 2
    factor: float = 0.5
    min_lr: float = 5e-5
    best: float = math.inf
    bad_epochs: int = 0

    def __post_init__(self):
        if not 0.0 < self.factor < 1.0:
            raise ValueError(f"factor must lie in (0, 1), got {self.factor}")
        if self.min_lr <= 0 or self.lr <= 0:
            raise ValueError("learning rates must be positive")
        if self.patience < 1:
            raise ValueError("patience must be at least 1")
        self.lr = max(self.lr, self.min_lr)

    def step(self, metric: float) -> float:
        """Record one epoch's metric and return the (possibly reduced) LR."""
        if not math.isfinite(metric):
            raise ValueError(f"plateau metric must be finite, got {metric}")
        if metric < self.best:
            self.best = metric
            self.bad_epochs = 0
            return self.lr
        self.bad_epochs += 1
        if self.bad_epochs >= self.patience:
            self.lr = max(self.lr * self.factor, self.min_lr)
            self.bad_epochs = 0
        return self.lr
