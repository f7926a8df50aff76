"""Trainable parameter containers, Adam, and the learning-rate schedule."""

from dataclasses import dataclass, field
import math

import numpy as np

from ..errors import ContractError, ParameterError


@dataclass(eq=False)
class ParamTensor:
    value: np.ndarray
    grad: np.ndarray = None
    frozen: bool = False

    def __post_init__(self):
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        if self.grad.shape != self.value.shape:
            raise ParameterError(f"grad shape {self.grad.shape} != value shape {self.value.shape}")

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad[...] = 0


@dataclass(eq=False)
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step_count: int = 0
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_param(cls, p, **hyper):
        return cls(np.zeros_like(p.value), np.zeros_like(p.value), **hyper)


def adam_step(p, s, lr=None):
    """Bias-corrected Adam update of ``p`` in place; returns ``(p, s)``."""
    if p.frozen:
        raise ContractError("refusing to update a frozen parameter")
    if s.m.shape != p.value.shape:
        raise ContractError(f"optimizer state {s.m.shape} does not match parameter {p.value.shape}")
    lr = s.lr if lr is None else lr
    s.step_count += 1
    t = s.step_count
    g = p.grad
    s.m *= s.beta1
    s.m += (1 - s.beta1) * g
    s.v *= s.beta2
    s.v += (1 - s.beta2) * (g * g)
    m_hat = s.m / (1 - s.beta1 ** t)
    v_hat = s.v / (1 - s.beta2 ** t)
    p.value -= (lr * m_hat / (np.sqrt(v_hat) + s.eps)).astype(p.value.dtype)
    return p, s


@dataclass
class Adam:
    """Adam over a named collection of parameters, sharing hyperparameters."""

    params: dict
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    states: dict = field(default_factory=dict)

    def __post_init__(self):
        for name, p in self.params.items():
            if not p.frozen:
                self.states[name] = AdamState.for_param(
                    p, lr=self.lr, beta1=self.beta1, beta2=self.beta2, eps=self.eps)

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def step(self, lr=None, names=None):
        """Update every trainable parameter (or only ``names``)."""
        for name in (self.states if names is None else names):
            adam_step(self.params[name], self.states[name], lr=lr)


def lr_at(epoch, total_epochs, warmup_epochs, base_lr):
    """Linear warmup followed by cosine decay, evaluated per epoch."""
    if warmup_epochs >= total_epochs:
        raise ParameterError(f"warmup ({warmup_epochs}) must be shorter than training ({total_epochs})")
    if not 0 <= epoch < total_epochs:
        raise ParameterError(f"epoch {epoch} outside [0, {total_epochs})")
    if epoch < warmup_epochs:
        return base_lr * (epoch + 1) / warmup_epochs
    progress = (epoch - warmup_epochs) / (total_epochs - warmup_epochs)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))
