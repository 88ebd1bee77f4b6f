"""Adam with bias correction, in a functional form plus a thin stateful wrapper."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor
from .errors import DimensionError


@dataclass
class AdamState:
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def zeros_like(cls, params: list[np.ndarray]) -> "AdamState":
        return cls(0, [np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


def adam_step(params: list[np.ndarray], grads: list[np.ndarray | None], state: AdamState,
              lr: float | list[float], beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """Update ``params`` and ``state`` in place. A ``None`` gradient counts as zero.

    ``lr`` is one rate for every parameter or a list with one rate per parameter.
    """
    lrs = [lr] * len(params) if np.isscalar(lr) else list(lr)
    if len(lrs) != len(params):
        raise DimensionError(f"{len(lrs)} learning rates for {len(params)} parameters")
    if len(state.m) != len(params) or len(state.v) != len(params):
        raise DimensionError(f"optimizer state holds {len(state.m)} slots for {len(params)} parameters")
    for p, m in zip(params, state.m):
        if p.shape != m.shape:
            raise DimensionError(f"optimizer state shape {m.shape} does not match parameter {p.shape}")
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for p, g, m, v, rate in zip(params, grads, state.m, state.v, lrs):
        if g is None:
            g = np.zeros_like(p)
        if g.shape != p.shape:
            raise DimensionError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * (g * g)
        m_hat = m / c1
        v_hat = v / c2
        p -= (rate * m_hat / (np.sqrt(v_hat) + eps)).astype(p.dtype)


class Adam:
    def __init__(self, params: list[Tensor], lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8, overrides: dict[int, float] | None = None):
        self.params = list(params)
        self.lr = lr
        # id(param) -> rate for parameters that do not use the base rate
        self.overrides = dict(overrides or {})
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.state = AdamState.zeros_like([p.data for p in self.params])

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        rates = [self.overrides.get(id(p), self.lr) for p in self.params]
        adam_step([p.data for p in self.params], [p.grad for p in self.params], self.state,
                  rates, self.beta1, self.beta2, self.eps)
