"""Adam and a plateau-halving learning-rate schedule."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import ContractError, Tensor


@dataclass
class OptimizerState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-7
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


class Adam:
    def __init__(self, params: list[Tensor], lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-7):
        self.params = list(params)
        self.state = OptimizerState(
            lr=lr, beta1=beta1, beta2=beta2, eps=eps,
            m=[np.zeros_like(p.data) for p in self.params],
            v=[np.zeros_like(p.data) for p in self.params],
        )

    @property
    def lr(self) -> float:
        return self.state.lr

    @lr.setter
    def lr(self, value: float) -> None:
        self.state.lr = float(value)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        st = self.state
        for p in self.params:
            if p.grad is None:
                raise ContractError(f"parameter {p.name} has no gradient")
        st.step += 1
        c1 = 1 - st.beta1 ** st.step
        c2 = 1 - st.beta2 ** st.step
        for p, m, v in zip(self.params, st.m, st.v):
            g = p.grad
            m *= st.beta1
            m += (1 - st.beta1) * g
            v *= st.beta2
            v += (1 - st.beta2) * g * g
            update = (st.lr / c1) * m / (np.sqrt(v / c2) + st.eps)
            p.data -= update.astype(p.dtype, copy=False)


class PlateauHalver:
    """Halve the learning rate after ``patience`` epochs without improvement.

    Improvement means the monitored value dropped by at least ``min_delta``.
    """

    def __init__(self, optimizer: Adam, patience: int = 5, factor: float = 0.5, min_delta: float = 1e-4):
        self.optimizer = optimizer
        self.patience = patience
        self.factor = factor
        self.min_delta = min_delta
        self.best = np.inf
        self.bad_epochs = 0

    def update(self, value: float) -> bool:
        """Record an epoch's metric; return True if the rate was halved."""
        if value < self.best - self.min_delta:
            self.best = value
            self.bad_epochs = 0
            return False
        self.bad_epochs += 1
        if self.bad_epochs >= self.patience:
            self.optimizer.lr = self.optimizer.lr * self.factor
            self.bad_epochs = 0
            return True
        return False
