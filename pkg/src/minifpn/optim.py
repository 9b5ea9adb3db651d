"""Stochastic gradient descent with classical momentum."""

from __future__ import annotations

import numpy as np

from .engine import Parameter
from .errors import ContractError


class SGD:
    """Momentum SGD over a fixed list of named parameters.

    Update rule per step: v <- momentum * v + grad, p <- p - lr * v.
    """

    def __init__(self, params, lr: float, momentum: float = 0.9):
        self.params = list(params)
        names = [p.name for p in self.params]
        if len(set(names)) != len(names):
            raise ContractError("duplicate parameter names passed to SGD")
        self.lr = float(lr)
        self.momentum = float(momentum)
        self.velocity = {p.name: np.zeros_like(p.data) for p in self.params}

    def step(self) -> None:
        """Apply one update; every parameter must hold a gradient."""
        for p in self.params:
            if p.grad is None:
                raise ContractError(f"parameter {p.name!r} has no gradient; "
                                    "was it part of the loss graph?")
            v = self.velocity[p.name]
            v *= self.momentum
            v += p.grad
            p.data -= self.lr * v

    def zero_grad(self) -> None:
        """Clear gradients on all parameters before the next backward pass."""
        for p in self.params:
            p.grad = None
