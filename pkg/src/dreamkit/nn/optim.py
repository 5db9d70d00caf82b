"""SGD, Adam and RMSprop updating parameter arrays in place."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from ..errors import NonFiniteError, ValidationError

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8
RMSPROP_RHO = 0.99
RMSPROP_EPS = 1e-8


class Optimizer:
    """Holds moment buffers for a fixed list of parameter arrays.

    ``step`` mutates the arrays in place so networks sharing them see the
    update. ``t`` counts completed steps.
    """

    kind = "base"

    def __init__(self, params: Sequence[np.ndarray], lr: float) -> None:
        if lr < 0:
            raise ValidationError(f"learning rate must be non-negative, got {lr}")
        self.params = list(params)
        self.lr = lr
        self.t = 0

    def step(self, grads: Sequence[np.ndarray]) -> None:
        if len(grads) != len(self.params):
            raise ValidationError("gradient list does not match parameter list")
        for p, g in zip(self.params, grads):
            if p.shape != g.shape:
                raise ValidationError(f"gradient shape {g.shape} != parameter shape {p.shape}")
            if not np.all(np.isfinite(g)):
                raise NonFiniteError("non-finite gradient passed to optimizer")
        self.t += 1
        for i, (p, g) in enumerate(zip(self.params, grads)):
            self._update(i, p, g)

    def _update(self, i: int, p: np.ndarray, g: np.ndarray) -> None:
        raise NotImplementedError

    def state(self) -> dict[str, np.ndarray]:
        return {"t": np.array([float(self.t)])}


class SGD(Optimizer):
    kind = "sgd"

    def _update(self, i, p, g):
        if self.lr:
            p -= self.lr * g


class Adam(Optimizer):
    kind = "adam"

    def __init__(self, params, lr, betas=ADAM_BETAS, eps=ADAM_EPS):
        super().__init__(params, lr)
        self.b1, self.b2 = betas
        self.eps = eps
        self.m = [np.zeros_like(p) for p in self.params]
        self.v = [np.zeros_like(p) for p in self.params]

    def _update(self, i, p, g):
        # in-place forms of m = b1*m + (1-b1)*g etc., same operation order
        m, v = self.m[i], self.v[i]
        m *= self.b1
        m += (1 - self.b1) * g
        v *= self.b2
        v += (1 - self.b2) * g * g
        if not self.lr:
            return
        denom = v / (1 - self.b2 ** self.t)
        np.sqrt(denom, out=denom)
        denom += self.eps
        step = m / (1 - self.b1 ** self.t)
        step *= self.lr
        step /= denom
        p -= step


class RMSprop(Optimizer):
    kind = "rmsprop"

    def __init__(self, params, lr, rho=RMSPROP_RHO, eps=RMSPROP_EPS):
        super().__init__(params, lr)
        self.rho = rho
        self.eps = eps
        self.sq = [np.zeros_like(p) for p in self.params]

    def _update(self, i, p, g):
        self.sq[i] = self.rho * self.sq[i] + (1 - self.rho) * g * g
        if self.lr:
            p -= self.lr * g / (np.sqrt(self.sq[i]) + self.eps)


OPTIMIZERS = {"sgd": SGD, "adam": Adam, "rmsprop": RMSprop}


def make_optimizer(kind: str, params: Sequence[np.ndarray], lr: float) -> Optimizer:
    try:
        return OPTIMIZERS[kind.lower()](params, lr)
    except KeyError:
        raise ValidationError(f"unknown optimizer {kind!r}") from None
