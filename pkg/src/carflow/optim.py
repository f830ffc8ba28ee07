"""AdamW over named parameter groups of one flat vector."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class NonFiniteGradientError(FloatingPointError):
    pass


@dataclass
class ParamGroup:
    name: str
    index: np.ndarray
    learning_rate: float
    weight_decay: float = 0.0

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ValueError(f"group {self.name}: learning rate must be >= 0")
        if not self.weight_decay >= 0:
            raise ValueError(f"group {self.name}: weight decay must be >= 0")


@dataclass
class AdamWState:
    m: np.ndarray
    v: np.ndarray
    step_count: int = 0
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8

    @classmethod
    def zeros(cls, n, beta1=0.9, beta2=0.95, eps=1e-8) -> "AdamWState":
        if not (0 < beta1 < 1 and 0 < beta2 < 1):
            raise ValueError("betas must lie in (0, 1)")
        return cls(np.zeros(n), np.zeros(n), 0, beta1, beta2, eps)


@dataclass
class AdamW:
    groups: list
    state: AdamWState
    _lr: np.ndarray = field(init=False, repr=False)
    _wd: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        n = self.state.m.shape[0]
        owner = np.full(n, -1)
        for k, g in enumerate(self.groups):
            if np.any(owner[g.index] >= 0):
                raise ValueError(f"group {g.name} overlaps another group")
            owner[g.index] = k
        if np.any(owner < 0):
            raise ValueError("every parameter must belong to exactly one group")
        self._owner = owner
        self.refresh()

    def refresh(self):
        """Rebuild the per-element rate vectors after editing group settings."""
        self._lr = np.array([self.groups[k].learning_rate for k in self._owner])
        self._wd = np.array([self.groups[k].weight_decay for k in self._owner])

    def group(self, name) -> ParamGroup:
        for g in self.groups:
            if g.name == name:
                return g
        raise KeyError(name)

    def step(self, params: np.ndarray, grad: np.ndarray) -> None:
        """In-place update of ``params`` (and the moments)."""
        if grad.shape != params.shape:
            raise ValueError("gradient and parameter shapes differ")
        if not np.all(np.isfinite(grad)):
            bad = [g.name for g in self.groups if not np.all(np.isfinite(grad[g.index]))]
            raise NonFiniteGradientError(f"non-finite gradient in group(s) {', '.join(bad)}")
        s = self.state
        s.step_count += 1
        s.m *= s.beta1
        s.m += (1.0 - s.beta1) * grad
        s.v *= s.beta2
        s.v += (1.0 - s.beta2) * grad * grad
        mhat = s.m / (1.0 - s.beta1 ** s.step_count)
        vhat = s.v / (1.0 - s.beta2 ** s.step_count)
        params -= self._lr * self._wd * params
        params -= self._lr * mhat / (np.sqrt(vhat) + s.eps)
