"""Noise schedules and Gaussian-path interpolation.

A schedule is a pair ``(alpha, beta)`` of monotone functions on [0, 1] with
``alpha(0) = beta(1) = 0`` and ``alpha(1) = beta(0) = 1``. Points on the path
are ``z_t = beta_t z0 + alpha_t z1`` and the target velocity is
``u_t = beta_dot_t z0 + alpha_dot_t z1``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

ScalarFn = Callable[[np.ndarray], np.ndarray]


class ScheduleDomainError(ValueError):
    pass


@dataclass(frozen=True)
class Schedule:
    name: str
    alpha: ScalarFn
    beta: ScalarFn
    alpha_dot: ScalarFn
    beta_dot: ScalarFn

    def __call__(self, t):
        """Return ``(alpha, beta, alpha_dot, beta_dot)`` at ``t`` (scalar or array)."""
        t = check_time(t)
        return self.alpha(t), self.beta(t), self.alpha_dot(t), self.beta_dot(t)


@dataclass(frozen=True)
class PathPoint:
    z_t: np.ndarray
    u_t: np.ndarray
    t: np.ndarray


def check_time(t):
    arr = np.asarray(t, dtype=np.float64)
    if not np.all(np.isfinite(arr)) or np.any(arr < 0.0) or np.any(arr > 1.0):
        raise ScheduleDomainError(f"time must lie in [0, 1], got {t!r}")
    return arr


def _linear_alpha(t):
    return t * 1.0


def _linear_beta(t):
    return 1.0 - t


def _one(t):
    return np.ones_like(t)


def _minus_one(t):
    return -np.ones_like(t)


LINEAR = Schedule("linear", _linear_alpha, _linear_beta, _one, _minus_one)

_REGISTRY = {"linear": LINEAR}


def get_schedule(name: str) -> Schedule:
    try:
        return _REGISTRY[name]
    except KeyError:
        raise ValueError(f"unknown schedule {name!r}; known: {sorted(_REGISTRY)}") from None


def register_schedule(schedule: Schedule) -> None:
    _REGISTRY[schedule.name] = schedule


def eval_schedule(s: Schedule, t):
    return s(t)


def interpolate(s: Schedule, z0, z1, t) -> PathPoint:
    """Interpolant and conditional velocity at time ``t``.

    ``t`` broadcasts against the leading axis of ``z0``/``z1`` when it is a
    1-D array and the latents are 2-D ``(n, d)``.
    """
    z0 = np.asarray(z0, dtype=np.float64)
    z1 = np.asarray(z1, dtype=np.float64)
    if z0.shape != z1.shape:
        raise ValueError(f"endpoint shapes differ: {z0.shape} vs {z1.shape}")
    a, b, ad, bd = s(t)
    if np.ndim(a) == 1 and z0.ndim == 2:
        a, b, ad, bd = (c[:, None] for c in (a, b, ad, bd))
    z_t = b * z0 + a * z1
    u_t = bd * z0 + ad * z1
    return PathPoint(z_t=z_t, u_t=u_t, t=np.asarray(t, dtype=np.float64))


def check_schedule(s: Schedule, n_grid: int = 1001, h: float = 1e-5) -> dict:
    """Boundary, monotonicity and derivative diagnostics on a uniform grid."""
    grid = np.linspace(0.0, 1.0, n_grid)
    a, b, ad, bd = s(grid)
    inner = grid[(grid - h >= 0.0) & (grid + h <= 1.0)]
    fd_a = (s.alpha(inner + h) - s.alpha(inner - h)) / (2 * h)
    fd_b = (s.beta(inner + h) - s.beta(inner - h)) / (2 * h)
    return {
        "boundary": max(abs(a[0]), abs(b[-1]), abs(a[-1] - 1.0), abs(b[0] - 1.0)),
        "alpha_monotone": bool(np.all(np.diff(a) >= 0.0)),
        "beta_monotone": bool(np.all(np.diff(b) <= 0.0)),
        "alpha_dot_err": float(np.max(np.abs(s.alpha_dot(inner) - fd_a))),
        "beta_dot_err": float(np.max(np.abs(s.beta_dot(inner) - fd_b))),
    }
