"""Euler (ODE) and Euler-Maruyama (SDE) samplers in the reparameterised latent space.

Each sample owns a random stream keyed by ``(seed, sample_index)``, so the
output for sample ``i`` does not depend on batch size or chunking.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable

import numpy as np

from .model import CarModel
from .reparam import inverse_target, map_source

SCORE_EPS = 1e-12


class ScoreSingularityError(ZeroDivisionError):
    pass


class NonFiniteStateError(FloatingPointError):
    pass


@dataclass(frozen=True)
class SamplerConfig:
    steps: int = 50
    mode: str = "ode"
    sigma: float | Callable = 0.0
    t_max: float = 1.0 - 1e-3

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.mode not in ("ode", "sde"):
            raise ValueError(f"mode must be 'ode' or 'sde', got {self.mode!r}")
        if self.mode == "sde" and not (0.0 < self.t_max < 1.0):
            raise ValueError("sde mode needs 0 < t_max < 1")

    def sigma_at(self, t: float) -> float:
        s = self.sigma(t) if callable(self.sigma) else self.sigma
        if s < 0:
            raise ValueError("diffusion coefficient must be nonnegative")
        return float(s)


@dataclass
class SampleResult:
    x1: np.ndarray          # (n, d) data-space samples
    trajectory: np.ndarray  # (N + 1, n, d) latent states
    y: np.ndarray
    x0: np.ndarray


class SampleStreams:
    """Per-sample generators derived from ``(seed, index)``."""

    def __init__(self, seed: int):
        self.seed = int(seed)

    def generator(self, index: int) -> np.random.Generator:
        return np.random.default_rng(np.random.SeedSequence(self.seed, spawn_key=(int(index),)))

    def draw(self, indices, n_normals: int) -> np.ndarray:
        """``(len(indices), n_normals)`` standard normals, row ``i`` from stream ``indices[i]``."""
        return np.stack([self.generator(i).standard_normal(n_normals) for i in indices]) if len(indices) else np.empty((0, n_normals))


@lru_cache(maxsize=8)
def _cached_draws(seed, start, n, width):
    # evaluation re-samples the same streams at every checkpoint
    draws = SampleStreams(seed).draw(range(start, start + n), width)
    draws.setflags(write=False)
    return draws


def _source_and_noise(model, y, seed, index_offset, n_noise):
    y = np.asarray(y).reshape(-1)
    d = model.net_spec.data_dim
    draws = _cached_draws(int(seed), int(index_offset), y.shape[0], d + n_noise)
    return y, draws[:, :d].copy(), draws[:, d:]


def _field(model, field):
    return model.velocity if field is None else field


def sample_ode(model: CarModel, y, seed: int, cfg: SamplerConfig = SamplerConfig(),
               field: Callable | None = None, index_offset: int = 0, invert: bool = True) -> SampleResult:
    """``z <- f(x0, y)``, ``N`` Euler steps of ``z += dt v(z, k dt, y)``, then ``x1 = g^{-1}(z, y)``.

    ``invert=False`` skips the last map and returns ``x1 = None``.
    """
    y, x0, _ = _source_and_noise(model, y, seed, index_offset, 0)
    p = model.reparam()
    v = _field(model, field)
    z = map_source(model.variant, p, x0, y)
    n_steps = cfg.steps
    dt = 1.0 / n_steps
    traj = np.empty((n_steps + 1,) + z.shape)
    traj[0] = z
    for k in range(n_steps):
        z = z + dt * v(z, k * dt, y)
        if not np.all(np.isfinite(z)):
            raise NonFiniteStateError(f"non-finite latent state after Euler step {k}")
        traj[k + 1] = z
    x1 = inverse_target(model.variant, p, z, y) if invert else None
    return SampleResult(x1, traj, y, x0)


def marginal_score(schedule, t, z, u, mu0=0.0):
    """Score of the latent marginal implied by velocity ``u`` (Gaussian source ``N(mu0, I)``).

    ``(a u - a' z) / (b^2 a' - a b' b) + mu0 / b``
    """
    a, b, ad, bd = schedule(t)
    den = b * b * ad - a * bd * b
    if np.any(np.abs(den) < SCORE_EPS):
        raise ScoreSingularityError(f"score denominator {float(np.min(np.abs(den))):.3g} vanishes at t={t}")
    return (a * u - ad * z) / den + mu0 / b


def linear_marginal_score(t, z, u, mu0=0.0):
    """The same identity with ``a = t``, ``b = 1 - t`` substituted."""
    return (t * u - z) / (1.0 - t) + mu0 / (1.0 - t)


def sample_sde(model: CarModel, y, seed: int, cfg: SamplerConfig, schedule,
               field: Callable | None = None, index_offset: int = 0) -> SampleResult:
    """Euler-Maruyama on ``dZ = [u + sigma^2/2 s] dt + sigma dW`` up to ``t_max``.

    A step is stochastic only if it ends at or before ``t_max``; the remaining
    steps up to ``t = 1`` are plain drift steps, since the score blows up as
    ``b -> 0``. With ``sigma = 0`` every step is a drift step and the result
    matches :func:`sample_ode` bit for bit.
    """
    if model.variant.source_kind == "affine":
        raise NotImplementedError("the score identity assumes a unit-variance source; affine source maps are not supported")
    n_steps = cfg.steps
    y, x0, noise = _source_and_noise(model, y, seed, index_offset, n_steps * model.net_spec.data_dim)
    noise = noise.reshape(y.shape[0], n_steps, -1)
    p = model.reparam()
    mu0 = p.mu0(y)
    v = _field(model, field)
    z = map_source(model.variant, p, x0, y)
    dt = 1.0 / n_steps
    traj = np.empty((n_steps + 1,) + z.shape)
    traj[0] = z
    for k in range(n_steps):
        t = k * dt
        u = v(z, t, y)
        sig = cfg.sigma_at(t) if (k + 1) * dt <= cfg.t_max else 0.0
        if sig == 0.0:
            z = z + dt * u
        else:
            s = marginal_score(schedule, t, z, u, mu0)
            z = z + dt * (u + 0.5 * sig * sig * s) + sig * np.sqrt(dt) * noise[:, k]
        if not np.all(np.isfinite(z)):
            raise NonFiniteStateError(f"non-finite latent state after step {k}")
        traj[k + 1] = z
    return SampleResult(inverse_target(model.variant, p, z, y), traj, y, x0)


def sample(model, y, seed, cfg: SamplerConfig, schedule, **kw) -> SampleResult:
    if cfg.mode == "ode":
        return sample_ode(model, y, seed, cfg, **kw)
    return sample_sde(model, y, seed, cfg, schedule, **kw)


def write_trajectories(path, res: SampleResult, class_names=None) -> None:
    """JSONL, one record per sample: ``{"y", "z": [N+1 values], "x1"}``."""
    d = res.x1.shape[1]
    with open(path, "w") as fh:
        for i in range(res.x1.shape[0]):
            yi = int(res.y[i])
            z = res.trajectory[:, i, 0] if d == 1 else res.trajectory[:, i, :]
            x1 = float(res.x1[i, 0]) if d == 1 else res.x1[i].tolist()
            rec = {"y": class_names[yi] if class_names else yi, "z": z.tolist(), "x1": x1}
            fh.write(json.dumps(rec) + "\n")
