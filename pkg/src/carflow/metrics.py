"""Sample-quality and transport metrics."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import DataSpec, sample_conditional
from .model import CarModel
from .reparam import SingularMapError, inverse_target
from .sampler import SamplerConfig, sample_ode


def wasserstein1_1d(a, b) -> float:
    """Exact W1 between two equal-size, equal-weight 1-D samples (sorted matching)."""
    a = np.sort(np.asarray(a, dtype=np.float64).ravel())
    b = np.sort(np.asarray(b, dtype=np.float64).ravel())
    if a.size == 0 or b.size == 0:
        raise ValueError("W1 of an empty sample is undefined")
    if a.size != b.size:
        raise ValueError(f"sample sizes differ ({a.size} vs {b.size}); resample to match")
    return float(np.mean(np.abs(a - b)))


def path_lengths(traj) -> np.ndarray:
    """Per-trajectory polyline length; ``traj`` is ``(steps + 1, n, d)`` or ``(steps + 1, n)``."""
    traj = np.asarray(traj, dtype=np.float64)
    if traj.shape[0] < 2:
        raise ValueError("a trajectory needs at least two points")
    if traj.ndim == 2:
        traj = traj[:, :, None]
    return np.linalg.norm(np.diff(traj, axis=0), axis=2).sum(axis=0)


def displacements(traj) -> np.ndarray:
    traj = np.asarray(traj, dtype=np.float64)
    if traj.ndim == 2:
        traj = traj[:, :, None]
    return np.linalg.norm(traj[-1] - traj[0], axis=1)


def mean_2se(x):
    """Mean and twice its standard error."""
    x = np.asarray(x, dtype=np.float64)
    se = x.std(ddof=1) / np.sqrt(x.size) if x.size > 1 else 0.0
    return float(x.mean()), float(2.0 * se)


def trajectory_length(traj):
    """``(mean, 2 * stderr)`` of the integrated path length."""
    return mean_2se(path_lengths(traj))


@dataclass
class MetricsRecord:
    step: int
    w1: dict
    length: float
    length_2se: float
    displacement: float
    loss_ema: float = float("nan")
    maps: dict = field(default_factory=dict)
    collapse_gap: float = float("nan")

    def __post_init__(self):
        if any(v < 0 for v in self.w1.values() if not np.isnan(v)) or self.length < 0:
            raise ValueError("W1 and length are nonnegative")


def eval_checkpoint(model: CarModel, data_spec: DataSpec, n_samples: int, seed: int,
                    cfg: SamplerConfig = SamplerConfig(), step: int = 0, loss_ema=float("nan")) -> MetricsRecord:
    """Sample ``n_samples`` per class with the Euler ODE and compare to fresh ground truth.

    Sampling streams and ground-truth draws both derive from ``seed``, so
    every checkpoint of a run is scored on the same noise. A collapsed target
    map cannot be inverted; W1 is NaN then.
    """
    if n_samples < 1000:
        raise ValueError("use at least 1,000 samples per class")
    K = data_spec.n_classes
    y = np.repeat(np.arange(K), n_samples)
    res = sample_ode(model, y, seed, cfg, invert=False)
    try:
        x1 = inverse_target(model.variant, model.reparam(), res.trajectory[-1], y)
    except SingularMapError:
        x1 = None
    gt_rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(2**32,)))
    w1 = {}
    for k in range(K):
        gt = sample_conditional(data_spec, k, n_samples, gt_rng)
        # coordinatewise marginals when d > 1
        w1[data_spec.class_name(k)] = float("nan") if x1 is None else float(
            np.mean([wasserstein1_1d(x1[y == k, j], gt[:, j]) for j in range(data_spec.dim)]))
    lm, l2 = trajectory_length(res.trajectory)
    maps = {name: val[:, 0].tolist() for name, val in model.reparam().per_class().items()}
    return MetricsRecord(step=step, w1=w1, length=lm, length_2se=l2,
                         displacement=float(displacements(res.trajectory).mean()),
                         loss_ema=loss_ema, maps=maps)
