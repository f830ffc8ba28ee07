"""Synthetic conditional targets: per-class isotropic Gaussian mixtures."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class ClassIndexError(ValueError):
    pass


@dataclass(frozen=True)
class Component:
    mean: tuple
    std: float
    weight: float = 1.0


@dataclass(frozen=True)
class DataSpec:
    """Class ``k`` is a mixture of isotropic Gaussians ``classes[k]``."""

    classes: tuple
    dim: int = 1
    prior: tuple | None = None
    names: tuple = field(default=())

    def __post_init__(self):
        if len(self.classes) < 1:
            raise ValueError("need at least one class")
        for comps in self.classes:
            if not comps:
                raise ValueError("every class needs at least one component")
            for c in comps:
                if not c.std > 0:
                    raise ValueError(f"component std must be > 0, got {c.std}")
                if len(c.mean) != self.dim:
                    raise ValueError(f"component mean {c.mean} does not have dim {self.dim}")
                if not c.weight > 0:
                    raise ValueError("component weights must be > 0")
        if self.prior is not None:
            p = np.asarray(self.prior, dtype=np.float64)
            if p.shape != (len(self.classes),) or np.any(p < 0) or not np.isclose(p.sum(), 1.0):
                raise ValueError(f"bad class prior {self.prior}")

    @property
    def n_classes(self) -> int:
        return len(self.classes)

    def class_name(self, k: int) -> str:
        if self.names:
            return self.names[k]
        return chr(ord("A") + k) if k < 26 else str(k)

    def to_dict(self) -> dict:
        return {
            "dim": self.dim,
            "prior": None if self.prior is None else list(self.prior),
            "names": list(self.names),
            "classes": [
                [{"mean": list(c.mean), "std": c.std, "weight": c.weight} for c in comps]
                for comps in self.classes
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DataSpec":
        classes = tuple(
            tuple(Component(tuple(float(m) for m in c["mean"]), float(c["std"]), float(c.get("weight", 1.0))) for c in comps)
            for comps in d["classes"]
        )
        prior = d.get("prior")
        return cls(classes=classes, dim=int(d.get("dim", 1)),
                   prior=None if prior is None else tuple(prior), names=tuple(d.get("names", ())))


def two_class_1d(mean: float = 1.5, std: float = 0.2) -> DataSpec:
    """Class A ~ N(-mean, std^2), class B ~ N(+mean, std^2)."""
    return DataSpec(classes=((Component((-mean,), std),), (Component((mean,), std),)), names=("A", "B"))


def four_corners_2d(std: float = 0.1) -> DataSpec:
    corners = ((-1.0, -1.0), (-1.0, 1.0), (1.0, -1.0), (1.0, 1.0))
    return DataSpec(classes=tuple((Component(c, std),) for c in corners), dim=2)


def sample_labels(spec: DataSpec, n: int, rng: np.random.Generator) -> np.ndarray:
    if spec.prior is None:
        return rng.integers(0, spec.n_classes, size=n)
    return rng.choice(spec.n_classes, size=n, p=np.asarray(spec.prior))


def _check_class(spec: DataSpec, y) -> None:
    y = np.asarray(y)
    if y.size and (np.any(y < 0) or np.any(y >= spec.n_classes) or not np.issubdtype(y.dtype, np.integer)):
        raise ClassIndexError(f"class index out of range for {spec.n_classes} classes")


def sample_conditional(spec: DataSpec, y: int, n: int, rng: np.random.Generator) -> np.ndarray:
    """``n`` draws from class ``y``; shape ``(n, dim)``."""
    _check_class(spec, np.asarray([y]))
    return sample_given_labels(spec, np.full(n, int(y)), rng)


def sample_given_labels(spec: DataSpec, y: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """One draw per entry of ``y``; shape ``(len(y), dim)``."""
    y = np.asarray(y)
    _check_class(spec, y)
    n = y.shape[0]
    eps = rng.standard_normal((n, spec.dim))
    means = np.empty((n, spec.dim))
    stds = np.empty(n)
    single = all(len(comps) == 1 for comps in spec.classes)
    if single:
        table_m = np.array([comps[0].mean for comps in spec.classes], dtype=np.float64)
        table_s = np.array([comps[0].std for comps in spec.classes], dtype=np.float64)
        means[:] = table_m[y]
        stds[:] = table_s[y]
    else:
        u = rng.random(n)
        for k, comps in enumerate(spec.classes):
            idx = np.nonzero(y == k)[0]
            w = np.cumsum([c.weight for c in comps])
            pick = np.searchsorted(w / w[-1], u[idx], side="right")
            pick = np.minimum(pick, len(comps) - 1)
            means[idx] = np.array([c.mean for c in comps])[pick]
            stds[idx] = np.array([c.std for c in comps])[pick]
    return means + stds[:, None] * eps
