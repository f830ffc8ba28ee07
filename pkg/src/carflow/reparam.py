"""Condition-aware source/target maps.

``f(x0, y) = sigma0(y) * x0 + mu0(y)`` and ``g(x1, y) = sigma1(y) * x1 + mu1(y)``,
where each of ``mu`` and ``s = log sigma`` is a linear layer on the fixed
sinusoidal class embedding. Which pieces exist depends on the variant:

=============== ============ ============
variant          source map   target map
=============== ============ ============
baseline         identity     identity
source_only      shift        identity
target_only      identity     shift
joint            shift        shift
affine_source    affine       identity
affine_target    identity     affine
source_global    global shift identity
=============== ============ ============

``source_global`` learns one y-independent shift (a bias only), the
unconditional learnable-source control.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

SINGULAR_TOL = 1e-6


class SingularMapError(ArithmeticError):
    """The target scale is too small to invert (collapsed map)."""


class CarVariant(str, Enum):
    baseline = "baseline"
    source_only = "source_only"
    target_only = "target_only"
    joint = "joint"
    affine_source = "affine_source"
    affine_target = "affine_target"
    source_global = "source_global"

    @classmethod
    def parse(cls, v) -> "CarVariant":
        if isinstance(v, cls):
            return v
        try:
            return cls(str(v).replace("-", "_"))
        except ValueError:
            raise ValueError(f"unknown variant {v!r}; choose from {[m.value for m in cls]}") from None

    @property
    def source_kind(self):
        return _KINDS[self][0]

    @property
    def target_kind(self):
        return _KINDS[self][1]

    @property
    def is_affine(self) -> bool:
        return "affine" in (self.source_kind, self.target_kind)


_KINDS = {
    CarVariant.baseline: (None, None),
    CarVariant.source_only: ("shift", None),
    CarVariant.target_only: (None, "shift"),
    CarVariant.joint: ("shift", "shift"),
    CarVariant.affine_source: ("affine", None),
    CarVariant.affine_target: (None, "affine"),
    CarVariant.source_global: ("global", None),
}

# parameter group each map net belongs to
GROUP_OF = {"mu0": "source_shift", "mu1": "target_shift", "s0": "source_scale", "s1": "target_scale"}


def reparam_entries(variant: CarVariant, emb_dim: int, d: int):
    """Layout entries ``(name, shape)`` for the map nets of ``variant``."""
    variant = CarVariant.parse(variant)
    out = []
    for side, kind in (("0", variant.source_kind), ("1", variant.target_kind)):
        if kind in ("shift", "affine"):
            out += [(f"mu{side}_W", (emb_dim, d)), (f"mu{side}_b", (d,))]
        if kind == "global":
            out += [(f"mu{side}_b", (d,))]
        if kind == "affine":
            out += [(f"s{side}_W", (emb_dim, d)), (f"s{side}_b", (d,))]
    return out


@dataclass
class ReparamParams:
    """Map-net weights (views into the model vector, or standalone arrays).

    Absent nets are ``None``; a net with a bias but no weight is a global,
    y-independent offset.
    """

    class_emb: np.ndarray
    dim: int = 1
    mu0_W: np.ndarray | None = None
    mu0_b: np.ndarray | None = None
    mu1_W: np.ndarray | None = None
    mu1_b: np.ndarray | None = None
    s0_W: np.ndarray | None = None
    s0_b: np.ndarray | None = None
    s1_W: np.ndarray | None = None
    s1_b: np.ndarray | None = None

    @classmethod
    def from_arrays(cls, class_emb, arrays: dict, dim: int = 1) -> "ReparamParams":
        fields = {k: arrays[k] for k in arrays if k[:3] in ("mu0", "mu1") or k[:2] in ("s0", "s1")}
        return cls(class_emb=np.asarray(class_emb, dtype=np.float64), dim=dim, **fields)

    @classmethod
    def constant(cls, n_classes=2, emb_dim=8, dim=1, mu0=None, mu1=None, sigma0=None, sigma1=None):
        """Class-independent maps with the given values (weights zero, biases set)."""
        p = cls(class_emb=np.zeros((n_classes, emb_dim)), dim=dim)
        for name, val, log in (("mu0", mu0, False), ("mu1", mu1, False), ("s0", sigma0, True), ("s1", sigma1, True)):
            if val is None:
                continue
            val = np.broadcast_to(np.asarray(val, dtype=np.float64), (dim,))
            setattr(p, f"{name}_W", np.zeros((emb_dim, dim)))
            setattr(p, f"{name}_b", np.log(val) if log else val.copy())
        return p

    def _net(self, name, y, default):
        W, b = getattr(self, f"{name}_W"), getattr(self, f"{name}_b")
        y = np.asarray(y)
        n = y.shape[0] if y.ndim else 1
        if b is None:
            return np.full((n, self.dim), default)
        if W is None:
            return np.broadcast_to(b, (n, self.dim)).copy()
        return self.class_emb[y.reshape(-1)] @ W + b

    def mu0(self, y):
        return self._net("mu0", y, 0.0)

    def mu1(self, y):
        return self._net("mu1", y, 0.0)

    def log_sigma0(self, y):
        return self._net("s0", y, 0.0)

    def log_sigma1(self, y):
        return self._net("s1", y, 0.0)

    def sigma0(self, y):
        return np.exp(self.log_sigma0(y))

    def sigma1(self, y):
        return np.exp(self.log_sigma1(y))

    def per_class(self) -> dict:
        """Current ``mu``/``sigma`` values for every class, keyed ``mu0``, ``sigma0``, ..."""
        k = np.arange(self.class_emb.shape[0])
        out = {}
        if self.mu0_b is not None:
            out["mu0"] = self.mu0(k)
        if self.mu1_b is not None:
            out["mu1"] = self.mu1(k)
        if self.s0_b is not None:
            out["sigma0"] = self.sigma0(k)
        if self.s1_b is not None:
            out["sigma1"] = self.sigma1(k)
        return out


def _as2d(x, dim):
    x = np.asarray(x, dtype=np.float64)
    return x.reshape(-1, dim)


def map_source(variant, params: ReparamParams, x0, y) -> np.ndarray:
    """``z0 = f(x0, y)``; shape ``(n, d)``."""
    kind = CarVariant.parse(variant).source_kind
    x0 = _as2d(x0, params.dim)
    if kind is None:
        return x0.copy()
    if kind == "affine":
        return params.sigma0(y) * x0 + params.mu0(y)
    return x0 + params.mu0(y)


def map_target(variant, params: ReparamParams, x1, y) -> np.ndarray:
    """``z1 = g(x1, y)``; shape ``(n, d)``."""
    kind = CarVariant.parse(variant).target_kind
    x1 = _as2d(x1, params.dim)
    if kind is None:
        return x1.copy()
    if kind == "affine":
        return params.sigma1(y) * x1 + params.mu1(y)
    return x1 + params.mu1(y)


def inverse_target(variant, params: ReparamParams, z1, y) -> np.ndarray:
    """``x1 = g^{-1}(z1, y)``; raises :class:`SingularMapError` if ``sigma1 < 1e-6``."""
    kind = CarVariant.parse(variant).target_kind
    z1 = _as2d(z1, params.dim)
    if kind is None:
        return z1.copy()
    if kind == "affine":
        sig = params.sigma1(y)
        if np.any(sig < SINGULAR_TOL):
            raise SingularMapError(f"target scale {float(sig.min()):.3g} below {SINGULAR_TOL:g}; map is not invertible")
        return (z1 - params.mu1(y)) / sig
    return z1 - params.mu1(y)


def map_backward(variant, params: ReparamParams, x0, x1, y, dz0, dz1) -> dict:
    """Gradients of a scalar w.r.t. the map-net arrays, given ``dL/dz0`` and ``dL/dz1``."""
    variant = CarVariant.parse(variant)
    out = {}
    emb = params.class_emb[np.asarray(y).reshape(-1)]
    for side, kind, x, dz in (("0", variant.source_kind, x0, dz0), ("1", variant.target_kind, x1, dz1)):
        if kind is None:
            continue
        x = _as2d(x, params.dim)
        out[f"mu{side}_b"] = dz.sum(axis=0)
        if kind in ("shift", "affine"):
            out[f"mu{side}_W"] = emb.T @ dz
        if kind == "affine":
            sig = params.sigma0(y) if side == "0" else params.sigma1(y)
            ds = dz * x * sig
            out[f"s{side}_b"] = ds.sum(axis=0)
            out[f"s{side}_W"] = emb.T @ ds
    return out


def shift_residual(mu0, mu1, schedule, t_grid) -> np.ndarray:
    """``beta_t mu0 - alpha_t mu1`` at every grid time, shape ``(len(t_grid),) + shape(mu)``."""
    t_grid = np.asarray(t_grid, dtype=np.float64)
    a, b, _, _ = schedule(t_grid)
    mu0 = np.asarray(mu0, dtype=np.float64)
    mu1 = np.asarray(mu1, dtype=np.float64)
    shape = (-1,) + (1,) * max(mu0.ndim, mu1.ndim)
    return b.reshape(shape) * mu0 - a.reshape(shape) * mu1


def check_shift_equivalence(mu0, mu1, schedule, t_grid, tol: float = 1e-10):
    """Whether shifting the source by ``mu0`` equals shifting the target by ``mu1``.

    The two give the same interpolant only if ``beta_t mu0 = alpha_t mu1`` at
    every ``t``; with ``alpha(0) = beta(1) = 0`` that forces ``mu0 = mu1 = 0``.
    Returns ``(ok, residuals)``.
    """
    t_grid = np.asarray(t_grid, dtype=np.float64)
    if t_grid.ndim != 1 or np.unique(t_grid).size < 2:
        raise ValueError("t_grid needs at least two distinct times")
    if np.any(t_grid <= 0.0) or np.any(t_grid >= 1.0):
        raise ValueError("t_grid must lie strictly inside (0, 1)")
    res = shift_residual(mu0, mu1, schedule, t_grid)
    return bool(np.all(np.abs(res) <= tol)), res
