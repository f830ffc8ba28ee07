"""Zero-cost collapsed velocity fields and collapse diagnostics.

Every degenerate map pair admits an exact affine minimiser
``v*(z, t, y) = gamma(t, y) z + eta(t, y)`` of the flow-matching loss. For a
schedule ``(a, b)`` the coefficients are

==================== ==================== ==========================
case                  gamma                eta
==================== ==================== ==========================
constant_source       a'/a                 mu0 (b' - gamma b)
constant_target       b'/b                 mu1 (a' - gamma a)
unbounded_source      b'/b                 0
unbounded_target      a'/a                 0
proportional          0                    b' mu0 + a' k mu0    (z0 = mu0, z1 = k mu0)
proportional (ratio)  (b'k + a')/(b k + a) 0                    (z0 = k z1)
==================== ==================== ==========================

Under the linear schedule these reduce to ``1/t``, ``-1/(1-t)`` and
``(k-1) mu0``. Unbounded cases are handled in the normalised limit: dividing
the identity by the diverging scale leaves the bounded endpoint at 0.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Callable

import numpy as np

from .model import CarModel
from .objective import TrainingBatch, path_targets
from .data import DataSpec, sample_given_labels, sample_labels

T_WINDOW = (0.01, 0.99)


class CollapsePoleError(ZeroDivisionError):
    pass


class CollapseKind(str, Enum):
    constant_source = "constant_source"
    constant_target = "constant_target"
    unbounded_source = "unbounded_source"
    unbounded_target = "unbounded_target"
    proportional = "proportional"

    @classmethod
    def parse(cls, v) -> "CollapseKind":
        if isinstance(v, cls):
            return v
        aliases = {"i": "constant_source", "ii": "constant_target", "iii": "unbounded_source",
                   "iv": "unbounded_target", "v": "proportional"}
        v = str(v).strip().lower()
        return cls(aliases.get(v, v))


@dataclass(frozen=True)
class CollapseCase:
    """A collapse pattern and its per-class parameters (scalars or length-K arrays)."""

    kind: CollapseKind
    mu0: object = 0.0
    mu1: object = 0.0
    k: object = 1.0
    ratio_form: bool = False

    def __post_init__(self):
        object.__setattr__(self, "kind", CollapseKind.parse(self.kind))
        for name in ("mu0", "mu1", "k"):
            if not np.all(np.isfinite(np.asarray(getattr(self, name), dtype=np.float64))):
                raise ValueError(f"collapse parameter {name} must be finite")

    def param(self, name, y):
        """Parameter ``name`` for each label in ``y`` as a column ``(n, 1)``."""
        val = np.asarray(getattr(self, name), dtype=np.float64)
        y = np.asarray(y).reshape(-1)
        if val.ndim == 0:
            return np.full((y.shape[0], 1), float(val))
        return val[y].reshape(-1, 1)


@dataclass
class AffineField:
    gamma: Callable
    eta: Callable
    case: CollapseCase | None = field(default=None, repr=False)

    def __call__(self, z, t, y):
        z = np.asarray(z, dtype=np.float64)
        z2 = z.reshape(z.shape[0], -1) if z.ndim else z.reshape(1, 1)
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), (z2.shape[0],))[:, None]
        y = np.broadcast_to(np.asarray(y), (z2.shape[0],))
        return (self.gamma(t, y) * z2 + self.eta(t, y)).reshape(z.shape)


def _coeffs(schedule, t):
    t = np.asarray(t, dtype=np.float64)
    if np.any(t < 0.0) or np.any(t > 1.0):
        raise ValueError("time must lie in [0, 1]")
    return schedule.alpha(t), schedule.beta(t), schedule.alpha_dot(t), schedule.beta_dot(t)


def _safe_div(num, den, what):
    if np.any(den == 0.0):
        raise CollapsePoleError(f"{what} has a pole here; stay inside the open time window")
    return num / den


def collapsed_field(case: CollapseCase, schedule) -> AffineField:
    """The zero-cost affine velocity of ``case`` (closed forms for the linear schedule)."""
    kind = case.kind
    linear = schedule.name == "linear"

    def zeros(t, y):
        return np.zeros_like(np.asarray(t, dtype=np.float64))

    if kind in (CollapseKind.constant_source, CollapseKind.unbounded_target):
        def gamma(t, y):
            if linear:
                return _safe_div(1.0, t, "gamma = 1/t")
            a, b, ad, bd = _coeffs(schedule, t)
            return _safe_div(ad, a, "gamma = a'/a")
        if kind is CollapseKind.unbounded_target:
            return AffineField(gamma, zeros, case)

        def eta(t, y):
            mu0 = case.param("mu0", y)
            if linear:
                return _safe_div(-mu0, t, "eta = -mu0/t")
            a, b, ad, bd = _coeffs(schedule, t)
            return mu0 * (bd - gamma(t, y) * b)
        return AffineField(gamma, eta, case)

    if kind in (CollapseKind.constant_target, CollapseKind.unbounded_source):
        def gamma(t, y):
            if linear:
                return _safe_div(-1.0, 1.0 - t, "gamma = -1/(1-t)")
            a, b, ad, bd = _coeffs(schedule, t)
            return _safe_div(bd, b, "gamma = b'/b")
        if kind is CollapseKind.unbounded_source:
            return AffineField(gamma, zeros, case)

        def eta(t, y):
            mu1 = case.param("mu1", y)
            if linear:
                return _safe_div(mu1, 1.0 - t, "eta = mu1/(1-t)")
            a, b, ad, bd = _coeffs(schedule, t)
            return mu1 * (ad - gamma(t, y) * a)
        return AffineField(gamma, eta, case)

    # proportional
    if case.ratio_form:
        def gamma(t, y):
            a, b, ad, bd = _coeffs(schedule, t)
            k = case.param("k", y)
            return _safe_div(bd * k + ad, b * k + a, "gamma = (b'k + a')/(bk + a)")
        return AffineField(gamma, zeros, case)

    def eta(t, y):
        mu0, k = case.param("mu0", y), case.param("k", y)
        if linear:
            return (k - 1.0) * mu0 + 0.0 * t
        a, b, ad, bd = _coeffs(schedule, t)
        return bd * mu0 + ad * k * mu0
    return AffineField(zeros, eta, case)


def manifold_endpoints(case: CollapseCase, y, rng: np.random.Generator, d: int = 1, scale: float = 2.0):
    """Random ``(z0, z1)`` on the degenerate manifold of ``case``."""
    y = np.asarray(y).reshape(-1)
    n = y.shape[0]
    free0 = scale * rng.standard_normal((n, d))
    free1 = scale * rng.standard_normal((n, d))
    kind = case.kind
    if kind is CollapseKind.constant_source:
        return np.broadcast_to(case.param("mu0", y), (n, d)).copy(), free1
    if kind is CollapseKind.constant_target:
        return free0, np.broadcast_to(case.param("mu1", y), (n, d)).copy()
    if kind is CollapseKind.unbounded_source:
        return free0, np.zeros((n, d))
    if kind is CollapseKind.unbounded_target:
        return np.zeros((n, d)), free1
    if case.ratio_form:
        return case.param("k", y) * free1, free1
    mu0 = np.broadcast_to(case.param("mu0", y), (n, d))
    return mu0.copy(), case.param("k", y) * mu0


def identity_residual(case, schedule, z0, z1, t, y) -> np.ndarray:
    """``gamma (b z0 + a z1) + eta - (b' z0 + a' z1)`` per row."""
    a, b, ad, bd = (c[:, None] for c in _coeffs(schedule, t))
    fld = collapsed_field(case, schedule)
    zt = b * z0 + a * z1
    return fld(zt, t, y) - (bd * z0 + ad * z1)


def verify_pointwise_identity(case: CollapseCase, schedule, rng: np.random.Generator, n_trials: int,
                              n_classes: int = 2, on_manifold: bool = True) -> float:
    """Max |residual| of the coefficient-matching identity at random points, ``t`` in the window.

    With ``on_manifold=False`` both endpoints are drawn freely, where the
    identity is expected to fail.
    """
    if n_trials < 1:
        raise ValueError("n_trials must be >= 1")
    y = rng.integers(0, n_classes, n_trials)
    t = rng.uniform(*T_WINDOW, n_trials)
    if on_manifold:
        z0, z1 = manifold_endpoints(case, y, rng)
    else:
        z0, z1 = 2.0 * rng.standard_normal((n_trials, 1)), 2.0 * rng.standard_normal((n_trials, 1))
    return float(np.max(np.abs(identity_residual(case, schedule, z0, z1, t, y))))


def degenerate_maps(case: CollapseCase):
    """``(f, g)`` realising ``case`` exactly (normalised limit for the unbounded cases)."""
    kind = case.kind

    def ident(x, y):
        return np.asarray(x, dtype=np.float64).copy()

    def const(name, factor=None):
        def m(x, y):
            x = np.asarray(x, dtype=np.float64)
            v = case.param(name, y) * (case.param("k", y) if factor else 1.0)
            return np.broadcast_to(v, x.shape).copy()
        return m

    def zero(x, y):
        return np.zeros_like(np.asarray(x, dtype=np.float64))

    if kind is CollapseKind.constant_source:
        return const("mu0"), ident
    if kind is CollapseKind.constant_target:
        return ident, const("mu1")
    if kind is CollapseKind.unbounded_source:
        return ident, zero
    if kind is CollapseKind.unbounded_target:
        return zero, ident
    # independent inputs can only satisfy a fixed ratio through constants
    if case.ratio_form:
        return const("mu0", factor=True), const("mu0")
    return const("mu0"), const("mu0", factor=True)


def case_from_model(model: CarModel) -> CollapseCase:
    """The constant-map case an affine model is heading for, using its current shifts."""
    p = model.reparam()
    k = np.arange(model.net_spec.n_classes)
    if model.variant.source_kind == "affine":
        return CollapseCase(CollapseKind.constant_source, mu0=p.mu0(k)[:, 0])
    if model.variant.target_kind == "affine":
        return CollapseCase(CollapseKind.constant_target, mu1=p.mu1(k)[:, 0])
    raise ValueError(f"variant {model.variant.value} has no affine map")


def collapse_batch(rng: np.random.Generator, size: int, data_spec: DataSpec) -> TrainingBatch:
    """Like :func:`objective.sample_batch` but with ``t ~ U(0.01, 0.99)``."""
    y = sample_labels(data_spec, size, rng)
    x0 = rng.standard_normal((size, data_spec.dim))
    x1 = sample_given_labels(data_spec, y, rng)
    return TrainingBatch(x0=x0, x1=x1, y=y, t=rng.uniform(*T_WINDOW, size))


def collapse_gap(model: CarModel, case: CollapseCase | None, batch: TrainingBatch, schedule,
                 field: Callable | None = None) -> float:
    """Monte-Carlo ``E |v(z_t, t, y) - v*(z_t, t, y)|^2`` under the model's own maps."""
    if np.any(batch.t <= T_WINDOW[0] - 1e-12) or np.any(batch.t >= T_WINDOW[1] + 1e-12):
        raise ValueError(f"collapse gaps are evaluated for t in {T_WINDOW}")
    case = case_from_model(model) if case is None else case
    zt, _ = path_targets(model, batch, schedule)
    v = model.velocity(zt, batch.t, batch.y) if field is None else field(zt, batch.t, batch.y)
    diff = np.asarray(v).reshape(zt.shape) - collapsed_field(case, schedule)(zt, batch.t, batch.y)
    return float(np.mean(np.sum(diff * diff, axis=1)))
