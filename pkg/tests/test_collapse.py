import numpy as np
import pytest
from hypothesis import given, strategies as st

from carflow.collapse import (T_WINDOW, AffineField, CollapseCase, CollapseKind, CollapsePoleError,
                              case_from_model, collapse_batch, collapse_gap, collapsed_field, degenerate_maps,
                              verify_pointwise_identity)
from carflow.data import two_class_1d
from carflow.model import CarModel
from carflow.objective import cfm_loss_maps
from carflow.schedule import LINEAR, Schedule
from carflow.velocity_net import NetSpec

# same functions as LINEAR under another name, which routes through the general formulas
LINEAR_GENERAL = Schedule("linear_general", LINEAR.alpha, LINEAR.beta, LINEAR.alpha_dot, LINEAR.beta_dot)
COSINE = Schedule("cosine", lambda t: np.sin(np.pi * t / 2), lambda t: np.cos(np.pi * t / 2),
                  lambda t: np.pi / 2 * np.cos(np.pi * t / 2), lambda t: -np.pi / 2 * np.sin(np.pi * t / 2))

MU0, MU1, K = np.array([-0.7, 0.4]), np.array([1.1, -0.3]), np.array([2.0, -0.5])


def cases():
    out = [CollapseCase(k, mu0=MU0, mu1=MU1, k=K) for k in CollapseKind]
    out.append(CollapseCase("v", mu0=MU0, k=K, ratio_form=True))
    return out


def v_at(field, z, t, y=0):
    return float(field(np.array([[z]]), np.array([t]), np.array([y]))[0, 0])


def test_table_examples():
    f1 = collapsed_field(CollapseCase("i", mu0=0.5), LINEAR)
    for z in (-1.0, 0.0, 2.5):
        assert v_at(f1, z, 0.5) == pytest.approx(2 * z - 1, abs=1e-14)
    f5 = collapsed_field(CollapseCase("v", mu0=0.3, k=2.0), LINEAR)
    for z in (-4.0, 0.0, 9.0):
        assert v_at(f5, z, 0.37) == pytest.approx(0.3, abs=1e-15)
    f2 = collapsed_field(CollapseCase("ii", mu1=1.0), LINEAR)
    for z in (-1.0, 0.5, 3.0):
        assert v_at(f2, z, 0.75) == pytest.approx(4 - 4 * z, abs=1e-13)


@pytest.mark.parametrize("case", cases(), ids=lambda c: c.kind.value + ("_ratio" if c.ratio_form else ""))
@pytest.mark.parametrize("schedule", [LINEAR, LINEAR_GENERAL, COSINE], ids=lambda s: s.name)
def test_pointwise_identity_on_manifold(case, schedule):
    assert verify_pointwise_identity(case, schedule, np.random.default_rng(0), 10_000) <= 1e-10


@pytest.mark.parametrize("case", cases()[:4], ids=lambda c: c.kind.value)
def test_identity_fails_off_manifold(case):
    assert verify_pointwise_identity(case, LINEAR, np.random.default_rng(1), 2000, on_manifold=False) > 0.1


@pytest.mark.parametrize("case", cases(), ids=lambda c: c.kind.value + ("_ratio" if c.ratio_form else ""))
@pytest.mark.parametrize("schedule", [LINEAR, COSINE], ids=lambda s: s.name)
def test_witness_loss_is_zero(case, schedule):
    f, g = degenerate_maps(case)
    b = collapse_batch(np.random.default_rng(2), 4096, two_class_1d())
    assert cfm_loss_maps(b, schedule, collapsed_field(case, schedule), f, g) <= 1e-20


@given(st.floats(0.01, 0.99), st.floats(-5, 5), st.floats(-3, 3), st.floats(-3, 3))
def test_closed_forms_match_general_formulas(t, z, mu0, mu1):
    for kind in CollapseKind:
        c = CollapseCase(kind, mu0=mu0, mu1=mu1, k=1.7)
        a = v_at(collapsed_field(c, LINEAR), z, t)
        b = v_at(collapsed_field(c, LINEAR_GENERAL), z, t)
        assert a == pytest.approx(b, rel=1e-10, abs=1e-10)


def test_shared_gammas():
    t = np.array([[0.3]])
    g = {k: collapsed_field(CollapseCase(k), LINEAR).gamma(t, np.array([0])) for k in CollapseKind}
    assert g[CollapseKind.constant_source] == g[CollapseKind.unbounded_target] == pytest.approx(1 / 0.3)
    assert g[CollapseKind.constant_target] == g[CollapseKind.unbounded_source] == pytest.approx(-1 / 0.7)


@pytest.mark.parametrize("kind, t", [("i", 0.0), ("iv", 0.0), ("ii", 1.0), ("iii", 1.0)])
def test_poles(kind, t):
    with pytest.raises(CollapsePoleError):
        v_at(collapsed_field(CollapseCase(kind, mu0=0.2, mu1=0.2), LINEAR), 0.1, t)


def test_nonfinite_parameters_rejected():
    with pytest.raises(ValueError):
        CollapseCase("i", mu0=np.inf)



def test_gap_zero_when_field_equals_target():
    m = CarModel.init("affine_source", NetSpec(), np.random.default_rng(0))
    case = case_from_model(m)
    b = collapse_batch(np.random.default_rng(1), 2048, two_class_1d())
    assert collapse_gap(m, case, b, LINEAR, field=collapsed_field(case, LINEAR)) == 0.0


def test_gap_closed_form_for_zero_network():
    # zero backbone, identity maps: z_t = (1 - t) x0 + t x1 and v* = z_t / t
    m = CarModel("affine_source", NetSpec())
    b = collapse_batch(np.random.default_rng(5), 1_000_000, two_class_1d())
    gap = collapse_gap(m, CollapseCase("i", mu0=0.0), b, LINEAR)
    lo, hi = T_WINDOW
    # E[((1-t)/t)^2] over U(lo, hi), plus E[x1^2] = 1.5^2 + 0.2^2
    integral = (-1 / hi - 2 * np.log(hi) + hi) - (-1 / lo - 2 * np.log(lo) + lo)
    expected = integral / (hi - lo) + 1.5 ** 2 + 0.04
    assert gap == pytest.approx(expected, rel=0.03)


def test_gap_shuffle_invariant_and_window():
    m = CarModel.init("affine_target", NetSpec(), np.random.default_rng(0))
    b = collapse_batch(np.random.default_rng(1), 4096, two_class_1d())
    perm = np.random.default_rng(2).permutation(b.size)
    assert collapse_gap(m, None, b, LINEAR) == pytest.approx(collapse_gap(m, None, b.subset(perm), LINEAR), rel=1e-12)
    b.t[0] = 0.0
    with pytest.raises(ValueError):
        collapse_gap(m, None, b, LINEAR)


def test_case_from_model():
    assert case_from_model(CarModel("affine_source", NetSpec())).kind is CollapseKind.constant_source
    assert case_from_model(CarModel("affine_target", NetSpec())).kind is CollapseKind.constant_target
    with pytest.raises(ValueError):
        case_from_model(CarModel("joint", NetSpec()))


def test_affine_field_is_affine():
    f = AffineField(lambda t, y: 2.0 * np.ones_like(t), lambda t, y: 0.5 * np.ones_like(t))
    z = np.array([[0.0], [1.0], [2.0]])
    np.testing.assert_allclose(f(z, 0.5, 0), [[0.5], [2.5], [4.5]])
