import numpy as np
import pytest
from hypothesis import given, strategies as st

from carflow.model import CarModel
from carflow.reparam import (CarVariant, ReparamParams, SingularMapError, check_shift_equivalence,
                             inverse_target, map_source, map_target)
from carflow.schedule import LINEAR
from carflow.velocity_net import NetSpec

finite = st.floats(-20, 20)


def test_baseline_and_zero_init_are_identities():
    for v in CarVariant:
        m = CarModel(v, NetSpec())
        p = m.reparam()
        assert float(map_source(v, p, 0.7, np.array([1]))[0, 0]) == 0.7
        assert float(map_target(v, p, -1.5, np.array([0]))[0, 0]) == -1.5


def test_affine_source_example():
    p = ReparamParams.constant(mu0=-1.0, sigma0=2.0)
    assert float(map_source("affine_source", p, 0.5, np.array([0]))[0, 0]) == pytest.approx(0.0, abs=1e-15)


def test_target_shift_examples():
    p = ReparamParams.constant(mu1=0.4)
    assert float(map_target("target_only", p, -1.5, np.array([0]))[0, 0]) == pytest.approx(-1.1, abs=1e-15)
    assert float(inverse_target("target_only", p, -1.1, np.array([0]))[0, 0]) == pytest.approx(-1.5, abs=1e-15)


def test_affine_inverse_example_and_singular():
    p = ReparamParams.constant(mu1=1.0, sigma1=0.5)
    assert float(inverse_target("affine_target", p, 1.0, np.array([0]))[0, 0]) == pytest.approx(0.0, abs=1e-15)
    tiny = ReparamParams.constant(mu1=0.0, sigma1=1e-7)
    with pytest.raises(SingularMapError):
        inverse_target("affine_target", tiny, 1.0, np.array([0]))


def test_per_class_shift_from_embedding(rng):
    m = CarModel("joint", NetSpec())
    m.layout.view(m.theta, "mu0_W")[:] = rng.standard_normal((8, 1))
    m.layout.view(m.theta, "mu0_b")[:] = 0.25
    p = m.reparam()
    emb = NetSpec().class_embeddings()
    np.testing.assert_allclose(p.mu0(np.array([0, 1]))[:, 0], emb @ m.layout.view(m.theta, "mu0_W")[:, 0] + 0.25)
    # y-only dependence: the same class always gets the same shift
    x0 = rng.standard_normal((5, 1))
    z0 = map_source("joint", p, x0, np.ones(5, int))
    np.testing.assert_allclose(z0 - x0, np.full((5, 1), p.mu0(np.array([1]))[0, 0]), atol=1e-15)


@given(finite, finite, st.floats(-3, 3), st.integers(0, 1))
def test_round_trip(x1, mu1, log_s, y):
    for variant, p in (("target_only", ReparamParams.constant(mu1=mu1)),
                       ("affine_target", ReparamParams.constant(mu1=mu1, sigma1=np.exp(log_s))),
                       ("baseline", ReparamParams.constant())):
        z = map_target(variant, p, x1, np.array([y]))
        back = inverse_target(variant, p, z, np.array([y]))
        assert float(back[0, 0]) == pytest.approx(x1, abs=1e-12 * max(1.0, abs(x1) + abs(mu1)) / min(1.0, np.exp(log_s)))


def test_shift_equivalence_examples():
    grid = np.linspace(0.05, 0.95, 19)
    ok, res = check_shift_equivalence(0.0, 0.0, LINEAR, grid)
    assert ok and np.all(res == 0)
    ok, res = check_shift_equivalence(1.0, 1.0, LINEAR, np.array([0.25, 0.5]))
    assert not ok and abs(res[0]) == pytest.approx(0.5)
    ok, res = check_shift_equivalence(1.0, 3.0, LINEAR, np.array([0.75, 0.5]))
    assert not ok and abs(res[0]) == pytest.approx(2.0)


def test_shift_equivalence_grid_validation():
    with pytest.raises(ValueError):
        check_shift_equivalence(0.0, 0.0, LINEAR, np.array([0.5, 0.5]))
    with pytest.raises(ValueError):
        check_shift_equivalence(0.0, 0.0, LINEAR, np.array([0.0, 0.5]))


@given(st.floats(-10, 10), st.floats(-10, 10))
def test_nonzero_shifts_never_equivalent(mu0, mu1):
    if max(abs(mu0), abs(mu1)) < 1e-3:
        return
    ok, _ = check_shift_equivalence(mu0, mu1, LINEAR, np.linspace(0.01, 0.99, 99))
    assert not ok


def test_variant_parsing():
    assert CarVariant.parse("source-only") is CarVariant.source_only
    with pytest.raises(ValueError):
        CarVariant.parse("both")
    assert CarVariant.affine_target.is_affine and not CarVariant.joint.is_affine
