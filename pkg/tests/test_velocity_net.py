import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from carflow import kernels
from carflow.model import CarModel
from carflow.objective import TrainingBatch, cfm_loss, loss_and_grad, sample_batch
from carflow.data import two_class_1d
from carflow.schedule import LINEAR
from carflow.velocity_net import (EmbeddingDomainError, EmbeddingSpec, Layout, NetSpec, VelocityNet,
                                  count_params, net_entries, sinusoidal_embed)

from conftest import finite_difference_errors

BACKENDS = ["numpy"] + (["numba"] if kernels.HAVE_NUMBA else [])


@pytest.fixture(params=BACKENDS)
def backend(request):
    prev = kernels.backend()
    kernels.set_backend(request.param)
    yield request.param
    kernels.set_backend(prev)


def test_embedding_at_zero():
    assert sinusoidal_embed(0.0).tolist() == [0, 0, 0, 0, 1, 1, 1, 1]


def test_embedding_pi_two_channels():
    e = sinusoidal_embed(np.pi, EmbeddingSpec(dim=2, freq_base=123.0))
    np.testing.assert_allclose(e, [0.0, -1.0], atol=1e-15)


def test_embedding_frequencies_geometric():
    np.testing.assert_allclose(EmbeddingSpec(8, 1e4).frequencies(), [1, 0.1, 0.01, 0.001], rtol=1e-12)


@given(st.floats(-1e6, 1e6))
def test_embedding_range(x):
    e = sinusoidal_embed(x)
    assert e.shape == (8,) and np.all(np.abs(e) <= 1.0)


def test_embedding_rejects_nonfinite_and_odd_dim():
    with pytest.raises(EmbeddingDomainError):
        sinusoidal_embed(np.inf)
    with pytest.raises(ValueError):
        EmbeddingSpec(dim=7)


def test_default_parameter_count():
    assert count_params(NetSpec()) == 1993
    assert CarModel("baseline", NetSpec()).n_params == 1993
    assert CarModel("joint", NetSpec()).n_params == 1993 + 18
    assert CarModel("source_global", NetSpec()).n_params == 1993 + 1


def test_zero_network_outputs_zero(backend):
    m = CarModel("baseline", NetSpec())
    v = m.velocity(np.linspace(-3, 3, 7), np.linspace(0, 1, 7), np.array([0, 1, 0, 1, 0, 1, 0]))
    assert np.all(v == 0.0)


def test_forward_deterministic(backend, rng):
    m = CarModel.init("baseline", NetSpec(), rng)
    z, t, y = rng.standard_normal(64), rng.random(64), rng.integers(0, 2, 64)
    assert np.array_equal(m.velocity(z, t, y), m.velocity(z, t, y))


def test_backends_agree(rng):
    m = CarModel.init("joint", NetSpec(), rng)
    b = sample_batch(rng, 3000, two_class_1d())
    out = {}
    for name in BACKENDS:
        kernels.set_backend(name)
        out[name] = (m.velocity(b.x1, b.t, b.y), loss_and_grad(m, b, LINEAR).flat)
    kernels.set_backend("numba" if kernels.USE_NUMBA else "numpy")
    ref = out["numpy"]
    for v, g in out.values():
        np.testing.assert_allclose(v, ref[0], rtol=1e-10, atol=1e-12)
        np.testing.assert_allclose(g, ref[1], rtol=1e-8, atol=1e-12)


def _gelu(a):
    return 0.5 * a * (1.0 + math.erf(a / math.sqrt(2.0)))


def test_single_unit_hand_computation(backend):
    spec = NetSpec(embed=EmbeddingSpec(dim=2, freq_base=10.0), hidden=(1,), layer_norm=False, embed_gain=False)
    lay = Layout(net_entries(spec))
    theta = np.zeros(lay.size)
    # hidden pre-activation = 0.7 * sin(z) + 0.2, output = -1.3 * gelu(.) + 0.05
    lay.view(theta, "W0")[0, 0] = 0.7
    lay.view(theta, "b0")[0] = 0.2
    lay.view(theta, "W_out")[0, 0] = -1.3
    lay.view(theta, "b_out")[0] = 0.05
    net = VelocityNet(spec, lay)
    z = 0.4
    v = net.forward(theta, np.array([z]), 0.3, np.array([1]))
    assert float(v[0, 0]) == pytest.approx(-1.3 * _gelu(0.7 * math.sin(z) + 0.2) + 0.05, abs=1e-14)


def test_invalid_class_and_time(rng):
    m = CarModel.init("baseline", NetSpec(), rng)
    with pytest.raises(ValueError):
        m.velocity(np.zeros(2), 0.5, np.array([0, 2]))
    with pytest.raises(ValueError):
        m.velocity(np.zeros(2), 1.5, np.array([0, 1]))


def test_exact_fit_gives_zero_loss_and_gradient(rng):
    m = CarModel.init("baseline", NetSpec(), rng)
    b = sample_batch(rng, 32, two_class_1d())
    # pick x1 with x1 - x0 = v(z_t): a fixed point, since z_t depends on x1
    x1 = b.x1.copy()
    for _ in range(60):
        zt = (1 - b.t)[:, None] * b.x0 + b.t[:, None] * x1
        x1 = b.x0 + m.velocity(zt, b.t, b.y)
    fit = TrainingBatch(b.x0, x1, b.y, b.t)
    g = loss_and_grad(m, fit, LINEAR)
    assert g.loss_value < 1e-24
    assert np.max(np.abs(g.flat)) < 1e-10


def test_doubling_residual_quadruples_loss(rng):
    m = CarModel("baseline", NetSpec())  # zero net: residual is -u
    b = sample_batch(rng, 64, two_class_1d())
    l1 = cfm_loss(m, b, LINEAR)
    l2 = cfm_loss(m, TrainingBatch(2 * b.x0, 2 * b.x1, b.y, b.t), LINEAR)
    assert l2 == pytest.approx(4 * l1, rel=1e-12)


def test_hand_computed_single_sample_loss():
    m = CarModel("baseline", NetSpec())
    b = TrainingBatch(np.array([[1.0]]), np.array([[3.0]]), np.array([0]), np.array([0.25]))
    assert cfm_loss(m, b, LINEAR) == pytest.approx(4.0, abs=1e-15)


def test_empty_batch_rejected():
    with pytest.raises(ValueError):
        TrainingBatch(np.zeros((0, 1)), np.zeros((0, 1)), np.zeros(0, int), np.zeros(0))


@pytest.mark.parametrize("variant", ["baseline", "joint", "affine_source", "affine_target", "source_global"])
def test_gradient_matches_finite_differences(variant, backend):
    rng = np.random.default_rng(7)
    m = CarModel.init(variant, NetSpec(), rng)
    # move the map nets off zero so every path in the chain rule is exercised
    for name in m.layout.names():
        if name[:2] in ("mu", "s0", "s1"):
            m.layout.view(m.theta, name)[:] = 0.3 * rng.standard_normal(m.layout.entries[name][1])
    b = sample_batch(rng, 16, two_class_1d())
    errs = finite_difference_errors(m, b, LINEAR)
    assert max(errs.values()) <= 1e-4, errs


def test_forward_lipschitz_in_z_and_t(rng):
    m = CarModel.init("baseline", NetSpec(), rng)
    z, t, y = rng.uniform(-4, 4, 500), rng.uniform(0, 0.999, 500), rng.integers(0, 2, 500)
    eps = 1e-6
    dz = np.abs(m.velocity(z + eps, t, y) - m.velocity(z, t, y)) / eps
    dt = np.abs(m.velocity(z, t + eps, y) - m.velocity(z, t, y)) / eps
    assert np.all(np.isfinite(dz)) and np.all(np.isfinite(dt))
    lip = 50.0  # generous empirical bound for a fan-in initialised 24-wide net
    assert dz.max() < lip and dt.max() < lip


def test_layout_pack_unpack(rng):
    lay = Layout(net_entries(NetSpec()))
    theta = rng.standard_normal(lay.size)
    assert np.array_equal(lay.pack(lay.unpack(theta)), theta)
