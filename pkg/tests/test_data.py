import numpy as np
import pytest
from hypothesis import given, strategies as st

from carflow.data import (ClassIndexError, Component, DataSpec, four_corners_2d, sample_conditional,
                          sample_given_labels, sample_labels, two_class_1d)


def test_class_means_and_stds():
    ds = two_class_1d()
    rng = np.random.default_rng(0)
    a = sample_conditional(ds, 0, 1_000_000, rng)
    b = sample_conditional(ds, 1, 1_000_000, rng)
    assert abs(a.mean() + 1.5) < 1e-3
    assert abs(b.mean() - 1.5) < 1e-3
    assert abs(b.std() - 0.2) < 1e-3


def test_zero_std_rejected():
    with pytest.raises(ValueError):
        DataSpec(classes=((Component((0.0,), 0.0),),))
    with pytest.raises(ValueError):
        DataSpec(classes=())


def test_invalid_class_index():
    ds = two_class_1d()
    with pytest.raises(ClassIndexError):
        sample_conditional(ds, 2, 10, np.random.default_rng(0))
    with pytest.raises(ClassIndexError):
        sample_given_labels(ds, np.array([0, -1]), np.random.default_rng(0))


def test_2d_isotropic_covariance():
    ds = four_corners_2d(std=0.1)
    rng = np.random.default_rng(1)
    for k, mean in enumerate([(-1, -1), (-1, 1), (1, -1), (1, 1)]):
        x = sample_conditional(ds, k, 200_000, rng)
        np.testing.assert_allclose(x.mean(axis=0), mean, atol=2e-3)
        np.testing.assert_allclose(np.cov(x.T), 0.01 * np.eye(2), atol=1e-2 * 0.01 + 1e-4)


def test_mixture_class_and_prior():
    ds = DataSpec(classes=((Component((-1.0,), 0.1, 1.0), Component((1.0,), 0.1, 3.0)),), prior=(1.0,))
    x = sample_conditional(ds, 0, 200_000, np.random.default_rng(2))
    assert np.mean(x > 0) == pytest.approx(0.75, abs=5e-3)
    assert np.all(sample_labels(ds, 10, np.random.default_rng(0)) == 0)


def test_roundtrip_dict():
    ds = four_corners_2d()
    assert DataSpec.from_dict(ds.to_dict()) == ds
    assert two_class_1d().class_name(1) == "B"


@given(st.integers(0, 2**32 - 1))
def test_seeded_determinism(seed):
    ds = two_class_1d()
    a = sample_conditional(ds, 1, 50, np.random.default_rng(seed))
    b = sample_conditional(ds, 1, 50, np.random.default_rng(seed))
    assert np.array_equal(a, b)
