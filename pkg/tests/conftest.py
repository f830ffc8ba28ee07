import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("thorough", deadline=None, max_examples=500)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def finite_difference_errors(model, batch, schedule, h=1e-5, floor=1e-6):
    """Max relative error of the analytic gradient against central differences, per parameter group.

    ``floor`` keeps the ratio meaningful for parameters whose gradient is (numerically) zero.
    """
    from carflow.objective import cfm_loss, loss_and_grad
    g = loss_and_grad(model, batch, schedule).flat
    theta = model.theta
    fd = np.empty_like(g)
    for i in range(theta.size):
        old = theta[i]
        theta[i] = old + h
        lp = cfm_loss(model, batch, schedule)
        theta[i] = old - h
        lm = cfm_loss(model, batch, schedule)
        theta[i] = old
        fd[i] = (lp - lm) / (2 * h)
    rel = np.abs(g - fd) / np.maximum(np.maximum(np.abs(g), np.abs(fd)), floor)
    return {grp: float(rel[idx].max()) for grp, idx in model.group_index().items()}


@pytest.fixture(scope="session")
def trained_baseline():
    """A briefly trained baseline model (a few thousand steps; smooth, non-trivial field)."""
    from carflow.data import two_class_1d
    from carflow.model import CarModel
    from carflow.objective import loss_and_grad, sample_batch
    from carflow.optim import AdamW, AdamWState, ParamGroup
    from carflow.schedule import LINEAR
    from carflow.velocity_net import NetSpec
    r = np.random.default_rng(11)
    m = CarModel.init("baseline", NetSpec(), r)
    opt = AdamW([ParamGroup("backbone", np.arange(m.n_params), 1e-3)], AdamWState.zeros(m.n_params))
    for _ in range(1500):
        opt.step(m.theta, loss_and_grad(m, sample_batch(r, 256, two_class_1d()), LINEAR).flat)
    return m


ACCEPTANCE = []


def record_criterion(number, ok, detail):
    ACCEPTANCE.append((number, bool(ok), detail))
    return ok


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number, ok, detail in sorted(ACCEPTANCE, key=lambda r: r[0]):
        terminalreporter.write_line(f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}")
