"""The nine acceptance criteria, each at its stated tolerance.

Criteria 1-4 need full-length training runs (about 20 x 50k steps plus 2 x 100k).
They are cached under ``$CARFLOW_ACCEPTANCE_DIR`` (default ``<repo>/acceptance_runs``)
and reused whenever the config digest matches, so only the first session pays for them.
``carflow suite <name> --root acceptance_runs --set eval_every=5000`` fills the same cache.
"""

import os

import numpy as np
import pytest

from carflow.collapse import (CollapseCase, CollapseKind, collapse_batch, collapsed_field, degenerate_maps,
                              verify_pointwise_identity)
from carflow.config import ExperimentConfig
from carflow.data import two_class_1d
from carflow.model import CarModel
from carflow.objective import cfm_loss, cfm_loss_maps, loss_and_grad, sample_batch
from carflow.reparam import CarVariant, check_shift_equivalence
from carflow.runner import init_model, read_metrics, run_train
from carflow.sampler import SamplerConfig, linear_marginal_score, marginal_score, sample_ode
from carflow.schedule import LINEAR
from carflow.velocity_net import NetSpec
from carflow.suites import REFERENCE_LENGTHS, REFERENCE_UNCOND_W1, run_suite, summarise_lengths

from conftest import finite_difference_errors, record_criterion
from test_collapse import COSINE

ROOT = os.environ.get("CARFLOW_ACCEPTANCE_DIR",
                      os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), "acceptance_runs"))
CAR = ("source_only", "target_only", "joint")


def base_config():
    # evaluating every 5k steps instead of 1k only thins the curves; trained parameters are unchanged
    return ExperimentConfig().replace(eval_every=5000)


@pytest.fixture(scope="module")
def table2():
    return run_suite("table2", ROOT, base_config())


@pytest.fixture(scope="module")
def stats(table2):
    out = {}
    for v, dirs in table2["runs"].items():
        cfgs = [base_config().replace(variant=v, seed=s, output_dir=d) for s, d in enumerate(dirs)]
        r = summarise_lengths(cfgs)
        lengths = np.array(r["per_seed_length"])
        r["stderr"] = float(lengths.std(ddof=1) / np.sqrt(lengths.size))
        out[v] = r
    return out


@pytest.mark.slow
def test_criterion_1_table2_lengths(stats):
    within = {v: abs(stats[v]["length"] - REFERENCE_LENGTHS[v]) <= 0.08 for v in REFERENCE_LENGTHS}
    L = {v: stats[v]["length"] for v in stats}
    order = max(L["joint"], L["target_only"]) < L["source_only"] < L["baseline"]
    hi = {v: L[v] + 2 * stats[v]["stderr"] for v in CAR}
    separated = all(hi[v] < L["baseline"] - 2 * stats["baseline"]["stderr"] for v in CAR)
    ok = all(within.values()) and order and separated
    detail = ", ".join(f"{v}={L[v]:.4f}+-{2 * stats[v]['stderr']:.4f} (ref {REFERENCE_LENGTHS[v]})" for v in L)
    record_criterion(1, ok, f"{detail}; ordering={order}, separated={separated}")
    assert all(within.values()), within
    assert order and separated


@pytest.mark.slow
def test_criterion_2_w1_ordering(stats):
    w = {v: stats[v]["w1_per_class"] for v in stats}
    below = all(w[v][c] < w["baseline"][c] for v in CAR for c in w["baseline"])
    joint_min = all(w["joint"][c] <= min(w[v][c] for v in w) for c in w["baseline"])
    detail = "; ".join(f"{v}: " + ", ".join(f"{c}={x:.4f}" for c, x in w[v].items()) for v in w)
    record_criterion(2, below and joint_min, detail)
    assert below, w
    assert joint_min, w


@pytest.mark.slow
def test_criterion_3_unconditional_vs_conditional():
    rep = run_suite("appD_uncond", ROOT, base_config())
    w = {v: rep["rows"][v]["w1_mean"] for v in REFERENCE_UNCOND_W1}
    near = {v: abs(w[v] - REFERENCE_UNCOND_W1[v]) <= 0.02 for v in w}
    lower = w["source_only"] < w["source_global"]
    record_criterion(3, all(near.values()) and lower,
                     f"global={w['source_global']:.4f} (ref 0.058), conditional={w['source_only']:.4f} (ref 0.041)")
    assert lower
    assert all(near.values()), w


@pytest.mark.slow
def test_criterion_4_mode_collapse():
    rep = run_suite("fig4", ROOT, base_config())
    lines, ok = [], True
    for v, e in rep["rows"].items():
        good = max(e["final_sigma"].values()) < 0.1 and e["final_gap"] < 1e-2
        ok &= good
        lines.append(f"{v}: sigma " + ", ".join(f"{x:.4f}" for x in e["final_sigma"].values())
                     + f", gap {e['final_gap']:.2e}")
    record_criterion(4, ok, "; ".join(lines))
    assert ok, rep["rows"]


@pytest.mark.parametrize("schedule", [LINEAR, COSINE], ids=lambda s: s.name)
def test_criterion_5_collapse_construction(schedule):
    rng = np.random.default_rng(2024)
    ds = two_class_1d()
    worst_loss, worst_res = 0.0, 0.0
    for kind in CollapseKind:
        for _ in range(3):
            case = CollapseCase(kind, mu0=rng.normal(size=2), mu1=rng.normal(size=2),
                                k=rng.choice([-1, 1], 2) * rng.uniform(0.3, 3, 2))
            f, g = degenerate_maps(case)
            worst_loss = max(worst_loss, cfm_loss_maps(collapse_batch(rng, 4096, ds), schedule,
                                                       collapsed_field(case, schedule), f, g))
            worst_res = max(worst_res, verify_pointwise_identity(case, schedule, rng, 10_000))
    ok = worst_loss <= 1e-20 and worst_res <= 1e-10
    record_criterion(5, ok, f"[{schedule.name}] max loss {worst_loss:.2e}, max residual {worst_res:.2e}")
    assert worst_loss <= 1e-20 and worst_res <= 1e-10


def test_criterion_6_shift_falsification():
    rng = np.random.default_rng(6)
    grid = np.linspace(0.01, 0.99, 99)
    accepted = 0
    for _ in range(1000):
        mu0, mu1 = rng.normal(size=2) * rng.choice([1e-3, 1.0, 10.0]), rng.normal(size=2)
        mu0[rng.integers(2)] *= rng.integers(2)  # sometimes zero in one coordinate
        accepted += check_shift_equivalence(mu0, mu1, LINEAR, grid)[0]
    zero_ok = check_shift_equivalence(np.zeros(2), np.zeros(2), LINEAR, grid)[0]
    record_criterion(6, accepted == 0 and zero_ok, f"{accepted}/1000 nonzero pairs accepted, (0,0) accepted={zero_ok}")
    assert accepted == 0 and zero_ok


def test_criterion_7_score_exactness():
    rng = np.random.default_rng(7)
    worst = 0.0
    for schedule in (LINEAR, COSINE):
        t = rng.uniform(0.005, 0.995, 1000)
        z1, mu0, zt = rng.normal(0, 2, 1000), rng.normal(0, 1, 1000), rng.normal(0, 3, 1000)
        a, b, ad, bd = schedule(t)
        u = bd * (zt - a * z1) / b + ad * z1
        exact = (a * z1 + b * mu0 - zt) / b ** 2
        worst = max(worst, float(np.max(np.abs(marginal_score(schedule, t, zt, u, mu0) - exact)
                                        / np.maximum(1.0, np.abs(exact)))))
    t, z, u, mu0 = rng.uniform(0, 0.999, 1000), rng.normal(0, 3, 1000), rng.normal(0, 3, 1000), rng.normal(size=1000)
    g = marginal_score(LINEAR, t, z, u, mu0)
    lin = float(np.max(np.abs(linear_marginal_score(t, z, u, mu0) - g) / np.maximum(1.0, np.abs(g))))
    record_criterion(7, worst <= 1e-10 and lin <= 1e-12, f"conditional score error {worst:.2e}, linear form {lin:.2e}")
    assert worst <= 1e-10 and lin <= 1e-12


@pytest.mark.parametrize("seed", range(5))
def test_criterion_8_gradients(seed):
    rng = np.random.default_rng(100 + seed)
    worst = {}
    for variant in CarVariant:
        m = CarModel.init(variant.value, NetSpec(), rng)
        for name in m.layout.names():
            if name[:2] in ("mu", "s0", "s1"):
                m.layout.view(m.theta, name)[:] = 0.3 * rng.standard_normal(m.layout.entries[name][1])
        errs = finite_difference_errors(m, sample_batch(rng, 16, two_class_1d()), LINEAR)
        worst[variant.value] = max(errs.values())
    ok = max(worst.values()) <= 1e-4
    record_criterion(8, ok, f"seed {seed}: max relative error {max(worst.values()):.2e} over {len(worst)} variants")
    assert ok, worst


def test_criterion_9_zero_shift_equivalence():
    checks = {}
    for seed in range(3):
        cb = ExperimentConfig().replace(seed=seed)
        base, joint = init_model(cb), init_model(cb.replace(variant="joint"))
        batch = sample_batch(np.random.default_rng(seed), 1024, two_class_1d())
        checks[f"loss{seed}"] = cfm_loss(base, batch, LINEAR) == cfm_loss(joint, batch, LINEAR)
        gb, gj = loss_and_grad(base, batch, LINEAR), loss_and_grad(joint, batch, LINEAR)
        checks[f"grad{seed}"] = np.array_equal(gb.flat, gj.flat[:base.n_params])
        y = np.repeat([0, 1], 500)
        sb, sj = sample_ode(base, y, seed, SamplerConfig()), sample_ode(joint, y, seed, SamplerConfig())
        checks[f"samples{seed}"] = np.array_equal(sb.trajectory, sj.trajectory)
    ok = all(checks.values())
    record_criterion(9, ok, f"{sum(checks.values())}/{len(checks)} loss, gradient and sample comparisons bit-identical")
    assert ok, checks


def test_criterion_9_first_evaluation_rows_match(tmp_path):
    small = {"total_steps": 0, "eval_samples": 2000}
    run_train(ExperimentConfig.from_dict({**small, "output_dir": str(tmp_path / "b")}))
    run_train(ExperimentConfig.from_dict({**small, "variant": "joint", "output_dir": str(tmp_path / "j")}))
    rb, rj = read_metrics(tmp_path / "b" / "metrics.csv")[0], read_metrics(tmp_path / "j" / "metrics.csv")[0]
    for col in ("w1_A", "w1_B", "length", "displacement"):
        assert rb[col] == rj[col]


@pytest.mark.slow
def test_affine_source_scale_eventually_decreasing():
    rep = run_suite("fig4", ROOT, base_config())
    rows = read_metrics(os.path.join(rep["runs"]["affine_source"][0], "metrics.csv"))
    for col in ("sigma0_classA", "sigma0_classB"):
        seq = [(int(r["step"]), float(r[col])) for r in rows if int(r["step"]) >= 10_000 and int(r["step"]) % 5000 == 0]
        assert all(b <= a for (_, a), (_, b) in zip(seq, seq[1:])), seq
