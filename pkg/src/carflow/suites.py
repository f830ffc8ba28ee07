"""Multi-run experiment suites and their reports.

Runs live under ``<root>/runs/<name>-s<seed>-<digest>``; a run whose final
checkpoint already carries the same config digest is reused rather than
retrained (training is deterministic, so the artifacts would be identical).
"""

from __future__ import annotations

import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from .checkpoint import load_checkpoint
from .config import ExperimentConfig
from .reparam import SingularMapError
from .runner import metric_series, read_metrics, run_train
from .sampler import sample_ode
from .svgplot import LinePlot

log = logging.getLogger("carflow")

SUITES = ("table2", "fig2", "fig4", "appD_sweep", "appD_uncond")
SEEDS = (0, 1, 2)
TABLE2_VARIANTS = ("baseline", "source_only", "target_only", "joint")
REFERENCE_LENGTHS = {"baseline": 1.5355, "source_only": 0.7432, "target_only": 0.7129, "joint": 0.7121}
REFERENCE_UNCOND_W1 = {"source_global": 0.058, "source_only": 0.041}
SWEEP_LRS = (1e-5, 1e-4, 1e-3)


def run_dir(root, name, cfg: ExperimentConfig) -> str:
    return os.path.join(root, "runs", f"{name}-s{cfg.seed}-{cfg.digest()[:10]}")


def is_complete(cfg: ExperimentConfig) -> bool:
    meta_path = os.path.join(cfg.output_dir, "final.bin.json")
    if not (os.path.exists(meta_path) and os.path.exists(os.path.join(cfg.output_dir, "metrics.csv"))):
        return False
    with open(meta_path) as fh:
        meta = json.load(fh)
    return meta.get("extra", {}).get("config_digest") == cfg.digest() and meta.get("step") == cfg.total_steps


def _train(cfg_dict):
    cfg = ExperimentConfig.from_dict(cfg_dict)
    if not is_complete(cfg):
        log.info("training %s", cfg.output_dir)
        run_train(cfg, resume=True)
    return cfg.output_dir


def ensure_runs(cfgs, jobs: int = 1):
    """Train whatever is missing; ``jobs > 1`` uses separate processes."""
    todo = [c.to_dict() for c in cfgs if not is_complete(c)]
    if jobs > 1 and len(todo) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            list(ex.map(_train, todo))
    else:
        for c in todo:
            _train(c)


def _variant_cfg(base: ExperimentConfig, root, name, **kw) -> ExperimentConfig:
    cfg = base.replace(**kw)
    return cfg.replace(output_dir=run_dir(root, name, cfg))


def _with_lr(base: ExperimentConfig, group, lr) -> ExperimentConfig:
    d = base.to_dict()
    d["optim"]["groups"][group]["lr"] = lr
    return ExperimentConfig.from_dict(d)


def plan(suite: str, root, base: ExperimentConfig | None = None, seeds=SEEDS) -> dict:
    """``{label: [config per seed]}`` for ``suite``."""
    base = base or ExperimentConfig()
    if suite not in SUITES:
        raise ValueError(f"unknown suite {suite!r}; choose from {SUITES}")
    out = {}
    if suite in ("table2", "fig2"):
        for v in TABLE2_VARIANTS:
            out[v] = [_variant_cfg(base, root, v, variant=v, seed=s) for s in seeds]
    elif suite == "fig4":
        steps = base.collapse_steps
        for v in ("affine_source", "affine_target"):
            out[v] = [_variant_cfg(base, root, v, variant=v, seed=seeds[0], total_steps=steps)]
    elif suite == "appD_sweep":
        for v, group in (("source_only", "source_shift"), ("target_only", "target_shift")):
            for lr in SWEEP_LRS:
                b = _with_lr(base, group, lr)
                out[f"{v}@{lr:g}"] = [_variant_cfg(b, root, f"{v}-lr{lr:g}", variant=v, seed=seeds[0])]
    elif suite == "appD_uncond":
        for v in ("source_global", "source_only"):
            out[v] = [_variant_cfg(base, root, v, variant=v, seed=s) for s in seeds]
    return out


def final_row(cfg: ExperimentConfig) -> dict:
    rows = read_metrics(os.path.join(cfg.output_dir, "metrics.csv"))
    return rows[-1]


def _num(row, key):
    v = row.get(key, "")
    return float(v) if v not in ("", None) else float("nan")


def summarise_lengths(cfgs) -> dict:
    """Seed-averaged final length; the 2se combines per-seed sampling errors."""
    rows = [final_row(c) for c in cfgs]
    lengths = np.array([_num(r, "length") for r in rows])
    se2 = np.array([_num(r, "length_2se") for r in rows])
    w1 = np.array([_num(r, "w1_mean") for r in rows])
    return {
        "length": float(lengths.mean()),
        "length_2se": float(np.sqrt(np.sum(se2 ** 2)) / len(rows)),
        "length_seed_std": float(lengths.std(ddof=1)) if len(rows) > 1 else 0.0,
        "displacement": float(np.mean([_num(r, "displacement") for r in rows])),
        "w1_mean": float(w1.mean()),
        "w1_per_class": {k[3:]: float(np.mean([_num(r, k) for r in rows]))
                         for k in rows[0] if k.startswith("w1_") and k != "w1_mean"},
        "per_seed_length": lengths.tolist(),
        "per_seed_w1": w1.tolist(),
    }


def _mean_curve(cfgs, column):
    series = [metric_series(read_metrics(os.path.join(c.output_dir, "metrics.csv")), column) for c in cfgs]
    steps = series[0][0]
    vals = np.mean([s[1] for s in series], axis=0)
    return steps, vals


def _table2_report(runs, root):
    rows = {v: summarise_lengths(cfgs) for v, cfgs in runs.items()}
    lines = ["| variant | length | 2se | seed std | displacement | W1 (mean) | reference |",
             "|---|---|---|---|---|---|---|"]
    for v, r in rows.items():
        lines.append(f"| {v} | {r['length']:.4f} | {r['length_2se']:.4f} | {r['length_seed_std']:.4f} | "
                     f"{r['displacement']:.4f} | {r['w1_mean']:.4f} | {REFERENCE_LENGTHS[v]:.4f} |")
    return {"rows": rows, "markdown": "\n".join(lines)}


def _fig2_plots(runs, root):
    p = LinePlot("W1 to ground truth", "step", "W1 (mean over classes)", yscale="symlog", linthresh=1e-2)
    for v, cfgs in runs.items():
        p.add(*_mean_curve(cfgs, "w1_mean"), label=v)
    p.save(os.path.join(root, "fig2_w1.svg"))
    q = LinePlot("Learned shifts (seed 0)", "step", "shift")
    for v, cfgs in runs.items():
        rows = read_metrics(os.path.join(cfgs[0].output_dir, "metrics.csv"))
        for col in rows[0]:
            if col.startswith(("mu0_class", "mu1_class")):
                s, y = metric_series(rows, col)
                if s.size:
                    q.add(s, y, label=f"{v} {col}", dashed=col.startswith("mu1"))
    q.save(os.path.join(root, "fig2_shifts.svg"))
    return ["fig2_w1.svg", "fig2_shifts.svg"]


def _fig4_report(runs, root):
    out = {}
    ps = LinePlot("Learned scale", "step", "sigma", yscale="log")
    pg = LinePlot("Collapse gap E|v - v*|^2", "step", "gap", yscale="log")
    for v, cfgs in runs.items():
        cfg = cfgs[0]
        rows = read_metrics(os.path.join(cfg.output_dir, "metrics.csv"))
        key = "sigma0" if v == "affine_source" else "sigma1"
        sig = {}
        for col in rows[0]:
            if col.startswith(key + "_class"):
                s, y = metric_series(rows, col)
                ps.add(s, y, label=f"{v} {col}")
                sig[col] = float(y[-1])
        s, g = metric_series(rows, "collapse_gap")
        pg.add(s, g, label=v)
        entry = {"final_sigma": sig, "final_gap": float(g[-1]), "case": "constant_source" if v == "affine_source" else "constant_target"}
        model = load_checkpoint(os.path.join(cfg.output_dir, "final.bin"))[0]
        try:
            sample_ode(model, np.arange(model.net_spec.n_classes).repeat(100), cfg.eval_seed, cfg.sampler_config())
            entry["sampling"] = "ok"
        except SingularMapError as e:
            entry["sampling"] = f"singular map: {e}"
        out[v] = entry
    ps.save(os.path.join(root, "fig4_sigma.svg"))
    pg.save(os.path.join(root, "fig4_gap.svg"))
    lines = ["| variant | case | final sigma | final gap | sampling |", "|---|---|---|---|---|"]
    for v, e in out.items():
        sig = ", ".join(f"{k}={x:.4g}" for k, x in e["final_sigma"].items())
        lines.append(f"| {v} | {e['case']} | {sig} | {e['final_gap']:.4g} | {e['sampling']} |")
    return {"rows": out, "markdown": "\n".join(lines)}


def _sweep_report(runs, root):
    out = {}
    for side, col in (("source_only", "mu0_class"), ("target_only", "mu1_class")):
        pm = LinePlot(f"{side}: shifts vs shift-net learning rate", "step", "shift")
        pw = LinePlot(f"{side}: W1", "step", "W1 (mean over classes)", yscale="symlog")
        for label, cfgs in runs.items():
            if not label.startswith(side):
                continue
            rows = read_metrics(os.path.join(cfgs[0].output_dir, "metrics.csv"))
            for c in rows[0]:
                if c.startswith(col):
                    pm.add(*metric_series(rows, c), label=f"lr={label.split('@')[1]} {c[len(col):]}")
            pw.add(*metric_series(rows, "w1_mean"), label=f"lr={label.split('@')[1]}")
            out[label] = {"w1_mean": _num(rows[-1], "w1_mean"),
                          "shifts": {c: _num(rows[-1], c) for c in rows[-1] if c.startswith(col)}}
        pm.save(os.path.join(root, f"appD_{side}_shifts.svg"))
        pw.save(os.path.join(root, f"appD_{side}_w1.svg"))
    lines = ["| run | final W1 | final shifts |", "|---|---|---|"]
    for k, e in out.items():
        lines.append(f"| {k} | {e['w1_mean']:.4f} | " + ", ".join(f"{c}={x:.3f}" for c, x in e["shifts"].items()) + " |")
    return {"rows": out, "markdown": "\n".join(lines)}


def _uncond_report(runs, root):
    rows = {v: summarise_lengths(cfgs) for v, cfgs in runs.items()}
    lines = ["| source | W1 (mean over classes, seeds) | per seed | reference |", "|---|---|---|---|"]
    for v, r in rows.items():
        per = ", ".join(f"{x:.4f}" for x in r["per_seed_w1"])
        lines.append(f"| {v} | {r['w1_mean']:.4f} | {per} | {REFERENCE_UNCOND_W1[v]:.3f} |")
    p = LinePlot("Global vs condition-aware source shift", "step", "W1", yscale="symlog")
    for v, cfgs in runs.items():
        p.add(*_mean_curve(cfgs, "w1_mean"), label=v)
    p.save(os.path.join(root, "appD_uncond_w1.svg"))
    return {"rows": rows, "markdown": "\n".join(lines)}


def run_suite(suite: str, root, base: ExperimentConfig | None = None, seeds=SEEDS, jobs: int = 1) -> dict:
    """Train (or reuse) every run of ``suite`` and write ``<suite>_report.{md,json}`` plus plots."""
    os.makedirs(root, exist_ok=True)
    runs = plan(suite, root, base, seeds)
    ensure_runs([c for cfgs in runs.values() for c in cfgs], jobs=jobs)
    if suite == "table2":
        rep = _table2_report(runs, root)
    elif suite == "fig2":
        rep = _table2_report(runs, root)
        rep["plots"] = _fig2_plots(runs, root)
    elif suite == "fig4":
        rep = _fig4_report(runs, root)
    elif suite == "appD_sweep":
        rep = _sweep_report(runs, root)
    else:
        rep = _uncond_report(runs, root)
    rep["suite"] = suite
    rep["runs"] = {k: [c.output_dir for c in v] for k, v in runs.items()}
    with open(os.path.join(root, f"{suite}_report.md"), "w") as fh:
        fh.write(f"# {suite}\n\n{rep['markdown']}\n")
    with open(os.path.join(root, f"{suite}_report.json"), "w") as fh:
        json.dump(rep, fh, indent=1, sort_keys=True, default=float)
    return rep
