"""Training loop, per-checkpoint evaluation, metrics CSV and resumable checkpoints."""

from __future__ import annotations

import logging
import math
import os
import time
from dataclasses import dataclass

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .collapse import case_from_model, collapse_batch, collapse_gap
from .config import ExperimentConfig, dump_config, write_manifest
from .metrics import MetricsRecord, eval_checkpoint
from .model import CarModel
from .objective import loss_and_grad, sample_batch
from .optim import AdamW, AdamWState, NonFiniteGradientError, ParamGroup
from .schedule import get_schedule

log = logging.getLogger("carflow")

CSV_SCHEMA = 1
EMA_DECAY = 0.99


class TrainingDivergedError(FloatingPointError):
    pass


def csv_columns(class_names):
    cols = ["step", "loss_ema"]
    cols += [f"w1_{c}" for c in class_names] + ["w1_mean", "length", "length_2se", "displacement"]
    for m in ("mu0", "mu1", "sigma0", "sigma1"):
        cols += [f"{m}_class{c}" for c in class_names]
    cols += ["collapse_gap"]
    return cols


def _fmt(x) -> str:
    if x is None:
        return ""
    x = float(x)
    return "nan" if math.isnan(x) else repr(x)


def record_row(rec: MetricsRecord, class_names) -> dict:
    row = {"step": str(rec.step), "loss_ema": _fmt(rec.loss_ema)}
    for c in class_names:
        row[f"w1_{c}"] = _fmt(rec.w1.get(c))
    row["w1_mean"] = _fmt(np.mean([rec.w1[c] for c in class_names]))
    row["length"] = _fmt(rec.length)
    row["length_2se"] = _fmt(rec.length_2se)
    row["displacement"] = _fmt(rec.displacement)
    for m in ("mu0", "mu1", "sigma0", "sigma1"):
        vals = rec.maps.get(m)
        for k, c in enumerate(class_names):
            row[f"{m}_class{c}"] = "" if vals is None else _fmt(vals[k])
    row["collapse_gap"] = "" if math.isnan(rec.collapse_gap) else _fmt(rec.collapse_gap)
    return row


class MetricsCSV:
    """Append-only CSV whose first line is ``# carflow-metrics schema=<n>``."""

    def __init__(self, path, class_names):
        self.path = path
        self.class_names = list(class_names)
        self.columns = csv_columns(self.class_names)

    def header(self) -> str:
        return f"# carflow-metrics schema={CSV_SCHEMA}\n" + ",".join(self.columns) + "\n"

    def start(self, keep_through_step=None):
        """Fresh file, or (on resume) keep rows up to ``keep_through_step``."""
        kept = []
        if keep_through_step is not None and os.path.exists(self.path):
            for row in read_metrics(self.path):
                if int(row["step"]) <= keep_through_step:
                    kept.append(row)
        with open(self.path, "w") as fh:
            fh.write(self.header())
            for row in kept:
                fh.write(",".join(row[c] for c in self.columns) + "\n")

    def append(self, rec: MetricsRecord):
        row = record_row(rec, self.class_names)
        with open(self.path, "a") as fh:
            fh.write(",".join(row[c] for c in self.columns) + "\n")


def read_metrics(path) -> list:
    """Rows as dicts of strings; checks the schema comment."""
    with open(path) as fh:
        first = fh.readline()
        if not first.startswith("# carflow-metrics schema="):
            raise ValueError(f"{path}: missing metrics schema header")
        schema = int(first.strip().split("=", 1)[1])
        if schema != CSV_SCHEMA:
            raise ValueError(f"{path}: metrics schema {schema}, expected {CSV_SCHEMA}")
        cols = fh.readline().strip().split(",")
        return [dict(zip(cols, line.rstrip("\n").split(","))) for line in fh if line.strip()]


def metric_series(rows, column) -> tuple:
    steps, vals = [], []
    for r in rows:
        if r.get(column, "") != "":
            steps.append(int(r["step"]))
            vals.append(float(r[column]))
    return np.asarray(steps), np.asarray(vals)


def build_optimizer(model: CarModel, cfg: ExperimentConfig, state: AdamWState | None = None) -> AdamW:
    groups = [ParamGroup(g, idx, cfg.lr(g), float(cfg.optim.groups[g].get("weight_decay", 0.0)))
              for g, idx in model.group_index().items()]
    if state is None:
        state = AdamWState.zeros(model.n_params, cfg.optim.beta1, cfg.optim.beta2, cfg.optim.eps)
    return AdamW(groups, state)


def init_model(cfg: ExperimentConfig) -> CarModel:
    # the init stream is separate from the batch stream so that both are shared across variants
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(0,)))
    return CarModel.init(cfg.variant, cfg.net_spec(), rng)


def batch_rng(cfg: ExperimentConfig) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(1,)))


def evaluate(model: CarModel, cfg: ExperimentConfig, step: int, loss_ema: float) -> MetricsRecord:
    ds = cfg.data_spec()
    rec = eval_checkpoint(model, ds, cfg.eval_samples, cfg.eval_seed, cfg.sampler_config(),
                          step=step, loss_ema=loss_ema)
    if model.variant.is_affine:
        grng = np.random.default_rng(np.random.SeedSequence(cfg.eval_seed, spawn_key=(3,)))
        batch = collapse_batch(grng, cfg.gap_samples, ds)
        rec.collapse_gap = collapse_gap(model, case_from_model(model), batch, get_schedule(cfg.schedule))
    return rec


@dataclass
class RunResult:
    model: CarModel
    records: list
    out_dir: str
    step: int


def _paths(out_dir):
    return {
        "config": os.path.join(out_dir, "config.yaml"),
        "manifest": os.path.join(out_dir, "manifest.json"),
        "metrics": os.path.join(out_dir, "metrics.csv"),
        "latest": os.path.join(out_dir, "checkpoint.bin"),
        "final": os.path.join(out_dir, "final.bin"),
    }


def run_train(cfg: ExperimentConfig, resume: bool = False, progress=None) -> RunResult:
    """Train ``cfg.total_steps`` AdamW steps, evaluating and checkpointing every ``eval_every``.

    With ``resume`` the run continues from ``checkpoint.bin`` in the output
    directory and ends in the same state as an uninterrupted run.
    """
    out = cfg.output_dir
    os.makedirs(out, exist_ok=True)
    paths = _paths(out)
    schedule = get_schedule(cfg.schedule)
    ds = cfg.data_spec()
    names = [ds.class_name(k) for k in range(ds.n_classes)]
    csv = MetricsCSV(paths["metrics"], names)

    if resume and os.path.exists(paths["latest"] + ".json"):
        model, state, rng, step, meta = load_checkpoint(paths["latest"])
        if meta["extra"].get("config_digest") != cfg.digest():
            raise ValueError("checkpoint was written under a different configuration")
        loss_ema = meta["extra"].get("loss_ema", float("nan"))
        opt = build_optimizer(model, cfg, state)
        csv.start(keep_through_step=step)
        log.info("resumed %s at step %d", out, step)
    else:
        model = init_model(cfg)
        opt = build_optimizer(model, cfg)
        rng = batch_rng(cfg)
        step, loss_ema = 0, float("nan")
        csv.start()
        dump_config(cfg, paths["config"])
        write_manifest(paths["manifest"], cfg, output_dir=os.path.abspath(out))
        csv.append(evaluate(model, cfg, 0, loss_ema))

    records = []
    t0 = time.perf_counter()
    while step < cfg.total_steps:
        batch = sample_batch(rng, cfg.batch_size, ds)
        g = loss_and_grad(model, batch, schedule)
        if not math.isfinite(g.loss_value):
            norms = g.group_norms(model)
            raise TrainingDivergedError(f"non-finite loss at step {step + 1}; gradient norms per group: {norms}")
        try:
            opt.step(model.theta, g.flat)
        except NonFiniteGradientError as e:
            raise TrainingDivergedError(f"step {step + 1}: {e}") from e
        if not np.all(np.isfinite(model.theta)):
            raise TrainingDivergedError(f"non-finite parameters after step {step + 1}")
        step += 1
        loss_ema = g.loss_value if math.isnan(loss_ema) else EMA_DECAY * loss_ema + (1 - EMA_DECAY) * g.loss_value
        if step % cfg.eval_every == 0 or step == cfg.total_steps:
            rec = evaluate(model, cfg, step, loss_ema)
            csv.append(rec)
            records.append(rec)
            save_checkpoint(paths["latest"], model, opt.state, step, rng,
                            {"config_digest": cfg.digest(), "loss_ema": loss_ema})
            if progress:
                progress(rec, time.perf_counter() - t0)
    save_checkpoint(paths["final"], model, opt.state, step, rng,
                    {"config_digest": cfg.digest(), "loss_ema": loss_ema})
    return RunResult(model, records, out, step)
