"""Command line entry point: ``carflow {train,eval,sample,suite,collapse}``.

Every subcommand that builds an experiment accepts ``--config file.yaml`` and
any number of ``--set dotted.key=value`` overrides, plus a few shortcuts
(``--variant``, ``--seed``, ``--steps``, ``--out``) that map onto config keys.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

log = logging.getLogger("carflow")


def _add_config_args(p, out=True):
    p.add_argument("--config", help="YAML experiment config")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config key (dotted path, YAML value); repeatable")
    p.add_argument("--variant")
    p.add_argument("--seed", type=int)
    p.add_argument("--steps", type=int, help="alias for total_steps")
    if out:
        p.add_argument("--out", help="alias for output_dir")


def _config(args):
    from .config import load_config
    ov = list(args.overrides)
    for flag, key in (("variant", "variant"), ("seed", "seed"), ("steps", "total_steps"), ("out", "output_dir")):
        val = getattr(args, flag, None)
        if val is not None:
            ov.append(f"{key}={val}")
    return load_config(args.config, ov)


def _progress(rec, elapsed):
    w1 = " ".join(f"{k}={v:.4f}" for k, v in rec.w1.items())
    log.info("step %d  %.0fs  loss_ema %.4f  W1 %s  length %.4f", rec.step, elapsed, rec.loss_ema, w1, rec.length)


def cmd_train(args):
    from .runner import run_train
    cfg = _config(args)
    res = run_train(cfg, resume=args.resume, progress=_progress)
    print(os.path.join(res.out_dir, "final.bin"))
    return 0


def _load(path):
    from .checkpoint import load_checkpoint
    model, _, _, step, meta = load_checkpoint(path)
    return model, step, meta


def _run_config(ckpt, args):
    """Config stored next to the checkpoint, then CLI overrides on top."""
    from .config import load_config
    stored = os.path.join(os.path.dirname(os.path.abspath(ckpt)), "config.yaml")
    return load_config(args.config or (stored if os.path.exists(stored) else None),
                       list(args.overrides) + ([f"seed={args.seed}"] if args.seed is not None else []))


def cmd_eval(args):
    from .runner import evaluate, record_row
    model, step, meta = _load(args.checkpoint)
    cfg = _run_config(args.checkpoint, args)
    if args.samples:
        cfg = cfg.replace(eval_samples=args.samples)
    rec = evaluate(model, cfg, step, meta.get("extra", {}).get("loss_ema", float("nan")))
    names = [cfg.data_spec().class_name(k) for k in range(cfg.data_spec().n_classes)]
    row = record_row(rec, names)
    print(json.dumps({k: v for k, v in row.items() if v != ""}, indent=1))
    return 0


def cmd_sample(args):
    from .sampler import SamplerConfig, sample, write_trajectories
    from .schedule import get_schedule
    model, _, _ = _load(args.checkpoint)
    cfg = _run_config(args.checkpoint, args)
    ds = cfg.data_spec()
    sc = dict(cfg.sampler)
    for k in ("steps", "mode", "sigma"):
        if getattr(args, k) is not None:
            sc[k] = getattr(args, k)
    scfg = SamplerConfig(**sc)
    if args.class_ is None:
        classes = np.arange(ds.n_classes)
    else:
        names = [ds.class_name(k) for k in range(ds.n_classes)]
        classes = np.array([names.index(args.class_) if args.class_ in names else int(args.class_)])
    y = np.repeat(classes, args.n)
    res = sample(model, y, cfg.eval_seed if args.seed is None else args.seed, scfg, get_schedule(cfg.schedule))
    write_trajectories(args.out, res, [ds.class_name(k) for k in range(ds.n_classes)])
    print(args.out)
    return 0


def cmd_suite(args):
    from .suites import run_suite
    cfg = _config(args)
    seeds = tuple(int(s) for s in args.seeds.split(",")) if args.seeds else (0, 1, 2)
    report = run_suite(args.suite, args.root, cfg, seeds=seeds, jobs=args.jobs)
    print(report["markdown"] if isinstance(report, dict) and "markdown" in report else json.dumps(report, indent=1, default=str))
    return 0


def cmd_collapse(args):
    """Analytic collapse checks; with ``--checkpoint`` also the trained model's gap."""
    from .collapse import (CollapseCase, CollapseKind, case_from_model, collapse_batch, collapse_gap,
                           degenerate_maps, collapsed_field, verify_pointwise_identity)
    from .data import two_class_1d
    from .objective import cfm_loss_maps
    from .schedule import get_schedule
    sched = get_schedule(args.schedule)
    rng = np.random.default_rng(args.seed or 0)
    ds = two_class_1d()
    out = {}
    mu0, mu1 = np.array([-0.7, 0.4]), np.array([1.1, -0.3])
    for kind in CollapseKind:
        case = CollapseCase(kind, mu0=mu0, mu1=mu1, k=np.array([2.0, -0.5]))
        field = collapsed_field(case, sched)
        f, g = degenerate_maps(case)
        batch = collapse_batch(rng, args.batch, ds)
        out[kind.value] = {
            "loss": cfm_loss_maps(batch, sched, field, f, g),
            "residual_on_manifold": verify_pointwise_identity(case, sched, rng, args.points),
            "residual_off_manifold": verify_pointwise_identity(case, sched, rng, args.points, on_manifold=False),
        }
    if args.checkpoint:
        model, step, _ = _load(args.checkpoint)
        batch = collapse_batch(np.random.default_rng(args.seed or 0), args.batch, ds)
        out["checkpoint"] = {"step": step, "variant": model.variant.value,
                             "gap": collapse_gap(model, case_from_model(model), batch, sched),
                             "maps": {k: v[:, 0].tolist() for k, v in model.reparam().per_class().items()}}
    print(json.dumps(out, indent=1))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="carflow")
    p.add_argument("-v", "--verbose", action="store_true")
    p.add_argument("--backend", choices=("numba", "numpy"), help="kernel backend (default from CARFLOW_NUMBA)")
    sub = p.add_subparsers(dest="cmd", required=True)

    t = sub.add_parser("train", help="train one configuration")
    _add_config_args(t)
    t.add_argument("--resume", action="store_true", help="continue from checkpoint.bin in the output directory")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("checkpoint")
    e.add_argument("--config")
    e.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
    e.add_argument("--seed", type=int)
    e.add_argument("--samples", type=int, help="samples per class")
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("sample", help="draw samples and write trajectories as JSONL")
    s.add_argument("checkpoint")
    s.add_argument("--config")
    s.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
    s.add_argument("--out", required=True)
    s.add_argument("-n", type=int, default=100, help="samples per class")
    s.add_argument("--class", dest="class_")
    s.add_argument("--seed", type=int)
    s.add_argument("--steps", type=int)
    s.add_argument("--mode", choices=("ode", "sde"))
    s.add_argument("--sigma", type=float)
    s.set_defaults(func=cmd_sample)

    u = sub.add_parser("suite", help="run an experiment suite and write its report")
    u.add_argument("suite")
    u.add_argument("--root", default="results")
    u.add_argument("--seeds", help="comma separated, default 0,1,2")
    u.add_argument("--jobs", type=int, default=1)
    _add_config_args(u, out=False)
    u.set_defaults(func=cmd_suite)

    c = sub.add_parser("collapse", help="analytic collapse checks and trained-model gaps")
    c.add_argument("--checkpoint")
    c.add_argument("--schedule", default="linear")
    c.add_argument("--batch", type=int, default=4096)
    c.add_argument("--points", type=int, default=10_000)
    c.add_argument("--seed", type=int)
    c.set_defaults(func=cmd_collapse)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(message)s", stream=sys.stderr)
    try:
        if args.backend:
            from . import kernels
            kernels.set_backend(args.backend)
        return args.func(args)
    except KeyboardInterrupt:
        return 130
    except Exception as e:  # every failure becomes a message and a nonzero status
        if args.verbose:
            raise
        print(f"carflow {args.cmd}: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
