"""Numba vs pure-numpy kernels: forward pass, loss+gradient and one full training step.

    python benchmarks/bench_kernels.py [--batch 256 1024 4096] [--repeat 50]

Both backends are checked against each other before timing.
"""

import argparse
import time

import numpy as np

from carflow import kernels
from carflow.data import two_class_1d
from carflow.model import CarModel
from carflow.objective import loss_and_grad, sample_batch
from carflow.schedule import LINEAR
from carflow.velocity_net import NetSpec


def best_of(fn, repeat):
    fn()  # warm-up (and JIT compile on first use)
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times), float(np.median(times))


def main(argv=None):
    ap = argparse.ArgumentParser()
    ap.add_argument("--batch", type=int, nargs="+", default=[256, 1024, 4096])
    ap.add_argument("--eval-rows", type=int, default=20_000)
    ap.add_argument("--repeat", type=int, default=50)
    ap.add_argument("--variant", default="joint")
    args = ap.parse_args(argv)

    backends = ["numpy"] + (["numba"] if kernels.HAVE_NUMBA else [])
    rng = np.random.default_rng(0)
    model = CarModel.init(args.variant, NetSpec(), rng)
    ds = two_class_1d()
    net = model.net

    print(f"{'kernel':<12}{'rows':>8}" + "".join(f"{b + ' min/med ms':>26}" for b in backends) + f"{'speedup':>10}")
    for n in list(args.batch) + [args.eval_rows]:
        batch = sample_batch(np.random.default_rng(n), n, ds)
        z = batch.x1
        cases = {"forward": lambda: net.forward(model.theta, z, batch.t, batch.y)}
        if n != args.eval_rows:
            u = batch.x1 - batch.x0
            cases["loss_grad"] = lambda: net.loss_grad(model.theta, z, batch.t, batch.y, u)
            cases["train_step"] = lambda: loss_and_grad(model, batch, LINEAR)
        ref = {}
        for name in cases:
            row, meds = f"{name:<12}{n:>8}", []
            for b in backends:
                kernels.set_backend(b)
                out = cases[name]()
                first = out[0] if isinstance(out, tuple) else getattr(out, "loss_value", out)
                if name in ref:
                    np.testing.assert_allclose(first, ref[name], rtol=1e-9, atol=1e-12)
                ref.setdefault(name, first)
                lo, med = best_of(cases[name], args.repeat)
                meds.append(med)
                row += f"{lo * 1e3:>13.3f} / {med * 1e3:>8.3f}  "
            if len(meds) == 2:
                row += f"{meds[0] / meds[1]:>9.1f}x"
            print(row)
    kernels.set_backend("numba" if kernels.USE_NUMBA else "numpy")


if __name__ == "__main__":
    main()
