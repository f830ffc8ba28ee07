"""Checkpoint files: a flat binary container of named float64 arrays plus a JSON sidecar.

Binary layout (all integers little-endian)::

    b"CFLWARR1"                 magic
    u32 count
    count x {
        u16 name_len, name (utf-8)
        u8  ndim, ndim x u64 dims
        prod(dims) x f8 (little-endian, C order)
    }

The sidecar ``<path>.json`` carries architecture hyperparameters, optimizer
state and the batch RNG state, so a run can resume bit-for-bit.
"""

from __future__ import annotations

import json
import os
import struct

import numpy as np

from .model import CarModel
from .optim import AdamWState
from .velocity_net import NetSpec

MAGIC = b"CFLWARR1"
FORMAT_VERSION = 1


def write_arrays(path, arrays: dict) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(arrays)))
        for name, arr in arrays.items():
            arr = np.asarray(arr, dtype="<f8", order="C")  # ascontiguousarray would promote 0-d to 1-d
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(arr.tobytes())
    os.replace(tmp, path)


def read_arrays(path) -> dict:
    out = {}
    with open(path, "rb") as fh:
        if fh.read(len(MAGIC)) != MAGIC:
            raise ValueError(f"{path}: not a checkpoint array file")
        (count,) = struct.unpack("<I", fh.read(4))
        for _ in range(count):
            (nlen,) = struct.unpack("<H", fh.read(2))
            name = fh.read(nlen).decode("utf-8")
            (ndim,) = struct.unpack("<B", fh.read(1))
            shape = struct.unpack(f"<{ndim}Q", fh.read(8 * ndim)) if ndim else ()
            size = int(np.prod(shape)) if ndim else 1
            buf = fh.read(8 * size)
            if len(buf) != 8 * size:
                raise ValueError(f"{path}: truncated array {name!r}")
            out[name] = np.frombuffer(buf, dtype="<f8").reshape(shape).astype(np.float64)
    return out


def save_checkpoint(path, model: CarModel, opt_state: AdamWState | None = None, step: int = 0,
                    rng: np.random.Generator | None = None, extra: dict | None = None) -> None:
    arrays = {f"param/{k}": v for k, v in model.arrays().items()}
    if opt_state is not None:
        arrays["adam/m"] = opt_state.m
        arrays["adam/v"] = opt_state.v
    write_arrays(path, arrays)
    meta = {
        "format_version": FORMAT_VERSION,
        "variant": model.variant.value,
        "net": model.net_spec.to_dict(),
        "n_params": model.n_params,
        "step": int(step),
        "optimizer": None if opt_state is None else {
            "step_count": opt_state.step_count, "beta1": opt_state.beta1,
            "beta2": opt_state.beta2, "eps": opt_state.eps},
        "rng_state": None if rng is None else rng.bit_generator.state,
        "extra": extra or {},
    }
    tmp = f"{path}.json.tmp"
    with open(tmp, "w") as fh:
        json.dump(meta, fh, indent=1, sort_keys=True)
    os.replace(tmp, f"{path}.json")


def load_checkpoint(path):
    """``(model, opt_state or None, rng or None, step, meta)``."""
    with open(f"{path}.json") as fh:
        meta = json.load(fh)
    if meta.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {meta.get('format_version')}")
    arrays = read_arrays(path)
    model = CarModel(meta["variant"], NetSpec.from_dict(meta["net"]))
    params = {k[len("param/"):]: v for k, v in arrays.items() if k.startswith("param/")}
    missing = set(model.layout.names()) - set(params)
    if missing:
        raise ValueError(f"{path}: missing parameter arrays {sorted(missing)}")
    model.theta[:] = model.layout.pack(params)
    opt = None
    if meta.get("optimizer") and "adam/m" in arrays:
        o = meta["optimizer"]
        opt = AdamWState(arrays["adam/m"].copy(), arrays["adam/v"].copy(), int(o["step_count"]),
                         o["beta1"], o["beta2"], o["eps"])
    rng = None
    if meta.get("rng_state"):
        bg = getattr(np.random, meta["rng_state"]["bit_generator"])()
        bg.state = meta["rng_state"]
        rng = np.random.Generator(bg)
    return model, opt, rng, int(meta["step"]), meta
