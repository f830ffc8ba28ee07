"""Experiment configuration (YAML on disk) and the per-run manifest."""

from __future__ import annotations

import copy
import hashlib
import json
import os
import platform
import re
import subprocess
import time
from dataclasses import asdict, dataclass, field

import numpy as np
import yaml

from .data import DataSpec, two_class_1d
from .reparam import CarVariant
from .sampler import SamplerConfig
from .velocity_net import NetSpec

DEFAULT_LRS = {
    "backbone": 1e-5,
    "source_shift": 1e-3,
    "target_shift": 1e-4,
    "source_scale": 1e-5,
    "target_scale": 1e-5,
}


def _default_groups():
    return {g: {"lr": lr, "weight_decay": 0.0} for g, lr in DEFAULT_LRS.items()}


@dataclass
class OptimConfig:
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    groups: dict = field(default_factory=_default_groups)


@dataclass
class ExperimentConfig:
    variant: str = "baseline"
    schedule: str = "linear"
    seed: int = 0
    batch_size: int = 1024
    total_steps: int = 50_000
    collapse_steps: int = 100_000
    eval_every: int = 1_000
    eval_samples: int = 10_000
    eval_seed: int = 2024
    gap_samples: int = 16_384
    net: dict = field(default_factory=lambda: NetSpec().to_dict())
    optim: OptimConfig = field(default_factory=OptimConfig)
    data: dict = field(default_factory=lambda: two_class_1d().to_dict())
    sampler: dict = field(default_factory=lambda: {"steps": 50, "mode": "ode", "sigma": 0.0, "t_max": 1.0 - 1e-3})
    output_dir: str = "runs/default"

    def __post_init__(self):
        if isinstance(self.optim, dict):
            o = dict(self.optim)
            groups = _default_groups()
            for g, v in (o.pop("groups", None) or {}).items():
                if g not in groups:
                    raise ValueError(f"unknown parameter group {g!r}")
                groups[g].update(v)
            self.optim = OptimConfig(groups=groups, **o)
        self.variant = CarVariant.parse(self.variant).value
        for name in ("batch_size", "eval_every", "eval_samples", "gap_samples"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.total_steps < 0:
            raise ValueError("total_steps must be >= 0")

    # ---- derived objects
    def net_spec(self) -> NetSpec:
        return NetSpec.from_dict(self.net)

    def data_spec(self) -> DataSpec:
        return DataSpec.from_dict(self.data)

    def sampler_config(self) -> SamplerConfig:
        return SamplerConfig(**self.sampler)

    def lr(self, group: str) -> float:
        return float(self.optim.groups[group]["lr"])

    # ---- serialisation
    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = copy.deepcopy(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown config keys {sorted(unknown)}")
        base = cls()
        for key in ("net", "data", "sampler"):
            if key in d and isinstance(d[key], dict):
                merged = copy.deepcopy(getattr(base, key))
                merged.update(d[key])
                d[key] = merged
        return cls(**d)

    def digest(self) -> str:
        """Hash of everything that affects results (the output directory does not)."""
        d = self.to_dict()
        d.pop("output_dir")
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"), default=float)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def replace(self, **kw) -> "ExperimentConfig":
        d = self.to_dict()
        d.update(kw)
        return ExperimentConfig.from_dict(d)


class _Loader(yaml.SafeLoader):
    """SafeLoader that also reads ``1e-5`` as a float (YAML 1.1 wants a dot in the mantissa)."""


_Loader.add_implicit_resolver(
    "tag:yaml.org,2002:float",
    re.compile(r"""^(?:[-+]?(?:[0-9][0-9_]*)\.[0-9_]*(?:[eE][-+]?[0-9]+)?
    |[-+]?(?:[0-9][0-9_]*)(?:[eE][-+]?[0-9]+)
    |\.[0-9_]+(?:[eE][-+]?[0-9]+)?
    |[-+]?\.(?:inf|Inf|INF)
    |\.(?:nan|NaN|NAN))$""", re.X),
    list("-+0123456789."))


def _yaml_load(text):
    return yaml.load(text, Loader=_Loader)


def apply_overrides(d: dict, overrides) -> dict:
    """``["optim.groups.backbone.lr=3e-5", "variant=joint"]`` -> nested update; values parsed as YAML."""
    d = copy.deepcopy(d)
    for item in overrides or ():
        if "=" not in item:
            raise ValueError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        node = d
        parts = key.strip().split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = _yaml_load(raw)
    return d


def load_config(path=None, overrides=()) -> ExperimentConfig:
    d = {}
    if path:
        with open(path) as fh:
            d = _yaml_load(fh) or {}
    return ExperimentConfig.from_dict(apply_overrides(d, overrides))


def dump_config(cfg: ExperimentConfig, path) -> None:
    with open(path, "w") as fh:
        yaml.safe_dump(cfg.to_dict(), fh, sort_keys=True, default_flow_style=False)


def git_revision(cwd=None) -> str:
    try:
        out = subprocess.run(["git", "rev-parse", "HEAD"], cwd=cwd or os.getcwd(),
                             capture_output=True, text=True, timeout=5)
        return out.stdout.strip() if out.returncode == 0 else "unknown"
    except (OSError, subprocess.SubprocessError):
        return "unknown"


def write_manifest(path, cfg: ExperimentConfig, **extra) -> None:
    """Everything non-deterministic about a run lives here, never in the artifacts."""
    from . import kernels
    man = {
        "config_digest": cfg.digest(),
        "seed": cfg.seed,
        "git_revision": git_revision(os.path.dirname(os.path.abspath(__file__))),
        "started_unix": time.time(),
        "started": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
        "host": platform.node(),
        "python": platform.python_version(),
        "numpy": np.__version__,
        "kernel_backend": kernels.backend(),
    }
    man.update(extra)
    with open(path, "w") as fh:
        json.dump(man, fh, indent=1, sort_keys=True)
