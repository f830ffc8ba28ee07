"""Sinusoidal-embedding MLP velocity field ``v(z, t, y)``.

Default 1-D architecture (1,993 trainable scalars)::

    e   = [emb(z), emb(y), emb(t)]          3 x 8 fixed sinusoids -> 24
    h0  = gain * e                          24 learnable embedding gains
    h_l = GELU(LayerNorm(h_{l-1} W_l + b_l))  three 24 -> 24 blocks
    v   = h_3 W_out + b_out                 24 -> 1

Parameters are a flat float64 vector addressed through a :class:`Layout`.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import kernels


class EmbeddingDomainError(ValueError):
    pass


@dataclass(frozen=True)
class EmbeddingSpec:
    dim: int = 8
    freq_base: float = 10_000.0

    def __post_init__(self):
        if self.dim <= 0 or self.dim % 2:
            raise ValueError(f"embedding dim must be a positive even integer, got {self.dim}")
        if not self.freq_base > 0:
            raise ValueError("freq_base must be positive")

    def frequencies(self) -> np.ndarray:
        k = np.arange(self.dim // 2, dtype=np.float64)
        return self.freq_base ** (-2.0 * k / self.dim)


def sinusoidal_embed(x, spec: EmbeddingSpec = EmbeddingSpec()) -> np.ndarray:
    """``[sin(x w_k) ..., cos(x w_k) ...]`` with ``w_k = base^(-2k/dim)``; shape ``x.shape + (dim,)``."""
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise EmbeddingDomainError("embedding input must be finite")
    ang = x[..., None] * spec.frequencies()
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)


@dataclass(frozen=True)
class NetSpec:
    data_dim: int = 1
    n_classes: int = 2
    embed: EmbeddingSpec = field(default_factory=EmbeddingSpec)
    hidden: tuple = (24, 24, 24)
    layer_norm: bool = True
    embed_gain: bool = True
    activation: str = "gelu"
    label_values: tuple | None = None
    ln_eps: float = 1e-5

    def __post_init__(self):
        if self.activation != "gelu":
            raise ValueError("only the exact (erf) GELU activation is implemented")
        if self.label_values is not None and len(self.label_values) != self.n_classes:
            raise ValueError("label_values must have one entry per class")

    @property
    def in_width(self) -> int:
        return self.embed.dim * (self.data_dim + 2)

    def labels(self) -> np.ndarray:
        if self.label_values is None:
            return np.arange(self.n_classes, dtype=np.float64)
        return np.asarray(self.label_values, dtype=np.float64)

    def class_embeddings(self) -> np.ndarray:
        """Sinusoidal embedding of each class label value, ``(n_classes, embed.dim)``."""
        return sinusoidal_embed(self.labels(), self.embed)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        d["label_values"] = None if self.label_values is None else list(self.label_values)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetSpec":
        d = dict(d)
        d["embed"] = EmbeddingSpec(**d.get("embed", {}))
        d["hidden"] = tuple(d.get("hidden", (24, 24, 24)))
        if d.get("label_values") is not None:
            d["label_values"] = tuple(d["label_values"])
        return cls(**d)


class Layout:
    """Named, shaped slices of one flat parameter vector."""

    def __init__(self, entries):
        self.entries = {}
        off = 0
        for name, shape in entries:
            size = int(np.prod(shape)) if len(shape) else 1
            self.entries[name] = (off, tuple(shape))
            off += size
        self.size = off

    def __contains__(self, name):
        return name in self.entries

    def names(self):
        return list(self.entries)

    def offset(self, name: str) -> int:
        return self.entries[name][0]

    def slice(self, name: str) -> slice:
        off, shape = self.entries[name]
        return slice(off, off + (int(np.prod(shape)) if shape else 1))

    def view(self, theta: np.ndarray, name: str) -> np.ndarray:
        return theta[self.slice(name)].reshape(self.entries[name][1])

    def unpack(self, theta: np.ndarray) -> dict:
        return {name: self.view(theta, name) for name in self.entries}

    def pack(self, arrays: dict) -> np.ndarray:
        theta = np.zeros(self.size)
        for name in self.entries:
            theta[self.slice(name)] = np.asarray(arrays[name], dtype=np.float64).ravel()
        return theta

    def extend(self, entries) -> "Layout":
        return Layout([(n, s) for n, (_, s) in self.entries.items()] + list(entries))


def net_entries(spec: NetSpec):
    entries = []
    width = spec.in_width
    if spec.embed_gain:
        entries.append(("embed_gain", (width,)))
    for i, h in enumerate(spec.hidden):
        entries += [(f"W{i}", (width, h)), (f"b{i}", (h,))]
        if spec.layer_norm:
            entries += [(f"ln{i}_g", (h,)), (f"ln{i}_b", (h,))]
        width = h
    entries += [("W_out", (width, spec.data_dim)), ("b_out", (spec.data_dim,))]
    return entries


def count_params(spec: NetSpec) -> int:
    return Layout(net_entries(spec)).size


def init_net(spec: NetSpec, layout: Layout, theta: np.ndarray, rng: np.random.Generator) -> None:
    """Fan-in uniform init, ``U(-1/sqrt(fan_in), 1/sqrt(fan_in))`` for weights and biases."""
    width = spec.in_width
    if spec.embed_gain:
        layout.view(theta, "embed_gain")[:] = 1.0
    for i, h in enumerate(spec.hidden):
        bound = 1.0 / math.sqrt(width)
        layout.view(theta, f"W{i}")[:] = rng.uniform(-bound, bound, (width, h))
        layout.view(theta, f"b{i}")[:] = rng.uniform(-bound, bound, h)
        if spec.layer_norm:
            layout.view(theta, f"ln{i}_g")[:] = 1.0
            layout.view(theta, f"ln{i}_b")[:] = 0.0
        width = h
    bound = 1.0 / math.sqrt(width)
    layout.view(theta, "W_out")[:] = rng.uniform(-bound, bound, (width, spec.data_dim))
    layout.view(theta, "b_out")[:] = rng.uniform(-bound, bound, spec.data_dim)


class VelocityNet:
    """Binds a :class:`NetSpec` to offsets inside a (possibly larger) flat vector."""

    def __init__(self, spec: NetSpec, layout: Layout):
        self.spec = spec
        self.layout = layout
        rows = []
        for i, h in enumerate(spec.hidden):
            nin = spec.in_width if i == 0 else spec.hidden[i - 1]
            og = layout.offset(f"ln{i}_g") if spec.layer_norm else -1
            ob = layout.offset(f"ln{i}_b") if spec.layer_norm else -1
            rows.append((layout.offset(f"W{i}"), layout.offset(f"b{i}"), og, ob, nin, h))
        self.layers = np.asarray(rows, dtype=np.int64).reshape(len(rows), 6)
        last = spec.hidden[-1] if spec.hidden else spec.in_width
        self.head = np.asarray([layout.offset("W_out"), layout.offset("b_out"), last, spec.data_dim], dtype=np.int64)
        self.gain_off = layout.offset("embed_gain") if spec.embed_gain else -1
        self.freqs = spec.embed.frequencies()
        self.class_emb = spec.class_embeddings()
        self._ws = {}

    def _workspace(self, n):
        key = (kernels.backend(), n)
        if key not in self._ws:
            if len(self._ws) > 8:
                self._ws.clear()
            self._ws[key] = kernels.workspace(n, self.layers, self.spec.data_dim, self.spec.embed.dim)
        return self._ws[key]

    def _prep(self, z, t, y):
        z = np.asarray(z, dtype=np.float64)
        if z.ndim == 1:
            z = z.reshape(-1, self.spec.data_dim) if self.spec.data_dim > 1 else z[:, None]
        n = z.shape[0]
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), (n,))
        if np.any(t < 0.0) or np.any(t > 1.0):
            raise ValueError("time must lie in [0, 1]")
        y = np.broadcast_to(np.asarray(y), (n,))
        if not np.issubdtype(y.dtype, np.integer) or np.any(y < 0) or np.any(y >= self.spec.n_classes):
            raise ValueError(f"class index must be an integer in [0, {self.spec.n_classes})")
        return np.ascontiguousarray(z), np.ascontiguousarray(t), np.ascontiguousarray(self.class_emb[y])

    def forward(self, theta, z, t, y) -> np.ndarray:
        """Velocity, shape ``(n, data_dim)``."""
        z, t, yemb = self._prep(z, t, y)
        return kernels.forward(theta, self.layers, self.head, self.gain_off, self.freqs,
                               z, t, yemb, self.spec.ln_eps)

    def loss_grad(self, theta, z, t, y, u):
        """``(loss, dloss/dtheta, dloss/dz, v)`` for ``loss = mean_i |v_i - u_i|^2``."""
        z, t, yemb = self._prep(z, t, y)
        u = np.ascontiguousarray(np.asarray(u, dtype=np.float64).reshape(z.shape[0], self.spec.data_dim))
        if z.shape[0] == 0:
            raise ValueError("empty batch")
        return kernels.loss_grad(theta, self.layers, self.head, self.gain_off, self.freqs,
                                 z, t, yemb, u, self.spec.ln_eps, self._workspace(z.shape[0]))
