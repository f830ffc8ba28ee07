"""A velocity backbone plus the variant's map nets, sharing one flat parameter vector."""

from __future__ import annotations

import numpy as np

from .reparam import GROUP_OF, CarVariant, ReparamParams, reparam_entries
from .velocity_net import Layout, NetSpec, VelocityNet, init_net, net_entries

GROUPS = ("backbone", "source_shift", "target_shift", "source_scale", "target_scale")


def group_of(name: str) -> str:
    return GROUP_OF.get(name.split("_")[0], "backbone")


class CarModel:
    """Backbone entries come first, so the backbone initialisation (and hence
    every downstream number) does not depend on which map nets are attached."""

    def __init__(self, variant, net_spec: NetSpec, theta: np.ndarray | None = None):
        self.variant = CarVariant.parse(variant)
        self.net_spec = net_spec
        self.layout = Layout(net_entries(net_spec) + reparam_entries(self.variant, net_spec.embed.dim, net_spec.data_dim))
        if theta is None:
            theta = np.zeros(self.layout.size)
        theta = np.asarray(theta, dtype=np.float64)
        if theta.shape != (self.layout.size,):
            raise ValueError(f"parameter vector has shape {theta.shape}, expected ({self.layout.size},)")
        self.theta = theta
        self.net = VelocityNet(net_spec, self.layout)

    @classmethod
    def init(cls, variant, net_spec: NetSpec, rng: np.random.Generator) -> "CarModel":
        """Fan-in uniform backbone; map nets all zero (identity maps, ``sigma = 1``)."""
        m = cls(variant, net_spec)
        init_net(net_spec, m.layout, m.theta, rng)
        return m

    def copy(self) -> "CarModel":
        return CarModel(self.variant, self.net_spec, self.theta.copy())

    @property
    def n_params(self) -> int:
        return self.layout.size

    def arrays(self) -> dict:
        return self.layout.unpack(self.theta)

    def group_index(self) -> dict:
        """``{group: index array into theta}`` for the groups that own parameters."""
        idx = {}
        for name in self.layout.names():
            sl = self.layout.slice(name)
            idx.setdefault(group_of(name), []).append(np.arange(sl.start, sl.stop))
        return {g: np.concatenate(idx[g]) for g in GROUPS if g in idx}

    def reparam(self) -> ReparamParams:
        return ReparamParams.from_arrays(self.net.class_emb, self.arrays(), dim=self.net_spec.data_dim)

    def velocity(self, z, t, y) -> np.ndarray:
        return self.net.forward(self.theta, z, t, y)
