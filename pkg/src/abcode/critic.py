"""Critic network for the adversarial code prior.

Score of a batch row ``x`` (length m)::

    D(x) = dense(x) + sum_j coord(x_j)

``dense`` is an ordinary MLP over the whole vector; ``coord`` is one small
MLP shared by every coordinate, so it sees the per-entry value distribution
directly. Either branch may be switched off.
"""
from __future__ import annotations

import numpy as np

from . import nn


class Critic:
    def __init__(self, nets):
        # nets: {"dense": (spec, params), "coord": (spec, params)}; at least one
        if not nets:
            raise ValueError("critic needs at least one branch")
        self.nets = dict(nets)
        if "coord" in self.nets and self.nets["coord"][0].input_dim != 1:
            raise ValueError("coordinate branch must take scalar input")

    @classmethod
    def create(cls, m, dense_hidden=(16,), coord_hidden=(32, 32), dense=True, rng=None):
        nets = {}
        if dense:
            spec = nn.DenseNetSpec((m,) + tuple(dense_hidden) + (1,))
            nets["dense"] = (spec, nn.init_params(spec, rng))
        if coord_hidden:
            spec = nn.DenseNetSpec((1,) + tuple(coord_hidden) + (1,))
            nets["coord"] = (spec, nn.init_params(spec, rng))
        return cls(nets)

    def forward(self, x):
        """Scores of shape ``(B,)`` plus a cache for :meth:`backward`."""
        x = np.atleast_2d(x)
        b, m = x.shape
        scores = np.zeros(b)
        cache = {}
        if "dense" in self.nets:
            spec, params = self.nets["dense"]
            s, trace = nn.forward(params, spec, x)
            scores += s[:, 0]
            cache["dense"] = trace
        if "coord" in self.nets:
            spec, params = self.nets["coord"]
            s, trace = nn.forward(params, spec, x.reshape(-1, 1))
            scores += s.reshape(b, m).sum(axis=1)
            cache["coord"] = trace
        cache["shape"] = (b, m)
        return scores, cache

    def backward(self, cache, g_scores):
        """Returns ``({branch: Grads}, grad wrt x)``."""
        b, m = cache["shape"]
        g_scores = np.asarray(g_scores, dtype=np.float64).reshape(b)
        grads = {}
        g_x = np.zeros((b, m))
        if "dense" in self.nets:
            spec, params = self.nets["dense"]
            grads["dense"], gx = nn.backward(params, spec, cache["dense"], g_scores[:, None])
            g_x += gx
        if "coord" in self.nets:
            spec, params = self.nets["coord"]
            up = np.repeat(g_scores, m)[:, None]
            grads["coord"], gx = nn.backward(params, spec, cache["coord"], up)
            g_x += gx.reshape(b, m)
        return grads, g_x

    def step(self, grads, opt: nn.OptimizerConfig):
        for name, (_, params) in self.nets.items():
            nn.optimizer_step(params, grads[name], opt)

    def clip(self, c):
        for _, params in self.nets.values():
            nn.clip_weights(params, c)
        return self

    def max_abs(self):
        return max(params.max_abs() for _, params in self.nets.values())

    def params(self):
        return [p for _, p in self.nets.values()]

    def copy(self):
        return Critic({k: (spec, p.copy()) for k, (spec, p) in self.nets.items()})

    def to_nets(self):
        """``[(spec, params, role)]`` for checkpointing."""
        return [(spec, params, f"critic.{k}") for k, (spec, params) in self.nets.items()]

    @classmethod
    def from_nets(cls, nets):
        return cls({role.split(".", 1)[1]: (spec, params) for spec, params, role in nets
                    if role.startswith("critic.")})
