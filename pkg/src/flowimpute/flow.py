"""Invertible density model built from affine coupling layers.

Each layer keeps the coordinates in its pass-through partition ``D`` and maps
the rest as ``y = x * exp(s(x_D)) + t(x_D)``; ``s`` ends in tanh, ``t`` is
linear, both are 4-layer fully connected nets with leaky-ReLU hidden units.
The base density is a standard isotropic Gaussian.

All functions accept a single vector or a (B, n) batch. Parameters may be
passed explicitly as a mapping of names to arrays or ``Var`` leaves, which is
how gradients are taken; otherwise the model's own ``ParamSet`` is used.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Mapping

import numpy as np

from . import diffcore as dc
from .diffcore import NonFiniteError, ParamSet, Var
from .dataset import RngStream

N_LAYERS = 6
NET_DEPTH = 4


def hidden_width(n: int) -> int:
    return max(n, 8)


def mlp(x, params: Mapping, prefix: str, depth: int, out_act: str | None = None) -> Var:
    """Fully connected net ``prefix.w{i}``/``prefix.b{i}``, leaky-ReLU between layers."""
    h = x
    for i in range(depth):
        h = dc.affine(h, params[f"{prefix}.w{i}"], params[f"{prefix}.b{i}"])
        if i < depth - 1:
            h = dc.leaky_relu(h)
    if out_act == "tanh":
        h = dc.tanh(h)
    return h


def init_mlp(sizes: list[int], prefix: str, gen: np.random.Generator) -> dict[str, np.ndarray]:
    """Uniform(+-1/sqrt(fan_in)) weights, zero biases."""
    out = {}
    for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        bound = 1.0 / np.sqrt(fan_in) if fan_in > 0 else 0.0
        out[f"{prefix}.w{i}"] = gen.uniform(-bound, bound, size=(fan_in, fan_out))
        out[f"{prefix}.b{i}"] = np.zeros(fan_out)
    return out


@dataclass(frozen=True)
class CouplingLayer:
    index: int
    partition: np.ndarray  # bool, True = pass-through
    hidden: int

    def __post_init__(self):
        d = np.array(self.partition, dtype=bool)
        if (~d).sum() == 0:
            raise ValueError("coupling layer must transform at least one coordinate")
        if d.sum() == 0 and d.size > 1:
            raise ValueError("coupling layer pass-through partition is empty")
        d.flags.writeable = False
        object.__setattr__(self, "partition", d)

    @property
    def n(self) -> int:
        return self.partition.size

    @cached_property
    def keep(self) -> np.ndarray:
        return np.flatnonzero(self.partition)

    @cached_property
    def change(self) -> np.ndarray:
        return np.flatnonzero(~self.partition)

    @cached_property
    def inverse_perm(self) -> np.ndarray:
        order = np.concatenate([self.keep, self.change])
        inv = np.empty_like(order)
        inv[order] = np.arange(order.size)
        return inv

    @property
    def prefix(self) -> str:
        return f"c{self.index}"

    def net_sizes(self) -> list[int]:
        return [len(self.keep)] + [self.hidden] * (NET_DEPTH - 1) + [len(self.change)]

    def param_names(self) -> list[str]:
        return [f"{self.prefix}.{net}.{kind}{i}" for net in ("s", "t")
                for i in range(NET_DEPTH) for kind in ("w", "b")]

    def init_params(self, gen: np.random.Generator) -> dict[str, np.ndarray]:
        sizes = self.net_sizes()
        return {**init_mlp(sizes, f"{self.prefix}.s", gen), **init_mlp(sizes, f"{self.prefix}.t", gen)}

    def scale_shift(self, x_keep, params: Mapping) -> tuple[Var, Var]:
        s = mlp(x_keep, params, f"{self.prefix}.s", NET_DEPTH, out_act="tanh")
        t = mlp(x_keep, params, f"{self.prefix}.t", NET_DEPTH)
        return s, t


def sample_partition(n: int, gen: np.random.Generator) -> np.ndarray:
    """Each index passes through with probability 1/2; redraw degenerate splits.

    For n == 1 there is no valid split, so the single coordinate is always
    transformed and s/t reduce to learned constants.
    """
    if n == 1:
        return np.zeros(1, dtype=bool)
    while True:
        d = gen.random(n) < 0.5
        if d.any() and not d.all():
            return d


class FlowModel:
    def __init__(self, layers: list[CouplingLayer], params: ParamSet):
        if not layers:
            raise ValueError("flow needs at least one coupling layer")
        n = layers[0].n
        if any(layer.n != n for layer in layers):
            raise ValueError("all coupling layers must share the data dimension")
        self.layers = list(layers)
        self.n = n
        self.params = params

    @classmethod
    def create(cls, n: int, rng: RngStream, n_layers: int = N_LAYERS, hidden: int | None = None) -> "FlowModel":
        hidden = hidden or hidden_width(n)
        gen_d = rng.child("partitions").generator
        layers = [CouplingLayer(i, sample_partition(n, gen_d), hidden) for i in range(n_layers)]
        model = cls(layers, ParamSet())
        model.params = model.fresh_params(rng.child("weights"))
        return model

    def fresh_params(self, rng: RngStream) -> ParamSet:
        """New weights for the same partitions and shapes."""
        gen = rng.generator
        arrays: dict[str, np.ndarray] = {}
        for layer in self.layers:
            arrays.update(layer.init_params(gen))
        return ParamSet(arrays)

    def with_params(self, params: ParamSet) -> "FlowModel":
        if self.params and not params.same_structure(self.params):
            raise ValueError("parameter structure does not match this flow")
        return FlowModel(self.layers, params)

    @property
    def partitions(self) -> list[np.ndarray]:
        return [layer.partition for layer in self.layers]


def _batch(x) -> tuple[Var, bool]:
    v = dc.as_var(x)
    if v.value.ndim == 1:
        return dc.reshape(v, (1, v.shape[0])), True
    if v.value.ndim != 2:
        raise ValueError(f"expected a vector or (B, n) batch, got shape {v.shape}")
    return v, False


def _check_dim(x: Var, n: int) -> None:
    if x.value.shape[-1] != n:
        raise ValueError(f"input dimension {x.value.shape[-1]} does not match flow dimension {n}")


def coupling_forward(x, layer: CouplingLayer, params: Mapping) -> tuple[Var, Var]:
    """Return (y, per-row log|det J|)."""
    x, single = _batch(x)
    _check_dim(x, layer.n)
    try:
        x_keep = dc.take_cols(x, layer.keep)
        x_change = dc.take_cols(x, layer.change)
        s, t = layer.scale_shift(x_keep, params)
        y_change = x_change * dc.exp(s) + t
        y = dc.take_cols(dc.concat_cols([x_keep, y_change]), layer.inverse_perm)
        logdet = dc.sum(s, axis=1)
    except NonFiniteError as err:
        raise NonFiniteError(err.primitive, f"coupling layer {layer.index}") from err
    return (_squeeze(y), _squeeze(logdet)) if single else (y, logdet)


def coupling_inverse(y, layer: CouplingLayer, params: Mapping) -> Var:
    y, single = _batch(y)
    _check_dim(y, layer.n)
    try:
        y_keep = dc.take_cols(y, layer.keep)
        y_change = dc.take_cols(y, layer.change)
        s, t = layer.scale_shift(y_keep, params)
        x_change = (y_change - t) * dc.exp(-s)
        x = dc.take_cols(dc.concat_cols([y_keep, x_change]), layer.inverse_perm)
    except NonFiniteError as err:
        raise NonFiniteError(err.primitive, f"inverse of coupling layer {layer.index}") from err
    return _squeeze(x) if single else x


def _squeeze(v: Var) -> Var:
    return dc.reshape(v, v.shape[1:])


def _params(model: FlowModel, params: Mapping | None) -> Mapping:
    return model.params if params is None else params


def flow_forward(x, model: FlowModel, params: Mapping | None = None) -> tuple[Var, Var]:
    """z = g(x) through all layers in order; returns (z, summed log-det per row)."""
    x, single = _batch(x)
    _check_dim(x, model.n)
    p = _params(model, params)
    total = None
    h = x
    for layer in model.layers:
        h, ld = coupling_forward(h, layer, p)
        total = ld if total is None else total + ld
    return (_squeeze(h), _squeeze(total)) if single else (h, total)


def flow_inverse(z, model: FlowModel, params: Mapping | None = None) -> Var:
    z, single = _batch(z)
    _check_dim(z, model.n)
    p = _params(model, params)
    h = z
    for layer in reversed(model.layers):
        h = coupling_inverse(h, layer, p)
    return _squeeze(h) if single else h


def log_likelihood(x, model: FlowModel, params: Mapping | None = None) -> Var:
    """log p_X(x) = log N(g(x); 0, I) + log|det dg/dx|, per row for batches."""
    x, single = _batch(x)
    z, logdet = flow_forward(x, model, params)
    ll = dc.gaussian_logpdf(z) + logdet
    return _squeeze(ll) if single else ll


def nll_loss(batch, model: FlowModel, params: Mapping | None = None) -> Var:
    """Mean negative log-likelihood over the rows of a (B, n) batch."""
    b = dc.as_var(batch)
    if b.value.ndim != 2:
        raise ValueError("nll_loss expects a (B, n) batch")
    if b.value.shape[0] == 0:
        raise ValueError("nll_loss of an empty batch")
    return -dc.mean(log_likelihood(b, model, params))
