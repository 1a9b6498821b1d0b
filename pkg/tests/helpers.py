"""Shared builders for the test suite."""

from __future__ import annotations

import contextlib
import math

import numpy as np

from flowimpute import diffcore as dc
from flowimpute.dataset import RngStream
from flowimpute.diffcore import ParamSet
from flowimpute.flow import NET_DEPTH, CouplingLayer, FlowModel
from flowimpute.latent import N_LINEAR, PREFIX, LatentNet

LN2 = math.log(2.0)


def zero_flow(partitions, hidden: int = 8) -> FlowModel:
    """Flow whose s and t nets are identically zero, i.e. the identity map."""
    layers = [CouplingLayer(i, np.asarray(d, bool), hidden) for i, d in enumerate(partitions)]
    model = FlowModel(layers, ParamSet())
    return model.with_params(model.fresh_params(RngStream(0)).zeros_like())


def constant_flow(n_layers: int, s_value: float, t_value: float, hidden: int = 8) -> FlowModel:
    """n=2 flow with D={0}; every layer has s = s_value and t = t_value."""
    model = zero_flow([[True, False]] * n_layers, hidden)
    arrays = dict(model.params.items())
    for i in range(n_layers):
        arrays[f"c{i}.s.b{NET_DEPTH - 1}"] = np.array([math.atanh(s_value)])
        arrays[f"c{i}.t.b{NET_DEPTH - 1}"] = np.array([t_value])
    return model.with_params(ParamSet(arrays))


def latent_with(n: int, weight: float, bias: float = 0.0) -> LatentNet:
    return LatentNet(n, ParamSet({f"{PREFIX}.{k}{i}": (np.full((n, n), weight) if k == "w" else np.full(n, bias))
                                  for i in range(N_LINEAR) for k in ("w", "b")}))


@contextlib.contextmanager
def record_signs():
    """Collect the sign pattern of every leaky-ReLU input evaluated inside the block."""
    seen: list[np.ndarray] = []
    original = dc.leaky_relu

    def spy(x, slope=dc.LEAKY_SLOPE):
        seen.append(dc.as_var(x).value > 0)
        return original(x, slope)

    dc.leaky_relu = spy
    try:
        yield seen
    finally:
        dc.leaky_relu = original


def _signs(fn, params: ParamSet) -> list[np.ndarray]:
    with record_signs() as seen:
        dc.evaluate(fn, params)
    return seen


def fd_crosses_kink(fn, params: ParamSet, step: float = 1e-5) -> bool:
    """True when some central-difference probe flips a rectifier input's sign.

    Across such a flip the loss is not differentiable on the probe interval,
    so finite differences there say nothing about the analytic gradient.
    """
    base = _signs(fn, params)
    flat = params.flatten()
    for i in range(flat.size):
        for delta in (step, -step):
            probe = flat.copy()
            probe[i] += delta
            other = _signs(fn, params.unflatten(probe))
            if len(other) != len(base) or any(not np.array_equal(a, b) for a, b in zip(base, other)):
                return True
    return False


def correlated_gaussian(rows: int, n: int, rho: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    cov = np.full((n, n), rho) + (1.0 - rho) * np.eye(n)
    gen = np.random.default_rng(seed)
    return gen.multivariate_normal(np.zeros(n), cov, size=rows), cov
