"""Feedforward network acting on flow embeddings, and its training loss.

The net has five square linear layers (width = data dimension) with
leaky-ReLU between them and a linear output. Its loss reconstructs observed
entries through the inverse flow and rewards likely reconstructions; the flow
parameters are held fixed inside it.
"""

from __future__ import annotations

from typing import Mapping

import numpy as np

from . import diffcore as dc
from .dataset import RngStream
from .diffcore import ParamSet, Var
from .flow import FlowModel, flow_forward, flow_inverse, log_likelihood, mlp

N_LINEAR = 5
PREFIX = "h"


class LatentNet:
    def __init__(self, n: int, params: ParamSet):
        expected = {f"{PREFIX}.{k}{i}": ((n, n) if k == "w" else (n,))
                    for i in range(N_LINEAR) for k in ("w", "b")}
        if dict(params.shapes) != expected:
            raise ValueError(f"latent net parameters do not match a {N_LINEAR}-layer width-{n} net")
        self.n = n
        self.params = params

    @classmethod
    def create(cls, n: int, rng: RngStream, identity_init: bool = False, noise: float = 1e-2) -> "LatentNet":
        return cls(n, cls.fresh_params(n, rng, identity_init, noise))

    @staticmethod
    def fresh_params(n: int, rng: RngStream, identity_init: bool = False, noise: float = 1e-2) -> ParamSet:
        gen = rng.generator
        bound = 1.0 / np.sqrt(n)
        arrays = {}
        for i in range(N_LINEAR):
            if identity_init:
                w = np.eye(n) + noise * gen.uniform(-bound, bound, size=(n, n))
            else:
                w = gen.uniform(-bound, bound, size=(n, n))
            arrays[f"{PREFIX}.w{i}"] = w
            arrays[f"{PREFIX}.b{i}"] = np.zeros(n)
        return ParamSet(arrays)

    @classmethod
    def identity(cls, n: int) -> "LatentNet":
        return cls(n, ParamSet({f"{PREFIX}.{k}{i}": (np.eye(n) if k == "w" else np.zeros(n))
                                for i in range(N_LINEAR) for k in ("w", "b")}))

    def with_params(self, params: ParamSet) -> "LatentNet":
        return LatentNet(self.n, params)


def latent_map(z, net: LatentNet, params: Mapping | None = None) -> Var:
    z = dc.as_var(z)
    if z.shape[-1] != net.n:
        raise ValueError(f"embedding dimension {z.shape[-1]} does not match latent net width {net.n}")
    single = z.value.ndim == 1
    if single:
        z = dc.reshape(z, (1, net.n))
    out = mlp(z, net.params if params is None else params, PREFIX, N_LINEAR)
    return dc.reshape(out, (net.n,)) if single else out


def _frozen(params: Mapping) -> dict[str, Var]:
    return {k: dc.stop_gradient(v) for k, v in params.items()}


def observed_weights(masks: np.ndarray) -> np.ndarray:
    """Per-entry weights averaging squared error over each row's observed entries."""
    obs = 1.0 - np.asarray(masks, dtype=np.float64)
    counts = obs.sum(axis=1, keepdims=True)
    if np.any(counts == 0):
        rows = np.flatnonzero(counts[:, 0] == 0).tolist()
        raise ValueError(f"rows {rows} have no observed entries; reconstruction error is undefined")
    return obs / counts


def h_terms(x: np.ndarray, z: np.ndarray, weights: np.ndarray, flow: FlowModel, net: LatentNet,
            lam: float, theta: Mapping | None = None, phi: Mapping | None = None) -> tuple[Var, Var, Var]:
    """Latent-net loss given precomputed embeddings ``z = g(x)``.

    Returns (loss, reconstruction, log-likelihood of reconstruction). The flow
    parameters enter only through stop-gradient copies.
    """
    theta_c = _frozen(flow.params if theta is None else theta)
    z_hat = latent_map(dc.stop_gradient(z), net, phi)
    x_hat = flow_inverse(z_hat, flow, theta_c)
    ll = log_likelihood(x_hat, flow, theta_c)
    mse = dc.sum(dc.squared_error(x_hat, x) * weights, axis=1)
    loss = dc.mean(mse - ll * lam)
    return loss, x_hat, ll


def h_loss(batch: np.ndarray, masks: np.ndarray, flow: FlowModel, net: LatentNet, lam: float,
           theta: Mapping | None = None, phi: Mapping | None = None) -> Var:
    """Mean over rows of observed-entry MSE(x, x_hat) minus lam * log p(x_hat)."""
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ValueError("h_loss expects a non-empty (B, n) batch")
    weights = observed_weights(masks)
    theta_c = _frozen(flow.params if theta is None else theta)
    z, _ = flow_forward(x, flow, theta_c)
    loss, _, _ = h_terms(x, z.value, weights, flow, net, lam, theta_c, phi)
    return loss
