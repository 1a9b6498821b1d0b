"""Alternating training loop.

Every mini-batch updates the flow on the negative log-likelihood of the
current completed data and the latent net on its reconstruction/likelihood
loss, in one pass. At schedule epochs the missing entries of the training
matrix are rewritten from the current model, both networks are snapshotted,
and the flow is re-initialised.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from . import diffcore as dc
from .dataset import DataError, DataTable, RngStream, ScaleParams, minmax_scale, naive_impute
from .diffcore import AdamState, NonFiniteError, ParamSet, adam_step
from .flow import CouplingLayer, FlowModel, flow_forward, flow_inverse, hidden_width
from .latent import LatentNet, h_terms, latent_map, observed_weights

log = logging.getLogger(__name__)

SCHEDULE_MODES = ("power-of-2", "every-epoch")
INITIALIZERS = ("marginal", "nearest")
HIGH_MISSING_RATE = 0.6
HIGH_MISSING_LR = 1e-3


class TrainingError(RuntimeError):
    """Numerical failure during training (non-finite loss)."""

    def __init__(self, message: str, epoch: int | None = None, batch: int | None = None):
        self.epoch, self.batch = epoch, batch
        super().__init__(message)


@dataclass
class TrainConfig:
    epochs: int = 500
    learning_rate: float = 1e-4
    batch_size: int = 128
    lam: float = 0.01
    seed: int = 0
    schedule_mode: str = "power-of-2"
    high_missing_lr_switch: bool = True
    convergence_window: int = 10
    convergence_tol: float = 1e-3
    initializer: str = "marginal"
    n_layers: int = 6
    hidden: int | None = None  # None: max(n, 8)
    latent_identity_init: bool = False

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")
        if self.schedule_mode not in SCHEDULE_MODES:
            raise ValueError(f"schedule_mode must be one of {SCHEDULE_MODES}")
        if self.initializer not in INITIALIZERS:
            raise ValueError(f"initializer must be one of {INITIALIZERS}")

    def effective_lr(self, missing_rate: float) -> float:
        if self.high_missing_lr_switch and missing_rate > HIGH_MISSING_RATE:
            return HIGH_MISSING_LR
        return self.learning_rate

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass
class Snapshot:
    epoch: int
    theta: ParamSet
    phi: ParamSet


@dataclass
class CheckpointChain:
    """Everything needed to impute new data: the saved (flow, latent) pairs in
    save order plus the preprocessing that produced the training matrix."""

    n: int
    partitions: list[np.ndarray]
    hidden: int
    snapshots: list[Snapshot]
    scale: ScaleParams
    initializer: str
    seed: int
    grid_shape: tuple[int, int, int] | None = None
    config: dict = field(default_factory=dict)

    @property
    def epochs(self) -> list[int]:
        return [s.epoch for s in self.snapshots]

    def template_flow(self) -> FlowModel:
        layers = [CouplingLayer(i, d, self.hidden) for i, d in enumerate(self.partitions)]
        return FlowModel(layers, self.snapshots[0].theta if self.snapshots else ParamSet())

    def models(self):
        """Yield (epoch, FlowModel, LatentNet) for each snapshot in order."""
        base = self.template_flow()
        for snap in self.snapshots:
            yield snap.epoch, base.with_params(snap.theta), LatentNet(self.n, snap.phi)


@dataclass
class EpochRecord:
    epoch: int
    nll_loss: float
    h_loss: float
    schedule_event: bool


@dataclass
class TrainingLog:
    records: list[EpochRecord] = field(default_factory=list)
    learning_rate: float = 0.0
    dropped_rows: list[int] = field(default_factory=list)
    converged_epoch: int | None = None

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records])

    def write_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("epoch,nll_loss,h_loss,schedule_event\n")
            for r in self.records:
                fh.write(f"{r.epoch},{r.nll_loss!r},{r.h_loss!r},{int(r.schedule_event)}\n")


# ---------------------------------------------------------------------------


def combine(x_tilde: np.ndarray, x_hat: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Observed entries from ``x_tilde``, missing ones from ``x_hat``."""
    x_tilde, x_hat, mask = np.asarray(x_tilde), np.asarray(x_hat), np.asarray(mask)
    if not x_tilde.shape == x_hat.shape == mask.shape:
        raise ValueError(f"shape mismatch: {x_tilde.shape}, {x_hat.shape}, {mask.shape}")
    return np.where(mask == 1, x_hat, x_tilde)


def is_schedule_epoch(epoch: int) -> bool:
    """True for epochs 1, 2, 4, 8, ... (1-indexed)."""
    if epoch < 1:
        raise ValueError("epochs are 1-indexed")
    return epoch & (epoch - 1) == 0


def expected_snapshot_count(epochs: int) -> int:
    return epochs.bit_length()  # floor(log2 M) + 1


def reconstruct(x_dot: np.ndarray, flow: FlowModel, net: LatentNet) -> np.ndarray:
    """x_hat = g^-1(h(g(x_dot))), evaluated without recording gradients."""
    z, _ = flow_forward(x_dot, flow)
    return flow_inverse(latent_map(z, net), flow).value


def refresh(x_dot: np.ndarray, x_tilde: np.ndarray, mask: np.ndarray, flow: FlowModel, net: LatentNet) -> np.ndarray:
    return combine(x_tilde, reconstruct(x_dot, flow, net), mask)


def _joint_step(xb, wb, flow, net, theta, phi, lam):
    """Gradients of flow NLL w.r.t. theta and latent loss w.r.t. phi, sharing
    one forward encoding of the batch."""
    parts = {}

    def loss_fn(leaves):
        th = {k: leaves[k] for k in theta}
        ph = {k: leaves[k] for k in phi}
        z, logdet = flow_forward(xb, flow, th)
        nll = -dc.mean(dc.gaussian_logpdf(z) + logdet)
        hl, _, _ = h_terms(xb, z.value, wb, flow, net, lam, th, ph)
        parts["nll"], parts["h"] = float(nll.value), float(hl.value)
        return nll + hl

    _, grads = dc.evaluate_with_gradients(loss_fn, theta.merged(phi))
    return parts["nll"], parts["h"], grads


def _moving_average_converged(values: np.ndarray, window: int, tol: float) -> bool:
    if values.size < 2 * window:
        return False
    prev = values[-2 * window:-window].mean()
    cur = values[-window:].mean()
    return abs(cur - prev) <= tol * max(abs(prev), 1e-12)


EpochCallback = Callable[[int, np.ndarray, FlowModel, LatentNet], None]


def train(table: DataTable, config: TrainConfig,
          callback: EpochCallback | None = None) -> tuple[CheckpointChain, TrainingLog]:
    """Fit flow and latent net on an incomplete table (raw units).

    ``callback(epoch, x_dot, flow, latent)`` is invoked after each epoch's
    schedule handling, with the current completed training matrix.
    """
    if table.shape[0] == 0 or table.shape[1] == 0:
        raise DataError("cannot train on an empty table")
    if config.initializer == "nearest" and table.grid_shape is None:
        raise DataError("nearest-neighbour initialisation needs grid-shaped data")

    tlog = TrainingLog()
    empty_rows = np.flatnonzero(table.mask.all(axis=1))
    if empty_rows.size:
        log.warning("dropping %d rows with no observed entries", empty_rows.size)
        tlog.dropped_rows = empty_rows.tolist()
        table = table.rows(np.flatnonzero(~table.mask.all(axis=1)))
        if table.shape[0] == 0:
            raise DataError("every row is fully missing")

    root = RngStream(config.seed)
    scaled, scale = minmax_scale(table)
    x_tilde = np.array(scaled.values)
    mask = np.array(table.mask)
    x_dot = naive_impute(scaled, config.initializer, root.child("init"))
    weights = observed_weights(mask)
    n_rows, n = x_dot.shape

    hidden = config.hidden or hidden_width(n)
    flow = FlowModel.create(n, root.child("flow"), n_layers=config.n_layers, hidden=hidden)
    net = LatentNet.create(n, root.child("latent"), identity_init=config.latent_identity_init)
    lr = config.effective_lr(table.missing_rate)
    tlog.learning_rate = lr
    opt_g = AdamState.fresh(flow.params, lr=lr)
    opt_h = AdamState.fresh(net.params, lr=lr)
    shuffle = root.child("shuffle").generator
    reset_root = root.child("reset")

    snapshots: list[Snapshot] = []
    for epoch in range(1, config.epochs + 1):
        order = shuffle.permutation(n_rows)
        nll_sum = h_sum = 0.0
        for b, start in enumerate(range(0, n_rows, config.batch_size)):
            idx = order[start:start + config.batch_size]
            try:
                # overflow surfaces as NonFiniteError from the offending primitive
                with np.errstate(over="ignore", invalid="ignore"):
                    nll, hl, grads = _joint_step(x_dot[idx], weights[idx], flow, net, flow.params, net.params,
                                                 config.lam)
            except NonFiniteError as err:
                raise TrainingError(f"epoch {epoch}, batch {b}: {err}", epoch, b) from err
            if not (np.isfinite(nll) and np.isfinite(hl)):
                raise TrainingError(f"epoch {epoch}, batch {b}: non-finite loss", epoch, b)
            theta, opt_g = adam_step(flow.params, grads.subset(list(flow.params.keys())), opt_g)
            phi, opt_h = adam_step(net.params, grads.subset(list(net.params.keys())), opt_h)
            flow, net = flow.with_params(theta), net.with_params(phi)
            nll_sum += nll * idx.size
            h_sum += hl * idx.size

        event = is_schedule_epoch(epoch)
        if event or config.schedule_mode == "every-epoch":
            try:
                with np.errstate(over="ignore", invalid="ignore"):
                    x_dot = refresh(x_dot, x_tilde, mask, flow, net)
            except NonFiniteError as err:
                raise TrainingError(f"epoch {epoch}, data refresh: {err}", epoch) from err
            snapshots.append(Snapshot(epoch, flow.params.copy(), net.params.copy()))
        if event:
            flow = flow.with_params(flow.fresh_params(reset_root.child(epoch)))
            opt_g = AdamState.fresh(flow.params, lr=lr)

        tlog.records.append(EpochRecord(epoch, nll_sum / n_rows, h_sum / n_rows, event))
        if tlog.converged_epoch is None and all(
            _moving_average_converged(tlog.column(c), config.convergence_window, config.convergence_tol)
            for c in ("nll_loss", "h_loss")
        ):
            tlog.converged_epoch = epoch
        log.debug("epoch %d nll=%.6f h=%.6f%s", epoch, tlog.records[-1].nll_loss,
                  tlog.records[-1].h_loss, " [schedule]" if event else "")
        if callback is not None:
            callback(epoch, x_dot, flow, net)

    chain = CheckpointChain(
        n=n, partitions=[d.copy() for d in flow.partitions], hidden=hidden, snapshots=snapshots,
        scale=scale, initializer=config.initializer, seed=config.seed,
        grid_shape=table.grid_shape, config=config.as_dict(),
    )
    return chain, tlog
