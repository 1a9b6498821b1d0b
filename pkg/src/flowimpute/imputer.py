"""Test-time imputation through a checkpoint chain, error metrics, simple
baselines, a closed-form Gaussian oracle, and k-fold evaluation."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .dataset import (DataError, DataTable, RngStream, fit_scale, generate_mcar_mask, init_impute_marginal,
                      kfold_split, naive_impute)
from .trainer import CheckpointChain, TrainConfig, combine, reconstruct, train


@dataclass
class ImputationResult:
    completed: np.ndarray  # original units
    completed_scaled: np.ndarray
    n_imputed: int
    rmse_scaled: float | None = None
    rmse_raw: float | None = None
    row_rmse_scaled: np.ndarray | None = None


def rmse_missing(imputed: np.ndarray, truth: np.ndarray, mask: np.ndarray) -> float:
    """Root mean squared error over entries flagged missing (mask == 1)."""
    imputed, truth, mask = np.asarray(imputed, float), np.asarray(truth, float), np.asarray(mask)
    if not imputed.shape == truth.shape == mask.shape:
        raise ValueError("imputed, truth and mask must share a shape")
    sel = mask == 1
    if not sel.any():
        raise ValueError("RMSE over missing entries is undefined: nothing is missing")
    diff = imputed[sel] - truth[sel]
    return float(np.sqrt(np.mean(diff * diff)))


def _row_rmse(imputed, truth, mask) -> np.ndarray:
    sel = mask == 1
    sq = np.where(sel, (imputed - truth) ** 2, 0.0)
    counts = sel.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(counts > 0, np.sqrt(sq.sum(axis=1) / np.maximum(counts, 1)), np.nan)


def impute_chain(table: DataTable, chain: CheckpointChain, truth: np.ndarray | None = None) -> ImputationResult:
    """Scale, naively fill, then pass through every saved (flow, latent) pair
    in save order, rewriting only missing entries after each pass."""
    if not chain.snapshots:
        raise ValueError("checkpoint chain is empty")
    if table.shape[1] != chain.n:
        raise DataError(f"table has {table.shape[1]} columns but the chain was trained on {chain.n}")
    mask = table.mask
    x_tilde = chain.scale.scale(table.values)
    scaled = replace(table, values=x_tilde, grid_shape=chain.grid_shape or table.grid_shape)
    if mask.any():
        x_dot = naive_impute(scaled, chain.initializer, RngStream(chain.seed).child("init"))
        for _, flow, net in chain.models():
            x_dot = combine(x_tilde, reconstruct(x_dot, flow, net), mask)
    else:
        x_dot = np.array(x_tilde)
    completed = np.where(mask == 1, chain.scale.unscale(x_dot), table.values)
    result = ImputationResult(completed, x_dot, int(mask.sum()))
    if truth is not None:
        truth = np.asarray(truth, dtype=np.float64)
        truth_s = chain.scale.scale(truth)
        result.row_rmse_scaled = _row_rmse(x_dot, truth_s, mask)
        if mask.any():
            result.rmse_scaled = rmse_missing(x_dot, truth_s, mask)
            result.rmse_raw = rmse_missing(completed, truth, mask)
    return result


def baseline_impute(table: DataTable, method: str, rng: RngStream | None = None) -> np.ndarray:
    """Column-mean or marginal-sampling fill of the missing entries."""
    observed = table.mask == 0
    empty = np.flatnonzero(~observed.any(axis=0))
    if empty.size:
        raise DataError(f"columns {empty.tolist()} have no observed entries")
    if method == "mean":
        means = np.array([table.values[observed[:, j], j].mean() for j in range(table.shape[1])])
        return np.where(observed, table.values, means)
    if method == "marginal":
        if rng is None:
            raise ValueError("marginal baseline needs an RngStream")
        return init_impute_marginal(table, rng)
    raise ValueError(f"unknown baseline method {method!r}")


def gaussian_conditional_oracle(mean: np.ndarray, cov: np.ndarray, x_tilde: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """E[x_miss | x_obs] under N(mean, cov); observed entries pass through."""
    mean, cov = np.asarray(mean, float), np.asarray(cov, float)
    x = np.array(x_tilde, dtype=float)
    miss = np.asarray(mask) == 1
    if x.ndim == 2:
        return np.stack([gaussian_conditional_oracle(mean, cov, r, m) for r, m in zip(x, miss)])
    if not miss.any():
        return x
    obs = ~miss
    if not obs.any():
        x[miss] = mean[miss]
        return x
    s_oo = cov[np.ix_(obs, obs)]
    s_mo = cov[np.ix_(miss, obs)]
    try:
        chol = np.linalg.cholesky(s_oo)
    except np.linalg.LinAlgError:
        raise ValueError("observed-block covariance is singular or not positive definite") from None
    resid = x[obs] - mean[obs]
    sol = np.linalg.solve(chol.T, np.linalg.solve(chol, resid))
    x[miss] = mean[miss] + s_mo @ sol
    return x


# ---------------------------------------------------------------------------
# Cross-validated evaluation
# ---------------------------------------------------------------------------


@dataclass
class FoldMetrics:
    fold: int
    rmse_scaled: float
    rmse_raw: float
    n_imputed: int


def fold_seeds(seed: int, k: int) -> list[int]:
    gen = RngStream(seed).child("fold-seeds").generator
    return [int(s) for s in gen.integers(0, 2**63 - 1, size=k)]


def cross_validate(truth: np.ndarray, rate: float, k: int, seed: int, config: TrainConfig | None = None,
                   method: str = "flow", guard: bool = False) -> list[FoldMetrics]:
    """Corrupt a complete matrix at ``rate`` (MCAR), then for each fold train
    on the remaining rows and impute the held-out rows.

    ``method`` is ``flow`` (train + chain imputation) or a baseline name
    (``mean``/``marginal``), which is fitted on the held-out rows alone. RMSE is
    scaled with the training rows' observed ranges.
    """
    truth = np.asarray(truth, dtype=np.float64)
    root = RngStream(seed)
    mask = generate_mcar_mask(truth.shape, rate, root.child("mask"), guard=guard)
    table = DataTable(truth, mask)
    folds = kfold_split(truth.shape[0], k, root.child("folds"))
    seeds = fold_seeds(seed, k)
    out = []
    for f, test_idx in enumerate(folds):
        train_idx = np.setdiff1d(np.arange(truth.shape[0]), test_idx)
        test = table.rows(test_idx)
        fold_truth = truth[test_idx]
        if method == "flow":
            cfg = replace(config or TrainConfig(), seed=seeds[f])
            chain, _ = train(table.rows(train_idx), cfg)
            res = impute_chain(test, chain, truth=fold_truth)
            out.append(FoldMetrics(f, res.rmse_scaled, res.rmse_raw, res.n_imputed))
        else:
            scale = fit_scale(table.rows(train_idx))
            filled = baseline_impute(test, method, RngStream(seeds[f]).child("baseline"))
            out.append(FoldMetrics(
                f, rmse_missing(scale.scale(filled), scale.scale(fold_truth), test.mask),
                rmse_missing(filled, fold_truth, test.mask), int(test.mask.sum())))
    return out
