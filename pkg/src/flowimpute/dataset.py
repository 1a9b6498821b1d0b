"""Tabular/grid data with missing entries: ingestion, MCAR masks, min-max
scaling, naive initial imputation and fold splitting.

Mask convention throughout the package: 1 = missing, 0 = observed.
"""

from __future__ import annotations

import csv
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

MISSING_TOKENS = ("", "nan", "NaN", "NAN")


class DataError(ValueError):
    """Malformed or unusable input data."""


class RngStream:
    """Seedable PCG64 stream.

    Child streams are derived from ``(seed, key)`` through numpy's
    ``SeedSequence``, so every consumer (masks, partitions, initializers,
    shuffling) gets an independent but reproducible sequence.
    """

    algorithm = "PCG64"

    def __init__(self, seed: int, *, _entropy: Sequence[int] | None = None):
        self.seed = int(seed)
        self._entropy = tuple(_entropy) if _entropy is not None else (self.seed,)
        self.generator = np.random.Generator(np.random.PCG64(np.random.SeedSequence(list(self._entropy))))

    def child(self, key: str | int) -> "RngStream":
        if isinstance(key, str):
            key = zlib.crc32(key.encode("utf-8"))
        return RngStream(self.seed, _entropy=self._entropy + (int(key),))

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, path={self._entropy[1:]})"


@dataclass(frozen=True)
class DataTable:
    values: np.ndarray
    mask: np.ndarray
    columns: tuple[str, ...] | None = None
    grid_shape: tuple[int, int, int] | None = None

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64)
        mask = np.array(self.mask, dtype=np.uint8)
        if values.ndim != 2:
            raise DataError(f"values must be 2-d, got shape {values.shape}")
        if values.shape != mask.shape:
            raise DataError(f"values shape {values.shape} != mask shape {mask.shape}")
        if not np.isin(mask, (0, 1)).all():
            raise DataError("mask must be binary")
        if not np.all(np.isfinite(values[mask == 0])):
            raise DataError("observed entries must be finite")
        # missing slots are stored as NaN so they can never leak into results
        values[mask == 1] = np.nan
        if self.grid_shape is not None:
            grid = tuple(int(g) for g in self.grid_shape)
            if len(grid) != 3 or int(np.prod(grid)) != values.shape[1]:
                raise DataError(f"grid shape {grid} does not multiply out to {values.shape[1]} columns")
            object.__setattr__(self, "grid_shape", grid)
        if self.columns is not None:
            if len(self.columns) != values.shape[1]:
                raise DataError("column name count does not match data width")
            object.__setattr__(self, "columns", tuple(self.columns))
        values.flags.writeable = False
        mask.flags.writeable = False
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "mask", mask)

    @classmethod
    def from_complete(cls, values, mask=None, **kw) -> "DataTable":
        values = np.asarray(values, dtype=np.float64)
        if mask is None:
            mask = np.zeros(values.shape, dtype=np.uint8)
        return cls(values, mask, **kw)

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    @property
    def missing_rate(self) -> float:
        return float(self.mask.mean()) if self.mask.size else 0.0

    def rows(self, idx) -> "DataTable":
        return replace(self, values=self.values[idx], mask=self.mask[idx])

    def with_values(self, values) -> "DataTable":
        return replace(self, values=values)


@dataclass(frozen=True)
class ScaleParams:
    minimum: np.ndarray
    maximum: np.ndarray
    mode: str = "tabular"  # or "image"

    def __post_init__(self):
        if self.mode not in ("tabular", "image"):
            raise ValueError(f"unknown scale mode {self.mode!r}")
        lo = np.asarray(self.minimum, dtype=np.float64)
        hi = np.asarray(self.maximum, dtype=np.float64)
        if np.any(hi < lo):
            raise ValueError("scale maximum below minimum")
        object.__setattr__(self, "minimum", lo)
        object.__setattr__(self, "maximum", hi)

    def scale(self, x: np.ndarray) -> np.ndarray:
        span = self.maximum - self.minimum
        flat = span == 0
        out = (x - self.minimum) / np.where(flat, 1.0, span)
        return np.where(flat, 0.5, out)

    def unscale(self, x: np.ndarray) -> np.ndarray:
        return self.minimum + x * (self.maximum - self.minimum)


# ---------------------------------------------------------------------------
# I/O
# ---------------------------------------------------------------------------


def load_csv(path, has_header: bool = False) -> DataTable:
    """Read a numeric CSV; empty cells and ``NaN`` become missing entries.

    Blank lines are skipped, so a one-column file must spell missing values
    as ``NaN``.
    """
    path = Path(path)
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    header = None
    if has_header:
        if not rows:
            raise DataError(f"{path}: empty file, header expected")
        header, rows = tuple(h.strip() for h in rows[0]), rows[1:]
    rows = [r for r in rows if r]
    if not rows:
        raise DataError(f"{path}: no data rows")
    width = len(header) if header is not None else len(rows[0])
    values = np.empty((len(rows), width))
    mask = np.zeros((len(rows), width), dtype=np.uint8)
    for i, row in enumerate(rows):
        if len(row) != width:
            raise DataError(f"{path}: row {i + 1} has {len(row)} columns, expected {width}")
        for j, cell in enumerate(row):
            cell = cell.strip()
            if cell in MISSING_TOKENS:
                mask[i, j] = 1
                values[i, j] = np.nan
                continue
            try:
                values[i, j] = float(cell)
            except ValueError:
                raise DataError(f"{path}: cannot parse {cell!r} at row {i + 1}, column {j + 1}") from None
            if not np.isfinite(values[i, j]):
                raise DataError(f"{path}: non-finite value at row {i + 1}, column {j + 1}")
    return DataTable(values, mask, columns=header)


def _fmt(x: float) -> str:
    return repr(float(x))


def write_matrix_csv(path, matrix: np.ndarray, mask: np.ndarray | None = None,
                     columns: Sequence[str] | None = None) -> None:
    """Write a matrix; entries flagged in ``mask`` are written as empty cells."""
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if columns is not None:
            w.writerow(columns)
        for i, row in enumerate(matrix):
            if mask is None:
                w.writerow([_fmt(v) for v in row])
            else:
                w.writerow(["" if mask[i, j] else _fmt(v) for j, v in enumerate(row)])


def write_mask_csv(path, mask: np.ndarray) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        for row in mask:
            w.writerow([str(int(v)) for v in row])


def load_mask_csv(path, shape: tuple[int, int] | None = None) -> np.ndarray:
    path = Path(path)
    with path.open(newline="") as fh:
        rows = [r for r in csv.reader(fh) if r]
    try:
        mask = np.array([[int(c) for c in r] for r in rows], dtype=np.uint8)
    except ValueError:
        raise DataError(f"{path}: mask entries must be 0 or 1") from None
    if mask.ndim != 2 or not np.isin(mask, (0, 1)).all():
        raise DataError(f"{path}: mask must be a rectangular 0/1 matrix")
    if shape is not None and mask.shape != tuple(shape):
        raise DataError(f"{path}: mask shape {mask.shape} does not match data shape {tuple(shape)}")
    return mask


# ---------------------------------------------------------------------------
# Masks, scaling, initial imputation, folds
# ---------------------------------------------------------------------------


def generate_mcar_mask(shape: tuple[int, int], rate: float, rng: RngStream, guard: bool = False) -> np.ndarray:
    """Independent Bernoulli(rate) missingness; never looks at data values.

    With ``guard`` set, a row that came out fully missing gets one uniformly
    chosen entry flipped back to observed.
    """
    if not 0.0 <= rate <= 1.0:
        raise ValueError(f"missing rate must lie in [0, 1], got {rate}")
    gen = rng.generator
    mask = (gen.random(shape) < rate).astype(np.uint8)
    if guard and shape[1] > 0:
        for i in np.flatnonzero(mask.all(axis=1)):
            mask[i, gen.integers(shape[1])] = 0
    return mask


def apply_mask(values: np.ndarray, mask: np.ndarray, **kw) -> DataTable:
    return DataTable(np.asarray(values, dtype=np.float64), mask, **kw)


def fit_scale(table: DataTable) -> ScaleParams:
    n = table.shape[1]
    if table.grid_shape is not None:
        return ScaleParams(np.zeros(n), np.full(n, 255.0), mode="image")
    observed = table.mask == 0
    empty = np.flatnonzero(~observed.any(axis=0))
    if empty.size:
        raise DataError(f"columns {empty.tolist()} have no observed entries; drop them before scaling")
    vals = np.where(observed, table.values, np.nan)
    return ScaleParams(np.nanmin(vals, axis=0), np.nanmax(vals, axis=0), mode="tabular")


def minmax_scale(table: DataTable, params: ScaleParams | None = None) -> tuple[DataTable, ScaleParams]:
    """Scale observed entries to [0, 1] using observed-only column ranges
    (tabular) or the fixed 0..255 pixel range (grid data)."""
    params = params or fit_scale(table)
    return table.with_values(params.scale(table.values)), params


def unscale(table: DataTable, params: ScaleParams) -> DataTable:
    return table.with_values(params.unscale(table.values))


def _check_observed_columns(table: DataTable) -> None:
    empty = np.flatnonzero(~(table.mask == 0).any(axis=0))
    if empty.size:
        raise DataError(f"columns {empty.tolist()} have no observed entries")


def init_impute_marginal(table: DataTable, rng: RngStream) -> np.ndarray:
    """Fill each missing entry with a uniform draw from its column's observed values."""
    _check_observed_columns(table)
    out = np.array(table.values)
    gen = rng.generator
    for j in range(table.shape[1]):
        miss = table.mask[:, j] == 1
        if not miss.any():
            continue
        pool = table.values[~miss, j]
        out[miss, j] = pool[gen.integers(pool.size, size=int(miss.sum()))]
    return out


def _ring(r0: int, c0: int, radius: int, rows: int, cols: int) -> list[tuple[int, int]]:
    cells = []
    for r in range(r0 - radius, r0 + radius + 1):
        if not 0 <= r < rows:
            continue
        if r in (r0 - radius, r0 + radius):
            cs = range(c0 - radius, c0 + radius + 1)
        else:
            cs = (c0 - radius, c0 + radius)
        cells.extend((r, c) for c in cs if 0 <= c < cols)
    return cells


def init_impute_nearest(table: DataTable, rng: RngStream) -> np.ndarray:
    """Fill each missing pixel with a uniform draw from the observed pixels
    (same channel) on the smallest Chebyshev ring that contains any."""
    if table.grid_shape is None:
        raise DataError("nearest-neighbour initialisation needs a grid shape")
    rows, cols, chans = table.grid_shape
    out = np.array(table.values)
    gen = rng.generator
    for i in range(table.shape[0]):
        img = table.values[i].reshape(rows, cols, chans)
        miss = table.mask[i].reshape(rows, cols, chans) == 1
        filled = out[i].reshape(rows, cols, chans)
        for ch in range(chans):
            if miss[:, :, ch].all():
                raise DataError(f"image {i} channel {ch} has no observed pixels")
            for r0, c0 in zip(*np.nonzero(miss[:, :, ch])):
                for radius in range(1, max(rows, cols)):
                    cand = [img[r, c, ch] for r, c in _ring(r0, c0, radius, rows, cols) if not miss[r, c, ch]]
                    if cand:
                        filled[r0, c0, ch] = cand[gen.integers(len(cand))]
                        break
        out[i] = filled.reshape(-1)
    return out


def naive_impute(table: DataTable, method: str, rng: RngStream) -> np.ndarray:
    if method == "marginal":
        return init_impute_marginal(table, rng)
    if method == "nearest":
        return init_impute_nearest(table, rng)
    raise ValueError(f"unknown initializer {method!r}")


def kfold_split(n: int, k: int, rng: RngStream) -> list[np.ndarray]:
    if k < 2:
        raise ValueError("need at least 2 folds")
    if k > n:
        raise ValueError(f"cannot split {n} rows into {k} folds")
    perm = rng.generator.permutation(n)
    return [np.sort(f) for f in np.array_split(perm, k)]
