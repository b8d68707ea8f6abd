"""Series ingestion, normalization, windowing, folds, spatial orderings and synthetic data.

A series is stored time-major: ``values[t, s]`` is location ``s`` at step
``t``.  Windows are indexed by their first timestep; window ``i`` reads rows
``i .. i + T - 1`` and predicts rows ``i + T .. i + T + T' - 1``.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from datetime import datetime, timedelta
from pathlib import Path
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class DataError(ValueError):
    """Malformed or unusable input data."""


@dataclass(frozen=True, eq=False)
class StSeries:
    """An ``N x S`` spatio-temporal series with location metadata."""

    values: np.ndarray
    timestamps: tuple[datetime, ...]
    coords: np.ndarray
    names: tuple[str, ...]
    timestep: timedelta
    missing_count: int = 0

    def __post_init__(self) -> None:
        values = np.array(self.values, dtype=np.float64)
        coords = np.array(self.coords, dtype=np.float64)
        if values.ndim != 2 or values.shape[0] < 1 or values.shape[1] < 1:
            raise DataError(f"values must be a non-empty N x S matrix, got shape {values.shape}")
        n, s = values.shape
        if not np.all(np.isfinite(values)):
            raise DataError("values contain NaN or infinite entries")
        if coords.shape != (s, 2):
            raise DataError(f"coords must have shape ({s}, 2), got {coords.shape}")
        if not np.all(np.isfinite(coords)):
            raise DataError("coords contain NaN or infinite entries")
        if len(self.names) != s or len(set(self.names)) != s:
            raise DataError("names must be S distinct labels")
        if len(self.timestamps) != n:
            raise DataError(f"{len(self.timestamps)} timestamps for {n} rows")
        if self.timestep <= timedelta(0):
            raise DataError("timestep must be positive")
        for a, b in zip(self.timestamps, self.timestamps[1:]):
            if b - a != self.timestep:
                raise DataError(f"timestamps must be strictly increasing with stride "
                                f"{self.timestep}; found {a.isoformat()} -> {b.isoformat()}")
        values.flags.writeable = False
        coords.flags.writeable = False
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "coords", coords)
        object.__setattr__(self, "names", tuple(str(x) for x in self.names))
        object.__setattr__(self, "timestamps", tuple(self.timestamps))

    @property
    def N(self) -> int:
        return self.values.shape[0]

    @property
    def S(self) -> int:
        return self.values.shape[1]

    def with_values(self, values: np.ndarray) -> StSeries:
        return StSeries(values, self.timestamps, self.coords, self.names, self.timestep,
                        self.missing_count)

    def select(self, columns: Sequence[int]) -> StSeries:
        """Reorder (or subset) locations; ``values[:, columns]`` with matching metadata."""
        idx = np.asarray(columns, dtype=np.intp)
        return StSeries(self.values[:, idx], self.timestamps, self.coords[idx],
                        tuple(self.names[i] for i in idx), self.timestep, self.missing_count)


def hourly_timestamps(n: int, start: datetime = datetime(2020, 1, 1)) -> tuple[datetime, ...]:
    return tuple(start + timedelta(hours=i) for i in range(n))


# ------------------------------------------------------------------------ CSV


def default_coords_path(path: str | Path) -> Path:
    p = Path(path)
    return p.with_name(p.stem + ".coords.csv")


def _parse_time(text: str, row: int) -> datetime:
    try:
        return datetime.fromisoformat(text.strip())
    except ValueError:
        raise DataError(f"row {row}: cannot parse timestamp {text!r}") from None


def load_csv(path: str | Path, coords_path: str | Path | None = None,
             max_missing: float = 0.2) -> StSeries:
    """Read a wide CSV (timestamp column, one column per location) and its coordinate sidecar.

    Missing cells (empty or ``NaN``) are forward-filled, then back-filled; the
    number filled is kept in ``missing_count``.  The sidecar defaults to
    ``<stem>.coords.csv`` next to ``path`` and has columns ``name,x,y``.
    """
    path = Path(path)
    coords_path = default_coords_path(path) if coords_path is None else Path(coords_path)
    for p in (path, coords_path):
        if not p.is_file():
            raise FileNotFoundError(f"no such file: {p}")
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if len(rows) < 2:
        raise DataError(f"{path}: need a header and at least one data row")
    header = [h.strip() for h in rows[0]]
    names = header[1:]
    if not names:
        raise DataError(f"{path}: no location columns")
    stamps, table = [], []
    for r, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != len(header):
            raise DataError(f"{path}:{r}: expected {len(header)} fields, got {len(row)}")
        stamps.append(_parse_time(row[0], r))
        cells = []
        for cell in row[1:]:
            cell = cell.strip()
            cells.append(math.nan if cell == "" or cell.lower() == "nan" else float(cell))
        table.append(cells)
    values = np.array(table, dtype=np.float64)
    missing = np.isnan(values)
    frac = missing.mean(axis=0)
    for j in np.flatnonzero(frac > max_missing):
        raise DataError(f"{path}: column {names[j]!r} is {frac[j]:.0%} missing "
                        f"(limit {max_missing:.0%})")
    for j in np.flatnonzero(missing.all(axis=0)):
        raise DataError(f"{path}: column {names[j]!r} has no values")
    for j in range(values.shape[1]):
        col = values[:, j]
        for t in range(1, len(col)):
            if math.isnan(col[t]):
                col[t] = col[t - 1]
        for t in range(len(col) - 2, -1, -1):
            if math.isnan(col[t]):
                col[t] = col[t + 1]
    if len(stamps) < 2:
        step = timedelta(hours=1)
    else:
        step = stamps[1] - stamps[0]
        for a, b in zip(stamps, stamps[1:]):
            if b <= a:
                raise DataError(f"{path}: timestamps not increasing at {b.isoformat()}")
    coords = _read_coords(coords_path, names)
    return StSeries(values, tuple(stamps), coords, tuple(names), step, int(missing.sum()))


def _read_coords(path: Path, names: Sequence[str]) -> np.ndarray:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"name", "x", "y"} <= set(reader.fieldnames):
            raise DataError(f"{path}: coordinate file needs columns name,x,y")
        table = {row["name"].strip(): (float(row["x"]), float(row["y"])) for row in reader}
    unknown = [n for n in names if n not in table]
    if unknown:
        raise DataError(f"{path}: no coordinates for locations {unknown}")
    extra = sorted(set(table) - set(names))
    if extra:
        raise DataError(f"{path}: coordinates for unknown locations {extra}")
    return np.array([table[n] for n in names], dtype=np.float64)


def write_csv(series: StSeries, path: str | Path, coords_path: str | Path | None = None) -> None:
    """Write ``series`` in the format read by :func:`load_csv` (floats round-trip exactly)."""
    path = Path(path)
    coords_path = default_coords_path(path) if coords_path is None else Path(coords_path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["timestamp", *series.names])
        for ts, row in zip(series.timestamps, series.values):
            w.writerow([ts.isoformat(), *(repr(float(v)) for v in row)])
    with open(coords_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["name", "x", "y"])
        for name, (x, y) in zip(series.names, series.coords):
            w.writerow([name, repr(float(x)), repr(float(y))])


# ------------------------------------------------------------------ z-scoring


@dataclass(frozen=True, eq=False)
class ZScore:
    """Per-location mean and population standard deviation."""

    mean: np.ndarray
    std: np.ndarray

    def apply(self, values: np.ndarray) -> np.ndarray:
        return (np.asarray(values, dtype=np.float64) - self.mean) / self.std

    def invert(self, values: np.ndarray) -> np.ndarray:
        return np.asarray(values, dtype=np.float64) * self.std + self.mean


def zscore_fit(train_values: np.ndarray, names: Sequence[str] | None = None) -> ZScore:
    v = np.asarray(train_values, dtype=np.float64)
    if v.ndim != 2 or v.shape[0] < 1:
        raise DataError(f"expected an n x S training matrix, got shape {v.shape}")
    mean = v.mean(axis=0)
    std = v.std(axis=0)
    for j in np.flatnonzero(std == 0):
        label = names[j] if names is not None else f"column {j}"
        raise DataError(f"location {label} is constant on the training range")
    return ZScore(mean, std)


def zscore_apply(z: ZScore, values: np.ndarray) -> np.ndarray:
    return z.apply(values)


def zscore_invert(z: ZScore, values: np.ndarray) -> np.ndarray:
    return z.invert(values)


# ------------------------------------------------------------------ windowing


@dataclass(frozen=True, eq=False)
class Sample:
    x: np.ndarray
    y: np.ndarray
    origin_index: int


def num_windows(n: int, T: int, T_out: int) -> int:
    return n - T - T_out + 1


def window_arrays(values: np.ndarray, T: int, T_out: int) -> tuple[np.ndarray, np.ndarray]:
    """All stride-1 windows as arrays ``X (n_w, T, S)`` and ``Y (n_w, T', S)``."""
    v = np.asarray(values, dtype=np.float64)
    if T < 1 or T_out < 1:
        raise DataError(f"T and T' must be positive, got {T}, {T_out}")
    if v.shape[0] < T + T_out:
        raise DataError(f"series of length {v.shape[0]} is shorter than T + T' = {T + T_out}")
    span = sliding_window_view(v, T + T_out, axis=0)          # n_w, S, T+T'
    span = np.moveaxis(span, -1, 1)
    return np.ascontiguousarray(span[:, :T]), np.ascontiguousarray(span[:, T:])


def make_windows(series: StSeries | np.ndarray, T: int, T_out: int) -> list[Sample]:
    values = series.values if isinstance(series, StSeries) else series
    x, y = window_arrays(values, T, T_out)
    return [Sample(x[i], y[i], i) for i in range(len(x))]


# ------------------------------------------------------------- blocked folds

TRAIN, VAL, TEST = 0, 1, 2


@dataclass(frozen=True)
class FoldSpec:
    """Window index ranges (half-open ``(start, stop)``) of one blocked fold."""

    fold_id: int
    train: tuple[tuple[int, int], ...]
    val: tuple[tuple[int, int], ...]
    test: tuple[tuple[int, int], ...]
    gap: int

    @staticmethod
    def _expand(ranges) -> np.ndarray:
        if not ranges:
            return np.zeros(0, dtype=np.intp)
        return np.concatenate([np.arange(a, b) for a, b in ranges])

    def train_indices(self) -> np.ndarray:
        return self._expand(self.train)

    def val_indices(self) -> np.ndarray:
        return self._expand(self.val)

    def test_indices(self) -> np.ndarray:
        return self._expand(self.test)

    def to_json(self) -> dict:
        return {"fold_id": self.fold_id, "gap": self.gap,
                "train": [list(r) for r in self.train],
                "val": [list(r) for r in self.val],
                "test": [list(r) for r in self.test]}

    @classmethod
    def from_json(cls, d: dict) -> FoldSpec:
        conv = lambda rs: tuple((int(a), int(b)) for a, b in rs)  # noqa: E731
        return cls(int(d["fold_id"]), conv(d["train"]), conv(d["val"]), conv(d["test"]),
                   int(d["gap"]))


def _ranges(mask: np.ndarray) -> tuple[tuple[int, int], ...]:
    idx = np.flatnonzero(mask)
    if idx.size == 0:
        return ()
    breaks = np.flatnonzero(np.diff(idx) > 1)
    starts = np.concatenate([[idx[0]], idx[breaks + 1]])
    stops = np.concatenate([idx[breaks], [idx[-1]]]) + 1
    return tuple((int(a), int(b)) for a, b in zip(starts, stops))


def block_bounds(num_windows: int, n_folds: int = 10) -> list[int]:
    return [f * num_windows // n_folds for f in range(n_folds + 1)]


def blocked_cv(num_windows: int, T: int, T_out: int, n_folds: int = 10) -> list[FoldSpec]:
    """Contiguous-block folds with leakage gaps.

    Fold ``f`` tests on block ``f`` and validates on block ``f - 1`` (cyclic);
    the other blocks train.  Windows ``i < j`` share a raw timestep iff
    ``j - i < T + T'``, so ``T + T' - 1`` windows are dropped at every
    boundary between different sets, taken from the lower-priority side
    (train < validation < test).
    """
    if T < 1 or T_out < 1:
        raise DataError(f"T and T' must be positive, got {T}, {T_out}")
    if n_folds < 3:
        raise DataError("blocked CV needs at least three blocks")
    gap = T + T_out - 1
    bounds = block_bounds(num_windows, n_folds)
    smallest = min(b - a for a, b in zip(bounds, bounds[1:]))
    if smallest <= 2 * gap:
        raise DataError(f"{num_windows} windows give blocks of {smallest} windows, too few "
                        f"for gaps of {gap}; need at least {n_folds * (2 * gap + 1)} windows")
    folds = []
    for f in range(n_folds):
        label = np.full(num_windows, TRAIN)
        label[bounds[f]:bounds[f + 1]] = TEST
        v = (f - 1) % n_folds
        label[bounds[v]:bounds[v + 1]] = VAL
        keep = np.ones(num_windows, dtype=bool)
        for i in np.flatnonzero(label[1:] != label[:-1]):
            left, right = label[i], label[i + 1]
            if left < right:
                keep[max(0, i + 1 - gap):i + 1] = False
            else:
                keep[i + 1:i + 1 + gap] = False
        spec = FoldSpec(f, _ranges(keep & (label == TRAIN)), _ranges(keep & (label == VAL)),
                        _ranges(keep & (label == TEST)), gap)
        for name, r in (("train", spec.train), ("validation", spec.val), ("test", spec.test)):
            if not r:
                raise DataError(f"fold {f}: {name} set is empty after removing gaps")
        folds.append(spec)
    return folds


def folds_to_json(folds: Sequence[FoldSpec], path: str | Path, **meta) -> None:
    doc = dict(meta)
    doc["folds"] = [f.to_json() for f in folds]
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def raw_timesteps(windows: np.ndarray, T: int, T_out: int) -> set[int]:
    """Raw row indices read by a set of windows (inputs and targets)."""
    span = T + T_out
    return {int(i) + k for i in windows for k in range(span)}


# ------------------------------------------------------------ spatial order


def _check_coords(coords: np.ndarray, min_points: int) -> np.ndarray:
    c = np.asarray(coords, dtype=np.float64)
    if c.ndim != 2 or c.shape[1] < 1:
        raise DataError(f"coords must be an S x d array, got shape {c.shape}")
    if not np.all(np.isfinite(c)):
        raise DataError("coords contain NaN or infinite entries")
    if c.shape[0] < min_points:
        raise DataError(f"need at least {min_points} locations, got {c.shape[0]}")
    return c


@dataclass(frozen=True, eq=False)
class Dendrogram:
    """Merge history of average-linkage clustering.

    ``merges[i] = (left, right, height, size)`` where ``left``/``right`` are
    node ids (leaves ``0..S-1``, merge ``i`` creates node ``S + i``), with the
    left child the cluster holding the smaller minimum leaf index.
    """

    merges: tuple[tuple[int, int, float, int], ...]
    n_leaves: int

    def leaves(self, node: int | None = None) -> list[int]:
        n = self.n_leaves
        if node is None:
            node = 2 * n - 2
        out, stack = [], [node]
        while stack:
            k = stack.pop()
            if k < n:
                out.append(k)
            else:
                left, right, _, _ = self.merges[k - n]
                stack.append(right)
                stack.append(left)
        return out

    def heights(self) -> np.ndarray:
        return np.array([m[2] for m in self.merges])


def average_linkage(coords: np.ndarray) -> Dendrogram:
    """Agglomerative clustering with average linkage on Euclidean distances.

    Among equally close pairs the one with the smallest cluster minimum
    indices (lexicographically) merges first.
    """
    c = _check_coords(coords, 1)
    n = c.shape[0]
    if n == 1:
        return Dendrogram((), 1)
    d = np.sqrt(((c[:, None, :] - c[None, :, :]) ** 2).sum(-1))
    # slots are indexed by each cluster's minimum leaf index
    dist = d.copy()
    np.fill_diagonal(dist, np.inf)
    active = np.ones(n, dtype=bool)
    node = list(range(n))
    size = np.ones(n, dtype=np.int64)
    merges = []
    for step in range(n - 1):
        masked = np.where(active[:, None] & active[None, :], dist, np.inf)
        flat = int(np.argmin(masked))          # first minimum in row-major order
        i, j = divmod(flat, n)
        if i > j:
            i, j = j, i
        merges.append((node[i], node[j], float(dist[i, j]), int(size[i] + size[j])))
        row = (size[i] * dist[i] + size[j] * dist[j]) / (size[i] + size[j])
        dist[i, :] = row
        dist[:, i] = row
        dist[i, i] = np.inf
        active[j] = False
        dist[j, :] = np.inf
        dist[:, j] = np.inf
        size[i] += size[j]
        node[i] = n + step
    return Dendrogram(tuple(merges), n)


def dendrogram_order(coords: np.ndarray) -> np.ndarray:
    """Leaf order of the average-linkage dendrogram, left subtree first."""
    c = _check_coords(coords, 2)
    return np.array(average_linkage(c).leaves(), dtype=np.int64)


def build_adjacency(coords: np.ndarray, n_neighbors: int = 4) -> np.ndarray:
    """Symmetric 0/1 matrix linking each location with its ``n_neighbors`` nearest.

    Distance ties are broken by the smaller index; the relation is made
    symmetric by OR.
    """
    c = _check_coords(coords, n_neighbors + 1)
    s = c.shape[0]
    d = np.sqrt(((c[:, None, :] - c[None, :, :]) ** 2).sum(-1))
    a = np.zeros((s, s), dtype=np.int64)
    for i in range(s):
        order = [j for j in np.argsort(d[i], kind="stable") if j != i]
        a[i, order[:n_neighbors]] = 1
    return a | a.T


def permute_space(series: StSeries, seed: int) -> tuple[StSeries, np.ndarray]:
    """Shuffle locations with a seeded uniform permutation.

    Returns the shuffled series and ``perm`` such that the new column ``j`` is
    the old column ``perm[j]``.
    """
    perm = np.random.default_rng(seed).permutation(series.S)
    return series.select(perm), perm


# --------------------------------------------------------------- synthetic


def grid_coords(n_locations: int) -> np.ndarray:
    """First ``n_locations`` cells of a unit-spaced ``ceil(sqrt(S))``-wide grid, row-major."""
    side = math.ceil(math.sqrt(n_locations))
    idx = np.arange(n_locations)
    return np.column_stack([idx % side, idx // side]).astype(np.float64)


def se_covariance(coords: np.ndarray, length: float) -> np.ndarray:
    """Squared-exponential correlation ``exp(-d^2 / (2 l^2))``; the identity at ``l = 0``."""
    s = len(coords)
    if length == 0:
        return np.eye(s)
    d2 = ((coords[:, None, :] - coords[None, :, :]) ** 2).sum(-1)
    return np.exp(-d2 / (2.0 * length * length))


@dataclass(frozen=True)
class SynthParams:
    """Constants of the synthetic generator (see :func:`synth_generate`)."""

    period: float = 24.0
    level_mean: float = 10.0
    level_sd: float = 2.0
    amp_mean: float = 3.0
    amp_sd: float = 1.0
    phase_sd: float = 0.5
    ar_coef: float = 0.9
    ar_sd: float = 0.3
    noise_length_ratio: float = 1.0
    nugget_sd: float = 0.5


def _field_factor(cov: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh(cov)
    return v * np.sqrt(np.clip(w, 0.0, None))


def synth_generate(S: int, N: int, corr_len: float, seed: int,
                   params: SynthParams | None = None) -> StSeries:
    """Diurnal series on a grid with spatially correlated structure of length-scale ``corr_len``.

    Each location follows ``level + amp * sin(2 pi t / period + phase)``
    where level, amplitude and phase are Gaussian-field draws, plus an AR(1)
    process whose innovations are correlated in space by the same kernel
    (length-scale ``corr_len * noise_length_ratio``) and an independent
    measurement error.  ``corr_len = 0`` makes all locations independent.
    """
    if corr_len < 0:
        raise DataError(f"corr_len must be non-negative, got {corr_len}")
    if S < 1 or N < 1:
        raise DataError("S and N must be positive")
    p = params or SynthParams()
    rng = np.random.default_rng(seed)
    coords = grid_coords(S)
    shape_factor = _field_factor(se_covariance(coords, corr_len))
    noise_factor = _field_factor(se_covariance(coords, corr_len * p.noise_length_ratio))
    level = p.level_mean + p.level_sd * shape_factor @ rng.standard_normal(S)
    amp = p.amp_mean + p.amp_sd * shape_factor @ rng.standard_normal(S)
    phase = p.phase_sd * shape_factor @ rng.standard_normal(S)
    t = np.arange(N)[:, None]
    seasonal = level + amp * np.sin(2.0 * np.pi * t / p.period + phase)
    innov = rng.standard_normal((N, S)) @ noise_factor.T
    ar = np.empty((N, S))
    ar[0] = innov[0] * p.ar_sd
    scale = p.ar_sd * math.sqrt(1.0 - p.ar_coef ** 2)
    for i in range(1, N):
        ar[i] = p.ar_coef * ar[i - 1] + scale * innov[i]
    values = seasonal + ar + p.nugget_sd * rng.standard_normal((N, S))
    names = tuple(f"loc{i:03d}" for i in range(S))
    return StSeries(values, hourly_timestamps(N), coords, names, timedelta(hours=1))
