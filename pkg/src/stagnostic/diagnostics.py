"""Spatial and temporal characterization of a dataset: Moran's I, CORT and ATDM."""

from __future__ import annotations

import math
from dataclasses import dataclass
from itertools import combinations

import numpy as np
from scipy import stats as sps

from .data import StSeries, build_adjacency


@dataclass(frozen=True, eq=False)
class SpatialWeights:
    """Non-negative ``S x S`` weight matrix with zero diagonal."""

    w: np.ndarray

    def __post_init__(self) -> None:
        w = np.array(self.w, dtype=np.float64)
        if w.ndim != 2 or w.shape[0] != w.shape[1]:
            raise ValueError(f"weights must be square, got shape {w.shape}")
        if not np.all(np.isfinite(w)) or np.any(w < 0):
            raise ValueError("weights must be finite and non-negative")
        if np.any(np.diag(w) != 0):
            raise ValueError("weights must have a zero diagonal")
        if w.sum() <= 0:
            raise ValueError("weights must not be all zero")
        w.flags.writeable = False
        object.__setattr__(self, "w", w)

    @property
    def W_sum(self) -> float:
        return float(self.w.sum())

    @property
    def S(self) -> int:
        return self.w.shape[0]

    @classmethod
    def knn(cls, coords: np.ndarray, n_neighbors: int = 4) -> SpatialWeights:
        return cls(build_adjacency(coords, n_neighbors))


def morans_i(x: np.ndarray, w: SpatialWeights) -> float:
    """Global Moran's I of the values ``x`` (one per location)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.size != w.S:
        raise ValueError(f"expected {w.S} values, got shape {x.shape}")
    if x.size < 2:
        raise ValueError("Moran's I needs at least two locations")
    z = x - x.mean()
    denom = float(z @ z)
    if denom == 0.0:
        raise ValueError("Moran's I is undefined for a constant field")
    return x.size / w.W_sum * float(z @ w.w @ z) / denom


def _morans_batch(z: np.ndarray, w: np.ndarray, w_sum: float) -> np.ndarray:
    """Moran's I of each row of centred ``z``."""
    num = np.einsum("ki,ij,kj->k", z, w, z)
    return z.shape[1] / w_sum * num / np.einsum("ki,ki->k", z, z)


@dataclass(frozen=True)
class MoranSeriesResult:
    mean_i: float
    p_value: float
    per_step: np.ndarray
    skipped: int


def morans_i_series(values: np.ndarray | StSeries, w: SpatialWeights | None = None,
                    n_perm: int = 999, seed: int = 0) -> MoranSeriesResult:
    """Average Moran's I over timesteps with a permutation p-value.

    Each non-constant timestep gets a two-sided permutation p-value from
    ``n_perm`` shuffles of its values, ``p = min(1, 2 * min(tail))`` with
    the usual ``(count + 1) / (n_perm + 1)`` tails; the per-step p-values are
    combined with Fisher's method.  Constant timesteps are skipped and
    counted.  ``per_step`` holds NaN at skipped steps.
    """
    if isinstance(values, StSeries):
        if w is None:
            w = SpatialWeights.knn(values.coords)
        values = values.values
    if w is None:
        raise ValueError("spatial weights are required for a bare matrix")
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 2 or v.shape[1] != w.S:
        raise ValueError(f"expected an N x {w.S} matrix, got shape {v.shape}")
    z = v - v.mean(axis=1, keepdims=True)
    ok = np.ptp(v, axis=1) > 0
    if not ok.any():
        raise ValueError("every timestep is constant")
    per_step = np.full(v.shape[0], np.nan)
    zs = z[ok]
    observed = _morans_batch(zs, w.w, w.W_sum)
    per_step[ok] = observed
    rng = np.random.default_rng(seed)
    ge = np.zeros(len(zs))
    le = np.zeros(len(zs))
    tol = 1e-12 * np.maximum(1.0, np.abs(observed))
    for _ in range(n_perm):
        sim = _morans_batch(rng.permuted(zs, axis=1), w.w, w.W_sum)
        ge += sim >= observed - tol
        le += sim <= observed + tol
    p_hi = (ge + 1) / (n_perm + 1)
    p_lo = (le + 1) / (n_perm + 1)
    p_step = np.minimum(1.0, 2.0 * np.minimum(p_hi, p_lo))
    stat = -2.0 * np.sum(np.log(p_step))
    p = float(sps.chi2.sf(stat, 2 * len(p_step)))
    return MoranSeriesResult(float(observed.mean()), p, per_step, int((~ok).sum()))


def _increments(a: np.ndarray, name: str) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 1 or a.size < 2:
        raise ValueError(f"series {name} must be one-dimensional with at least two points")
    d = np.diff(a)
    if not np.any(d != 0):
        raise ValueError(f"series {name} has no nonzero increments")
    return d


def cort(a: np.ndarray, b: np.ndarray) -> float:
    """Cosine similarity of the first differences of two equal-length series."""
    da, db = _increments(a, "a"), _increments(b, "b")
    if da.shape != db.shape:
        raise ValueError(f"series lengths differ: {da.size + 1} and {db.size + 1}")
    value = float(da @ db) / (math.sqrt(float(da @ da)) * math.sqrt(float(db @ db)))
    return min(1.0, max(-1.0, value))


def atdm_f(x: float | np.ndarray, k: float = 2.0):
    """Tuning function ``2 / (1 + exp(k x))``; maps ``[-1, 1]`` into ``(0, 2)``."""
    if k < 0:
        raise ValueError(f"k must be non-negative, got {k}")
    return 2.0 / (1.0 + np.exp(k * np.asarray(x, dtype=np.float64)))


def atdm(a: np.ndarray, b: np.ndarray, k: float = 2.0) -> float:
    """``f(cort(a, b)) * ||a - b|| / sqrt(N)``."""
    c = cort(a, b)
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    delta = math.sqrt(float(((a - b) ** 2).sum()) / a.size)
    return float(atdm_f(c, k)) * delta


def moving_average(values: np.ndarray, window: int) -> np.ndarray:
    """Centred moving average along axis 0, keeping only fully covered positions.

    Output length is ``N - window + 1``; entry ``i`` averages rows
    ``i .. i + window - 1``.
    """
    v = np.asarray(values, dtype=np.float64)
    n = v.shape[0]
    if window < 1:
        raise ValueError(f"window must be positive, got {window}")
    if window >= n:
        raise ValueError(f"window {window} must be shorter than the series ({n})")
    c = np.cumsum(np.concatenate([np.zeros((1,) + v.shape[1:]), v]), axis=0)
    return (c[window:] - c[:-window]) / window


def atdm_dataset(values: np.ndarray | StSeries, k: float = 2.0,
                 window: int = 12) -> tuple[float, float]:
    """Mean ATDM over unordered location pairs, raw and on moving-average-smoothed series."""
    v = values.values if isinstance(values, StSeries) else np.asarray(values, dtype=np.float64)
    if v.ndim != 2 or v.shape[1] < 2:
        raise ValueError("need an N x S matrix with at least two locations")
    smooth = moving_average(v, window)
    raw_vals, adj_vals = [], []
    for i, j in combinations(range(v.shape[1]), 2):
        raw_vals.append(_atdm_or_zero(v[:, i], v[:, j], k))
        adj_vals.append(_atdm_or_zero(smooth[:, i], smooth[:, j], k))
    return float(np.mean(raw_vals)), float(np.mean(adj_vals))


def _atdm_or_zero(a: np.ndarray, b: np.ndarray, k: float) -> float:
    # identical series are at distance zero whatever their shape
    if np.array_equal(a, b):
        return 0.0
    return atdm(a, b, k)
