"""Error metrics and nonparametric model comparison (Friedman gate, paired post-hoc tests)."""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import asdict, dataclass, field, replace
from itertools import permutations
from typing import Mapping, Sequence

import numpy as np
from scipy import stats as sps

from .models import PAIRS


@dataclass(frozen=True)
class StatReport:
    """One hypothesis test.  ``reject`` uses Holm when present, else BH, else the raw p."""

    test_name: str
    statistic: float
    p_raw: float
    alpha: float = 0.05
    df: int | None = None
    p_holm: float | None = None
    p_bh: float | None = None
    n_hypotheses: int = 1
    degenerate: bool = False
    note: str = ""

    @property
    def p_decision(self) -> float:
        if self.p_holm is not None:
            return self.p_holm
        if self.p_bh is not None:
            return self.p_bh
        return self.p_raw

    @property
    def reject(self) -> bool:
        return self.p_decision < self.alpha

    def with_adjusted(self, p_holm: float, p_bh: float, m: int) -> StatReport:
        return replace(self, p_holm=p_holm, p_bh=p_bh, n_hypotheses=m)

    def to_json(self) -> dict:
        d = asdict(self)
        d["reject"] = self.reject
        return d


# ------------------------------------------------------------------- metrics


def _pair(pred, truth) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(pred, dtype=np.float64)
    t = np.asarray(truth, dtype=np.float64)
    if p.shape != t.shape:
        raise ValueError(f"prediction {p.shape} and truth {t.shape} shapes differ")
    if p.size == 0:
        raise ValueError("empty input")
    return p, t


def rmse(pred, truth) -> float:
    p, t = _pair(pred, truth)
    return math.sqrt(float(np.mean((p - t) ** 2)))


def bias(pred, truth) -> float:
    p, t = _pair(pred, truth)
    return float(np.mean(p - t))


# ------------------------------------------------------------------ friedman


def block_ranks(scores: np.ndarray, lower_is_better: bool = True) -> np.ndarray:
    """Within-row ranks (1 = best), ties sharing their average rank."""
    s = np.asarray(scores, dtype=np.float64)
    return sps.rankdata(s if lower_is_better else -s, axis=1)


def friedman_statistic(ranks: np.ndarray) -> float:
    b, a = ranks.shape
    mean_r = ranks.mean(axis=0)
    return 12.0 * b / (a * (a + 1)) * float(((mean_r - (a + 1) / 2.0) ** 2).sum())


def _friedman_exact_p(ranks: np.ndarray, observed: float) -> float:
    """P(statistic >= observed) when each block's ranks are uniformly permuted.

    Rank sums are accumulated block by block with a dictionary keyed on the
    (doubled, hence integer) rank-sum vector.
    """
    b, a = ranks.shape
    dist: dict[tuple[int, ...], int] = {(0,) * a: 1}
    for row in ranks:
        perms = {tuple(int(round(2 * r)) for r in p) for p in permutations(row)}
        # multiplicity: every distinct arrangement is equally likely
        nxt: dict[tuple[int, ...], float] = {}
        weight = 1.0 / len(perms)
        for key, cnt in dist.items():
            for p in perms:
                k = tuple(x + y for x, y in zip(key, p))
                nxt[k] = nxt.get(k, 0.0) + cnt * weight
        dist = nxt
    tol = 1e-9 * max(1.0, observed)
    total = 0.0
    for key, prob in dist.items():
        mean_r = np.array(key, dtype=np.float64) / (2.0 * b)
        stat = 12.0 * b / (a * (a + 1)) * float(((mean_r - (a + 1) / 2.0) ** 2).sum())
        if stat >= observed - tol:
            total += prob
    return min(1.0, total)


def friedman(scores, lower_is_better: bool = True, alpha: float = 0.05,
             method: str = "asymptotic") -> StatReport:
    """Friedman rank test on a blocks x algorithms score matrix.

    ``method="asymptotic"`` uses the chi-squared tail with ``A - 1`` degrees
    of freedom; ``method="exact"`` enumerates the within-block permutation
    distribution (practical for small ``A`` and ``B``).
    """
    s = np.asarray(scores, dtype=np.float64)
    if s.ndim != 2 or s.shape[0] < 2 or s.shape[1] < 2:
        raise ValueError(f"need at least 2 blocks and 2 algorithms, got shape {s.shape}")
    if not np.all(np.isfinite(s)):
        raise ValueError("scores must be finite")
    tied = np.all(s == s[:, :1], axis=1)
    if tied.any():
        warnings.warn(f"{int(tied.sum())} block(s) fully tied; average ranks used",
                      RuntimeWarning, stacklevel=2)
    ranks = block_ranks(s, lower_is_better)
    stat = friedman_statistic(ranks)
    df = s.shape[1] - 1
    if method == "asymptotic":
        p = 1.0 if stat <= 0 else float(sps.chi2.sf(stat, df))
    elif method == "exact":
        p = _friedman_exact_p(ranks, stat)
    else:
        raise ValueError(f"unknown method {method!r}")
    return StatReport("friedman", stat, p, alpha=alpha, df=df, degenerate=bool(stat == 0))


# ------------------------------------------------------------------ wilcoxon

EXACT_MAX_N = 12


def _signed_rank_null(ranks: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Null distribution of W+ for the given (possibly tied) ranks.

    Returns support (in units of rank) and probabilities, via a DP over the
    doubled ranks so half-ranks stay integral.
    """
    doubled = np.rint(2 * ranks).astype(np.int64)
    counts = np.zeros(int(doubled.sum()) + 1)
    counts[0] = 1.0
    for r in doubled:
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[:counts.size - r]
        counts = (counts + shifted) / 2.0
    support = np.arange(counts.size) / 2.0
    return support, counts


def wilcoxon_signed_rank(a, b, alpha: float = 0.05, method: str = "auto") -> StatReport:
    """Two-sided Wilcoxon signed-rank test of paired samples; statistic is W+.

    Zero differences are dropped.  ``method="auto"`` is exact for up to 12
    nonzero pairs and otherwise uses the normal approximation with tie and
    continuity corrections.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError(f"paired samples must be 1-D and equally long, got {a.shape}, {b.shape}")
    d = a - b
    d = d[d != 0]
    n = d.size
    if n == 0:
        return StatReport("wilcoxon", 0.0, 1.0, alpha=alpha, degenerate=True,
                          note="all differences are zero")
    if n < 5:
        raise ValueError(f"only {n} nonzero differences; the test needs at least 5")
    ranks = sps.rankdata(np.abs(d))
    w_plus = float(ranks[d > 0].sum())
    if method == "auto":
        method = "exact" if n <= EXACT_MAX_N else "normal"
    if method == "exact":
        support, prob = _signed_rank_null(ranks)
        tol = 1e-9
        lower = float(prob[support <= w_plus + tol].sum())
        upper = float(prob[support >= w_plus - tol].sum())
        p = min(1.0, 2.0 * min(lower, upper))
    elif method == "normal":
        mean = n * (n + 1) / 4.0
        _, tcounts = np.unique(ranks, return_counts=True)
        var = n * (n + 1) * (2 * n + 1) / 24.0 - float((tcounts ** 3 - tcounts).sum()) / 48.0
        dev = abs(w_plus - mean) - 0.5
        p = 1.0 if dev <= 0 else min(1.0, float(2.0 * sps.norm.sf(dev / math.sqrt(var))))
    else:
        raise ValueError(f"unknown method {method!r}")
    return StatReport("wilcoxon", w_plus, p, alpha=alpha, note=f"n={n} {method}")


# ---------------------------------------------------------------- adjustment


def _check_p(p) -> np.ndarray:
    arr = np.asarray(p, dtype=np.float64)
    if arr.ndim != 1:
        raise ValueError("p-values must be a 1-D sequence")
    if np.any(~np.isfinite(arr)) or np.any((arr < 0) | (arr > 1)):
        raise ValueError("p-values must lie in [0, 1]")
    return arr


def adjust_holm(p: Sequence[float]) -> np.ndarray:
    """Holm step-down: ``p~(i) = max_{j<=i} min(1, (m - j + 1) p(j))``."""
    arr = _check_p(p)
    m = arr.size
    if m == 0:
        return arr.copy()
    order = np.argsort(arr, kind="stable")
    stepped = np.minimum(1.0, (m - np.arange(m)) * arr[order])
    out = np.empty(m)
    out[order] = np.maximum.accumulate(stepped)
    return out


def adjust_bh(p: Sequence[float]) -> np.ndarray:
    """Benjamini-Hochberg: ``p~(i) = min_{j>=i} min(1, m p(j) / j)``."""
    arr = _check_p(p)
    m = arr.size
    if m == 0:
        return arr.copy()
    order = np.argsort(arr, kind="stable")
    stepped = np.minimum(1.0, m * arr[order] / np.arange(1, m + 1))
    out = np.empty(m)
    out[order] = np.minimum.accumulate(stepped[::-1])[::-1]
    return out


# ----------------------------------------------------------------- comparison


@dataclass(frozen=True)
class Hypothesis:
    label: str
    first: str
    second: str
    report: StatReport
    mean_first: float
    mean_second: float


@dataclass(frozen=True)
class ComparisonSuite:
    friedman: StatReport | None
    hypotheses: tuple[Hypothesis, ...] = field(default_factory=tuple)

    def to_json(self) -> dict:
        return {
            "friedman": None if self.friedman is None else self.friedman.to_json(),
            "hypotheses": [
                {"i": _roman(k + 1), "hypothesis": h.label, "first": h.first,
                 "second": h.second, "mean_first": h.mean_first,
                 "mean_second": h.mean_second, **h.report.to_json()}
                for k, h in enumerate(self.hypotheses)],
        }

    def render(self) -> str:
        return render_table(self)


def _roman(k: int) -> str:
    numerals = ((10, "X"), (9, "IX"), (5, "V"), (4, "IV"), (1, "I"))
    out = ""
    for value, sym in numerals:
        while k >= value:
            out += sym
            k -= value
    return out


def paired_tests(pairs: Sequence[tuple[str, str]], scores: Mapping[str, Sequence[float]],
                 alpha: float = 0.05, label_fmt: str = "{0} vs {1}") -> tuple[Hypothesis, ...]:
    """Wilcoxon test per pair, adjusted jointly (family size ``len(pairs)``)."""
    raw = []
    for first, second in pairs:
        x = np.asarray(scores[first], dtype=np.float64)
        y = np.asarray(scores[second], dtype=np.float64)
        try:
            rep = wilcoxon_signed_rank(x, y, alpha=alpha)
        except ValueError as exc:
            rep = StatReport("wilcoxon", math.nan, 1.0, alpha=alpha, degenerate=True,
                             note=str(exc))
        raw.append((first, second, rep, float(x.mean()), float(y.mean())))
    ps = [r[2].p_raw for r in raw]
    holm = adjust_holm(ps)
    bh = adjust_bh(ps)
    m = len(raw)
    return tuple(Hypothesis(label_fmt.format(f, s), f, s,
                            rep.with_adjusted(float(holm[k]), float(bh[k]), m), mf, ms)
                 for k, (f, s, rep, mf, ms) in enumerate(raw))


def _aligned(results: Mapping[str, Sequence[float]]) -> dict[str, np.ndarray]:
    arrays = {k: np.asarray(v, dtype=np.float64) for k, v in results.items()}
    lengths = {k: a.shape for k, a in arrays.items()}
    if len(set(lengths.values())) != 1 or next(iter(lengths.values()))[0:1] == (0,):
        raise ValueError(f"score vectors are misaligned: {lengths}")
    return arrays


def compare_models(results: Mapping[str, Sequence[float]], alpha: float = 0.05,
                   pairs: Sequence[tuple[str, str]] = PAIRS) -> ComparisonSuite:
    """Friedman test over every model, then (if rejected) the agnostic-vs-traditional pairs.

    ``results`` maps model name to per-block scores (lower is better), with
    blocks aligned across models.
    """
    arrays = _aligned(results)
    if len(arrays) < 2:
        raise ValueError("need at least two models to compare")
    names = list(arrays)
    matrix = np.column_stack([arrays[k] for k in names])
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        gate = friedman(matrix, alpha=alpha)
    if not gate.reject:
        return ComparisonSuite(gate)
    present = [(a, b) for a, b in pairs if a in arrays and b in arrays]
    return ComparisonSuite(gate, paired_tests(present, arrays, alpha))


def _fmt_p(p: float | None) -> str:
    if p is None or (isinstance(p, float) and math.isnan(p)):
        return "-"
    return f"{p:.3g}"


def render_table(suite: ComparisonSuite) -> str:
    """Aligned text table with one row per hypothesis; rejected ones are starred."""
    lines = []
    if suite.friedman is not None:
        f = suite.friedman
        lines.append(f"Friedman: statistic = {f.statistic:.4g}, df = {f.df}, "
                     f"p-value = {_fmt_p(f.p_raw)}"
                     + ("" if f.reject else " (not rejected; post-hoc tests skipped)"))
    header = ("i", "hypotheses", "p_unajusted", "p_holm", "p_BH")
    rows = [(_roman(k + 1), h.label + ("*" if h.report.reject else ""),
             _fmt_p(h.report.p_raw), _fmt_p(h.report.p_holm), _fmt_p(h.report.p_bh))
            for k, h in enumerate(suite.hypotheses)]
    widths = [max(len(r[c]) for r in [header, *rows]) for c in range(len(header))]
    for r in [header, *rows]:
        lines.append("  ".join(cell.ljust(w) for cell, w in zip(r, widths)).rstrip())
    return "\n".join(lines) + "\n"


def reports_to_json(suite: ComparisonSuite, path) -> None:
    with open(path, "w") as fh:
        json.dump(suite.to_json(), fh, indent=2, sort_keys=True)
        fh.write("\n")
