"""Experiment configuration and the blocked-CV evaluation pipeline behind the CLI.

A configuration is an INI file::

    [data]
    source = synth            ; or a path to a wide CSV
    synth_S = 25
    synth_N = 4000
    synth_corr_len = 0
    synth_seed = 0

    [model]
    models = A-CNN, CNN, A-ConvLSTM, ConvLSTM, A-GCN-LSTM, GCN-LSTM
    T = 6
    T_out = 1
    H = 16                    ; or target_params = 3000
    k = 3
    tpast_grid = 2, 3, 5

    [train]
    max_epochs = 200          ; any TrainConfig field

    [run]
    seed = 0
    out = results
    timing = wall             ; "off" writes zero durations (byte-reproducible)

    [permutation]
    seed = 1

Every random draw is derived from ``[run] seed`` (model initialisation and
batch order per model and fold) or ``[permutation] seed``.
"""

from __future__ import annotations

import configparser
import csv
import dataclasses
import json
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import data as dm
from .data import DataError, FoldSpec, StSeries
from .diagnostics import SpatialWeights, atdm_dataset, morans_i_series
from .models import (KINDS, PAIRS, ConfigError, ModelConfig, build_model,
                     count_parameters, match_hidden_width)
from .stats import (ComparisonSuite, Hypothesis, bias, compare_models, paired_tests,
                    render_table, rmse)
from .training import (TrainConfig, TrainingDivergedError, default_tpast_grid,
                       grid_search_tpast, train)

OUT_ENV = "STAGNOSTIC_OUT"


def _split_list(text: str) -> list[str]:
    return [x.strip() for x in text.replace("\n", ",").split(",") if x.strip()]


def _parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


@dataclass(frozen=True)
class SynthSpec:
    S: int = 25
    N: int = 4000
    corr_len: float = 0.0
    seed: int = 0


@dataclass(frozen=True)
class ExperimentConfig:
    data_path: Path | None = None
    coords_path: Path | None = None
    synth: SynthSpec | None = None
    models: tuple[str, ...] = KINDS
    T: int = 6
    T_out: int = 1
    H: int | None = 16
    target_params: int | None = None
    k: int = 3
    t_past: int | None = None
    tpast_grid: tuple[int, ...] | None = None
    ungated_candidate: bool = False
    train: TrainConfig = field(default_factory=TrainConfig)
    seed: int = 0
    out: Path = Path("results")
    folds: tuple[int, ...] = tuple(range(10))
    global_zscore: bool = False
    timing: bool = True
    save_history: bool = False
    permutation_seed: int = 1
    atdm_k: float = 2.0
    atdm_window: int = 12
    moran_permutations: int = 999
    alpha: float = 0.05

    def __post_init__(self) -> None:
        if (self.data_path is None) == (self.synth is None):
            raise ConfigError("exactly one of a dataset path or a synthetic spec is required")
        for m in self.models:
            if m not in KINDS:
                raise ConfigError(f"unknown model kind {m!r}; expected one of {KINDS}")
        if not self.models:
            raise ConfigError("no models selected")
        if len(set(self.models)) != len(self.models):
            raise ConfigError("duplicate model kinds")
        if self.T < 1 or self.T_out < 1:
            raise ConfigError(f"T and T' must be positive, got {self.T}, {self.T_out}")
        if (self.H is None) == (self.target_params is None):
            raise ConfigError("give exactly one of H or target_params")
        if self.H is not None and self.H < 1:
            raise ConfigError(f"H must be positive, got {self.H}")
        if self.tpast_grid is not None:
            for lag in self.tpast_grid:
                if not 1 <= lag <= self.T:
                    raise ConfigError(f"t_past candidate {lag} outside [1, T={self.T}]")
        if self.t_past is not None and not 1 <= self.t_past <= self.T:
            raise ConfigError(f"t_past {self.t_past} outside [1, T={self.T}]")
        if any(not 0 <= f < 10 for f in self.folds) or not self.folds:
            raise ConfigError(f"folds must be a non-empty subset of 0..9, got {self.folds}")
        if not 0 < self.alpha < 1:
            raise ConfigError(f"alpha must lie in (0, 1), got {self.alpha}")
        if self.data_path is not None and not Path(self.data_path).is_file():
            raise FileNotFoundError(f"no such file: {self.data_path}")

    def replace(self, **changes) -> ExperimentConfig:
        return dataclasses.replace(self, **changes)

    @property
    def grid(self) -> tuple[int, ...]:
        if self.t_past is not None:
            return (self.t_past,)
        if self.tpast_grid is not None:
            return self.tpast_grid
        return tuple(default_tpast_grid(self.T))

    def to_json(self) -> dict:
        d = {
            "data_path": None if self.data_path is None else str(self.data_path),
            "coords_path": None if self.coords_path is None else str(self.coords_path),
            "synth": None if self.synth is None else dataclasses.asdict(self.synth),
            "models": list(self.models), "T": self.T, "T_out": self.T_out, "H": self.H,
            "target_params": self.target_params, "k": self.k, "t_past": self.t_past,
            "tpast_grid": list(self.grid), "ungated_candidate": self.ungated_candidate,
            "train": dataclasses.asdict(self.train), "seed": self.seed,
            "folds": list(self.folds), "global_zscore": self.global_zscore,
            "permutation_seed": self.permutation_seed, "alpha": self.alpha,
        }
        return d

    # ------------------------------------------------------------ parsing

    @classmethod
    def from_ini(cls, path: str | Path) -> ExperimentConfig:
        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(f"no such file: {path}")
        cp = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
        cp.optionxform = str
        try:
            cp.read(path, encoding="utf-8")
        except configparser.Error as exc:
            raise ConfigError(f"{path}: {exc}") from None
        return cls.from_sections({s: dict(cp[s]) for s in cp.sections()}, base=path.parent)

    @classmethod
    def from_sections(cls, sections: Mapping[str, Mapping[str, str]],
                      base: Path = Path(".")) -> ExperimentConfig:
        known = {"data", "model", "train", "run", "permutation", "diagnostics"}
        unknown = set(sections) - known
        if unknown:
            raise ConfigError(f"unknown config section(s): {sorted(unknown)}")
        kw: dict = {}
        try:
            d = dict(sections.get("data", {}))
            source = d.pop("source", "synth").strip()
            if source == "synth":
                kw["synth"] = SynthSpec(int(d.pop("synth_S", 25)), int(d.pop("synth_N", 4000)),
                                        float(d.pop("synth_corr_len", 0.0)),
                                        int(d.pop("synth_seed", 0)))
            else:
                kw["data_path"] = (base / source).resolve() if not Path(source).is_absolute() \
                    else Path(source)
                if "coords" in d:
                    c = d.pop("coords")
                    kw["coords_path"] = (base / c).resolve() if not Path(c).is_absolute() \
                        else Path(c)
            _no_leftovers("data", d, ("synth_S", "synth_N", "synth_corr_len", "synth_seed"))
            m = dict(sections.get("model", {}))
            if "models" in m:
                kw["models"] = tuple(_split_list(m.pop("models")))
            for key in ("T", "T_out", "k"):
                if key in m:
                    kw[key] = int(m.pop(key))
            if "target_params" in m:
                kw["target_params"] = int(m.pop("target_params"))
                kw["H"] = int(m.pop("H")) if "H" in m else None
            elif "H" in m:
                kw["H"] = int(m.pop("H"))
            if "t_past" in m:
                kw["t_past"] = int(m.pop("t_past"))
            if "tpast_grid" in m:
                kw["tpast_grid"] = tuple(int(x) for x in _split_list(m.pop("tpast_grid")))
            if "ungated_candidate" in m:
                kw["ungated_candidate"] = _parse_bool(m.pop("ungated_candidate"))
            _no_leftovers("model", m)
            t = dict(sections.get("train", {}))
            fields = {f.name: f.type for f in dataclasses.fields(TrainConfig)}
            overrides = {}
            for key, value in t.items():
                if key not in fields:
                    raise ConfigError(f"[train]: unknown key {key!r}")
                default = getattr(TrainConfig(), key)
                if isinstance(default, bool):
                    overrides[key] = _parse_bool(value)
                elif isinstance(default, int):
                    overrides[key] = int(value)
                else:
                    overrides[key] = float(value)
            r = dict(sections.get("run", {}))
            seed = int(r.pop("seed", 0))
            kw["seed"] = seed
            overrides.setdefault("seed", seed)
            kw["train"] = TrainConfig(**overrides)
            if "out" in r:
                kw["out"] = Path(r.pop("out"))
            if "folds" in r:
                kw["folds"] = tuple(int(x) for x in _split_list(r.pop("folds")))
            if "global_zscore" in r:
                kw["global_zscore"] = _parse_bool(r.pop("global_zscore"))
            if "timing" in r:
                mode = r.pop("timing").strip().lower()
                if mode not in ("wall", "off"):
                    raise ConfigError(f"[run] timing must be 'wall' or 'off', got {mode!r}")
                kw["timing"] = mode == "wall"
            if "save_history" in r:
                kw["save_history"] = _parse_bool(r.pop("save_history"))
            if "alpha" in r:
                kw["alpha"] = float(r.pop("alpha"))
            _no_leftovers("run", r)
            p = dict(sections.get("permutation", {}))
            if "seed" in p:
                kw["permutation_seed"] = int(p.pop("seed"))
            _no_leftovers("permutation", p)
            g = dict(sections.get("diagnostics", {}))
            if "atdm_k" in g:
                kw["atdm_k"] = float(g.pop("atdm_k"))
            if "atdm_window" in g:
                kw["atdm_window"] = int(g.pop("atdm_window"))
            if "moran_permutations" in g:
                kw["moran_permutations"] = int(g.pop("moran_permutations"))
            _no_leftovers("diagnostics", g)
        except ValueError as exc:
            if isinstance(exc, (ConfigError, DataError)):
                raise
            raise ConfigError(f"invalid config value: {exc}") from None
        return cls(**kw)


def _no_leftovers(section: str, d: Mapping[str, str], ignore: Iterable[str] = ()) -> None:
    rest = sorted(set(d) - set(ignore))
    if rest:
        raise ConfigError(f"[{section}]: unknown key(s) {rest}")


TEMPLATE = __doc__.split("::", 1)[1].split("Every random", 1)[0]


def template_text() -> str:
    lines = [ln[4:] if ln.startswith("    ") else ln for ln in TEMPLATE.strip("\n").splitlines()]
    return "\n".join(lines).strip() + "\n"


# ----------------------------------------------------------------- data prep


def load_series(cfg: ExperimentConfig) -> StSeries:
    if cfg.synth is not None:
        s = cfg.synth
        return dm.synth_generate(s.S, s.N, s.corr_len, s.seed)
    return dm.load_csv(cfg.data_path, cfg.coords_path)


@dataclass(frozen=True)
class Layout:
    """Spatial side information handed to the models for one arrangement of the columns."""

    order: np.ndarray
    adjacency: np.ndarray


def layout_for(series: StSeries) -> Layout:
    return Layout(dm.dendrogram_order(series.coords), dm.build_adjacency(series.coords))


def permuted_layout(original: StSeries, permuted: StSeries) -> Layout:
    """Side information for the shuffled run.

    The grid models keep the ordering computed for the original columns, now
    applied to shuffled data, so their grid neighbours become arbitrary
    locations.  The graph model rebuilds its adjacency from the (shuffled)
    coordinates, which travel with their columns.
    """
    return Layout(dm.dendrogram_order(original.coords), dm.build_adjacency(permuted.coords))


@dataclass(frozen=True)
class FoldResult:
    model: str
    fold: int
    rmse: float
    bias: float
    seconds: float
    params: int
    H: int
    t_past: int | None
    epochs: int
    best_epoch: int
    init_seed: int
    train_seed: int
    error: str | None = None


def _derived_seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


def fold_seeds(run_seed: int, kind: str, fold: int) -> tuple[int, int]:
    k = KINDS.index(kind)
    return _derived_seed(run_seed, k, fold, 0), _derived_seed(run_seed, k, fold, 1)


@dataclass(frozen=True)
class FoldData:
    x_train: np.ndarray
    y_train: np.ndarray
    x_val: np.ndarray
    y_val: np.ndarray
    x_test: np.ndarray
    y_test_raw: np.ndarray
    scaler: dm.ZScore


def prepare_fold(values: np.ndarray, spec: FoldSpec, T: int, T_out: int,
                 global_zscore: bool = False, names=None) -> FoldData:
    """Normalize with training-range statistics and cut the fold's windows."""
    tr = spec.train_indices()
    if global_zscore:
        rows = np.arange(values.shape[0])
    else:
        rows = np.unique((tr[:, None] + np.arange(T + T_out)[None, :]).ravel())
    scaler = dm.zscore_fit(values[rows], names)
    x, y = dm.window_arrays(scaler.apply(values), T, T_out)
    _, y_raw = dm.window_arrays(values, T, T_out)
    va, te = spec.val_indices(), spec.test_indices()
    return FoldData(x[tr], y[tr], x[va], y[va], x[te], y_raw[te], scaler)


def _model_config(cfg: ExperimentConfig, kind: str, S: int, layout: Layout, init_seed: int,
                  t_past: int | None) -> ModelConfig:
    kw = dict(kind=kind, T=cfg.T, T_out=cfg.T_out, S=S, H=cfg.H or 1, seed=init_seed,
              ungated_candidate=cfg.ungated_candidate)
    if kind == "A-CNN":
        kw["t_past"] = t_past
    if kind in ("A-GCN-LSTM", "GCN-LSTM"):
        kw["k"] = cfg.k
    if kind == "GCN-LSTM":
        kw["adjacency"] = layout.adjacency
    if kind in ("CNN", "ConvLSTM"):
        kw["order"] = layout.order
    mc = ModelConfig(**kw)
    if cfg.target_params is not None:
        mc = match_hidden_width(cfg.target_params, mc)
    return mc


def run_fold(cfg: ExperimentConfig, kind: str, values: np.ndarray, spec: FoldSpec,
             layout: Layout, names=None, history_dir: Path | None = None) -> FoldResult:
    init_seed, train_seed = fold_seeds(cfg.seed, kind, spec.fold_id)
    tcfg = cfg.train.replace(seed=train_seed)
    t0 = time.perf_counter()
    fd = prepare_fold(values, spec, cfg.T, cfg.T_out, cfg.global_zscore, names)
    S = values.shape[1]
    t_past = None
    if kind == "A-CNN":
        grid = cfg.grid
        if len(grid) == 1:
            t_past = grid[0]
        else:
            base = _model_config(cfg, kind, S, layout, init_seed, grid[0])
            t_past, _ = grid_search_tpast(grid, base, (fd.x_train, fd.y_train),
                                          (fd.x_val, fd.y_val), tcfg,
                                          target_params=cfg.target_params)
    mc = _model_config(cfg, kind, S, layout, init_seed, t_past)
    model = build_model(mc)
    params = count_parameters(model).total
    try:
        model, history = train(model, (fd.x_train, fd.y_train), (fd.x_val, fd.y_val), tcfg,
                               timing=cfg.timing)
    except TrainingDivergedError as exc:
        seconds = time.perf_counter() - t0 if cfg.timing else 0.0
        return FoldResult(kind, spec.fold_id, math.nan, math.nan, seconds, params, mc.H,
                          t_past, len(exc.history), 0, init_seed, train_seed, str(exc))
    pred = fd.scaler.invert(model.predict(fd.x_test))
    seconds = time.perf_counter() - t0 if cfg.timing else 0.0
    if history_dir is not None:
        history_dir.mkdir(parents=True, exist_ok=True)
        history.to_csv(history_dir / f"{kind}_fold{spec.fold_id}.csv")
    return FoldResult(kind, spec.fold_id, rmse(pred, fd.y_test_raw), bias(pred, fd.y_test_raw),
                      seconds, params, mc.H, t_past, len(history), history.best_epoch or 0,
                      init_seed, train_seed)


def _run_job(args) -> FoldResult:
    return run_fold(*args)


@dataclass
class RunResult:
    results: list[FoldResult]
    folds: list[FoldSpec]

    @property
    def failures(self) -> list[FoldResult]:
        return [r for r in self.results if r.error is not None]

    def rmse_by_model(self) -> dict[str, dict[int, float]]:
        out: dict[str, dict[int, float]] = {}
        for r in self.results:
            if r.error is None:
                out.setdefault(r.model, {})[r.fold] = r.rmse
        return out


def run_experiment(cfg: ExperimentConfig, series: StSeries | None = None,
                   layout: Layout | None = None, jobs: int = 1,
                   history_dir: Path | None = None) -> RunResult:
    """Train and test every configured model on every configured fold."""
    series = load_series(cfg) if series is None else series
    layout = layout_for(series) if layout is None else layout
    n_win = dm.num_windows(series.N, cfg.T, cfg.T_out)
    if n_win < 1:
        raise DataError(f"series of length {series.N} is shorter than T + T'")
    folds = dm.blocked_cv(n_win, cfg.T, cfg.T_out)
    jobs_args = [(cfg, kind, series.values, folds[f], layout, series.names, history_dir)
                 for kind in cfg.models for f in cfg.folds]
    if jobs > 1 and len(jobs_args) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_job, jobs_args))
    else:
        results = [_run_job(a) for a in jobs_args]
    order = {k: i for i, k in enumerate(cfg.models)}
    results.sort(key=lambda r: (order[r.model], r.fold))
    return RunResult(results, folds)


# ------------------------------------------------------------------- outputs

FOLD_COLUMNS = ("model", "fold", "rmse", "bias", "seconds", "params")


def _num(x: float) -> str:
    return repr(float(x))


def write_folds_csv(results: Sequence[FoldResult], path: Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(FOLD_COLUMNS)
        for r in results:
            if r.error is None:
                w.writerow([r.model, r.fold, _num(r.rmse), _num(r.bias), _num(r.seconds),
                            r.params])


def summarize(run: RunResult, cfg: ExperimentConfig) -> dict:
    models = {}
    for kind in cfg.models:
        ok = [r for r in run.results if r.model == kind and r.error is None]
        bad = [r for r in run.results if r.model == kind and r.error is not None]
        entry = {
            "folds_ok": len(ok),
            "failed_folds": [{"fold": r.fold, "error": r.error} for r in bad],
            "params": sorted({r.params for r in run.results if r.model == kind}),
            "H": sorted({r.H for r in run.results if r.model == kind}),
            "per_fold": [{"fold": r.fold, "rmse": r.rmse, "bias": r.bias, "t_past": r.t_past,
                          "epochs": r.epochs, "best_epoch": r.best_epoch,
                          "init_seed": r.init_seed, "train_seed": r.train_seed}
                         for r in ok],
        }
        if ok:
            rm = np.array([r.rmse for r in ok])
            entry.update(mean_rmse=float(rm.mean()), median_rmse=float(np.median(rm)),
                         std_rmse=float(rm.std(ddof=1)) if len(rm) > 1 else 0.0,
                         mean_bias=float(np.mean([r.bias for r in ok])))
        models[kind] = entry
    return {"config": cfg.to_json(), "models": models}


def write_json(doc, path: Path) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True, allow_nan=True) + "\n")


def write_run_outputs(run: RunResult, cfg: ExperimentConfig, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    write_folds_csv(run.results, out / "folds.csv")
    write_json(summarize(run, cfg), out / "summary.json")
    dm.folds_to_json(run.folds, out / "folds.json", T=cfg.T, T_out=cfg.T_out)


# --------------------------------------------------------------- permutation


@dataclass
class PermTestResult:
    original: RunResult
    permuted: RunResult
    permutation: np.ndarray
    hypotheses: tuple[Hypothesis, ...]


def permutation_test(cfg: ExperimentConfig, series: StSeries | None = None,
                     jobs: int = 1) -> PermTestResult:
    """Run every model on the original and on spatially shuffled data and test the difference.

    Each model yields one paired Wilcoxon test on per-fold test RMSE; the
    family (one hypothesis per model) is adjusted with Holm and BH.
    """
    series = load_series(cfg) if series is None else series
    shuffled, perm = dm.permute_space(series, cfg.permutation_seed)
    original = run_experiment(cfg, series, layout_for(series), jobs)
    permuted = run_experiment(cfg, shuffled, permuted_layout(series, shuffled), jobs)
    a = original.rmse_by_model()
    b = permuted.rmse_by_model()
    scores, pairs = {}, []
    for kind in cfg.models:
        common = sorted(set(a.get(kind, {})) & set(b.get(kind, {})))
        if not common:
            continue
        scores[kind] = [a[kind][f] for f in common]
        scores[kind + "-perm"] = [b[kind][f] for f in common]
        pairs.append((kind, kind + "-perm"))
    hyps = paired_tests(pairs, scores, cfg.alpha) if pairs else ()
    return PermTestResult(original, permuted, perm, hyps)


def write_permtest_outputs(res: PermTestResult, cfg: ExperimentConfig, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    write_run_outputs(res.original, cfg, out / "original")
    write_run_outputs(res.permuted, cfg, out / "permuted")
    suite = ComparisonSuite(None, res.hypotheses)
    doc = suite.to_json()
    doc["permutation"] = [int(x) for x in res.permutation]
    doc["permutation_seed"] = cfg.permutation_seed
    write_json(doc, out / "permtest.json")
    (out / "permtest.txt").write_text(render_table(suite))


# ------------------------------------------------------------------- compare


def read_results(path: str | Path) -> dict[str, dict[int, float]]:
    """Per-model, per-fold RMSE from a ``folds.csv`` (or a directory containing one)."""
    p = Path(path)
    if p.is_dir():
        p = p / "folds.csv"
    if not p.is_file():
        raise FileNotFoundError(f"no such file: {p}")
    out: dict[str, dict[int, float]] = {}
    with open(p, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"model", "fold", "rmse"} <= set(reader.fieldnames):
            raise DataError(f"{p}: results need columns model, fold, rmse")
        for row in reader:
            fold = int(row["fold"])
            model = row["model"]
            if fold in out.get(model, {}):
                raise DataError(f"{p}: duplicate row for {model} fold {fold}")
            out.setdefault(model, {})[fold] = float(row["rmse"])
    return out


def gather_results(paths: Sequence[str | Path]) -> dict[str, dict[int, float]]:
    """Merge result files; a model name seen in several files is prefixed by its file index."""
    per_file = [read_results(p) for p in paths]
    counts: dict[str, int] = {}
    for res in per_file:
        for m in res:
            counts[m] = counts.get(m, 0) + 1
    merged = {}
    for i, res in enumerate(per_file):
        for m, folds in res.items():
            merged[m if counts[m] == 1 else f"{i}:{m}"] = folds
    return merged


def compare_results(results: Mapping[str, Mapping[int, float]],
                    alpha: float = 0.05) -> ComparisonSuite:
    fold_sets = {m: tuple(sorted(f)) for m, f in results.items()}
    if len(set(fold_sets.values())) != 1:
        raise DataError(f"results cover different folds: {fold_sets}")
    folds = next(iter(fold_sets.values()))
    scores = {m: [results[m][f] for f in folds] for m in results}
    standard = [(a, b) for a, b in PAIRS if a in scores and b in scores]
    if standard:
        return compare_models(scores, alpha, standard)
    names = list(scores)
    every = [(names[i], names[j]) for i in range(len(names)) for j in range(i + 1, len(names))]
    return compare_models(scores, alpha, every)


def write_compare_outputs(suite: ComparisonSuite, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    write_json(suite.to_json(), out / "compare.json")
    (out / "compare.txt").write_text(render_table(suite))


# ------------------------------------------------------------------ plotdata


def write_plotdata(results: Mapping[str, Mapping[int, float]], out: Path) -> None:
    """Long-format RMSE table plus per-model mean and median."""
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "plot_rmse.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["model", "fold", "rmse"])
        for m, folds in results.items():
            for f in sorted(folds):
                w.writerow([m, f, _num(folds[f])])
    with open(out / "plot_annotations.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["model", "mean", "median"])
        for m, folds in results.items():
            v = np.array([folds[f] for f in sorted(folds)])
            w.writerow([m, _num(v.mean()), _num(np.median(v))])


# ----------------------------------------------------------------- diagnose


def diagnose(series: StSeries, cfg: ExperimentConfig) -> tuple[dict, np.ndarray]:
    res = morans_i_series(series, SpatialWeights.knn(series.coords),
                          n_perm=cfg.moran_permutations, seed=cfg.seed)
    a, a_adj = atdm_dataset(series, cfg.atdm_k, cfg.atdm_window)
    doc = {"morans_i": res.mean_i, "morans_p": res.p_value, "atdm": a, "atdm_adj": a_adj,
           "skipped_timesteps": res.skipped, "S": series.S, "N": series.N,
           "atdm_k": cfg.atdm_k, "atdm_window": cfg.atdm_window,
           "moran_permutations": cfg.moran_permutations, "seed": cfg.seed}
    return doc, res.per_step


def write_diagnose_outputs(series: StSeries, doc: dict, per_step: np.ndarray, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    write_json(doc, out / "diagnostics.json")
    with open(out / "morans_per_step.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "timestamp", "morans_i"])
        for t, (ts, v) in enumerate(zip(series.timestamps, per_step)):
            w.writerow([t, ts.isoformat(), "" if math.isnan(v) else _num(v)])


def output_dir(cli_value: str | None, cfg: ExperimentConfig | None) -> Path:
    """``--out`` wins, then the environment override, then the config."""
    if cli_value:
        return Path(cli_value)
    env = os.environ.get(OUT_ENV)
    if env:
        return Path(env)
    return cfg.out if cfg is not None else Path("results")
