"""Acceptance suite: one test per criterion, each printing a single PASS/FAIL line.

Criteria 5 and 6 are desk-scale replications that train several hundred
models; together they take a bit over an hour on one CPU core.
"""

import itertools
import math
import time
import warnings
from pathlib import Path

import numpy as np
import pytest

import gradsuite
import oracles
import probes
from stagnostic import cli
from stagnostic import data as dm
from stagnostic import diagnostics as dg
from stagnostic import experiment as ex
from stagnostic import stats as sx
from stagnostic.models import KINDS, PAIRS
from stagnostic.tensor import gradcheck
from stagnostic.training import TrainConfig

README = Path(__file__).resolve().parents[1] / "README.md"

# desk-scale training: short schedules at a raised learning rate
DESK_TRAIN = TrainConfig(lr=0.003, max_epochs=12, early_stop_patience=4, lr_decay_patience=2)


def test_criterion_1_gradient_suite(criterion):
    t0 = time.perf_counter()
    failures, worst, n = [], 0.0, 0
    for label, fn, inputs in gradsuite.all_cases(n_seeds=20):
        n += 1
        try:
            worst = max(worst, gradcheck(fn, inputs, h=1e-5, rtol=1e-4, atol=1e-8))
        except AssertionError as exc:
            failures.append(f"{label}: {exc}")
    elapsed = time.perf_counter() - t0
    ok = not failures and elapsed < 120 and n == 20 * (len(gradsuite.LAYERS) + len(KINDS))
    detail = (f"{n} instances ({len(gradsuite.LAYERS)} layers + {len(KINDS)} models x 20 seeds), "
              f"{len(failures)} failed, worst rel err {worst:.2e}, {elapsed:.0f}s (< 120s)")
    assert criterion(1, ok, detail), failures[:5]


def test_criterion_2_exact_structure(criterion):
    bad = []
    bad += [f"A-CNN causality seed {s}" for s in range(10) if not probes.acnn_causality(s)]
    bad += [f"A-GCN-LSTM locality seed {s}" for s in range(10) if not probes.agcn_locality(s)]
    bad += [f"regressor locality seed {s}" for s in range(10)
            if not probes.regressor_locality(s)]
    masks = 0
    for s in range(30):
        observed, expected = probes.gcn_dependency_mask(s)
        masks += 1
        if not np.array_equal(observed, expected):
            bad.append(f"GCN mask seed {s}")
    detail = (f"causality/locality/regressor probes x10 seeds, {masks} random 5-8 node "
              f"GCN masks; {len(bad)} mismatches")
    assert criterion(2, not bad, detail), bad


def test_criterion_3_statistics_oracles(criterion):
    checks = {}
    side = dm.grid_coords(16)
    d = np.abs(side[:, None] - side[None]).sum(-1)
    rook = dg.SpatialWeights((d == 1).astype(float))
    board = np.array([(-1.0) ** (int(x) + int(y)) for x, y in side])
    checks["moran checkerboard"] = dg.morans_i(board, rook) == pytest.approx(-1.0, abs=1e-12)

    rng = np.random.default_rng(0)
    S = 16
    w = dg.SpatialWeights.knn(dm.grid_coords(S))
    x = rng.normal(size=S)
    sims = np.array([dg.morans_i(rng.permutation(x), w) for _ in range(2000)])
    se = sims.std(ddof=1) / math.sqrt(len(sims))
    checks["moran null mean"] = abs(sims.mean() + 1 / (S - 1)) < 3 * se

    worst = 0.0
    for _ in range(200):
        n = int(rng.integers(3, 30))
        a, b = rng.normal(size=n), rng.normal(size=n)
        da, db = np.diff(a), np.diff(b)
        c = sum(u * v for u, v in zip(da, db)) / math.sqrt(sum(u * u for u in da)
                                                          * sum(v * v for v in db))
        delta = math.sqrt(sum((u - v) ** 2 for u, v in zip(a, b)) / n)
        worst = max(worst, abs(dg.cort(a, b) - c),
                    abs(dg.atdm(a, b, 2.0) - 2.0 / (1.0 + math.exp(2.0 * c)) * delta),
                    abs(sx.rmse(a, b) - delta),
                    abs(sx.bias(a, b) - sum(u - v for u, v in zip(a, b)) / n))
    checks["cort/atdm/rmse/bias"] = worst < 1e-12

    worst_f = 0.0
    for a_, b_ in itertools.product(range(2, 5), range(2, 6)):
        for _ in range(2 if a_ * b_ < 20 else 1):
            scores = rng.integers(0, 5, size=(b_, a_)).astype(float)
            if np.all(scores == scores[:, :1]):
                continue
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)   # fully tied blocks
                got = sx.friedman(scores, method="exact").p_raw
            worst_f = max(worst_f, abs(got - oracles.friedman_exhaustive_p(scores)))
    checks["friedman enumeration"] = worst_f < 1e-12

    worst_w = 0.0
    for n in range(5, 13):
        for _ in range(3):
            xs, ys = np.round(rng.normal(size=(2, n)), 1)
            if np.count_nonzero(xs - ys) < 5:
                continue
            got = sx.wilcoxon_signed_rank(xs, ys, method="exact").p_raw
            worst_w = max(worst_w, abs(got - oracles.wilcoxon_enumerated_p(xs, ys)))
    checks["wilcoxon enumeration"] = worst_w < 1e-12

    worst_a = 0.0
    for _ in range(1000):
        p = rng.uniform(size=int(rng.integers(1, 15))) ** 2
        worst_a = max(worst_a,
                      np.max(np.abs(sx.adjust_holm(p) - oracles.holm_loop(list(p)))),
                      np.max(np.abs(sx.adjust_bh(p) - oracles.bh_loop(list(p)))))
    checks["holm/bh step formulas"] = worst_a < 1e-15

    failed = [k for k, v in checks.items() if not v]
    detail = (f"{len(checks)} checks; oracle max abs diff: metrics {worst:.1e}, "
              f"friedman {worst_f:.1e}, wilcoxon {worst_w:.1e}, adjust {worst_a:.1e}"
              + (f"; failed {failed}" if failed else ""))
    assert criterion(3, not failed, detail), failed


def test_criterion_4_blocked_cv_protocol(criterion):
    rng = np.random.default_rng(4)
    problems = []
    for _ in range(50):
        T, T_out = int(rng.integers(1, 25)), int(rng.integers(1, 6))
        N = int(rng.integers(30 * (T + T_out), 8000))
        n_win = dm.num_windows(N, T, T_out)
        folds = dm.blocked_cv(n_win, T, T_out)
        raw = lambda idx: set((idx[:, None] + np.arange(T + T_out)).ravel().tolist())  # noqa
        tests = []
        for f in folds:
            tr, va, te = f.train_indices(), f.val_indices(), f.test_indices()
            sets = [raw(tr), raw(va), raw(te)]
            if any(a & b for a, b in itertools.combinations(sets, 2)):
                problems.append(f"leak N={N} T={T} T'={T_out} fold {f.fold_id}")
            tests.append(te)
        if not np.array_equal(np.sort(np.concatenate(tests)), np.arange(n_win)):
            problems.append(f"test blocks do not partition N={N} T={T} T'={T_out}")
    # every train set loses a T+T'-1 gap at two borders, so +-2% is attainable only
    # while 2(T+T'-1) <= 0.02 * windows; longer windows are reported, not gated
    worst, beyond = 0.0, 0.0
    for n_win in (5000, 7919, 20000):
        for T, T_out in ((6, 1), (12, 3), (24, 24), (48, 12), (48, 48)):
            dev = 0.0
            for f in dm.blocked_cv(n_win, T, T_out):
                got = np.array([len(f.train_indices()), len(f.val_indices()),
                                len(f.test_indices())]) / n_win
                dev = max(dev, float(np.max(np.abs(got - [0.8, 0.1, 0.1]))))
            if n_win >= 100 * (T + T_out - 1):
                worst = max(worst, dev)
            else:
                beyond = max(beyond, dev)
    if worst > 0.02:
        problems.append(f"proportion off by {worst:.3f}")
    detail = (f"50 random (N,T,T') configs leak-free and test-partitioned; worst split "
              f"deviation {100 * worst:.2f}% (<= 2%) at >= 5000 windows where "
              f"windows >= 100(T+T'-1); {100 * beyond:.2f}% beyond that (gap-bound, not gated)"
              + (f"; {problems[:3]}" if problems else ""))
    assert criterion(4, not problems, detail), problems


def _perm_run(kind, corr_len, rep, data_seed=None):
    data_seed = rep if data_seed is None else data_seed
    cfg = ex.ExperimentConfig(synth=ex.SynthSpec(25, 4000, corr_len, data_seed), models=(kind,),
                              T=6, T_out=1, H=6, train=DESK_TRAIN, seed=100 + rep,
                              permutation_seed=200 + rep, timing=False)
    series = ex.load_series(cfg)
    res = ex.permutation_test(cfg, series)
    (h,) = res.hypotheses
    return series, h


def correlated_seed(rep, corr_len=3.0, threshold=0.3, tries=10):
    """First synth seed in ``rep, rep + 10, ...`` whose mean Moran's I exceeds ``threshold``.

    The correlated arm is defined on datasets with I > 0.3; the draw is
    decided from the data alone, before any model is trained.
    """
    for k in range(tries):
        seed = rep + 10 * k
        i = dg.morans_i_series(dm.synth_generate(25, 4000, corr_len, seed), n_perm=0).mean_i
        if i > threshold:
            return seed, i
    raise AssertionError(f"no synth seed with Moran's I > {threshold} for repetition {rep}")


def test_criterion_5_permutation_replication(criterion):
    t0 = time.perf_counter()
    agn_rows, trad_rows, morans, redrawn = [], [], [], 0
    for rep in range(10):
        _, h = _perm_run("A-ConvLSTM", 0.0, rep)
        agn_rows.append(h)
        data_seed, moran = correlated_seed(rep)
        redrawn += data_seed != rep
        _, h = _perm_run("ConvLSTM", 3.0, rep, data_seed)
        trad_rows.append(h)
        morans.append(moran)
        print(f"rep {rep}: A-ConvLSTM p={agn_rows[-1].report.p_raw:.4f} "
              f"ConvLSTM p={h.report.p_raw:.4f} "
              f"(orig {h.mean_first:.4f} vs perm {h.mean_second:.4f}, data seed {data_seed}, "
              f"I={moran:.3f})", flush=True)
    elapsed = time.perf_counter() - t0
    kept = sum(not h.report.reject for h in agn_rows)
    rejected = sum(h.report.reject for h in trad_rows)
    ok = kept >= 9 and rejected >= 7 and min(morans) > 0.3
    detail = (f"A-ConvLSTM (corr_len=0) not rejected {kept}/10 (need >= 9); ConvLSTM "
              f"(corr_len=3, Moran's I {min(morans):.2f}-{max(morans):.2f}, {redrawn} data "
              f"seeds redrawn for I > 0.3) rejected "
              f"{rejected}/10 (need >= 7); {elapsed / 60:.1f} min")
    assert criterion(5, ok, detail)


def test_criterion_6_agnostic_vs_traditional(criterion):
    t0 = time.perf_counter()
    within = {p: 0 for p in PAIRS}
    against, ratios = [], {p: [] for p in PAIRS}
    for seed in range(10):
        cfg = ex.ExperimentConfig(synth=ex.SynthSpec(25, 2000, 0.0, seed), models=KINDS,
                                  T=6, T_out=1, H=6, t_past=3, train=DESK_TRAIN,
                                  seed=300 + seed, timing=False)
        run = ex.run_experiment(cfg)
        by_model = run.rmse_by_model()
        scores = {k: [by_model[k][f] for f in sorted(by_model[k])] for k in KINDS}
        suite = sx.compare_models(scores, 0.05)
        for pair in PAIRS:
            agn, trad = (float(np.mean(scores[k])) for k in pair)
            ratios[pair].append(agn / trad)
            within[pair] += agn <= 1.1 * trad
        against += [(seed, h.label) for h in suite.hypotheses
                    if h.report.reject and h.mean_first > h.mean_second]
        print(f"seed {seed}: ratios " + ", ".join(f"{a}/{b} {ratios[(a, b)][-1]:.3f}"
                                                  for a, b in PAIRS), flush=True)
    elapsed = time.perf_counter() - t0
    ok = all(v >= 8 for v in within.values())
    detail = ("; ".join(f"{a} <= 1.1x {b} in {within[(a, b)]}/10 "
                        f"(median ratio {np.median(ratios[(a, b)]):.3f})" for a, b in PAIRS)
              + "; Wilcoxon rejections against agnostic: "
              + ", ".join(f"{a} vs {b} {sum(l == f'{a} vs {b}' for _, l in against)}/10"
                          for a, b in PAIRS)
              + f"; {elapsed / 60:.1f} min")
    assert criterion(6, ok, detail), against


SMALL = """\
[data]
source = synth
synth_S = 9
synth_N = 400
synth_corr_len = 2
synth_seed = 5

[model]
models = A-CNN, CNN, A-GCN-LSTM
T = 4
H = 4
tpast_grid = 1, 2

[train]
max_epochs = 2

[run]
seed = 11
folds = 0, 3
timing = off

[diagnostics]
moran_permutations = 99
"""


def _tree_bytes(root):
    return {p.relative_to(root).as_posix(): p.read_bytes()
            for p in sorted(root.rglob("*")) if p.is_file()}


def test_criterion_7_determinism(criterion, tmp_path, capsys):
    ini = tmp_path / "exp.ini"
    ini.write_text(SMALL)
    trees = []
    for name, jobs in (("a", "1"), ("b", "2")):
        out = tmp_path / name
        common = ["--config", str(ini), "--jobs", jobs]
        codes = [cli.main(["run", *common, "--out", str(out / "run")]),
                 cli.main(["permtest", *common, "--out", str(out / "perm")]),
                 cli.main(["diagnose", *common, "--out", str(out / "diag")]),
                 cli.main(["synth", *common, "--out", str(out / "synth")]),
                 cli.main(["compare", str(out / "run"), "--out", str(out / "cmp")]),
                 cli.main(["plotdata", str(out / "run"), "--out", str(out / "plot")])]
        assert codes == [0] * 6
        trees.append(_tree_bytes(out))
    capsys.readouterr()
    same = trees[0].keys() == trees[1].keys() and all(trees[0][k] == trees[1][k]
                                                      for k in trees[0])
    detail = (f"run/permtest/diagnose/synth/compare/plotdata rerun (jobs 1 vs 2): "
              f"{len(trees[0])} files {'identical' if same else 'DIFFER'} byte-for-byte")
    assert criterion(7, same, detail)


def test_criterion_8_reference_values_documented(criterion):
    text = README.read_text() if README.is_file() else ""
    needed = ["21.6", "6.2e-4", "0.03", "0.31", "not CI-gated"]
    missing = [s for s in needed if s not in text]
    detail = ("documentation only: Friedman F = 21.6, p = 6.2e-4; Moran's I range "
              "0.03-0.31; paired-test p-values need the original datasets and are "
              "listed in README, not gated" + (f"; README missing {missing}" if missing else ""))
    assert criterion(8, not missing, detail)
