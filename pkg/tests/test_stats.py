import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from stagnostic import stats as sx


def test_rmse_bias_examples():
    t = np.random.default_rng(0).normal(size=(2, 4))
    assert sx.rmse(t, t) == 0.0 and sx.bias(t, t) == 0.0
    assert sx.rmse(t + 0.5, t) == pytest.approx(0.5, abs=1e-12)
    assert sx.bias(t - 0.5, t) == pytest.approx(-0.5, abs=1e-12)
    signs = np.array([[1.0, -1.0] * 2, [-1.0, 1.0] * 2])
    assert sx.bias(t + 0.3 * signs, t) == pytest.approx(0.0, abs=1e-15)
    assert sx.rmse(t + 0.3 * signs, t) == pytest.approx(0.3, abs=1e-12)


@given(st.integers(0, 10_000))
@settings(max_examples=30, deadline=None)
def test_rmse_bias_direct(seed):
    rng = np.random.default_rng(seed)
    p, t = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    sq = sum((p[i, j] - t[i, j]) ** 2 for i in range(3) for j in range(4))
    lin = sum(p[i, j] - t[i, j] for i in range(3) for j in range(4))
    assert sx.rmse(p, t) == pytest.approx(math.sqrt(sq / 12), abs=1e-12)
    assert sx.bias(p, t) == pytest.approx(lin / 12, abs=1e-12)


def test_metric_shape_mismatch():
    with pytest.raises(ValueError, match="shapes differ"):
        sx.rmse(np.zeros(3), np.zeros(4))


def test_friedman_identical_rankings():
    scores = np.tile([1.0, 2.0, 3.0], (4, 1))
    rep = sx.friedman(scores)
    assert rep.statistic == pytest.approx(8.0)
    assert rep.df == 2
    assert rep.p_raw == pytest.approx(math.exp(-4.0), rel=1e-10)   # chi2(2) tail = e^{-x/2}
    assert round(rep.p_raw, 4) == 0.0183


def test_friedman_all_tied_warns():
    with pytest.warns(RuntimeWarning, match="fully tied"):
        rep = sx.friedman(np.ones((5, 2)))
    assert rep.statistic == 0.0 and rep.p_raw == 1.0


def test_friedman_exact_small_case():
    scores = np.tile([1.0, 2.0, 3.0], (4, 1))
    exact = sx.friedman(scores, method="exact").p_raw
    assert exact == pytest.approx(oracles.friedman_exhaustive_p(scores), abs=1e-12)
    # 6 blocks orders out of 6^4 give the extreme rank sums
    assert exact == pytest.approx(6 / 6 ** 4, abs=1e-12)


@given(st.integers(0, 10_000))
@settings(max_examples=25, deadline=None)
def test_friedman_exact_matches_enumeration(seed):
    rng = np.random.default_rng(seed)
    a, b = int(rng.integers(2, 4)), int(rng.integers(2, 5))
    scores = rng.integers(0, 4, size=(b, a)).astype(float)   # ties on purpose
    if np.all(scores == scores[:, :1]):
        return
    with np.errstate(all="ignore"):
        import warnings
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            got = sx.friedman(scores, method="exact").p_raw
    assert got == pytest.approx(oracles.friedman_exhaustive_p(scores), abs=1e-12)


@given(st.integers(0, 10_000))
@settings(max_examples=30, deadline=None)
def test_friedman_monotone_invariance(seed):
    rng = np.random.default_rng(seed)
    s = rng.normal(size=(6, 4))
    a = sx.friedman(s)
    b = sx.friedman(np.exp(3 * s) + 7)
    assert a.statistic == b.statistic and a.p_raw == b.p_raw


def test_friedman_two_algorithms_follow_sign_direction():
    s = np.column_stack([np.zeros(8), np.ones(8)])
    s[0] = [1.0, 0.0]
    rep = sx.friedman(s)
    assert rep.reject
    assert sx.block_ranks(s).mean(axis=0)[0] < 1.5


def test_friedman_input_errors():
    with pytest.raises(ValueError, match="at least 2"):
        sx.friedman(np.ones((1, 3)))
    with pytest.raises(ValueError, match="unknown method"):
        sx.friedman(np.eye(3), method="magic")


def test_wilcoxon_all_positive_six():
    rep = sx.wilcoxon_signed_rank(np.arange(1.0, 7.0), np.zeros(6))
    assert rep.statistic == 21.0
    assert rep.p_raw == pytest.approx(2 / 64, abs=1e-15)


def test_wilcoxon_identical_degenerate():
    x = np.arange(7.0)
    rep = sx.wilcoxon_signed_rank(x, x)
    assert rep.p_raw == 1.0 and rep.degenerate and not rep.reject


def test_wilcoxon_too_few():
    with pytest.raises(ValueError, match="at least 5"):
        sx.wilcoxon_signed_rank([1.0, 2.0, 3.0, 0.0], [0.0, 0.0, 0.0, 0.0])


@given(st.integers(0, 10_000))
@settings(max_examples=40, deadline=None)
def test_wilcoxon_exact_matches_enumeration(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(5, 11))
    x = np.round(rng.normal(size=n), 1)
    y = np.round(rng.normal(size=n), 1)
    if np.count_nonzero(x - y) < 5:
        return
    got = sx.wilcoxon_signed_rank(x, y, method="exact").p_raw
    assert got == pytest.approx(oracles.wilcoxon_enumerated_p(x, y), abs=1e-12)


def test_wilcoxon_exact_vs_normal_n12():
    rng = np.random.default_rng(1)
    for _ in range(20):
        x, y = rng.normal(size=12), rng.normal(size=12)
        e = sx.wilcoxon_signed_rank(x, y, method="exact").p_raw
        a = sx.wilcoxon_signed_rank(x, y, method="normal").p_raw
        assert abs(e - a) < 0.02


def test_wilcoxon_shift_invariance():
    rng = np.random.default_rng(2)
    x, y = rng.normal(size=9), rng.normal(size=9)
    assert (sx.wilcoxon_signed_rank(x, y).p_raw
            == sx.wilcoxon_signed_rank(x + 0.5, y + 0.5).p_raw)


def test_adjustment_examples():
    np.testing.assert_allclose(sx.adjust_holm([0.01, 0.02, 0.04]), [0.03, 0.04, 0.04])
    np.testing.assert_allclose(sx.adjust_bh([0.01, 0.02, 0.04]), [0.03, 0.03, 0.04])
    np.testing.assert_allclose(sx.adjust_bh([0.1, 0.1, 0.1]), [0.1, 0.1, 0.1])
    np.testing.assert_allclose(sx.adjust_holm([0.1, 0.1, 0.1]), [0.3, 0.3, 0.3])
    assert sx.adjust_holm([0.2]).tolist() == [0.2] == sx.adjust_bh([0.2]).tolist()


@given(st.lists(st.floats(0.0, 1.0), min_size=1, max_size=12))
@settings(max_examples=100, deadline=None)
def test_adjustments_match_loops_and_bounds(p):
    holm, bh = sx.adjust_holm(p), sx.adjust_bh(p)
    np.testing.assert_allclose(holm, oracles.holm_loop(p), atol=1e-15)
    np.testing.assert_allclose(bh, oracles.bh_loop(p), atol=1e-15)
    raw = np.array(p)
    bonf = np.minimum(1.0, len(p) * raw)
    assert np.all(holm >= raw - 1e-15) and np.all(holm <= bonf + 1e-15)
    assert np.all(bh >= raw - 1e-15) and np.all(bh <= bonf + 1e-15)


def test_adjustment_rejects_bad_p():
    with pytest.raises(ValueError):
        sx.adjust_holm([0.5, 1.5])


def test_compare_identical_models():
    scores = np.random.default_rng(0).normal(size=10)
    suite = sx.compare_models({k: scores for k in ("A-CNN", "CNN", "A-ConvLSTM")})
    assert suite.friedman.p_raw == 1.0
    assert suite.hypotheses == ()
    assert "post-hoc tests skipped" in suite.render()


def six_models(rng, dominant=None):
    base = rng.normal(loc=1.0, scale=0.1, size=10)
    res = {k: base + rng.normal(scale=0.01, size=10)
           for k in ("A-CNN", "CNN", "A-ConvLSTM", "ConvLSTM", "A-GCN-LSTM", "GCN-LSTM")}
    if dominant:
        res[dominant] = base - 0.5
    return res


def test_compare_dominant_model():
    suite = sx.compare_models(six_models(np.random.default_rng(1), dominant="A-CNN"))
    assert suite.friedman.reject
    assert [h.label for h in suite.hypotheses] == ["A-CNN vs CNN", "A-ConvLSTM vs ConvLSTM",
                                                   "A-GCN-LSTM vs GCN-LSTM"]
    first = suite.hypotheses[0].report
    assert first.reject and first.n_hypotheses == 3
    assert first.p_holm == pytest.approx(3 * 2 / 1024)


def test_compare_misaligned():
    with pytest.raises(ValueError, match="misaligned"):
        sx.compare_models({"A": [1.0, 2.0], "B": [1.0]})


def test_render_and_json(tmp_path):
    suite = sx.compare_models(six_models(np.random.default_rng(1), dominant="A-CNN"))
    text = suite.render()
    lines = text.splitlines()
    assert lines[0].startswith("Friedman: statistic")
    assert lines[1].split() == ["i", "hypotheses", "p_unajusted", "p_holm", "p_BH"]
    assert lines[2].split()[:2] == ["I", "A-CNN"]
    assert "CNN*" in lines[2]
    sx.reports_to_json(suite, tmp_path / "r.json")
    doc = json.loads((tmp_path / "r.json").read_text())
    assert doc["hypotheses"][0]["i"] == "I" and doc["hypotheses"][0]["reject"] is True


def test_paired_tests_degenerate_pair_reported():
    res = {"a": [1.0, 2.0, 3.0], "b": [1.0, 2.0, 4.0]}
    (h,) = sx.paired_tests([("a", "b")], res)
    assert h.report.degenerate and h.report.p_raw == 1.0


def test_report_decision_uses_holm_first():
    rep = sx.StatReport("t", 1.0, 0.01).with_adjusted(0.2, 0.03, 3)
    assert rep.p_decision == 0.2 and not rep.reject
