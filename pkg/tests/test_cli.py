import csv
import json

import pytest

from stagnostic import cli
from stagnostic import experiment as ex
from stagnostic.data import synth_generate
from stagnostic.diagnostics import morans_i_series

SMALL = """\
[data]
source = synth
synth_S = 9
synth_N = 300
synth_corr_len = 2
synth_seed = 3

[model]
models = A-CNN, CNN
T = 4
H = 4
t_past = 2

[train]
max_epochs = 2
batch_size = 32

[run]
seed = 7
folds = 0, 1
timing = off

[diagnostics]
moran_permutations = 49
"""


@pytest.fixture
def small_ini(tmp_path):
    path = tmp_path / "exp.ini"
    path.write_text(SMALL)
    return path


def test_template_parses(tmp_path, capsys):
    assert cli.main(["template"]) == cli.EXIT_OK
    text = capsys.readouterr().out
    assert text.startswith("[data]")
    (tmp_path / "t.ini").write_text(text)
    cfg = ex.ExperimentConfig.from_ini(tmp_path / "t.ini")
    assert cfg.synth is not None and len(cfg.models) == 6


def test_missing_config_file(tmp_path, capsys):
    assert cli.main(["run", "--config", str(tmp_path / "nope.ini")]) == cli.EXIT_CONFIG
    assert "error:" in capsys.readouterr().err


def test_run_requires_config(capsys):
    assert cli.main(["run"]) == cli.EXIT_CONFIG
    assert "--config is required" in capsys.readouterr().err


def test_bad_config_key(tmp_path, capsys):
    path = tmp_path / "bad.ini"
    path.write_text("[model]\nwidth = 3\n")
    assert cli.main(["run", "--config", str(path)]) == cli.EXIT_CONFIG
    assert "width" in capsys.readouterr().err


def test_bad_jobs(small_ini):
    assert cli.main(["run", "--config", str(small_ini), "--jobs", "0"]) == cli.EXIT_CONFIG


def test_missing_dataset_file(tmp_path):
    path = tmp_path / "d.ini"
    path.write_text("[data]\nsource = missing.csv\n")
    assert cli.main(["diagnose", "--config", str(path)]) == cli.EXIT_CONFIG


def test_run_is_byte_reproducible(small_ini, tmp_path, capsys):
    outs = []
    for name in ("a", "b"):
        out = tmp_path / name
        assert cli.main(["run", "--config", str(small_ini), "--out", str(out)]) == cli.EXIT_OK
        outs.append(out)
    assert "A-CNN" in capsys.readouterr().out
    for fname in ("folds.csv", "summary.json", "folds.json"):
        assert (outs[0] / fname).read_bytes() == (outs[1] / fname).read_bytes()
    rows = list(csv.DictReader(open(outs[0] / "folds.csv")))
    assert [(r["model"], r["fold"]) for r in rows] == [("A-CNN", "0"), ("A-CNN", "1"),
                                                       ("CNN", "0"), ("CNN", "1")]
    assert {r["seconds"] for r in rows} == {"0.0"}


def test_out_env_override(small_ini, tmp_path, monkeypatch):
    monkeypatch.setenv(ex.OUT_ENV, str(tmp_path / "env"))
    assert cli.main(["synth", "--config", str(small_ini)]) == cli.EXIT_OK
    assert (tmp_path / "env" / "synth.csv").is_file()


def test_synth_then_diagnose(tmp_path, capsys):
    out = tmp_path / "s"
    assert cli.main(["synth", "--S", "16", "--N", "120", "--corr-len", "3", "--seed", "1",
                     "--out", str(out)]) == cli.EXIT_OK
    assert cli.main(["diagnose", "--data", str(out / "synth.csv"), "--out",
                     str(tmp_path / "d")]) == cli.EXIT_OK
    assert "Moran's I" in capsys.readouterr().out
    doc = json.loads((tmp_path / "d" / "diagnostics.json").read_text())
    assert doc["S"] == 16 and doc["N"] == 120
    direct = morans_i_series(synth_generate(16, 120, 3, seed=1), n_perm=0)
    assert doc["morans_i"] == pytest.approx(direct.mean_i, abs=1e-9)   # CSV round trip
    assert doc["morans_i"] > 0.0
    assert doc["atdm_adj"] >= 0.0


def write_folds(path, scores):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["model", "fold", "rmse"])
        for model, values in scores.items():
            for f, v in enumerate(values):
                w.writerow([model, f, v])


def test_compare_and_plotdata(tmp_path, capsys):
    a = [1.0 + 0.01 * i for i in range(10)]
    write_folds(tmp_path / "x.csv", {"A-CNN": a, "CNN": [v + 0.5 for v in a]})
    write_folds(tmp_path / "y.csv", {"A-ConvLSTM": [v + 0.2 for v in a],
                                     "ConvLSTM": [v + 0.3 for v in a]})
    out = tmp_path / "cmp"
    assert cli.main(["compare", str(tmp_path / "x.csv"), str(tmp_path / "y.csv"),
                     "--out", str(out)]) == cli.EXIT_OK
    text = capsys.readouterr().out
    assert text.startswith("Friedman:")
    doc = json.loads((out / "compare.json").read_text())
    assert [h["hypothesis"] for h in doc["hypotheses"]] == ["A-CNN vs CNN",
                                                            "A-ConvLSTM vs ConvLSTM"]
    assert cli.main(["plotdata", str(tmp_path / "x.csv"), "--out", str(out)]) == cli.EXIT_OK
    rows = list(csv.DictReader(open(out / "plot_annotations.csv")))
    assert rows[0]["model"] == "A-CNN"
    assert float(rows[0]["mean"]) == pytest.approx(sum(a) / 10)


def test_compare_needs_two_models(tmp_path):
    write_folds(tmp_path / "x.csv", {"A-CNN": [1.0] * 10})
    assert cli.main(["compare", str(tmp_path / "x.csv")]) == cli.EXIT_CONFIG


def test_compare_misaligned_folds(tmp_path):
    write_folds(tmp_path / "x.csv", {"A-CNN": [1.0] * 10})
    write_folds(tmp_path / "y.csv", {"CNN": [1.0] * 9})
    assert cli.main(["compare", str(tmp_path / "x.csv"), str(tmp_path / "y.csv")]) \
        == cli.EXIT_CONFIG


def test_permtest_small(small_ini, tmp_path, capsys):
    out = tmp_path / "p"
    assert cli.main(["permtest", "--config", str(small_ini), "--out", str(out)]) == cli.EXIT_OK
    doc = json.loads((out / "permtest.json").read_text())
    assert sorted(doc["permutation"]) == list(range(9))
    assert (out / "original" / "folds.csv").is_file()
    assert (out / "permuted" / "folds.csv").is_file()
