"""Command-line entry point: ``stagnostic <command> --config exp.ini``.

Exit codes: 0 success, 1 some folds failed to train, 2 configuration or I/O error.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import data as dm
from . import experiment as ex
from .data import DataError
from .models import ConfigError

EXIT_OK, EXIT_PARTIAL, EXIT_CONFIG = 0, 1, 2


def _load_config(args) -> ex.ExperimentConfig:
    if args.config is None:
        raise ConfigError("--config is required for this command")
    cfg = ex.ExperimentConfig.from_ini(args.config)
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
        changes["train"] = cfg.train.replace(seed=args.seed)
    if args.alpha is not None:
        changes["alpha"] = args.alpha
    return cfg.replace(**changes) if changes else cfg


def cmd_diagnose(args) -> int:
    if args.data is not None:
        series = dm.load_csv(args.data, args.coords)
        cfg = None
    else:
        cfg = _load_config(args)
        series = ex.load_series(cfg)
    run_cfg = cfg or ex.ExperimentConfig(synth=ex.SynthSpec(),
                                         seed=args.seed if args.seed is not None else 0)
    doc, per_step = ex.diagnose(series, run_cfg)
    out = ex.output_dir(args.out, cfg)
    ex.write_diagnose_outputs(series, doc, per_step, out)
    print(f"Moran's I = {doc['morans_i']:.4f} (p = {doc['morans_p']:.3g}), "
          f"ATDM = {doc['atdm']:.4f}, ATDM_adj = {doc['atdm_adj']:.4f} -> {out}")
    return EXIT_OK


def cmd_run(args) -> int:
    cfg = _load_config(args)
    out = ex.output_dir(args.out, cfg)
    history = out / "history" if cfg.save_history else None
    run = ex.run_experiment(cfg, jobs=args.jobs, history_dir=history)
    ex.write_run_outputs(run, cfg, out)
    summary = ex.summarize(run, cfg)["models"]
    for kind, entry in summary.items():
        if "mean_rmse" in entry:
            print(f"{kind:<11} mean RMSE {entry['mean_rmse']:.4f} over {entry['folds_ok']} folds")
        else:
            print(f"{kind:<11} no successful folds")
    for r in run.failures:
        print(f"warning: {r.model} fold {r.fold}: {r.error}", file=sys.stderr)
    return EXIT_PARTIAL if run.failures else EXIT_OK


def cmd_permtest(args) -> int:
    cfg = _load_config(args)
    out = ex.output_dir(args.out, cfg)
    res = ex.permutation_test(cfg, jobs=args.jobs)
    ex.write_permtest_outputs(res, cfg, out)
    print((out / "permtest.txt").read_text(), end="")
    failed = res.original.failures + res.permuted.failures
    return EXIT_PARTIAL if failed else EXIT_OK


def cmd_compare(args) -> int:
    if len(args.results) < 1:
        raise ConfigError("compare needs at least one results file")
    results = ex.gather_results(args.results)
    if len(results) < 2:
        raise ConfigError("compare needs at least two models across the results files")
    suite = ex.compare_results(results, args.alpha if args.alpha is not None else 0.05)
    out = ex.output_dir(args.out, None)
    ex.write_compare_outputs(suite, out)
    print(suite.render(), end="")
    return EXIT_OK


def cmd_plotdata(args) -> int:
    results = ex.gather_results(args.results)
    out = ex.output_dir(args.out, None)
    ex.write_plotdata(results, out)
    print(f"wrote {out / 'plot_rmse.csv'} and {out / 'plot_annotations.csv'}")
    return EXIT_OK


def cmd_synth(args) -> int:
    spec = ex.SynthSpec()
    cfg = None
    if args.config is not None:
        cfg = _load_config(args)
        if cfg.synth is None:
            raise ConfigError("the config names a dataset file, not a synthetic spec")
        spec = cfg.synth
    changes = {k: v for k, v in (("S", args.S), ("N", args.N), ("corr_len", args.corr_len),
                                 ("seed", args.seed)) if v is not None}
    spec = ex.SynthSpec(**{**spec.__dict__, **changes})
    series = dm.synth_generate(spec.S, spec.N, spec.corr_len, spec.seed)
    out = ex.output_dir(args.out, cfg)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "synth.csv"
    dm.write_csv(series, path)
    print(f"wrote {path} and {dm.default_coords_path(path)}")
    return EXIT_OK


def cmd_template(args) -> int:
    sys.stdout.write(ex.template_text())
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="experiment INI file")
    common.add_argument("--out", help=f"output directory (overrides ${ex.OUT_ENV} and the config)")
    common.add_argument("--jobs", type=int, default=1, help="parallel fold x model jobs")
    common.add_argument("--seed", type=int, help="override the run seed")
    common.add_argument("--alpha", type=float, help="significance level (default 0.05)")

    parser = argparse.ArgumentParser(prog="stagnostic",
                                     description="Spatially agnostic forecasting experiments.")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("diagnose", parents=[common], help="Moran's I and ATDM of a dataset")
    p.add_argument("--data", type=Path, help="dataset CSV (instead of the config's data)")
    p.add_argument("--coords", type=Path, help="coordinate sidecar for --data")
    p.set_defaults(func=cmd_diagnose)
    p = sub.add_parser("run", parents=[common], help="blocked 10-fold evaluation of the models")
    p.set_defaults(func=cmd_run)
    p = sub.add_parser("permtest", parents=[common], help="original vs spatially shuffled data")
    p.set_defaults(func=cmd_permtest)
    p = sub.add_parser("compare", parents=[common], help="Friedman + paired tests on results")
    p.add_argument("results", nargs="+", help="folds.csv files or run directories")
    p.set_defaults(func=cmd_compare)
    p = sub.add_parser("plotdata", parents=[common], help="plot-ready RMSE distributions")
    p.add_argument("results", nargs="+", help="folds.csv files or run directories")
    p.set_defaults(func=cmd_plotdata)
    p = sub.add_parser("synth", parents=[common], help="write a synthetic dataset CSV")
    p.add_argument("--S", type=int, help="number of locations")
    p.add_argument("--N", type=int, help="number of timesteps")
    p.add_argument("--corr-len", type=float, dest="corr_len", help="spatial length-scale")
    p.set_defaults(func=cmd_synth)
    p = sub.add_parser("template", help="print a documented config template")
    p.set_defaults(func=cmd_template)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if getattr(args, "jobs", 1) is not None and getattr(args, "jobs", 1) < 1:
        print("error: --jobs must be at least 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.func(args)
    except (ConfigError, DataError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
