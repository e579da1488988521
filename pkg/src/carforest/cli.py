"""Command-line interface.

Subcommands: simulate, preprocess, tune, fit, predict, benchmark, report.
Exit codes: 0 success, 1 runtime failure, 2 usage or validation failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from ._parallel import set_n_jobs
from .car import CarPriors
from .data import (
    ArealDataset,
    ColumnSchema,
    DataError,
    PreprocessModel,
    SimulationScenario,
    dumps_json,
    knn_impute,
    load_csv,
    log_target,
    pca_reduce,
    simulate_with_truth,
    standardize,
    write_csv_text,
)
from .evaluate import (
    BenchmarkReport,
    ModelSpec,
    TuningGrid,
    backtransform,
    cv_tune,
    benchmark,
)
from .models import MODEL_KINDS, PARAMETERS, ModelSettings, fit_predict, n_model_features
from .prediction import PredictionSet

BUNDLE_FORMAT = "carforest.bundle/1"
REPORT_FORMAT = "carforest.report/1"


class UsageError(ValueError):
    pass


# -- argument helpers ------------------------------------------------------


def _int_list(text: str) -> tuple:
    """Comma-separated integers; ``max`` (m_try only) means all features."""
    out = []
    for tok in str(text).split(","):
        tok = tok.strip()
        out.append(None if tok == "max" else int(tok))
    return tuple(out)


def _float_list(text: str) -> tuple:
    return tuple(float(t) for t in str(text).split(","))


GRID_OPTIONS = {  # flag dest -> (parameter, parser)
    "D": ("D", _int_list),
    "mtry": ("m_try", _int_list),
    "min_node": ("min_node", _int_list),
    "R": ("R", _int_list),
    "bw": ("bw", _int_list),
    "alpha": ("alpha", _float_list),
}


def _add_schema(p: argparse.ArgumentParser) -> None:
    p.add_argument("--input", "-i", help="input CSV")
    p.add_argument("--id-col", default="id")
    p.add_argument("--easting-col", default="easting")
    p.add_argument("--northing-col", default="northing")
    p.add_argument("--target-col", default="target")
    p.add_argument("--group-col", default=None, help="optional group label column")
    p.add_argument("--features", default=None, help="comma-separated feature columns (default: all others)")


def _add_model_settings(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=None, help="random seed (required)")
    p.add_argument("--n-trees", type=int, default=1000)
    p.add_argument("--local-trees", type=int, default=100, help="trees per GRF local forest")
    p.add_argument("--interval", choices=("plugin", "grid"), default="grid",
                   help="CAR interval mode: plug-in hyperparameters or a grid mixture")
    p.add_argument("--no-log", action="store_true", help="model the target on its original scale")


def _add_grid(p: argparse.ArgumentParser, single: bool = False) -> None:
    kind = "value" if single else "candidates"
    p.add_argument("--D", dest="D", default=None, help=f"neighbour count {kind}")
    p.add_argument("--mtry", default=None, help=f"m_try {kind} ('max' = all features)")
    p.add_argument("--min-node", dest="min_node", default=None, help=f"minimum node size {kind}")
    p.add_argument("--R", dest="R", default=None, help=f"CAR-Forest iteration {kind}")
    p.add_argument("--bw", default=None, help=f"GRF neighbourhood size {kind}")
    p.add_argument("--alpha", default=None, help=f"GRF local weight {kind}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="carforest", description="CAR-Forest spatial prediction toolkit")
    parser.add_argument("--version", action="version", version=f"carforest {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--threads", type=int, default=None, help="worker threads (default: all cores)")
        p.add_argument("--config", default=None, help="JSON file of option values; flags take precedence")
        return p

    p = command("simulate", "write a synthetic areal dataset and its truth")
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--rho", type=float, default=0.9)
    p.add_argument("--tau", type=float, default=1.0)
    p.add_argument("--sigma2", type=float, default=0.25)
    p.add_argument("--mean", choices=("linear", "nonlinear"), default="nonlinear")
    p.add_argument("--layout", choices=("grid", "uniform-random"), default="uniform-random")
    p.add_argument("--n-features", type=int, default=5)
    p.add_argument("--coefficients", default=None, help="comma-separated linear coefficients")
    p.add_argument("--intercept", type=float, default=11.0,
                   help="log-scale level of the target (default puts prices near 60,000)")
    p.add_argument("--sim-D", dest="sim_d", type=int, default=5, help="neighbour count of the generating graph")
    p.add_argument("--no-spatial", action="store_true", help="omit the spatial random effects")
    p.add_argument("--groups", type=int, default=0, help="label units with this many square regions")
    p.add_argument("--missing-fraction", type=float, default=0.0,
                   help="fraction of targets to blank out at random")
    p.add_argument("--seed", type=int, default=None, help="random seed (required)")
    p.add_argument("--output", "-o", help="output CSV")
    p.add_argument("--truth", default=None, help="truth JSON (default: <output>.truth.json)")
    p.add_argument("--log-target", action="store_true", help="write the target on the log scale")

    p = command("preprocess", "impute, standardise and PCA-reduce features")
    _add_schema(p)
    p.add_argument("--output", "-o", help="output CSV")
    p.add_argument("--model-out", default=None, help="JSON record of the fitted preprocessing")
    p.add_argument("--impute-k", type=int, default=5)
    p.add_argument("--standardize", action="store_true")
    p.add_argument("--pca", action="append", default=[],
                   help="NAME=col1,col2,... block to reduce (repeatable)")
    p.add_argument("--pca-threshold", type=float, default=0.95)

    p = command("tune", "cross-validate one model over a grid")
    _add_schema(p)
    p.add_argument("--model", choices=MODEL_KINDS, default=None)
    p.add_argument("--folds", type=int, default=10)
    _add_model_settings(p)
    _add_grid(p)
    p.add_argument("--output", "-o", help="tuning result JSON")

    p = command("fit", "fit a model to observed units and predict missing ones")
    _add_schema(p)
    p.add_argument("--model", choices=MODEL_KINDS, default=None)
    p.add_argument("--tuning", default=None, help="tuning JSON whose chosen parameters to use")
    _add_model_settings(p)
    _add_grid(p, single=True)
    p.add_argument("--output", "-o", help="fit bundle JSON")

    p = command("predict", "write predictions for the units with missing targets")
    _add_schema(p)
    p.add_argument("--bundle", default=None, help="fit bundle JSON")
    p.add_argument("--scale", choices=("original", "log"), default="original")
    p.add_argument("--output", "-o", help="prediction CSV")

    p = command("benchmark", "repeated train/test comparison of several models")
    _add_schema(p)
    p.add_argument("--models", default="lm,car,rf,grf,carforest")
    p.add_argument("--splits", type=int, default=5)
    p.add_argument("--train-fraction", type=float, default=0.8)
    p.add_argument("--folds", type=int, default=10)
    _add_model_settings(p)
    _add_grid(p)
    p.add_argument("--by-group", action="store_true", help="add per-group metrics (needs --group-col)")
    p.add_argument("--output", "-o", help="report JSON")
    p.add_argument("--text", default=None, help="aligned-text table")
    p.add_argument("--predictions", default=None, help="long-format prediction CSV for plotting")
    p.add_argument("--group-metrics", default=None, help="per-group metric CSV for plotting")

    p = command("report", "render a benchmark report JSON as a text table")
    p.add_argument("--input", "-i", help="report JSON")
    p.add_argument("--output", "-o", default=None, help="text file (default: stdout)")
    return parser


def parse_args(argv) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        try:
            overrides = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config file {args.config}: {exc}") from None
        if not isinstance(overrides, dict):
            raise UsageError("config file must hold a JSON object")
        sub = parser._subparsers._group_actions[0].choices[args.command]
        known = {a.dest for a in sub._actions}
        unknown = sorted(k.replace("-", "_") for k in overrides if k.replace("-", "_") not in known)
        if unknown:
            raise UsageError(f"unknown config keys for {args.command}: {', '.join(unknown)}")
        sub.set_defaults(**{k.replace("-", "_"): v for k, v in overrides.items()})
        args = parser.parse_args(argv)
    return args


# -- shared plumbing -------------------------------------------------------


def _require(args, *names) -> None:
    for name in names:
        if getattr(args, name, None) is None:
            raise UsageError(f"--{name.replace('_', '-')} is required for {args.command}")


def _schema(args) -> ColumnSchema:
    features = None
    if args.features:
        features = tuple(f.strip() for f in args.features.split(","))
    return ColumnSchema(
        id=args.id_col,
        easting=args.easting_col,
        northing=args.northing_col,
        target=args.target_col,
        features=features,
        group=args.group_col,
    )


def _load(args) -> ArealDataset:
    _require(args, "input")
    return load_csv(args.input, _schema(args))


def _modelling_dataset(args) -> ArealDataset:
    """Loaded dataset on the modelling scale, with complete features."""
    ds = _load(args)
    missing = np.isnan(ds.features).any(axis=0)
    if missing.any():
        cols = [n for n, m in zip(ds.feature_names, missing) if m]
        raise DataError(f"missing feature values in {', '.join(cols)}; run 'preprocess' first")
    return ds if args.no_log else log_target(ds)


def _fingerprint(ds: ArealDataset) -> str:
    return hashlib.sha256(write_csv_text(ds).encode("utf-8")).hexdigest()


def _settings(args) -> ModelSettings:
    _require(args, "seed")
    if args.n_trees < 1 or args.local_trees < 1:
        raise UsageError("tree counts must be positive")
    return ModelSettings(
        n_trees=args.n_trees,
        local_n_trees=args.local_trees,
        seed=args.seed,
        interval_mode=args.interval,
        priors=CarPriors(),
    )


def _grid_overrides(args) -> dict:
    out = {}
    for dest, (name, parse) in GRID_OPTIONS.items():
        val = getattr(args, dest, None)
        if val is None:
            continue
        try:
            out[name] = parse(val) if isinstance(val, str) else tuple(val) if isinstance(val, list) else (val,)
        except ValueError:
            raise UsageError(f"cannot parse --{dest.replace('_', '-')} value {val!r}") from None
    return out


def _grid(kind: str, ds: ArealDataset, overrides: dict) -> TuningGrid:
    relevant = {k: v for k, v in overrides.items() if k in PARAMETERS[kind]}
    return TuningGrid.default(kind, n_model_features(kind, ds), **relevant)


def _provenance(args, settings: ModelSettings | None = None) -> dict:
    skip = {"config", "threads", "output", "text", "predictions", "group_metrics", "input", "bundle",
            "tuning", "model_out", "truth"}
    flags = {k: v for k, v in sorted(vars(args).items()) if k not in skip}
    d = {"version": __version__, "command": args.command, "options": flags}
    if settings is not None:
        d["settings"] = settings.to_dict()
    return d


def _write(path, text: str) -> None:
    if path is None or path == "-":
        sys.stdout.write(text)
    else:
        Path(path).write_text(text, encoding="utf-8")


# -- commands --------------------------------------------------------------


def cmd_simulate(args) -> int:
    _require(args, "seed", "output")
    coefs = (1.0, -0.5, 0.75, 0.0, 0.0)
    if args.coefficients:
        coefs = _float_list(args.coefficients)
    elif args.n_features != 5:
        coefs = tuple([1.0, -0.5, 0.75] + [0.0] * max(args.n_features - 3, 0))[: args.n_features]
    if not 0.0 <= args.missing_fraction < 1.0:
        raise UsageError("--missing-fraction must lie in [0, 1)")
    sc = SimulationScenario(
        n_units=args.n,
        layout=args.layout,
        rho_true=args.rho,
        tau_true=args.tau,
        sigma2_true=args.sigma2,
        mean_function=args.mean,
        n_features=args.n_features,
        coefficients=coefs,
        intercept=args.intercept,
        d_param=args.sim_d,
        include_spatial=not args.no_spatial,
        seed=args.seed,
    )
    ds, truth = simulate_with_truth(sc)
    full_target = ds.target
    rng = np.random.default_rng(np.random.SeedSequence([args.seed, 1]))
    n_missing = int(math.floor(args.missing_fraction * ds.n_total + 0.5))
    masked = np.sort(rng.choice(ds.n_total, size=n_missing, replace=False)) if n_missing else np.array([], int)
    target = full_target.copy()
    target[masked] = np.nan
    if not args.log_target:
        target = np.exp(target)
    groups = None
    if args.groups:
        side = math.ceil(math.sqrt(args.groups))
        cell = np.minimum((ds.coords / sc.extent * side).astype(int), side - 1)
        groups = tuple(f"G{int(r * side + c) % args.groups + 1:02d}" for c, r in cell)
    out = replace(ds, target=target, target_scale="log" if args.log_target else "original", groups=groups)
    _write(args.output, write_csv_text(out, ColumnSchema(group="group")))
    truth_doc = truth.to_dict()
    truth_doc["log_target"] = full_target.tolist()
    truth_doc["ids"] = list(ds.ids)
    truth_doc["masked_ids"] = [ds.ids[k] for k in masked]
    truth_doc["provenance"] = _provenance(args)
    _write(args.truth or f"{args.output}.truth.json", dumps_json(truth_doc))
    return 0


def cmd_preprocess(args) -> int:
    _require(args, "output")
    ds = _load(args)
    ds = knn_impute(ds, args.impute_k)
    model = PreprocessModel(impute_k=args.impute_k)
    for spec in args.pca:
        name, _, cols = spec.partition("=")
        if not cols:
            raise UsageError(f"--pca expects NAME=col1,col2,... (got {spec!r})")
        ds, m = pca_reduce(ds, [c.strip() for c in cols.split(",")], args.pca_threshold, name=name.strip())
        model = model.merged(m)
    if args.standardize:
        ds, m = standardize(ds)
        model = model.merged(m)
    _write(args.output, write_csv_text(ds, _schema(args)))
    if args.model_out:
        doc = model.to_dict()
        doc["provenance"] = _provenance(args)
        _write(args.model_out, dumps_json(doc))
    return 0


def cmd_tune(args) -> int:
    _require(args, "model", "output")
    settings = _settings(args)
    ds = _modelling_dataset(args)
    train = ds.subset(np.flatnonzero(ds.observed))
    grid = _grid(args.model, train, _grid_overrides(args))
    result = cv_tune(train, args.model, grid, args.folds, args.seed, settings)
    doc = result.to_dict()
    doc["grid"] = grid.to_dict()
    doc["provenance"] = _provenance(args, settings)
    _write(args.output, dumps_json(doc))
    return 0


def _fit_params(args, train: ArealDataset) -> dict:
    if args.tuning:
        doc = json.loads(Path(args.tuning).read_text(encoding="utf-8"))
        if doc.get("kind") != args.model:
            raise UsageError(f"tuning file is for {doc.get('kind')!r}, not {args.model!r}")
        return dict(doc["chosen"])
    overrides = _grid_overrides(args)
    params = {}
    defaults = {"D": 5, "m_try": None, "min_node": 5, "R": 5, "bw": 100, "alpha": 0.5}
    for name in PARAMETERS[args.model]:
        vals = overrides.get(name, (defaults[name],))
        if len(vals) != 1:
            raise UsageError(f"fit takes a single value for {name}; use 'tune' for grids")
        params[name] = vals[0]
    if "m_try" in params and params["m_try"] is None:
        params["m_try"] = n_model_features(args.model, train)
    return params


def cmd_fit(args) -> int:
    _require(args, "model", "output")
    settings = _settings(args)
    ds = _modelling_dataset(args)
    obs = ds.observed
    if not obs.any():
        raise DataError("no observed targets to train on")
    train = ds.subset(np.flatnonzero(obs))
    test = ds.subset(np.flatnonzero(~obs))
    params = _fit_params(args, train)
    pred, summary = fit_predict(args.model, params, train, test, settings)
    bundle = {
        "format": BUNDLE_FORMAT,
        "model": args.model,
        "params": params,
        "log_scale": not args.no_log,
        "dataset_sha256": _fingerprint(ds),
        "n_train": train.n_total,
        "fit": summary,
        "predictions": pred.to_dict(),
        "provenance": _provenance(args, settings),
    }
    _write(args.output, dumps_json(bundle))
    return 0


def cmd_predict(args) -> int:
    _require(args, "bundle", "output")
    ds = _load(args)
    if ds.observed.all():
        raise DataError("nothing to predict: every unit has an observed target")
    try:
        bundle = json.loads(Path(args.bundle).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise RuntimeError(f"cannot read fit bundle {args.bundle}: {exc}") from None
    if bundle.get("format") != BUNDLE_FORMAT:
        raise RuntimeError(f"{args.bundle} is not a fit bundle")
    log_scale = bundle["log_scale"]
    model_ds = log_target(ds) if log_scale else ds
    if _fingerprint(model_ds) != bundle["dataset_sha256"]:
        raise RuntimeError("stale fit bundle: the dataset differs from the one the bundle was fitted on")
    pred = PredictionSet.from_dict(bundle["predictions"])
    if log_scale and args.scale == "original":
        pred = backtransform(pred)
    elif not log_scale and args.scale == "log":
        raise UsageError("the bundle was fitted on the original scale; --scale log is unavailable")
    _write(args.output, pred.to_csv_text())
    return 0


def cmd_benchmark(args) -> int:
    settings = _settings(args)
    kinds = [k.strip() for k in args.models.split(",") if k.strip()]
    for k in kinds:
        if k not in MODEL_KINDS:
            raise UsageError(f"unknown model {k!r}; choose from {', '.join(MODEL_KINDS)}")
    if args.by_group and not args.group_col:
        raise UsageError("--by-group needs --group-col")
    ds = _modelling_dataset(args)
    obs = ds.subset(np.flatnonzero(ds.observed))
    overrides = _grid_overrides(args)
    specs = [ModelSpec(k, _grid(k, obs, overrides)) for k in kinds]
    report = benchmark(ds, specs, args.splits, args.train_fraction, args.seed, args.folds, settings,
                       by_group=args.by_group)
    doc = report.to_dict()
    doc["format"] = REPORT_FORMAT
    doc["provenance"] = _provenance(args, settings)
    if args.output:
        _write(args.output, dumps_json(doc))
    if args.text or not args.output:
        _write(args.text, report.to_text())
    if args.predictions:
        _write(args.predictions, report.predictions_csv())
    if args.group_metrics:
        _write(args.group_metrics, report.group_metrics_csv())
    return 0


def cmd_report(args) -> int:
    _require(args, "input")
    doc = json.loads(Path(args.input).read_text(encoding="utf-8"))
    if doc.get("format") != REPORT_FORMAT:
        raise UsageError(f"{args.input} is not a benchmark report")
    table = doc["table"]
    metrics = {m: {name: vals[:-1] for name, vals in per.items()} for m, per in table.items()}
    report = BenchmarkReport(
        models=list(doc["models"]),
        n_splits=doc["n_splits"],
        seed=doc["seed"],
        metrics=metrics,
        tuning=doc["tuning"],
        deployment=doc["deployment"],
        settings=doc["settings"],
        config=doc["config"],
    )
    _write(args.output, report.to_text())
    return 0


COMMANDS = {
    "simulate": cmd_simulate,
    "preprocess": cmd_preprocess,
    "tune": cmd_tune,
    "fit": cmd_fit,
    "predict": cmd_predict,
    "benchmark": cmd_benchmark,
    "report": cmd_report,
}


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = parse_args(argv)
    except SystemExit as exc:  # argparse usage errors exit with 2 already
        return int(exc.code or 0)
    except UsageError as exc:
        print(f"carforest: error: {exc}", file=sys.stderr)
        return 2
    set_n_jobs(args.threads)
    try:
        return COMMANDS[args.command](args)
    except (ValueError, KeyError) as exc:
        print(f"carforest {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:
        print(f"carforest {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
