"""Command-line front end.

``clustertrial analyze`` runs one estimator on a CSV file and writes a JSON
result document; ``clustertrial simulate`` runs a Monte-Carlo study and
writes a metrics CSV.

Settings are resolved in three layers, later ones winning: built-in
defaults, then the ``--config`` file (YAML or JSON; a previous result
document is accepted and its embedded ``config`` block is used), then
command-line flags.

Exit status: 0 success, 2 invalid input or configuration, 3 estimator
failure (non-convergence names the failing stage), 4 too many failed
replicates in a simulation.
"""

import argparse
import copy
import csv
import json
import os
import sys
import warnings
from enum import Enum

import numpy as np
import yaml

from . import __version__
from .data import ColumnSchema, EstimandSpec, Level, Population, validate_dataset
from .errors import ClusterTrialError, DomainError, LevelUnavailable, NonConvergence, TooManyFailures, ValidationError
from .estimators import EFF_ML, ESTIMATORS, EstimatorOptions, default_measure, run_estimator
from .learners import DEFAULT_LEARNERS, DEFAULT_PROBABILITY_LEARNERS, LearnerSpec
from .nuisance import default_folds, is_binary
from .simulation import ScenarioConfig, format_table, metrics_csv, run_monte_carlo

EXIT_OK = 0
EXIT_INVALID = 2
EXIT_ESTIMATOR = 3
EXIT_FAILURES = 4

ANALYZE_DEFAULTS = {
    "data": None,
    "columns": {"cluster_id": "cluster_id", "treatment": "treatment", "outcome": "outcome",
                "source_size": "source_size"},
    "cluster_covs": [],
    "indiv_covs": [],
    "estimator": "eff-pm",
    "estimand": {"level": "cluster", "measure": None, "population": "source"},
    "pi": 0.5,
    "folds": None,
    "seed": 0,
    "gee": {"link": None, "correlation": None, "weights": None, "rho_method": None},
    "nuisance": "default",
    "learners": None,
    "prob_learners": None,
    "out": None,
}

SIMULATE_DEFAULTS = {
    "experiment": "continuous",
    "scenario": 1,
    "replicates": 1000,
    "m": None,
    "seed": 2024,
    "workers": None,
    "estimators": list(ESTIMATORS),
    "levels": ["cluster", "individual"],
    "folds": None,
    "out": None,
}


class ConfigError(ClusterTrialError):
    pass


# ------------------------------------------------------------------ config

def load_config_file(path):
    """Mapping from a YAML or JSON file; result documents yield their config."""
    try:
        with open(path, encoding="utf-8") as fh:
            doc = yaml.safe_load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}") from exc
    if doc is None:
        return {}
    if not isinstance(doc, dict):
        raise ConfigError(f"config {path} must be a mapping")
    if "config" in doc and "version" in doc:
        doc = doc["config"]
    return doc


def merge(base, override, where=""):
    """Recursive update of ``base`` by ``override``; unknown keys are errors."""
    out = copy.deepcopy(base)
    for key, value in override.items():
        if key not in base:
            raise ConfigError(f"unknown config key '{where}{key}'")
        if isinstance(base[key], dict) and isinstance(value, dict):
            out[key] = merge(base[key], value, f"{where}{key}.")
        else:
            out[key] = value
    return out


def _split_list(text):
    if text is None:
        return None
    return [t.strip() for t in text.split(",") if t.strip()]


def _flag_overrides(args, simulate=False):
    over = {}
    if args.estimator is not None:
        if simulate:
            over["estimators"] = _split_list(args.estimator)
        else:
            over["estimator"] = args.estimator
    for name in ("folds", "seed", "out"):
        value = getattr(args, name)
        if value is not None:
            over[name] = value
    if simulate:
        for name in ("experiment", "scenario", "replicates", "m", "workers"):
            value = getattr(args, name)
            if value is not None:
                over[name] = value
        if args.estimand is not None:
            over["levels"] = [args.estimand]
        return over
    if args.data is not None:
        over["data"] = args.data
    if args.pi is not None:
        over["pi"] = args.pi
    estimand = {k: v for k, v in (("level", args.estimand), ("measure", args.measure),
                                  ("population", args.population)) if v is not None}
    if estimand:
        over["estimand"] = estimand
    if args.cluster_covs is not None:
        over["cluster_covs"] = _split_list(args.cluster_covs)
    if args.indiv_covs is not None:
        over["indiv_covs"] = _split_list(args.indiv_covs)
    if args.n_col is not None:
        over["columns"] = {"source_size": args.n_col}
    return over


def resolve_config(args, defaults, simulate=False):
    cfg = copy.deepcopy(defaults)
    if args.config:
        cfg = merge(cfg, load_config_file(args.config))
    return merge(cfg, _flag_overrides(args, simulate))


# ---------------------------------------------------------------- analyze

def read_csv_columns(path):
    """Column name -> list of raw strings, keeping file order."""
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            try:
                header = next(reader)
            except StopIteration:
                raise ValidationError("empty data file", line=1)
            cols = {name: [] for name in header}
            for lineno, row in enumerate(reader, start=2):
                if len(row) != len(header):
                    raise ValidationError(f"expected {len(header)} fields, found {len(row)}", line=lineno)
                for name, value in zip(header, row):
                    cols[name].append(value)
    except OSError as exc:
        raise ConfigError(f"cannot read data file {path}: {exc.strerror}") from exc
    return cols


def write_dataset_csv(dataset, path):
    """Write ``dataset`` as an individual-level CSV readable by ``analyze``."""
    cols = dataset.to_rows()
    names = list(cols)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(names)
        writer.writerows(zip(*(cols[n] for n in names)))


def _learner_specs(entries, fallback):
    if entries is None:
        return fallback
    try:
        return tuple(LearnerSpec.from_dict(e) for e in entries)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid learner spec: {exc}") from exc


def _check_choice(value, choices, key):
    if value not in choices:
        raise ConfigError(f"{key} must be one of {', '.join(map(str, choices))}, got {value!r}")


def load_analysis(cfg):
    """Validated dataset and fully resolved config for an analysis run."""
    if not cfg["data"]:
        raise ConfigError("no data file given (--data)")
    _check_choice(cfg["estimator"], ESTIMATORS, "estimator")
    _check_choice(cfg["estimand"]["level"], [v.value for v in Level], "estimand level")
    _check_choice(cfg["estimand"]["population"], [v.value for v in Population], "population")
    try:
        pi = float(cfg["pi"])
    except (TypeError, ValueError):
        raise ConfigError(f"pi must be a number, got {cfg['pi']!r}")
    if not 0.0 < pi < 1.0:
        raise ConfigError("pi must lie in (0, 1)")
    cols = cfg["columns"]
    schema = ColumnSchema(cluster_id=cols["cluster_id"], treatment=cols["treatment"], outcome=cols["outcome"],
                          source_size=cols["source_size"],
                          cluster_covariates=tuple(cfg["cluster_covs"] or ()),
                          indiv_covariates=tuple(cfg["indiv_covs"] or ()))
    raw = read_csv_columns(cfg["data"])
    dataset = validate_dataset(raw, schema, population=cfg["estimand"]["population"], pi=pi)

    resolved = copy.deepcopy(cfg)
    resolved["pi"] = pi
    if resolved["estimand"]["measure"] is None:
        resolved["estimand"]["measure"] = default_measure(dataset).value
    opts = EstimatorOptions(gee_link=cfg["gee"]["link"], gee_correlation=cfg["gee"]["correlation"],
                            gee_weights=cfg["gee"]["weights"], rho_method=cfg["gee"]["rho_method"],
                            nuisance=cfg["nuisance"]).resolve(dataset)
    resolved["gee"]["link"] = opts.gee_link
    resolved["gee"]["correlation"] = opts.gee_correlation
    if cfg["estimator"] == EFF_ML:
        if resolved["folds"] is None:
            resolved["folds"] = default_folds(dataset.m)
        resolved["learners"] = [s.to_dict() for s in _learner_specs(cfg["learners"], DEFAULT_LEARNERS)]
        resolved["prob_learners"] = [s.to_dict() for s in
                                     _learner_specs(cfg["prob_learners"], DEFAULT_PROBABILITY_LEARNERS)]
    return dataset, resolved


def analysis_options(cfg) -> EstimatorOptions:
    return EstimatorOptions(
        gee_link=cfg["gee"]["link"], gee_correlation=cfg["gee"]["correlation"],
        gee_weights=cfg["gee"]["weights"], rho_method=cfg["gee"]["rho_method"],
        folds=cfg["folds"], seed=int(cfg["seed"]),
        learners=_learner_specs(cfg["learners"], None),
        prob_learners=_learner_specs(cfg["prob_learners"], None),
        nuisance=cfg["nuisance"])


def _jsonable(obj):
    if isinstance(obj, Enum):
        return obj.value
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, tuple):
        return list(obj)
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def result_document(result, resolved, dataset, messages):
    # the output path is a property of the invocation, not of the analysis
    embedded = {k: v for k, v in resolved.items() if k != "out"}
    doc = {
        "tool": "clustertrial",
        "version": __version__,
        "config": embedded,
        "data_summary": {"clusters": dataset.m, "individuals": int(len(dataset.y)),
                         "treated_clusters": int(np.sum(dataset.A == 1)),
                         "binary_outcome": bool(is_binary(dataset.y))},
        "estimand": dict(resolved["estimand"]),
        "result": result.to_dict(),
        "warnings": messages,
    }
    return json.dumps(doc, indent=2, sort_keys=True, default=_jsonable, allow_nan=True) + "\n"


def run_analysis(cfg):
    """Return ``(json_text, warning_messages)`` for a resolved config."""
    dataset, resolved = load_analysis(cfg)
    try:
        estimand = EstimandSpec(level=resolved["estimand"]["level"], measure=resolved["estimand"]["measure"],
                                population=resolved["estimand"]["population"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        result = run_estimator(resolved["estimator"], dataset, estimand, analysis_options(resolved))
    messages = sorted({str(w.message) for w in caught})
    return result_document(result, resolved, dataset, messages), messages


def _write(text, path):
    if path:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def cmd_analyze(args):
    cfg = resolve_config(args, ANALYZE_DEFAULTS)
    text, messages = run_analysis(cfg)
    for msg in messages:
        print(f"warning: {msg}", file=sys.stderr)
    _write(text, cfg["out"])
    return EXIT_OK


# --------------------------------------------------------------- simulate

def scenario_from_config(cfg) -> ScenarioConfig:
    try:
        config = ScenarioConfig(experiment=cfg["experiment"], scenario=int(cfg["scenario"]),
                                m=None if cfg["m"] is None else int(cfg["m"]),
                                seed=int(cfg["seed"]), replicates=int(cfg["replicates"]))
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    for name in cfg["estimators"]:
        _check_choice(name, ESTIMATORS, "estimator")
    for level in cfg["levels"]:
        _check_choice(level, [v.value for v in Level], "estimand level")
    if not cfg["estimators"]:
        raise ConfigError("estimator set must be nonempty")
    return config


def cmd_simulate(args):
    cfg = resolve_config(args, SIMULATE_DEFAULTS, simulate=True)
    config = scenario_from_config(cfg)
    workers = cfg["workers"] if cfg["workers"] is not None else (os.cpu_count() or 1)
    if int(workers) < 1:
        raise ConfigError("workers must be >= 1")
    options = EstimatorOptions(folds=cfg["folds"])
    try:
        rows = run_monte_carlo(config, cfg["estimators"], cfg["levels"], workers=int(workers), options=options)
    except TooManyFailures as exc:
        _write(metrics_csv(exc.rows, config), cfg["out"])
        print(format_table(exc.rows), file=sys.stderr)
        raise
    text = metrics_csv(rows, config)
    _write(text, cfg["out"])
    print(format_table(rows), file=sys.stdout if cfg["out"] else sys.stderr)
    return EXIT_OK


# ------------------------------------------------------------------ main

def build_parser():
    parser = argparse.ArgumentParser(prog="clustertrial",
                                     description="Treatment effects in cluster-randomized experiments.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="YAML or JSON config file (flags override it)")
        p.add_argument("--estimand", choices=[v.value for v in Level])
        p.add_argument("--folds", type=int, help="cross-fitting folds K for eff-ml")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output file (default: standard output)")

    a = sub.add_parser("analyze", help="estimate a treatment effect from a CSV file")
    common(a)
    a.add_argument("--data", help="CSV with cluster_id, treatment, outcome columns")
    a.add_argument("--estimator", choices=ESTIMATORS)
    a.add_argument("--measure", choices=["difference", "ratio", "odds-ratio"])
    a.add_argument("--population", choices=[v.value for v in Population])
    a.add_argument("--pi", type=float, help="randomization probability (default 0.5)")
    a.add_argument("--cluster-covs", help="comma-separated cluster-level covariate columns")
    a.add_argument("--indiv-covs", help="comma-separated individual-level covariate columns")
    a.add_argument("--n-col", help="source cluster size column (default source_size)")
    a.set_defaults(func=cmd_analyze)

    s = sub.add_parser("simulate", help="run a Monte-Carlo simulation study")
    common(s)
    s.add_argument("--estimator", help="comma-separated estimators (default: all)")
    s.add_argument("--experiment", choices=["continuous", "binary"])
    s.add_argument("--scenario", type=int, choices=[1, 2, 3, 4])
    s.add_argument("--replicates", type=int)
    s.add_argument("--m", type=int, help="number of clusters")
    s.add_argument("--workers", type=int, help="worker processes (default: CPU count)")
    s.set_defaults(func=cmd_simulate)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_INVALID if exc.code else EXIT_OK
    try:
        return args.func(args)
    except (ConfigError, ValidationError, DomainError, LevelUnavailable) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except NonConvergence as exc:
        print(f"error: estimator did not converge at stage '{exc.stage or 'unknown'}': {exc}", file=sys.stderr)
        return EXIT_ESTIMATOR
    except TooManyFailures as exc:
        print(f"error: too many failed replicates: {exc}", file=sys.stderr)
        return EXIT_FAILURES
    except ClusterTrialError as exc:
        print(f"error: estimation failed: {exc}", file=sys.stderr)
        return EXIT_ESTIMATOR


if __name__ == "__main__":
    sys.exit(main())
