"""``convolt`` command line: synth, features, calibrate, predict, evaluate, ablate, coefficients.

Exit codes: 0 success, 1 validation error, 2 I/O or file-format error.
Settings come from built-in defaults, then an optional ``--config`` JSON file,
then explicit flags (flags win).
"""
from __future__ import annotations

import argparse
import csv
import json
import math
import sys
from dataclasses import fields
from pathlib import Path
from typing import Sequence

import numpy as np

from convolt import __version__
from convolt.conformal import (
    ALL_METHODS,
    MODES,
    Aggregator,
    Records,
    calibrate,
    load_predictor,
    save_predictor,
)
from convolt.evaluation import (
    ExperimentConfig,
    build_records,
    coefficient_models,
    export_coefficients,
    feature_rows,
    records_from_feature_rows,
    run_ablations,
    run_experiment,
    write_coefficients,
    write_report,
    write_tables,
)
from convolt.features import BAND_SIDES, FeatureRow, read_feature_csv, write_feature_csv
from convolt.grid import GridFormatError
from convolt.synth import DatasetError, SynthConfig, generate_cases, iter_dataset, write_dataset

INTERVAL_HEADER = ("case_id", "label_id", "method", "y_hat0_ml", "lo_ml", "hi_ml", "width_ml", "covered", "q_hat")

EXP_DEFAULTS = ExperimentConfig()
SYNTH_DEFAULTS = SynthConfig()


class IOFailure(Exception):
    """Raised for missing or unreadable inputs (exit code 2)."""


def _load_json(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise IOFailure(f"cannot read config {path}: {exc.strerror}") from exc
    try:
        d = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ValueError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(d, dict):
        raise ValueError(f"{path}: config must be a JSON object")
    return d


def _csv_list(text: str) -> tuple[str, ...]:
    return tuple(t.strip() for t in text.split(",") if t.strip())


def _float_list(text: str) -> tuple[float, ...]:
    return tuple(float(t) for t in _csv_list(text))


def _merge(defaults_cls, file_cfg: dict, args: argparse.Namespace, mapping: dict[str, str]):
    """Config-file values, overridden by any flag the user passed explicitly."""
    known = {f.name for f in fields(defaults_cls)}
    unknown = set(file_cfg) - known
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    merged = dict(file_cfg)
    for flag, key in mapping.items():
        v = getattr(args, flag, None)
        if v is not None:
            merged[key] = v
    return defaults_cls.from_json(merged)


def _d(value) -> str:
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return str(value)


# --- experiment options shared by several subcommands -------------------------

EXP_FLAGS = {
    "alpha": "alpha", "repeats": "repeats", "fractions": "fractions", "methods": "methods",
    "aggregations": "aggregations", "label_mode": "label_mode", "feature_mode": "feature_mode",
    "seed": "seed", "ridge_lambda": "ridge_lambda", "cqr_lambda": "cqr_lambda", "cqr_iters": "cqr_iters",
    "lcp_k": "lcp_k", "clamp": "clamp", "retrain": "retrain", "band_radius": "band_radius",
    "band_side": "band_side",
}


def _add_region_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--label-mode", dest="label_mode", choices=("global", "shells", "per_label"),
                   help=f"label structure of the dataset (default: {EXP_DEFAULTS.label_mode})")
    p.add_argument("--feature-mode", dest="feature_mode", choices=("local", "global"),
                   help=f"local region/band features or whole-mask features (default: {EXP_DEFAULTS.feature_mode})")
    p.add_argument("--band-radius", dest="band_radius", type=int,
                   help=f"boundary band radius in voxels, per-label mode (default: {EXP_DEFAULTS.band_radius})")
    p.add_argument("--band-side", dest="band_side", choices=BAND_SIDES,
                   help=f"side of the label boundary the band covers (default: {EXP_DEFAULTS.band_side})")


def _add_experiment_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="experiment config JSON; flags override its values")
    p.add_argument("--alpha", type=float, help=f"miscoverage level (default: {EXP_DEFAULTS.alpha})")
    p.add_argument("--repeats", type=int, help=f"cal/test resplits (default: {EXP_DEFAULTS.repeats})")
    p.add_argument("--fractions", type=_float_list,
                   help=f"train,cal,test case fractions (default: {_d(EXP_DEFAULTS.fractions)})")
    p.add_argument("--methods", type=_csv_list, help=f"comma-separated methods (default: {_d(EXP_DEFAULTS.methods)})")
    p.add_argument("--aggregations", type=_csv_list,
                   help=f"case-level aggregators for shells mode (default: {_d(EXP_DEFAULTS.aggregations)})")
    _add_region_flags(p)
    p.add_argument("--seed", type=int, help=f"master seed (default: {EXP_DEFAULTS.seed})")
    p.add_argument("--ridge-lambda", dest="ridge_lambda", type=float,
                   help=f"ridge penalty (default: {EXP_DEFAULTS.ridge_lambda})")
    p.add_argument("--cqr-lambda", dest="cqr_lambda", type=float,
                   help=f"quantile-regression penalty (default: {EXP_DEFAULTS.cqr_lambda})")
    p.add_argument("--cqr-iters", dest="cqr_iters", type=int,
                   help=f"quantile-regression iterations (default: {EXP_DEFAULTS.cqr_iters})")
    p.add_argument("--lcp-k", dest="lcp_k", type=int, help=f"LCP neighbours (default: {EXP_DEFAULTS.lcp_k})")
    p.add_argument("--clamp", action="store_const", const=True,
                   help=f"clamp lower endpoints at zero (default: {EXP_DEFAULTS.clamp})")
    p.add_argument("--retrain", action="store_const", const=True,
                   help=f"redraw the training split every repeat (default: {EXP_DEFAULTS.retrain})")
    p.add_argument("--jobs", type=int, default=1, help="worker processes for feature extraction (default: 1)")


def _add_input_flags(p: argparse.ArgumentParser) -> None:
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--dataset", help="synthetic dataset directory")
    src.add_argument("--features", help="feature CSV (from 'convolt features')")
    p.add_argument("--global-features", dest="global_features",
                   help="whole-mask feature CSV, for the global-features ablation with --features")


# --- parser -------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    """Usage errors are validation errors: one line on stderr, exit code 1."""

    def error(self, message):
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="convolt", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--config", help="synth config JSON; flags override its values")
    p.add_argument("--n-cases", dest="n_cases", type=int, help=f"number of cases (default: {SYNTH_DEFAULTS.n_cases})")
    p.add_argument("--layout", choices=("ball", "shells", "blobs"),
                   help=f"label layout (default: {SYNTH_DEFAULTS.layout})")
    p.add_argument("--n-shells", dest="n_shells", type=int, help=f"shells for layout=shells (default: {SYNTH_DEFAULTS.n_shells})")
    p.add_argument("--n-blobs", dest="n_blobs", type=int, help=f"labels for layout=blobs (default: {SYNTH_DEFAULTS.n_blobs})")
    p.add_argument("--dims", type=lambda t: tuple(int(v) for v in _csv_list(t)),
                   help=f"grid size nx,ny,nz (default: {_d(SYNTH_DEFAULTS.dims)})")
    p.add_argument("--a0", type=float, help=f"registration-error amplitude (default: {SYNTH_DEFAULTS.a0})")
    p.add_argument("--gamma", type=float, help=f"heterogeneity coupling (default: {SYNTH_DEFAULTS.gamma})")
    p.add_argument("--supersample", type=int, help=f"volume oracle factor K (default: {SYNTH_DEFAULTS.supersample})")
    p.add_argument("--seed", type=int, help=f"dataset seed (default: {SYNTH_DEFAULTS.seed})")
    p.add_argument("--jobs", type=int, default=1, help="worker processes (default: 1)")

    p = sub.add_parser("features", help="extract baseline volumes and feature vectors")
    p.add_argument("--dataset", required=True, help="synthetic dataset directory")
    p.add_argument("--out", required=True, help="output feature CSV")
    p.add_argument("--config", help="experiment config JSON supplying region settings")
    _add_region_flags(p)
    p.add_argument("--jobs", type=int, default=1, help="worker processes (default: 1)")

    p = sub.add_parser("calibrate", help="fit on a training CSV and calibrate on a calibration CSV")
    p.add_argument("--features", required=True, help="calibration feature CSV (targets required)")
    p.add_argument("--train", help="training feature CSV (required by learned methods)")
    p.add_argument("--out", required=True, help="output predictor JSON")
    p.add_argument("--method", default="convolt", choices=ALL_METHODS, help="method (default: convolt)")
    p.add_argument("--alpha", type=float, default=EXP_DEFAULTS.alpha, help=f"miscoverage (default: {EXP_DEFAULTS.alpha})")
    p.add_argument("--mode", default="per_label", choices=MODES, help="calibration mode (default: per_label)")
    p.add_argument("--aggregation", default="max", help="aggregator in aggregate mode (default: max)")
    p.add_argument("--ridge-lambda", dest="ridge_lambda", type=float, default=EXP_DEFAULTS.ridge_lambda,
                   help=f"ridge penalty (default: {EXP_DEFAULTS.ridge_lambda})")
    p.add_argument("--cqr-lambda", dest="cqr_lambda", type=float, default=EXP_DEFAULTS.cqr_lambda,
                   help=f"quantile-regression penalty (default: {EXP_DEFAULTS.cqr_lambda})")
    p.add_argument("--cqr-iters", dest="cqr_iters", type=int, default=EXP_DEFAULTS.cqr_iters,
                   help=f"quantile-regression iterations (default: {EXP_DEFAULTS.cqr_iters})")
    p.add_argument("--lcp-k", dest="lcp_k", type=int, default=EXP_DEFAULTS.lcp_k,
                   help=f"LCP neighbours (default: {EXP_DEFAULTS.lcp_k})")
    p.add_argument("--clamp", action="store_true", help="clamp lower endpoints at zero (default: False)")

    p = sub.add_parser("predict", help="emit intervals for a feature CSV")
    p.add_argument("--model", required=True, help="predictor JSON from 'convolt calibrate'")
    p.add_argument("--features", required=True, help="feature CSV")
    p.add_argument("--out", required=True, help="output intervals CSV")

    for name, text in (("evaluate", "repeated-split method comparison"), ("ablate", "ConVOLT ablations")):
        p = sub.add_parser(name, help=text)
        _add_input_flags(p)
        p.add_argument("--out-dir", dest="out_dir", required=True, help="directory for report.json and tables.csv")
        _add_experiment_flags(p)

    p = sub.add_parser("coefficients", help="ridge coefficient stability across resplits")
    _add_input_flags(p)
    p.add_argument("--out", required=True, help="output coefficients CSV")
    _add_experiment_flags(p)
    return parser


# --- helpers ------------------------------------------------------------------


def _read_features(path: str) -> list[FeatureRow]:
    if not Path(path).is_file():
        raise IOFailure(f"feature CSV not found: {path}")
    return read_feature_csv(path)


def _dataset_cases(path: str):
    if not Path(path).is_dir():
        raise IOFailure(f"dataset directory not found: {path}")
    return iter_dataset(path)


def _experiment_config(args) -> ExperimentConfig:
    return _merge(ExperimentConfig, _load_json(args.config), args, EXP_FLAGS)


def _records(args, cfg: ExperimentConfig, feature_modes=("local",)) -> dict[str, Records]:
    if args.dataset is not None:
        return build_records(_dataset_cases(args.dataset), cfg, feature_modes, args.jobs)
    out = {"local": records_from_feature_rows(_read_features(args.features))}
    if "global" in feature_modes:
        if args.global_features is None:
            raise ValueError("the global-features ablation needs --global-features with --features input")
        out["global"] = records_from_feature_rows(_read_features(args.global_features))
    return out


def _ensure_dir(path: str) -> Path:
    d = Path(path)
    try:
        d.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IOFailure(f"cannot create {path}: {exc.strerror}") from exc
    return d


# --- subcommands --------------------------------------------------------------


def cmd_synth(args) -> int:
    mapping = {k: k for k in ("n_cases", "layout", "n_shells", "n_blobs", "dims", "a0", "gamma",
                              "supersample", "seed")}
    cfg = _merge(SynthConfig, _load_json(args.config), args, mapping)
    root = write_dataset(generate_cases(cfg, args.jobs), args.out, cfg)
    print(f"wrote {cfg.n_cases} cases to {root}")
    return 0


def cmd_features(args) -> int:
    cfg = _merge(ExperimentConfig, _load_json(args.config), args,
                 {k: k for k in ("label_mode", "feature_mode", "band_radius", "band_side")})
    rows = feature_rows(_dataset_cases(args.dataset), cfg, args.jobs)
    write_feature_csv(args.out, rows)
    print(f"wrote {len(rows)} rows to {args.out}")
    return 0


def cmd_calibrate(args) -> int:
    cal = records_from_feature_rows(_read_features(args.features))
    if not cal.has_targets:
        raise ValueError("targets required for calibration")
    train = records_from_feature_rows(_read_features(args.train)) if args.train else None
    if train is not None and not train.has_targets:
        raise ValueError("targets required for training")
    agg = Aggregator.parse(args.aggregation) if args.mode == "aggregate" else None
    pred = calibrate(args.method, train, cal, args.alpha, mode=args.mode, aggregator=agg,
                     ridge_lambda=args.ridge_lambda, cqr_lambda=args.cqr_lambda, cqr_iters=args.cqr_iters,
                     lcp_k=args.lcp_k, clamp=args.clamp)
    save_predictor(args.out, pred)
    for label, q in sorted(pred.q_hat.items()):
        print(f"label {label}: q_hat = {q!r}")
    return 0


def cmd_predict(args) -> int:
    if not Path(args.model).is_file():
        raise IOFailure(f"model file not found: {args.model}")
    pred = load_predictor(args.model)
    recs = records_from_feature_rows(_read_features(args.features))
    lo, hi = pred.predict(recs)
    if pred.method == "lcp":
        q = np.full(len(recs), math.nan)
    else:
        q = pred.q_for(recs)
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(INTERVAL_HEADER)
        for i in range(len(recs)):
            y = recs.y_true[i]
            covered = "" if math.isnan(y) else int(lo[i] <= y <= hi[i])
            w.writerow([int(recs.case_id[i]), int(recs.label_id[i]), pred.method, repr(float(recs.y_hat0[i])),
                        repr(float(lo[i])), repr(float(hi[i])), repr(float(hi[i] - lo[i])), covered,
                        "" if math.isnan(q[i]) else repr(float(q[i]))])
    print(f"wrote {len(recs)} intervals to {args.out}")
    return 0


def cmd_evaluate(args) -> int:
    cfg = _experiment_config(args)
    records = _records(args, cfg)["local"]
    report = run_experiment(records, cfg)
    out = _ensure_dir(args.out_dir)
    write_report(out / "report.json", report)
    write_tables(out / "tables.csv", report)
    if "convolt" in report.convolt_models:
        write_coefficients(out / "coefficients.csv", export_coefficients(report.convolt_models["convolt"]))
    print(f"wrote report for {report.n_cases} cases to {out}")
    return 0


def cmd_ablate(args) -> int:
    cfg = _experiment_config(args)
    modes = ("local", "global") if cfg.label_mode == "shells" else ("local",)
    recs = _records(args, cfg, modes)
    report = run_ablations(recs["local"], cfg, recs.get("global"))
    out = _ensure_dir(args.out_dir)
    write_report(out / "report.json", report)
    write_tables(out / "tables.csv", report)
    print(f"wrote ablation report for {report.n_cases} cases to {out}")
    return 0


def cmd_coefficients(args) -> int:
    cfg = _experiment_config(args)
    records = _records(args, cfg)["local"]
    write_coefficients(args.out, export_coefficients(coefficient_models(records, cfg)))
    print(f"wrote coefficients to {args.out}")
    return 0


COMMANDS = {
    "synth": cmd_synth, "features": cmd_features, "calibrate": cmd_calibrate, "predict": cmd_predict,
    "evaluate": cmd_evaluate, "ablate": cmd_ablate, "coefficients": cmd_coefficients,
}


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (IOFailure, DatasetError, GridFormatError) as exc:
        print(f"convolt {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"convolt {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, KeyError, TypeError) as exc:
        print(f"convolt {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
