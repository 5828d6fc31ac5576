"""Repeated-split experiment harness: coverage, interval size, ablations.

The training split is drawn once per dataset; calibration and test cases are
redrawn from the remaining pool on every repeat. Splits are by case id, so
all labels of a case land in the same split.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field, fields, replace
from functools import partial
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from convolt._parallel import ordered_map
from convolt.conformal import (
    ALL_METHODS,
    Aggregator,
    CalibratedPredictor,
    Records,
    calibrate,
    case_scores,
    fit_models,
)
from convolt.features import FEATURE_NAMES, FeatureRow, RegionSpec, deformation_maps, summarize
from convolt.grid import DEFAULT_LOG_FLOOR, jacobian_determinant, warp_image
from convolt.regression import RidgeModel
from convolt.synth import SynthCase
from convolt.volumetry import baseline_volume

LABEL_MODES = ("global", "shells", "per_label")
FEATURE_MODES = ("local", "global")
ABLATIONS = ("additive", "no_learning", "no_features", "global_features")


@dataclass(frozen=True)
class ExperimentConfig:
    alpha: float = 0.1
    repeats: int = 100
    fractions: tuple[float, float, float] = (0.4, 0.4, 0.2)
    methods: tuple[str, ...] = ("scp", "cqr", "lcp", "convolt")
    aggregations: tuple[str, ...] = ("max", "q0.9")
    label_mode: str = "global"
    feature_mode: str = "local"
    seed: int = 0
    ridge_lambda: float = 1.0
    cqr_lambda: float = 0.01
    cqr_iters: int = 5000
    lcp_k: int = 50
    clamp: bool = False
    retrain: bool = False
    band_radius: int = 2
    band_side: str = "both"
    log_floor: float = DEFAULT_LOG_FLOOR

    def __post_init__(self):
        object.__setattr__(self, "fractions", tuple(float(f) for f in self.fractions))
        object.__setattr__(self, "methods", tuple(self.methods))
        object.__setattr__(self, "aggregations", tuple(self.aggregations))
        if not 0.0 < self.alpha < 1.0:
            raise ValueError(f"alpha must lie in (0, 1), got {self.alpha}")
        if self.repeats < 1:
            raise ValueError("repeats must be >= 1")
        if len(self.fractions) != 3 or min(self.fractions) <= 0 or sum(self.fractions) > 1 + 1e-9:
            raise ValueError(f"split fractions must be 3 positive numbers summing to <= 1, got {self.fractions}")
        if self.label_mode not in LABEL_MODES:
            raise ValueError(f"unknown label mode {self.label_mode!r}; expected one of {LABEL_MODES}")
        if self.feature_mode not in FEATURE_MODES:
            raise ValueError(f"unknown feature mode {self.feature_mode!r}; expected one of {FEATURE_MODES}")
        for m in self.methods:
            if m not in ALL_METHODS + ("global_features",):
                raise ValueError(f"unknown method {m!r}")
        for a in self.aggregations:
            Aggregator.parse(a)

    def to_json(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_json(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown experiment config keys: {sorted(unknown)}")
        return cls(**d)

    @property
    def calibration_mode(self) -> str:
        return "aggregate" if self.label_mode == "shells" else "per_label"

    def region_for(self, label: int, feature_mode: str | None = None) -> RegionSpec:
        mode = feature_mode or self.feature_mode
        if mode == "global":
            return RegionSpec("global", label)
        if self.label_mode == "per_label":
            return RegionSpec("band", label, self.band_radius, self.band_side)
        return RegionSpec("region", label)


# --- records from cases -------------------------------------------------------


def case_feature_rows(case: SynthCase, config: ExperimentConfig, feature_mode: str | None = None) -> list[FeatureRow]:
    """Baseline volume, target and feature vector for every label of a case."""
    J = jacobian_determinant(case.u_est)
    warped = warp_image(case.moving, case.u_est)
    maps = deformation_maps(case.u_est, J, case.fixed, warped, config.log_floor)
    rows = []
    for label in case.labels.label_ids():
        region = config.region_for(label, feature_mode).resolve(case.labels)
        rows.append(FeatureRow(case.case_id, label, baseline_volume(J, case.labels, label),
                               case.volumes.get(label), tuple(summarize(maps, region).tolist())))
    return rows


def case_records(case: SynthCase, config: ExperimentConfig, feature_modes: Sequence[str] = ("local",)):
    """Rows per requested feature mode, plus the oracle ratio per label."""
    J = jacobian_determinant(case.u_est)
    warped = warp_image(case.moving, case.u_est)
    maps = deformation_maps(case.u_est, J, case.fixed, warped, config.log_floor)
    out = {m: [] for m in feature_modes}
    for label in case.labels.label_ids():
        y0 = baseline_volume(J, case.labels, label)
        for m in feature_modes:
            region = config.region_for(label, m).resolve(case.labels)
            out[m].append((case.case_id, label, y0, case.volumes[label], case.beta_oracle.get(label, math.nan),
                           summarize(maps, region)))
    return out


def _stack(rows) -> Records:
    return Records(
        case_id=np.array([r[0] for r in rows], dtype=np.int64),
        label_id=np.array([r[1] for r in rows], dtype=np.int64),
        X=np.array([r[5] for r in rows], dtype=np.float64).reshape(len(rows), len(FEATURE_NAMES)),
        y_hat0=np.array([r[2] for r in rows], dtype=np.float64),
        y_true=np.array([r[3] for r in rows], dtype=np.float64),
        beta_oracle=np.array([r[4] for r in rows], dtype=np.float64),
    )


def build_records(cases: Iterable[SynthCase], config: ExperimentConfig,
                  feature_modes: Sequence[str] = ("local",), jobs: int = 1) -> dict[str, Records]:
    """Records for each feature mode; cases are streamed, ``jobs`` caps worker processes."""
    acc = {m: [] for m in feature_modes}
    work = partial(case_records, config=config, feature_modes=tuple(feature_modes))
    for out in ordered_map(work, cases, jobs):
        for m, rows in out.items():
            acc[m].extend(rows)
    return {m: _stack(rows) for m, rows in acc.items()}


def feature_rows(cases: Iterable[SynthCase], config: ExperimentConfig, jobs: int = 1) -> list[FeatureRow]:
    """Feature rows for every case and label, in case order."""
    rows: list[FeatureRow] = []
    for out in ordered_map(partial(case_feature_rows, config=config), cases, jobs):
        rows.extend(out)
    return rows


def records_from_feature_rows(rows: Sequence[FeatureRow]) -> Records:
    return Records(
        case_id=np.array([r.case_id for r in rows], dtype=np.int64),
        label_id=np.array([r.label_id for r in rows], dtype=np.int64),
        X=np.array([r.features for r in rows], dtype=np.float64).reshape(len(rows), len(FEATURE_NAMES)),
        y_hat0=np.array([r.y_hat0_ml for r in rows], dtype=np.float64),
        y_true=np.array([math.nan if r.y_true_ml is None else r.y_true_ml for r in rows], dtype=np.float64),
        beta_oracle=np.full(len(rows), math.nan),
    )


# --- splitting ----------------------------------------------------------------


def split_sizes(n_cases: int, fractions: Sequence[float]) -> tuple[int, int, int]:
    n_tr, n_cal, n_te = (int(math.floor(f * n_cases + 1e-9)) for f in fractions)
    if min(n_tr, n_cal, n_te) < 1:
        raise ValueError(f"{n_cases} cases are too few for split fractions {tuple(fractions)}")
    return n_tr, n_cal, n_te


def _rng(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, *key]))


def draw_splits(case_ids: np.ndarray, config: ExperimentConfig) -> list[tuple[np.ndarray, np.ndarray, np.ndarray]]:
    """(train, cal, test) case ids per repeat."""
    ids = np.sort(np.asarray(case_ids))
    n_tr, n_cal, n_te = split_sizes(len(ids), config.fractions)
    train = np.sort(_rng(config.seed, 0).permutation(ids)[:n_tr])
    out = []
    for r in range(config.repeats):
        rng = _rng(config.seed, 1, r)
        if config.retrain:
            train = np.sort(rng.permutation(ids)[:n_tr])
        pool = np.setdiff1d(ids, train)
        p = rng.permutation(pool)
        out.append((train, np.sort(p[:n_cal]), np.sort(p[n_cal:n_cal + n_te])))
    return out


# --- report -------------------------------------------------------------------


@dataclass(eq=False)
class Report:
    config: dict
    n_cases: int
    split_sizes: tuple[int, int, int]
    summary: list[dict]
    per_label: list[dict]
    repeats: list[dict]
    skipped: list[str] = field(default_factory=list)
    convolt_models: dict[str, list[dict[int, RidgeModel]]] = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "config": self.config,
            "n_cases": self.n_cases,
            "split_sizes": {"train": self.split_sizes[0], "cal": self.split_sizes[1], "test": self.split_sizes[2]},
            "summary": self.summary,
            "per_label": self.per_label,
            "repeats": self.repeats,
            "skipped": self.skipped,
        }

    def dumps(self) -> str:
        return json.dumps(_jsonable(self.to_json()), indent=1, sort_keys=True)

    def find(self, method: str, aggregation: str | None = None) -> dict:
        for row in self.summary:
            if row["method"] == method and (aggregation is None or row["aggregation"] == aggregation):
                return row
        raise KeyError((method, aggregation))

    def raw(self, method: str, key: str, aggregation: str | None = None) -> np.ndarray:
        return np.array([r[key] for r in self.repeats
                         if r["method"] == method and (aggregation is None or r["aggregation"] == aggregation)],
                        dtype=np.float64)


def _jsonable(x):
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, (np.floating, float)):
        v = float(x)
        if math.isnan(v):
            return None
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return v
    if isinstance(x, np.integer):
        return int(x)
    return x


def _mean_std(v: np.ndarray) -> tuple[float, float]:
    v = np.asarray(v, dtype=np.float64)
    if np.any(np.isinf(v)):
        return math.inf, math.nan
    return float(v.mean()), float(v.std())


def _q_summary(qs: np.ndarray) -> dict:
    finite = qs[np.isfinite(qs)]
    return {
        "n_infinite": int(np.sum(~np.isfinite(qs))),
        "min": float(finite.min()) if finite.size else math.inf,
        "median": float(np.median(finite)) if finite.size else math.inf,
        "max": float(finite.max()) if finite.size else math.inf,
    }


def _evaluate(pred: CalibratedPredictor, test: Records, agg: Aggregator | None):
    lo, hi = pred.predict(test)
    covered = (test.y_true >= lo) & (test.y_true <= hi)
    width = hi - lo
    if agg is not None:
        _, s = case_scores(test.case_id, pred.scores(test), agg)
        q = next(iter(pred.q_hat.values()))
        coverage = float(np.mean(s <= q))
    else:
        coverage = float(covered.mean())
    return lo, hi, covered, width, coverage


def _run(records: dict[str, Records], methods: Sequence[str], config: ExperimentConfig) -> Report:
    """Core loop. ``records`` maps a method name to the records it uses ("*" is the default)."""
    base = records["*"]
    case_ids = base.cases()
    splits = draw_splits(case_ids, config)
    sizes = split_sizes(len(case_ids), config.fractions)
    mode = config.calibration_mode
    aggs: list[Aggregator | None] = [Aggregator.parse(a) for a in config.aggregations] if mode == "aggregate" else [None]
    skipped = []
    run_methods = []
    for m in methods:
        if m == "lcp" and mode == "aggregate":
            skipped.append("lcp: no case-aggregated calibration")
        else:
            run_methods.append(m)

    def fit_for(m, train_ids):
        recs = records.get(m, base)
        real = "convolt" if m == "global_features" else m
        return fit_models(real, recs.for_cases(train_ids), alpha=config.alpha, ridge_lambda=config.ridge_lambda,
                          cqr_lambda=config.cqr_lambda, cqr_iters=config.cqr_iters)

    models = {} if config.retrain else {m: fit_for(m, splits[0][0]) for m in run_methods}
    repeat_rows, label_rows = [], []
    coef_models: dict[str, list] = {m: [] for m in run_methods if m in ("convolt", "global_features")}
    for r, (train_ids, cal_ids, test_ids) in enumerate(splits):
        rep_models = {m: fit_for(m, train_ids) for m in run_methods} if config.retrain else models
        for m in coef_models:
            coef_models[m].append(rep_models[m])
        for agg in aggs:
            widths = {}
            for m in run_methods:
                recs = records.get(m, base)
                real = "convolt" if m == "global_features" else m
                pred = calibrate(real, None, recs.for_cases(cal_ids), config.alpha, mode=mode, aggregator=agg,
                                 models=rep_models[m], lcp_k=config.lcp_k, clamp=config.clamp)
                test = recs.for_cases(test_ids)
                lo, hi, covered, width, coverage = _evaluate(pred, test, agg)
                crossed = pred.quantile_bounds(test)[2] if real == "cqr" else 0
                qs = np.array(list(pred.q_hat.values())) if pred.q_hat else np.array([])
                widths[m] = float(np.mean(width))
                repeat_rows.append({
                    "repeat": r, "method": m, "aggregation": None if agg is None else agg.name,
                    "coverage": coverage, "label_coverage": float(covered.mean()), "width": widths[m],
                    "q_hat": float(qs.max()) if qs.size else None,
                    "n_infinite": int(np.sum(np.isinf(width))), "crossed": int(crossed),
                })
                if config.label_mode == "per_label":
                    for label in test.labels():
                        sel = test.label_id == label
                        label_rows.append({
                            "repeat": r, "method": m, "label_id": label,
                            "coverage": float(covered[sel].mean()), "width": float(np.mean(width[sel])),
                            "q_hat": pred.q_hat.get(label),
                        })
            for row in repeat_rows[-len(run_methods):]:
                ref = widths.get("convolt")
                row["inflation"] = (row["width"] / ref - 1.0) * 100.0 if ref else None

    summary = []
    for agg in aggs:
        aname = None if agg is None else agg.name
        for m in run_methods:
            rows = [x for x in repeat_rows if x["method"] == m and x["aggregation"] == aname]
            cov = np.array([x["coverage"] for x in rows])
            wid = np.array([x["width"] for x in rows])
            infl = [x["inflation"] for x in rows]
            cm, cs = _mean_std(cov)
            wm, ws = _mean_std(wid)
            im, is_ = _mean_std(np.array(infl)) if all(i is not None for i in infl) else (None, None)
            summary.append({
                "method": m, "aggregation": aname, "label_mode": config.label_mode,
                "feature_mode": "global" if m == "global_features" else config.feature_mode,
                "coverage_mean": cm, "coverage_std": cs,
                "label_coverage_mean": float(np.mean([x["label_coverage"] for x in rows])),
                "width_mean": wm, "width_std": ws,
                "inflation_mean": im, "inflation_std": is_,
                "q_hat": _q_summary(np.array([x["q_hat"] for x in rows]))
                if rows[0]["q_hat"] is not None else None,
                "crossed_quantiles": int(sum(x["crossed"] for x in rows)),
                "n_infinite_intervals": int(sum(x["n_infinite"] for x in rows)),
            })
    per_label = []
    if label_rows:
        for m in run_methods:
            for label in sorted({x["label_id"] for x in label_rows}):
                rows = [x for x in label_rows if x["method"] == m and x["label_id"] == label]
                cm, cs = _mean_std(np.array([x["coverage"] for x in rows]))
                wm, ws = _mean_std(np.array([x["width"] for x in rows]))
                per_label.append({"method": m, "label_id": label, "coverage_mean": cm, "coverage_std": cs,
                                  "width_mean": wm, "width_std": ws})
    return Report(config.to_json(), len(case_ids), sizes, summary, per_label, repeat_rows, skipped, coef_models)


def run_experiment(records: Records, config: ExperimentConfig) -> Report:
    """Repeated cal/test resplits for every method in ``config.methods``."""
    if "global_features" in config.methods:
        raise ValueError("global_features is an ablation; use run_ablations")
    return _run({"*": records}, list(config.methods), config)


def run_ablations(records: Records, config: ExperimentConfig, global_records: Records | None = None,
                  variants: Sequence[str] | None = None) -> Report:
    """ConVOLT against its ablated variants on identical splits.

    ``global_features`` refits ConVOLT on whole-mask features and is only
    defined for shell runs, where local and global regions differ.
    """
    if variants is None:
        variants = ABLATIONS if config.label_mode == "shells" else ABLATIONS[:3]
    for v in variants:
        if v not in ABLATIONS:
            raise ValueError(f"unknown ablation {v!r}; expected one of {ABLATIONS}")
    recs = {"*": records}
    if "global_features" in variants:
        if config.label_mode != "shells":
            raise ValueError("the global-features ablation requires shells label mode")
        if global_records is None:
            raise ValueError("the global-features ablation needs records with global features")
        if not (np.array_equal(global_records.case_id, records.case_id)
                and np.array_equal(global_records.label_id, records.label_id)):
            raise ValueError("global-feature records do not line up with the local records")
        recs["global_features"] = global_records
    return _run(recs, ["convolt", *variants], config)


# --- coefficients ---------------------------------------------------------------


def coefficient_models(records: Records, config: ExperimentConfig) -> list[dict[int, RidgeModel]]:
    """ConVOLT ridge models refitted on the training split drawn for each repeat.

    With a fixed training split every repeat would share one model, so this
    always redraws the training cases.
    """
    cfg = replace(config, retrain=True)
    return [fit_models("convolt", records.for_cases(train), alpha=cfg.alpha, ridge_lambda=cfg.ridge_lambda)
            for train, _, _ in draw_splits(records.cases(), cfg)]


COEFFICIENT_HEADER = ("label_id", "rank", "feature", "abs_coef_mean", "abs_coef_std")


def export_coefficients(models_per_repeat: Sequence[dict[int, RidgeModel]]) -> list[dict]:
    """Mean and std of |standardised ridge weight| across repeats, per label.

    Rows are grouped by label and sorted by decreasing mean; ties keep the
    feature order.
    """
    if not models_per_repeat:
        raise ValueError("no fitted ConVOLT models to summarise")
    labels = sorted(models_per_repeat[0])
    rows = []
    for label in labels:
        W = np.abs(np.array([m[label].weights for m in models_per_repeat], dtype=np.float64))
        names = models_per_repeat[0][label].feature_names
        mean, std = W.mean(axis=0), W.std(axis=0)
        order = sorted(range(len(names)), key=lambda j: (-mean[j], j))
        for rank, j in enumerate(order, start=1):
            rows.append({"label_id": label, "rank": rank, "feature": names[j],
                         "abs_coef_mean": float(mean[j]), "abs_coef_std": float(std[j])})
    return rows


# --- writers --------------------------------------------------------------------

TABLE_HEADER = ("method", "aggregation", "label_mode", "feature_mode", "coverage_mean", "coverage_std",
                "width_mean", "width_std", "inflation_mean", "inflation_std", "crossed_quantiles",
                "n_infinite_intervals")


def _cell(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_report(path: str | Path, report: Report) -> None:
    Path(path).write_text(report.dumps() + "\n")


def write_tables(path: str | Path, report: Report) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TABLE_HEADER)
        for row in report.summary:
            w.writerow([_cell(row[k]) for k in TABLE_HEADER])


def write_coefficients(path: str | Path, rows: Sequence[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(COEFFICIENT_HEADER)
        for row in rows:
            w.writerow([_cell(row[k]) for k in COEFFICIENT_HEADER])
