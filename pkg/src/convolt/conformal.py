"""Split-conformal calibration for volumetric targets.

Score functions, the conformal order-statistic quantile, interval
construction for the output-space baselines (SCP, CQR, LCP) and the
multiplicative ratio method, plus label-to-case score aggregation.

Calibration is always split: models are fitted on training records only and
the conformal quantile comes from a disjoint calibration set. Two
calibration modes exist and are never mixed:

* ``per_label`` -- an independent quantile for every label id;
* ``aggregate`` -- label scores of one case are collapsed with an
  :class:`Aggregator` and a single quantile is shared by all labels.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from convolt.features import FEATURE_NAMES
from convolt.regression import (
    QuantileModel,
    RidgeModel,
    fit_quantile_pair,
    fit_ridge,
)

BASELINE_METHODS = ("scp", "cqr", "lcp")
METHODS = ("scp", "cqr", "lcp", "convolt")
# ratio/offset variants used by the ablations; "oracle" reads beta from the records
VARIANTS = ("additive", "no_learning", "no_features", "oracle")
ALL_METHODS = METHODS + VARIANTS
MODES = ("per_label", "aggregate")

CQR_INPUT_NAMES = ("y_hat0_ml",)


@dataclass(frozen=True)
class CaseRecord:
    """One (case, label) observation."""

    case_id: int
    label_id: int
    features: tuple[float, ...]
    y_hat0: float
    y_true: float | None = None
    beta_oracle: float | None = None

    def __post_init__(self):
        if not (math.isfinite(self.y_hat0) and self.y_hat0 > 0):
            raise ValueError(
                f"case {self.case_id} label {self.label_id}: baseline volume must be > 0, got {self.y_hat0}"
            )

    @property
    def beta_star(self) -> float:
        if self.y_true is None:
            raise ValueError("oracle ratio needs a target volume")
        return self.y_true / self.y_hat0


@dataclass(frozen=True, eq=False)
class Records:
    """Column-oriented view of many :class:`CaseRecord` rows."""

    case_id: np.ndarray
    label_id: np.ndarray
    X: np.ndarray
    y_hat0: np.ndarray
    y_true: np.ndarray  # nan where unknown
    beta_oracle: np.ndarray  # nan where unknown

    def __post_init__(self):
        n = len(self.case_id)
        if not (len(self.label_id) == len(self.y_hat0) == len(self.y_true) == len(self.beta_oracle) == n
                and self.X.shape[0] == n):
            raise ValueError("record columns have inconsistent lengths")
        if n and not np.all(self.y_hat0 > 0):
            bad = int(np.argmin(self.y_hat0))
            raise ValueError(
                f"case {self.case_id[bad]} label {self.label_id[bad]}: baseline volume must be > 0"
            )

    @classmethod
    def from_records(cls, records: Iterable[CaseRecord]) -> "Records":
        rs = list(records)
        p = len(rs[0].features) if rs else len(FEATURE_NAMES)
        nan = float("nan")
        return cls(
            case_id=np.array([r.case_id for r in rs], dtype=np.int64),
            label_id=np.array([r.label_id for r in rs], dtype=np.int64),
            X=np.array([r.features for r in rs], dtype=np.float64).reshape(len(rs), p),
            y_hat0=np.array([r.y_hat0 for r in rs], dtype=np.float64),
            y_true=np.array([nan if r.y_true is None else r.y_true for r in rs], dtype=np.float64),
            beta_oracle=np.array([nan if r.beta_oracle is None else r.beta_oracle for r in rs],
                                 dtype=np.float64),
        )

    def to_records(self) -> list[CaseRecord]:
        def opt(v):
            return None if np.isnan(v) else float(v)

        return [
            CaseRecord(int(c), int(l), tuple(float(v) for v in x), float(y0), opt(y), opt(b))
            for c, l, x, y0, y, b in zip(self.case_id, self.label_id, self.X, self.y_hat0,
                                         self.y_true, self.beta_oracle)
        ]

    def __len__(self) -> int:
        return len(self.case_id)

    def take(self, idx) -> "Records":
        return Records(self.case_id[idx], self.label_id[idx], self.X[idx], self.y_hat0[idx],
                       self.y_true[idx], self.beta_oracle[idx])

    def for_cases(self, case_ids) -> "Records":
        return self.take(np.isin(self.case_id, np.asarray(case_ids)))

    def for_label(self, label: int) -> "Records":
        return self.take(self.label_id == label)

    def with_features(self, X: np.ndarray) -> "Records":
        return Records(self.case_id, self.label_id, np.asarray(X, float), self.y_hat0, self.y_true,
                       self.beta_oracle)

    def labels(self) -> list[int]:
        return [int(v) for v in np.unique(self.label_id)]

    def cases(self) -> np.ndarray:
        return np.unique(self.case_id)

    @property
    def has_targets(self) -> bool:
        return bool(len(self)) and not np.any(np.isnan(self.y_true))

    @property
    def beta_star(self) -> np.ndarray:
        return self.y_true / self.y_hat0


@dataclass(frozen=True)
class PredictionInterval:
    lo: float
    hi: float

    def __post_init__(self):
        if not self.lo <= self.hi:
            raise ValueError(f"interval lower end {self.lo} exceeds upper end {self.hi}")

    @property
    def width(self) -> float:
        return self.hi - self.lo

    @property
    def infinite(self) -> bool:
        return math.isinf(self.lo) or math.isinf(self.hi)

    def contains(self, y: float) -> bool:
        return self.lo <= y <= self.hi


@dataclass(frozen=True)
class Aggregator:
    kind: str = "max"
    level: float = 0.9

    def __post_init__(self):
        if self.kind not in ("max", "quantile"):
            raise ValueError(f"unknown aggregator kind {self.kind!r}")
        if self.kind == "quantile" and not 0.0 < self.level <= 1.0:
            raise ValueError(f"quantile level must lie in (0, 1], got {self.level}")

    @property
    def name(self) -> str:
        return "max" if self.kind == "max" else f"q{self.level:g}"

    @classmethod
    def parse(cls, text: str) -> "Aggregator":
        t = text.strip().lower()
        if t == "max":
            return cls("max")
        if t.startswith("q"):
            return cls("quantile", float(t[1:]))
        raise ValueError(f"cannot parse aggregator {text!r}; use 'max' or e.g. 'q0.9'")


# --- order statistics --------------------------------------------------------


def conformal_rank(n: int, alpha: float) -> int:
    """k = ceil((1 - alpha)(n + 1)); the slack absorbs binary rounding of alpha."""
    return math.ceil((1.0 - alpha) * (n + 1) - 1e-9)


def conformal_quantile(scores, alpha: float) -> float:
    """The ceil((1-alpha)(n+1))-th smallest score, or +inf when that rank exceeds n."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    if s.size == 0:
        raise ValueError("cannot calibrate on an empty score list")
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    if not np.all(np.isfinite(s)):
        raise ValueError("scores must be finite")
    k = conformal_rank(s.size, alpha)
    if k > s.size:
        return math.inf
    return float(np.partition(s, k - 1)[k - 1])


def aggregate_scores(label_scores, agg: Aggregator) -> float:
    s = np.asarray(label_scores, dtype=np.float64).ravel()
    if s.size == 0:
        raise ValueError("no label scores to aggregate")
    if agg.kind == "max":
        return float(s.max())
    k = max(1, math.ceil(agg.level * s.size - 1e-9))
    return float(np.sort(s)[k - 1])


def case_scores(case_id: np.ndarray, scores: np.ndarray, agg: Aggregator) -> tuple[np.ndarray, np.ndarray]:
    """Aggregate per-label scores into one score per case, ordered by case id."""
    ids = np.unique(case_id)
    return ids, np.array([aggregate_scores(scores[case_id == c], agg) for c in ids])


# --- per-method scores and intervals -----------------------------------------


def score_scp(y, y_hat0):
    return np.abs(np.asarray(y) - np.asarray(y_hat0))


def interval_scp(y_hat0: float, q_hat: float) -> PredictionInterval:
    return PredictionInterval(y_hat0 - q_hat, y_hat0 + q_hat)


def score_convolt(y, y_hat0, beta_hat):
    """|y / y_hat0 - beta_hat|, the ratio-space residual."""
    y_hat0 = np.asarray(y_hat0, dtype=np.float64)
    if np.any(y_hat0 <= 0):
        raise ValueError("ratio scores need a positive baseline volume")
    return np.abs(np.asarray(y) / y_hat0 - np.asarray(beta_hat))


def interval_convolt(x, y_hat0: float, ridge: RidgeModel, q_hat: float, clamp: bool = False) -> PredictionInterval:
    if y_hat0 <= 0:
        raise ValueError("ratio intervals need a positive baseline volume")
    beta = float(ridge.predict(np.asarray(x, dtype=np.float64)[None, :])[0])
    lo, hi = _ratio_interval(np.array([y_hat0]), np.array([beta]), q_hat, clamp)
    return PredictionInterval(float(lo[0]), float(hi[0]))


def _ratio_interval(y_hat0, beta, q_hat, clamp):
    if math.isinf(q_hat):
        lo, hi = np.full_like(y_hat0, -math.inf), np.full_like(y_hat0, math.inf)
    else:
        lo, hi = (beta - q_hat) * y_hat0, (beta + q_hat) * y_hat0
    return (np.maximum(lo, 0.0) if clamp else lo), hi


def score_cqr(y, q_lo, q_hi):
    y = np.asarray(y)
    return np.maximum(np.asarray(q_lo) - y, y - np.asarray(q_hi))


def interval_cqr(q_lo: float, q_hi: float, q_hat: float) -> PredictionInterval:
    return PredictionInterval(q_lo - q_hat, q_hi + q_hat)


def lcp_neighbors(y_hat0: float, cal: Records, k: int) -> np.ndarray:
    """Indices of the k calibration records nearest in |y_hat0|.

    Ties are broken by case id, then label id, both ascending.
    """
    if k > len(cal):
        raise ValueError(f"calibration set has {len(cal)} records, fewer than k={k}; lower k")
    d = np.abs(np.abs(cal.y_hat0) - abs(y_hat0))
    order = np.lexsort((cal.label_id, cal.case_id, d))
    return order[:k]


def interval_lcp(test: CaseRecord, calibration: Records, k: int = 50, alpha: float = 0.1) -> PredictionInterval:
    """Locally calibrated residual interval from the k nearest calibration records."""
    nb = calibration.take(lcp_neighbors(test.y_hat0, calibration, k))
    q = conformal_quantile(score_scp(nb.y_true, nb.y_hat0), alpha)
    return interval_scp(test.y_hat0, q)


# --- calibrated predictors ---------------------------------------------------


def fit_models(method: str, train: Records, *, alpha: float = 0.1, ridge_lambda: float = 1.0,
               cqr_lambda: float = 0.01, cqr_iters: int = 5000) -> dict[int, object]:
    """Per-label models fitted on the training split only."""
    if method not in ALL_METHODS:
        raise ValueError(f"unknown method {method!r}; expected one of {ALL_METHODS}")
    if method in ("scp", "lcp", "oracle"):
        return {}
    if not train.has_targets:
        raise ValueError("targets required for training")
    names = FEATURE_NAMES if train.X.shape[1] == len(FEATURE_NAMES) else None
    models: dict[int, object] = {}
    for label in train.labels():
        tr = train.for_label(label)
        if method == "convolt":
            models[label] = fit_ridge(tr.X, tr.beta_star, ridge_lambda, names)
        elif method == "additive":
            models[label] = fit_ridge(tr.X, tr.y_true - tr.y_hat0, ridge_lambda, names)
        elif method == "no_features":
            models[label] = float(np.mean(tr.beta_star))
        elif method == "no_learning":
            models[label] = 1.0
        elif method == "cqr":
            models[label] = fit_quantile_pair(tr.y_hat0[:, None], tr.y_true, alpha, cqr_lambda,
                                              cqr_iters, CQR_INPUT_NAMES)
    return models


@dataclass(frozen=True, eq=False)
class CalibratedPredictor:
    method: str
    alpha: float
    mode: str
    q_hat: dict[int, float]
    models: dict[int, object] = field(default_factory=dict)
    aggregator: Aggregator | None = None
    clamp: bool = False
    lcp_k: int = 50
    calibration: Records | None = None

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ValueError(f"alpha must lie in (0, 1), got {self.alpha}")
        # CQR scores go negative when the quantile band is too wide
        if self.method != "cqr" and any(q < 0 for q in self.q_hat.values()):
            raise ValueError("conformal quantiles must be >= 0")

    # point predictions -------------------------------------------------------

    def _model(self, label: int):
        try:
            return self.models[label]
        except KeyError:
            raise ValueError(f"no {self.method} model for label {label}; trained labels: "
                             f"{sorted(self.models)}") from None

    def beta_hat(self, records: Records) -> np.ndarray:
        """Predicted ratio for ratio-space methods."""
        if self.method == "oracle":
            if np.any(np.isnan(records.beta_oracle)):
                raise ValueError("oracle ratios missing from records")
            return records.beta_oracle.copy()
        out = np.empty(len(records))
        for label in np.unique(records.label_id):
            sel = records.label_id == label
            m = self._model(int(label))
            out[sel] = m.predict(records.X[sel]) if isinstance(m, RidgeModel) else m
        return out

    def offset_hat(self, records: Records) -> np.ndarray:
        out = np.empty(len(records))
        for label in np.unique(records.label_id):
            sel = records.label_id == label
            out[sel] = self._model(int(label)).predict(records.X[sel])
        return out

    def quantile_bounds(self, records: Records) -> tuple[np.ndarray, np.ndarray, int]:
        lo, hi, crossed = np.empty(len(records)), np.empty(len(records)), 0
        for label in np.unique(records.label_id):
            sel = records.label_id == label
            a, b, c = self._model(int(label)).predict(records.y_hat0[sel][:, None])
            lo[sel], hi[sel] = a, b
            crossed += c
        return lo, hi, crossed

    # scores and intervals ----------------------------------------------------

    def scores(self, records: Records) -> np.ndarray:
        if not records.has_targets:
            raise ValueError("targets required for scoring")
        return compute_scores(self, records)

    def q_for(self, records: Records) -> np.ndarray:
        missing = set(records.labels()) - set(self.q_hat)
        if missing:
            raise ValueError(f"no calibrated quantile for labels {sorted(missing)}; "
                             f"calibrated labels: {sorted(self.q_hat)}")
        return np.array([self.q_hat[int(l)] for l in records.label_id], dtype=np.float64)

    def predict(self, records: Records) -> tuple[np.ndarray, np.ndarray]:
        """Interval endpoints (lo, hi) per record, in mL."""
        m = self.method
        if m == "lcp":
            lo, hi = self._predict_lcp(records)
        else:
            q = self.q_for(records)
            inf = np.isinf(q)
            qf = np.where(inf, 0.0, q)
            if m == "scp":
                lo, hi = records.y_hat0 - qf, records.y_hat0 + qf
            elif m == "cqr":
                a, b, _ = self.quantile_bounds(records)
                lo, hi = a - qf, b + qf
            elif m == "additive":
                c = records.y_hat0 + self.offset_hat(records)
                lo, hi = c - qf, c + qf
            else:
                beta = self.beta_hat(records)
                lo, hi = (beta - qf) * records.y_hat0, (beta + qf) * records.y_hat0
            lo = np.where(inf, -math.inf, lo)
            hi = np.where(inf, math.inf, hi)
        if self.clamp:
            lo = np.maximum(lo, 0.0)
        return lo, hi

    def _predict_lcp(self, records: Records):
        cal = self.calibration
        lo, hi = np.empty(len(records)), np.empty(len(records))
        for label in np.unique(records.label_id):
            sel = np.flatnonzero(records.label_id == label)
            c = cal.for_label(int(label))
            lq = local_quantiles(records.y_hat0[sel], c, self.lcp_k, self.alpha)
            lo[sel] = np.where(np.isinf(lq), -math.inf, records.y_hat0[sel] - lq)
            hi[sel] = records.y_hat0[sel] + lq
        return lo, hi

    def intervals(self, records: Records) -> list[PredictionInterval]:
        lo, hi = self.predict(records)
        return [PredictionInterval(float(a), float(b)) for a, b in zip(lo, hi)]

    # serialisation -----------------------------------------------------------

    def to_json(self) -> dict:
        def enc_model(m):
            if isinstance(m, (RidgeModel, QuantileModel)):
                return m.to_json()
            return {"kind": "constant", "beta": m}

        d = {
            "format": "convolt.predictor/1",
            "method": self.method,
            "alpha": self.alpha,
            "mode": self.mode,
            "aggregator": None if self.aggregator is None else self.aggregator.name,
            "clamp": self.clamp,
            "q_hat": {str(k): _enc_float(v) for k, v in sorted(self.q_hat.items())},
            "models": {str(k): enc_model(v) for k, v in sorted(self.models.items())},
        }
        if self.method == "lcp":
            c = self.calibration
            d["lcp_k"] = self.lcp_k
            d["calibration"] = {
                "case_id": c.case_id.tolist(), "label_id": c.label_id.tolist(),
                "y_hat0": c.y_hat0.tolist(), "y_true": c.y_true.tolist(),
            }
        return d

    @classmethod
    def from_json(cls, d: dict) -> "CalibratedPredictor":
        if d.get("format") != "convolt.predictor/1":
            raise ValueError(f"unsupported predictor format {d.get('format')!r}")
        method = d["method"]
        models: dict[int, object] = {}
        for k, m in d["models"].items():
            kind = m.get("kind")
            if kind == "ridge":
                models[int(k)] = RidgeModel.from_json(m, FEATURE_NAMES)
            elif kind == "quantile":
                models[int(k)] = QuantileModel.from_json(m, CQR_INPUT_NAMES)
            elif kind == "constant":
                models[int(k)] = float(m["beta"])
            else:
                raise ValueError(f"unknown model kind {kind!r}")
        cal = None
        if method == "lcp":
            c = d["calibration"]
            n = len(c["case_id"])
            cal = Records(np.array(c["case_id"], np.int64), np.array(c["label_id"], np.int64),
                          np.zeros((n, 0)), np.array(c["y_hat0"], float), np.array(c["y_true"], float),
                          np.full(n, np.nan))
        agg = d.get("aggregator")
        return cls(method=method, alpha=float(d["alpha"]), mode=d["mode"],
                   q_hat={int(k): _dec_float(v) for k, v in d["q_hat"].items()}, models=models,
                   aggregator=None if agg is None else Aggregator.parse(agg), clamp=bool(d["clamp"]),
                   lcp_k=int(d.get("lcp_k", 50)), calibration=cal)


def _enc_float(v: float):
    return "inf" if math.isinf(v) else v


def _dec_float(v) -> float:
    return math.inf if v == "inf" else float(v)


def local_quantiles(y_hat0: np.ndarray, cal: Records, k: int, alpha: float) -> np.ndarray:
    """LCP quantile for each query baseline, from its k nearest calibration records."""
    if k > len(cal):
        raise ValueError(f"calibration set has {len(cal)} records, fewer than k={k}; lower k")
    # pre-sort by the tie-break keys so a stable distance sort honours them
    base = np.lexsort((cal.label_id, cal.case_id))
    cy0 = np.abs(cal.y_hat0[base])
    res = score_scp(cal.y_true[base], cal.y_hat0[base])
    d = np.abs(cy0[None, :] - np.abs(np.asarray(y_hat0))[:, None])
    nb = np.argsort(d, axis=1, kind="stable")[:, :k]
    kk = conformal_rank(k, alpha)
    if kk > k:
        return np.full(len(y_hat0), math.inf)
    local = np.sort(res[nb], axis=1)
    return local[:, kk - 1]


def compute_scores(pred: CalibratedPredictor, records: Records) -> np.ndarray:
    m = pred.method
    if m in ("scp", "lcp"):
        return score_scp(records.y_true, records.y_hat0)
    if m == "cqr":
        lo, hi, _ = pred.quantile_bounds(records)
        return score_cqr(records.y_true, lo, hi)
    if m == "additive":
        return np.abs(records.y_true - records.y_hat0 - pred.offset_hat(records))
    return score_convolt(records.y_true, records.y_hat0, pred.beta_hat(records))


def calibrate(method: str, train: Records | None, cal: Records, alpha: float = 0.1, *,
              mode: str = "per_label", aggregator: Aggregator | None = None,
              models: dict[int, object] | None = None, ridge_lambda: float = 1.0,
              cqr_lambda: float = 0.01, cqr_iters: int = 5000, lcp_k: int = 50,
              clamp: bool = False) -> CalibratedPredictor:
    """Fit on ``train`` (unless ``models`` are supplied) and calibrate on ``cal``."""
    if method not in ALL_METHODS:
        raise ValueError(f"unknown method {method!r}; expected one of {ALL_METHODS}")
    if mode not in MODES:
        raise ValueError(f"unknown calibration mode {mode!r}; expected one of {MODES}")
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    if len(cal) == 0:
        raise ValueError("empty calibration set")
    if not cal.has_targets:
        raise ValueError("targets required for calibration")
    if train is not None:
        overlap = np.intersect1d(train.case_id, cal.case_id)
        if overlap.size:
            raise ValueError(f"case ids appear in both training and calibration sets: {overlap[:10].tolist()}")
    if mode == "aggregate":
        if method == "lcp":
            raise ValueError("LCP is locally calibrated per record and has no case-aggregated mode")
        if aggregator is None:
            raise ValueError("aggregate mode needs an aggregator")
    if models is None:
        if train is None and method not in ("scp", "lcp", "oracle"):
            raise ValueError(f"{method} needs a training set or pre-fitted models")
        models = fit_models(method, train, alpha=alpha, ridge_lambda=ridge_lambda,
                            cqr_lambda=cqr_lambda, cqr_iters=cqr_iters) if train is not None else {}

    pred = CalibratedPredictor(method, alpha, mode, {}, models, aggregator, clamp, lcp_k,
                               cal if method == "lcp" else None)
    if method == "lcp":
        for label in cal.labels():
            n = int(np.sum(cal.label_id == label))
            if n < lcp_k:
                raise ValueError(f"label {label}: {n} calibration records, fewer than k={lcp_k}; lower k")
        return pred
    scores = compute_scores(pred, cal)
    if mode == "per_label":
        q = {label: conformal_quantile(scores[cal.label_id == label], alpha) for label in cal.labels()}
    else:
        _, s = case_scores(cal.case_id, scores, aggregator)
        shared = conformal_quantile(s, alpha)
        q = {label: shared for label in cal.labels()}
    return CalibratedPredictor(method, alpha, mode, q, models, aggregator, clamp, lcp_k, None)


def save_predictor(path: str | Path, pred: CalibratedPredictor) -> None:
    Path(path).write_text(json.dumps(pred.to_json(), indent=1))


def load_predictor(path: str | Path) -> CalibratedPredictor:
    return CalibratedPredictor.from_json(json.loads(Path(path).read_text()))


def coverage_flags(pred: CalibratedPredictor, records: Records) -> np.ndarray:
    lo, hi = pred.predict(records)
    return (records.y_true >= lo) & (records.y_true <= hi)
