"""Closed-form ridge regression and pinball-loss quantile regression.

Both fits work on standardised features. Constant features are given a unit
scale and a weight pinned to zero so degenerate training sets stay finite.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np


@dataclass(frozen=True, eq=False)
class Standardizer:
    mean: np.ndarray
    std: np.ndarray
    active: np.ndarray  # False for constant features

    @classmethod
    def fit(cls, X: np.ndarray) -> "Standardizer":
        X = np.asarray(X, dtype=np.float64)
        mean = X.mean(axis=0)
        std = X.std(axis=0)
        active = std > 1e-12 * np.maximum(1.0, np.abs(mean))
        return cls(mean, np.where(active, std, 1.0), active)

    def transform(self, X: np.ndarray) -> np.ndarray:
        return (np.asarray(X, dtype=np.float64) - self.mean) / self.std

    def to_json(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist(), "active": self.active.tolist()}

    @classmethod
    def from_json(cls, d: dict) -> "Standardizer":
        return cls(np.array(d["mean"], float), np.array(d["std"], float), np.array(d["active"], bool))


def _check_xy(X, y) -> tuple[np.ndarray, np.ndarray]:
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    if X.ndim != 2 or y.ndim != 1 or X.shape[0] != y.shape[0]:
        raise ValueError(f"X must be (n, p) and y (n,), got {X.shape} and {y.shape}")
    if X.shape[0] < 2:
        raise ValueError("need at least 2 rows to fit")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
        raise ValueError("X and y must be finite")
    return X, y


@dataclass(frozen=True, eq=False)
class RidgeModel:
    standardizer: Standardizer
    weights: np.ndarray
    intercept: float
    lam: float
    feature_names: tuple[str, ...]

    def predict(self, X: np.ndarray) -> np.ndarray:
        Z = self.standardizer.transform(np.atleast_2d(X))
        return self.intercept + Z @ self.weights

    def to_json(self) -> dict:
        return {
            "kind": "ridge",
            "standardizer": self.standardizer.to_json(),
            "weights": self.weights.tolist(),
            "intercept": self.intercept,
            "lambda": self.lam,
            "feature_names": list(self.feature_names),
        }

    @classmethod
    def from_json(cls, d: dict, expected_names: Sequence[str] | None = None) -> "RidgeModel":
        _check_names(d, expected_names)
        return cls(Standardizer.from_json(d["standardizer"]), np.array(d["weights"], float),
                   float(d["intercept"]), float(d["lambda"]), tuple(d["feature_names"]))


def _check_names(d: dict, expected: Sequence[str] | None) -> None:
    if expected is not None and tuple(d["feature_names"]) != tuple(expected):
        raise ValueError(
            f"model feature names {d['feature_names']} do not match expected ordering {list(expected)}"
        )


def fit_ridge(X, y, lam: float = 1.0, feature_names: Sequence[str] | None = None) -> RidgeModel:
    """Ridge fit with an unpenalised intercept.

    Solves ``(Z'Z + lam I) w = Z'(y - ybar)`` on standardised features ``Z``.
    """
    X, y = _check_xy(X, y)
    if lam < 0 or not np.isfinite(lam):
        raise ValueError(f"ridge penalty must be finite and >= 0, got {lam}")
    p = X.shape[1]
    names = tuple(feature_names) if feature_names is not None else tuple(f"x{i}" for i in range(p))
    if len(names) != p:
        raise ValueError(f"{len(names)} feature names for {p} columns")
    st = Standardizer.fit(X)
    Z = st.transform(X)[:, st.active]
    ybar = float(y.mean())
    A = Z.T @ Z + lam * np.eye(Z.shape[1])
    b = Z.T @ (y - ybar)
    w = np.zeros(p)
    if Z.shape[1]:
        if lam == 0 and np.linalg.matrix_rank(A) < Z.shape[1]:
            raise ValueError("singular normal equations (collinear features); use a ridge penalty > 0")
        w[st.active] = np.linalg.solve(A, b)
    return RidgeModel(st, w, ybar, float(lam), names)


def predict_ridge(model: RidgeModel, x) -> float:
    return float(model.predict(np.asarray(x, dtype=np.float64)[None, :])[0])


def pinball_loss(residual: np.ndarray, tau: float) -> np.ndarray:
    return np.maximum(tau * residual, (tau - 1.0) * residual)


@dataclass(frozen=True, eq=False)
class QuantileFit:
    standardizer: Standardizer
    weights: np.ndarray
    intercept: float
    tau: float

    def predict(self, X: np.ndarray) -> np.ndarray:
        return self.intercept + self.standardizer.transform(np.atleast_2d(X)) @ self.weights


def fit_quantile(X, y, tau: float, lam: float = 0.01, n_iter: int = 5000) -> QuantileFit:
    """Linear tau-quantile regression by full-batch subgradient descent.

    Minimises ``sum(pinball_tau(y - Zw - b)) + lam * ||w||^2``. Steps are taken
    on the same objective divided by ``n`` (so ``eta0 / sqrt(t)`` with
    ``eta0 = 0.1 * std(y)`` does not grow with the sample size), and the
    average of the iterates over the final 20% of steps is returned.
    """
    X, y = _check_xy(X, y)
    if not 0.0 < tau < 1.0:
        raise ValueError(f"tau must lie in (0, 1), got {tau}")
    if n_iter < 1:
        raise ValueError("n_iter must be >= 1")
    st = Standardizer.fit(X)
    Z = st.transform(X)[:, st.active]
    n, p = Z.shape
    eta0 = 0.1 * float(y.std())
    if eta0 == 0.0:
        eta0 = 0.1 * max(1.0, abs(float(y.mean())))
    w = np.zeros(p)
    b = float(y.mean())
    start = n_iter - max(1, n_iter // 5)
    w_sum = np.zeros(p)
    b_sum = 0.0
    for t in range(1, n_iter + 1):
        r = y - (Z @ w + b)
        g = np.where(r > 0, -tau, np.where(r < 0, 1.0 - tau, 0.0))
        eta = eta0 / np.sqrt(t)
        w = w - eta * (Z.T @ g + 2.0 * lam * w) / n
        b = b - eta * float(g.mean())
        if t > start:
            w_sum += w
            b_sum += b
    k = n_iter - start
    full = np.zeros(X.shape[1])
    full[st.active] = w_sum / k
    return QuantileFit(st, full, b_sum / k, float(tau))


@dataclass(frozen=True, eq=False)
class QuantileModel:
    """A lower/upper quantile pair used by conformalised quantile regression."""

    standardizer: Standardizer
    weights: np.ndarray  # shape (2, p): rows for tau_lo, tau_hi
    intercepts: np.ndarray  # shape (2,)
    taus: tuple[float, float]
    lam: float
    feature_names: tuple[str, ...]

    def __post_init__(self):
        lo, hi = self.taus
        if not 0.0 < lo < hi < 1.0:
            raise ValueError(f"need 0 < tau_lo < tau_hi < 1, got {self.taus}")

    def predict(self, X: np.ndarray) -> tuple[np.ndarray, np.ndarray, int]:
        """Lower and upper predictions, swapped where they cross, and the crossing count."""
        Z = self.standardizer.transform(np.atleast_2d(X))
        lo = self.intercepts[0] + Z @ self.weights[0]
        hi = self.intercepts[1] + Z @ self.weights[1]
        crossed = lo > hi
        return np.where(crossed, hi, lo), np.where(crossed, lo, hi), int(crossed.sum())

    def to_json(self) -> dict:
        return {
            "kind": "quantile",
            "standardizer": self.standardizer.to_json(),
            "weights": self.weights.tolist(),
            "intercepts": self.intercepts.tolist(),
            "taus": list(self.taus),
            "lambda": self.lam,
            "feature_names": list(self.feature_names),
        }

    @classmethod
    def from_json(cls, d: dict, expected_names: Sequence[str] | None = None) -> "QuantileModel":
        _check_names(d, expected_names)
        return cls(Standardizer.from_json(d["standardizer"]), np.array(d["weights"], float),
                   np.array(d["intercepts"], float), tuple(d["taus"]), float(d["lambda"]),
                   tuple(d["feature_names"]))


def fit_quantile_pair(X, y, alpha: float, lam: float = 0.01, n_iter: int = 5000,
                      feature_names: Sequence[str] | None = None) -> QuantileModel:
    """Fit the alpha/2 and 1 - alpha/2 quantile lines."""
    X, y = _check_xy(X, y)
    lo = fit_quantile(X, y, alpha / 2.0, lam, n_iter)
    hi = fit_quantile(X, y, 1.0 - alpha / 2.0, lam, n_iter)
    names = tuple(feature_names) if feature_names is not None else tuple(f"x{i}" for i in range(X.shape[1]))
    return QuantileModel(lo.standardizer, np.stack([lo.weights, hi.weights]),
                         np.array([lo.intercept, hi.intercept]), (lo.tau, hi.tau), float(lam), names)


def save_model(path: str | Path, model: RidgeModel | QuantileModel) -> None:
    Path(path).write_text(json.dumps(model.to_json(), indent=1))


def load_model(path: str | Path, expected_names: Sequence[str] | None = None) -> RidgeModel | QuantileModel:
    d = json.loads(Path(path).read_text())
    if d.get("kind") == "ridge":
        return RidgeModel.from_json(d, expected_names)
    if d.get("kind") == "quantile":
        return QuantileModel.from_json(d, expected_names)
    raise ValueError(f"{path}: unknown model kind {d.get('kind')!r}")
