"""Comparison baselines: Traditional SOFA, Bedside SOFA and aggregate-feature logistic regression."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .container import read_container, write_container
from .eval import HourlyPredictions, aggregate_feature_matrix
from .numerics import AdamState, adam_step, sigmoid
from .sofa import BedsideTable, sofa_totals

LOGREG_VERSION = 1


def traditional_sofa_predictions(cohort) -> HourlyPredictions:
    """Raw hourly SOFA totals used directly as the ranking statistic."""
    return HourlyPredictions(
        [s.encounter_id for s in cohort],
        [sofa_totals(s).astype(float) for s in cohort],
        [s.label for s in cohort],
    )


def bedside_sofa_predictions(cohort, table: BedsideTable, totals=None) -> HourlyPredictions:
    if totals is None:
        totals = [sofa_totals(s) for s in cohort]
    return HourlyPredictions(
        [s.encounter_id for s in cohort],
        [table.probability(t) for t in totals],
        [s.label for s in cohort],
    )


@dataclass
class LogisticRegression:
    weights: np.ndarray
    bias: float
    mean: np.ndarray
    std: np.ndarray

    def predict(self, features) -> np.ndarray:
        z = ((np.asarray(features) - self.mean) / self.std) @ self.weights + self.bias
        return sigmoid(z)

    def predict_hourly(self, series) -> np.ndarray:
        return self.predict(aggregate_feature_matrix(series.grid))

    def save(self, path) -> None:
        write_container(
            path, "logreg", LOGREG_VERSION, {"bias": self.bias},
            {"weights": self.weights, "mean": self.mean, "std": self.std},
        )

    @classmethod
    def load(cls, path) -> "LogisticRegression":
        _, meta, a = read_container(path, kind="logreg", max_version=LOGREG_VERSION)
        return cls(a["weights"], float(meta["bias"]), a["mean"], a["std"])


def fit_logistic_regression(X, y, epochs: int = 300, lr: float = 0.05, l2: float = 1e-4) -> LogisticRegression:
    """Full-batch Adam on mean sigmoid cross-entropy over standardized features."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    mean = X.mean(axis=0)
    std = X.std(axis=0)
    std = np.where(std > 1e-12, std, 1.0)
    Z = (X - mean) / std
    params = {"w": np.zeros(X.shape[1]), "b": np.zeros(1)}
    state = AdamState(lr=lr, l2=0.0)
    n = len(y)
    for _ in range(epochs):
        p = sigmoid(Z @ params["w"] + params["b"][0])
        err = (p - y) / n
        grads = {"w": Z.T @ err + l2 * params["w"], "b": np.array([err.sum()])}
        params, state = adam_step(params, grads, state)
    return LogisticRegression(params["w"], float(params["b"][0]), mean, std)


def train_logistic_baseline(cohort, **kw) -> LogisticRegression:
    """Fit on whole-stay aggregates (features at each encounter's final hour)."""
    X = np.array([aggregate_feature_matrix(s.grid)[-1] for s in cohort])
    y = np.array([s.label for s in cohort])
    return fit_logistic_regression(X, y, **kw)


def logistic_predictions(model: LogisticRegression, cohort) -> HourlyPredictions:
    return HourlyPredictions(
        [s.encounter_id for s in cohort],
        [model.predict_hourly(s) for s in cohort],
        [s.label for s in cohort],
    )
