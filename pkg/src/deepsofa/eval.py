"""Discrimination metrics and the hourly evaluation protocol.

Hourly curves follow two alignments: ``from_admission`` (hour h after ICU
admission; stays that ended earlier contribute their final prediction) and
``to_discharge`` (j hours before the end of the stay).
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

from .numerics import make_rng

ALIGNMENTS = ("from_admission", "to_discharge")


class EvalError(ValueError):
    pass


# ---------------------------------------------------------------- AUC


def auc_columns(scores, labels) -> np.ndarray:
    """Mann-Whitney AUC for each column of ``scores`` (n, m) with midrank ties."""
    S = np.asarray(scores, dtype=float)
    if S.ndim == 1:
        S = S[:, None]
    y = np.asarray(labels).astype(bool)
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise EvalError("undefined AUC: labels contain a single class")
    ranks = rankdata(S, axis=0, method="average")
    u = ranks[y].sum(axis=0) - n_pos * (n_pos + 1) / 2.0
    return u / (n_pos * n_neg)


def roc_auc(scores, labels) -> float:
    return float(auc_columns(np.asarray(scores, dtype=float)[:, None], labels)[0])


def pair_count_auc(scores, labels) -> float:
    """O(n^2) reference: (concordant + 0.5 * tied) / (P * N)."""
    s = np.asarray(scores, dtype=float)
    y = np.asarray(labels).astype(bool)
    pos, neg = s[y], s[~y]
    if len(pos) == 0 or len(neg) == 0:
        raise EvalError("undefined AUC: labels contain a single class")
    conc = 0
    ties = 0
    for p in pos:
        conc += int((p > neg).sum())
        ties += int((p == neg).sum())
    return (conc + 0.5 * ties) / (len(pos) * len(neg))


# ---------------------------------------------------------------- bootstrap


def bootstrap_indices(labels, iterations: int, seed: int, need_both=True) -> np.ndarray:
    """Resample row indices with replacement, ``(iterations, n)``.

    Iteration i draws from its own stream (seed, i); a draw holding a single
    class is replaced by a fresh draw from the same stream.
    """
    y = np.asarray(labels).astype(bool)
    n = len(y)
    out = np.empty((iterations, n), dtype=np.int64)
    for i in range(iterations):
        rng = make_rng(seed, i)
        for _ in range(10_000):
            idx = rng.integers(0, n, size=n)
            if not need_both or 0 < y[idx].sum() < n:
                break
        else:
            raise EvalError("could not draw a resample holding both classes")
        out[i] = idx
    return out


def percentile_ci(samples, level=0.95):
    samples = np.asarray(samples, dtype=float)
    tail = (1.0 - level) / 2.0 * 100.0
    lo, hi = np.percentile(samples, [tail, 100.0 - tail], axis=0)
    return lo, hi


def bootstrap_ci(scores, labels, iterations: int = 100, seed: int = 0, level=0.95, return_samples=False):
    """Percentile CI of the AUC over (score, label) pairs resampled jointly."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels)
    roc_auc(scores, labels)  # raises on single-class input
    idx = bootstrap_indices(labels, iterations, seed)
    samples = np.array([roc_auc(scores[i], labels[i]) for i in idx])
    lo, hi = percentile_ci(samples, level)
    if return_samples:
        return float(lo), float(hi), samples
    return float(lo), float(hi)


# ---------------------------------------------------------------- hourly protocol


@dataclass
class HourlyPredictions:
    encounter_ids: list[str]
    trajectories: list[np.ndarray]  # per-encounter probs (or scores) for hours 1..T
    labels: np.ndarray

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.trajectories) != len(self.labels) or len(self.encounter_ids) != len(self.labels):
            raise EvalError("trajectories, labels and ids differ in length")
        if len(self.labels) == 0:
            raise EvalError("no encounters")
        if not set(np.unique(self.labels)) <= {0, 1}:
            raise EvalError("labels must be binary")

    @property
    def lengths(self) -> np.ndarray:
        return np.array([len(t) for t in self.trajectories], dtype=np.int64)

    def score_matrix(self, alignment: str, horizon: int) -> np.ndarray:
        """(n, horizon) scores: column h-1 is hour h (or offset h-1 before discharge)."""
        if alignment not in ALIGNMENTS:
            raise EvalError(f"alignment must be one of {ALIGNMENTS}")
        out = np.empty((len(self.trajectories), horizon))
        steps = np.arange(horizon)
        for i, traj in enumerate(self.trajectories):
            T = len(traj)
            if alignment == "from_admission":
                hours = np.minimum(steps + 1, T)
            else:
                hours = np.maximum(1, T - steps)
            out[i] = np.asarray(traj, dtype=float)[hours - 1]
        return out

    def active_matrix(self, alignment: str, horizon: int) -> np.ndarray:
        """(n, horizon) true where the encounter is still in the ICU at that column."""
        T = self.lengths[:, None]
        steps = np.arange(horizon)[None, :]
        if alignment == "from_admission":
            return T >= steps + 1
        return T > steps


@dataclass
class AucPoint:
    hour: int
    auc: float
    ci_lo: float
    ci_hi: float
    n_active: int
    mortality_rate_active: float


def hourly_curve(
    preds: HourlyPredictions,
    alignment: str = "from_admission",
    horizon: int = 100,
    iterations: int = 100,
    seed: int = 0,
) -> list[AucPoint]:
    """AUC per hour with bootstrap CIs; every encounter contributes at every hour.

    The CI is widened to include the point estimate when the percentile
    interval misses it.
    """
    S = preds.score_matrix(alignment, horizon)
    y = preds.labels
    auc = auc_columns(S, y)
    idx = bootstrap_indices(y, iterations, seed)
    samples = np.array([auc_columns(S[i], y[i]) for i in idx])
    lo, hi = percentile_ci(samples)
    active = preds.active_matrix(alignment, horizon)
    n_active = active.sum(axis=0)
    deaths = (active & (y[:, None] == 1)).sum(axis=0)
    points = []
    for j in range(horizon):
        hour = j + 1 if alignment == "from_admission" else j
        rate = deaths[j] / n_active[j] if n_active[j] else float("nan")
        points.append(
            AucPoint(
                hour=hour,
                auc=float(auc[j]),
                ci_lo=float(min(lo[j], auc[j])),
                ci_hi=float(max(hi[j], auc[j])),
                n_active=int(n_active[j]),
                mortality_rate_active=float(rate),
            )
        )
    return points


def write_curve_csv(path, points: Sequence[AucPoint]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("hour", "auc", "ci_lo", "ci_hi", "n_active", "mortality_rate"))
        for p in points:
            w.writerow((p.hour, _fmt(p.auc), _fmt(p.ci_lo), _fmt(p.ci_hi), p.n_active, _fmt(p.mortality_rate_active)))


def _fmt(x: float) -> str:
    return "" if math.isnan(x) else f"{x:.6f}"


@dataclass
class StratifiedPoint:
    hour: int
    survivor_mean: float
    survivor_lo: float
    survivor_hi: float
    nonsurvivor_mean: float
    nonsurvivor_lo: float
    nonsurvivor_hi: float
    n_survivors: int
    n_nonsurvivors: int


def stratified_mean_prob(
    preds: HourlyPredictions,
    alignment: str = "from_admission",
    horizon: int = 100,
    iterations: int = 100,
    seed: int = 0,
) -> list[StratifiedPoint]:
    """Mean prediction per hour for survivors and non-survivors still in the ICU."""
    y = preds.labels
    if y.min() == y.max():
        raise EvalError("both outcome classes are required")
    S = preds.score_matrix(alignment, horizon)
    active = preds.active_matrix(alignment, horizon)
    idx = bootstrap_indices(y, iterations, seed)
    out = []
    stats = {}
    for cls in (0, 1):
        mask = active & (y[:, None] == cls)
        count = mask.sum(axis=0)
        mean = _masked_mean(S, mask)
        boot = np.array([_masked_mean(S[i], mask[i]) for i in idx])
        with warnings.catch_warnings():
            # hours with no encounter of this class stay NaN
            warnings.simplefilter("ignore", RuntimeWarning)
            lo, hi = np.nanpercentile(boot, [2.5, 97.5], axis=0)
        stats[cls] = (mean, lo, hi, count)
    for j in range(horizon):
        hour = j + 1 if alignment == "from_admission" else j
        s, ns = stats[0], stats[1]
        out.append(
            StratifiedPoint(
                hour,
                float(s[0][j]), float(s[1][j]), float(s[2][j]),
                float(ns[0][j]), float(ns[1][j]), float(ns[2][j]),
                int(s[3][j]), int(ns[3][j]),
            )
        )
    return out


def _masked_mean(S, mask):
    count = mask.sum(axis=0)
    total = np.where(mask, S, 0.0).sum(axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(count > 0, total / np.maximum(count, 1), np.nan)


def write_stratified_csv(path, points: Sequence[StratifiedPoint]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(
            ("hour", "survivor_mean", "survivor_lo", "survivor_hi",
             "nonsurvivor_mean", "nonsurvivor_lo", "nonsurvivor_hi", "n_survivors", "n_nonsurvivors")
        )
        for p in points:
            w.writerow(
                (p.hour, _fmt(p.survivor_mean), _fmt(p.survivor_lo), _fmt(p.survivor_hi),
                 _fmt(p.nonsurvivor_mean), _fmt(p.nonsurvivor_lo), _fmt(p.nonsurvivor_hi),
                 p.n_survivors, p.n_nonsurvivors)
            )


# ---------------------------------------------------------------- model comparison


@dataclass
class Comparison:
    hours: np.ndarray
    auc_a: np.ndarray
    auc_b: np.ndarray
    diff: np.ndarray
    p_value: np.ndarray
    boot_diff: np.ndarray  # (iterations, horizon)
    mean_auc_a: float
    mean_auc_b: float
    mean_diff: float
    mean_p_value: float
    boot_mean_diff: np.ndarray  # (iterations,)


def reversal_p_value(observed: float, samples) -> float:
    """Two-sided bootstrap p: twice the share of resamples whose difference does not share the observed sign."""
    samples = np.asarray(samples, dtype=float)
    if observed == 0:
        return 1.0
    reversed_ = samples <= 0 if observed > 0 else samples >= 0
    return float(min(1.0, 2.0 * reversed_.mean()))


def compare_models(
    preds_a: HourlyPredictions,
    preds_b: HourlyPredictions,
    alignment: str = "from_admission",
    horizon: int = 100,
    iterations: int = 100,
    seed: int = 0,
) -> Comparison:
    """Paired bootstrap over encounters of per-hour AUC(A) - AUC(B) and of its mean over hours."""
    if list(preds_a.encounter_ids) != list(preds_b.encounter_ids) or not np.array_equal(preds_a.labels, preds_b.labels):
        raise EvalError("predictions cover different encounters or labels")
    y = preds_a.labels
    SA = preds_a.score_matrix(alignment, horizon)
    SB = preds_b.score_matrix(alignment, horizon)
    auc_a = auc_columns(SA, y)
    auc_b = auc_columns(SB, y)
    diff = auc_a - auc_b
    idx = bootstrap_indices(y, iterations, seed)
    boot = np.array([auc_columns(SA[i], y[i]) - auc_columns(SB[i], y[i]) for i in idx])
    p = np.array([reversal_p_value(diff[j], boot[:, j]) for j in range(horizon)])
    mean_diff = float(diff.mean())
    boot_mean = boot.mean(axis=1)
    hours = np.arange(1, horizon + 1) if alignment == "from_admission" else np.arange(horizon)
    return Comparison(
        hours, auc_a, auc_b, diff, p, boot,
        float(auc_a.mean()), float(auc_b.mean()), mean_diff,
        reversal_p_value(mean_diff, boot_mean), boot_mean,
    )


def write_comparison_csv(path, comp: Comparison) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("hour", "auc_a", "auc_b", "diff", "p_value"))
        for j, h in enumerate(comp.hours):
            w.writerow((int(h), _fmt(comp.auc_a[j]), _fmt(comp.auc_b[j]), _fmt(comp.diff[j]), _fmt(comp.p_value[j])))
        w.writerow(("mean", _fmt(comp.mean_auc_a), _fmt(comp.mean_auc_b), _fmt(comp.mean_diff), _fmt(comp.mean_p_value)))


# ---------------------------------------------------------------- aggregate features

AGGREGATES = ("min", "max", "mean", "std", "first", "last")


def aggregate_feature_matrix(grid) -> np.ndarray:
    """Expanding-window aggregates for every hour: (T, 6 * n_vars).

    Row ``hour-1`` summarizes grid rows ``[0, hour)``; per variable the six
    columns are min, max, mean, population std, first, last.
    """
    grid = np.asarray(grid, dtype=float)
    T, nv = grid.shape
    first = grid[0]
    shifted = grid - first  # exact zeros for constant channels
    n = np.arange(1, T + 1)[:, None]
    s1 = np.cumsum(shifted, axis=0)
    s2 = np.cumsum(shifted * shifted, axis=0)
    mean_shift = s1 / n
    var = np.maximum(s2 / n - mean_shift * mean_shift, 0.0)
    feats = np.stack(
        [
            np.minimum.accumulate(grid, axis=0),
            np.maximum.accumulate(grid, axis=0),
            mean_shift + first,
            np.sqrt(var),
            np.broadcast_to(first, grid.shape),
            grid,
        ],
        axis=2,
    )
    return feats.reshape(T, nv * len(AGGREGATES))


def aggregate_features(series, hour: int) -> np.ndarray:
    if not 1 <= hour <= series.T:
        raise ValueError(f"hour {hour} outside 1..{series.T}")
    return aggregate_feature_matrix(series.grid[:hour])[hour - 1]
