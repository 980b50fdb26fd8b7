"""Hourly SOFA scoring over a trailing 24-hour worst-value window."""

from __future__ import annotations

from dataclasses import dataclass
from importlib import resources
from typing import Callable

import numpy as np

from .ingest import EncounterSeries
from .variables import VAR_INDEX

WINDOW_HOURS = 24
COMPONENTS = ("cardio", "resp", "cns", "coag", "liver", "renal")


def sf_to_pf(sf_ratio: float) -> float:
    """Default SpO2/FiO2 -> PaO2/FiO2 conversion.

    Linear inversion of SF = 64 + 0.84 * PF (Rice et al., Chest 2007). Not
    part of the scoring rules proper; swap via ``sofa_trajectory(convert=...)``.
    """
    return (sf_ratio - 64.0) / 0.84


@dataclass(frozen=True)
class WindowAggregate:
    map_min: float
    pf_min: float
    gcs_min: float
    platelets_min: float
    bilirubin_max: float
    creatinine_max: float
    dopamine_max: float
    dobutamine_max: float
    epinephrine_max: float
    norepinephrine_max: float
    urine_sum_ml: float
    mv_any: bool
    window_hours: int


@dataclass(frozen=True)
class SofaAssessment:
    hour: int
    cardio: int
    resp: int
    cns: int
    coag: int
    liver: int
    renal: int

    @property
    def total(self) -> int:
        return self.cardio + self.resp + self.cns + self.coag + self.liver + self.renal


def _col(series, name):
    return series.grid[:, VAR_INDEX[name]]


def pf_ratios(series: EncounterSeries, convert: Callable[[float], float] = sf_to_pf) -> np.ndarray:
    """Hourly PaO2/FiO2, substituting the SpO2 conversion before PaO2 is first seen.

    Once PaO2 has been observed its forward-filled value is used; before that,
    hours with an observed (or forward-fillable) SpO2 use the conversion and
    the rest use the normal-imputed PaO2.
    """
    fio2_frac = _col(series, "fio2") / 100.0
    pao2 = _col(series, "pao2")
    pf = pao2 / fio2_frac
    pao2_seen = np.logical_or.accumulate(series.observed[:, VAR_INDEX["pao2"]])
    spo2_seen = np.logical_or.accumulate(series.observed[:, VAR_INDEX["spo2"]])
    fallback = ~pao2_seen & spo2_seen
    if fallback.any():
        sf = _col(series, "spo2") / fio2_frac
        pf = np.where(fallback, [convert(v) for v in sf], pf)
    return pf


def window_aggregate(series: EncounterSeries, hour: int, pf: np.ndarray | None = None) -> WindowAggregate:
    """Worst values over grid hours ``[max(0, hour-24), hour)``."""
    if not 1 <= hour <= series.T:
        raise ValueError(f"hour {hour} outside 1..{series.T}")
    lo = max(0, hour - WINDOW_HOURS)
    w = series.grid[lo:hour]
    if pf is None:
        pf = pf_ratios(series)
    c = VAR_INDEX
    return WindowAggregate(
        map_min=float(w[:, c["map"]].min()),
        pf_min=float(pf[lo:hour].min()),
        gcs_min=float(w[:, c["gcs"]].min()),
        platelets_min=float(w[:, c["platelets"]].min()),
        bilirubin_max=float(w[:, c["bilirubin"]].max()),
        creatinine_max=float(w[:, c["creatinine"]].max()),
        dopamine_max=float(w[:, c["dopamine"]].max()),
        dobutamine_max=float(w[:, c["dobutamine"]].max()),
        epinephrine_max=float(w[:, c["epinephrine"]].max()),
        norepinephrine_max=float(w[:, c["norepinephrine"]].max()),
        urine_sum_ml=float(w[:, c["urine"]].sum()),
        mv_any=bool((w[:, c["mv"]] >= 0.5).any()),
        window_hours=hour - lo,
    )


def cardio_score(a: WindowAggregate) -> int:
    dop, dob, epi, nor = a.dopamine_max, a.dobutamine_max, a.epinephrine_max, a.norepinephrine_max
    if dop > 15 or epi > 0.1 or nor > 0.1:
        return 4
    if dop > 5 or 0 < epi <= 0.1 or 0 < nor <= 0.1:
        return 3
    if 0 < dop <= 5 or dob > 0:
        return 2
    if a.map_min < 70:
        return 1
    return 0


def resp_score(a: WindowAggregate) -> int:
    pf = a.pf_min
    if pf < 100 and a.mv_any:
        return 4
    if pf < 200 and a.mv_any:
        return 3
    if pf < 300:
        return 2
    if pf < 400:
        return 1
    return 0


def cns_score(a: WindowAggregate) -> int:
    g = a.gcs_min
    if g < 6:
        return 4
    if g < 10:
        return 3
    if g < 13:
        return 2
    if g < 15:
        return 1
    return 0


def coag_score(a: WindowAggregate) -> int:
    p = a.platelets_min
    if p < 20:
        return 4
    if p < 50:
        return 3
    if p < 100:
        return 2
    if p < 150:
        return 1
    return 0


def liver_score(a: WindowAggregate) -> int:
    b = a.bilirubin_max
    if b > 12:
        return 4
    if b >= 6:
        return 3
    if b >= 2:
        return 2
    if b >= 1.2:
        return 1
    return 0


def renal_score(a: WindowAggregate) -> int:
    cr = a.creatinine_max
    full_day = a.window_hours == WINDOW_HOURS
    if cr > 5 or (full_day and a.urine_sum_ml < 200):
        return 4
    if cr >= 3.5 or (full_day and a.urine_sum_ml < 500):
        return 3
    if cr >= 2:
        return 2
    if cr >= 1.2:
        return 1
    return 0


def component_scores(agg: WindowAggregate, hour: int = 0) -> SofaAssessment:
    return SofaAssessment(
        hour=hour,
        cardio=cardio_score(agg),
        resp=resp_score(agg),
        cns=cns_score(agg),
        coag=coag_score(agg),
        liver=liver_score(agg),
        renal=renal_score(agg),
    )


def sofa_trajectory(series: EncounterSeries, convert: Callable[[float], float] = sf_to_pf) -> list[SofaAssessment]:
    pf = pf_ratios(series, convert)
    return [component_scores(window_aggregate(series, h, pf), h) for h in range(1, series.T + 1)]


def sofa_totals(series: EncounterSeries) -> np.ndarray:
    return np.array([a.total for a in sofa_trajectory(series)], dtype=np.int64)


# ---------------------------------------------------------------- bedside table


class BedsideTable:
    """Banded SOFA-total -> mortality-rate lookup."""

    def __init__(self, bands):
        bands = sorted((int(lo), int(hi), float(rate)) for lo, hi, rate in bands)
        expect = 0
        prev_rate = -1.0
        for lo, hi, rate in bands:
            if lo != expect or hi < lo:
                raise ValueError(f"bands must partition 0..24 without gaps or overlap (at {lo}-{hi})")
            if not 0.0 <= rate <= 1.0:
                raise ValueError(f"rate {rate} outside [0, 1]")
            if rate < prev_rate:
                raise ValueError("rates must be nondecreasing across bands")
            expect, prev_rate = hi + 1, rate
        if expect != 25:
            raise ValueError("bands must cover 0..24")
        self.bands = bands
        self._lookup = np.empty(25)
        for lo, hi, rate in bands:
            self._lookup[lo : hi + 1] = rate

    @classmethod
    def load(cls, path=None) -> "BedsideTable":
        if path is None:
            text = resources.files("deepsofa.data").joinpath("bedside.csv").read_text("utf-8")
        else:
            with open(path, encoding="utf-8") as fh:
                text = fh.read()
        bands = []
        for line in text.splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            lo, hi, rate = line.split(",")
            bands.append((lo, hi, rate))
        return cls(bands)

    def probability(self, total) -> np.ndarray | float:
        t = np.asarray(total)
        if np.any((t < 0) | (t > 24)) or not np.all(t == np.round(t)):
            raise ValueError(f"SOFA total must be an integer in 0..24, got {total}")
        out = self._lookup[t.astype(np.int64)]
        return float(out) if out.ndim == 0 else out


def bedside_probability(total: int, table: BedsideTable) -> float:
    return table.probability(total)
