"""Event ingestion: parsing, outlier removal, FiO2 derivation, hourly grids, cohort filters."""

from __future__ import annotations

import csv
import logging
import math
from collections import defaultdict
from dataclasses import dataclass
from typing import Iterable, NamedTuple, Optional

import numpy as np

from .container import read_container, write_container
from .fio2 import impute_fio2
from .variables import AUX_VARIABLES, FORWARD_FILL, VAR_INDEX, VARIABLES, VariableSpec

logger = logging.getLogger(__name__)

EVENT_HEADER = ("encounter_id", "patient_id", "minutes", "variable", "value")
OUTCOME_HEADER = ("encounter_id", "age_years", "died_in_hospital", "hospice_death_within_7d")
COHORT_VERSION = 1

KNOWN_EVENT_VARIABLES = frozenset(VARIABLES) | frozenset(AUX_VARIABLES)


class IngestError(Exception):
    pass


class RawEvent(NamedTuple):
    encounter_id: str
    patient_id: str
    minutes: int
    variable: str
    value: object  # float, or device name for o2_device


@dataclass(frozen=True)
class Rejection:
    line: int  # 1-based line number in the source file; 0 when not file-backed
    reason: str
    detail: str = ""


@dataclass
class Outcome:
    encounter_id: str
    age_years: float
    died_in_hospital: bool
    hospice_death_within_7d: bool
    icu_stay_index: Optional[int] = None

    @property
    def label(self) -> int:
        return int(self.died_in_hospital or self.hospice_death_within_7d)


@dataclass
class EncounterSeries:
    encounter_id: str
    patient_id: str
    grid: np.ndarray  # (T, 14) float64
    observed: np.ndarray  # (T, 14) bool
    label: int
    icu_stay_index: int = 0
    age_years: float = float("nan")

    @property
    def T(self) -> int:
        return self.grid.shape[0]


@dataclass(frozen=True)
class CohortCriteria:
    min_age_years: float = 18
    min_stay_hours: int = 4
    max_stay_days: int = 30
    require_map: bool = True
    require_pao2_or_spo2: bool = True
    multi_stay_policy: str = "all"

    def __post_init__(self):
        if self.multi_stay_policy not in ("all", "first_only", "unique_only"):
            raise ValueError(f"unknown multi_stay_policy {self.multi_stay_policy!r}")
        if not self.min_stay_hours < self.max_stay_days * 24:
            raise ValueError("min_stay_hours must be below max_stay_days * 24")


# ---------------------------------------------------------------- parsing


def parse_events(path) -> tuple[list[RawEvent], list[Rejection]]:
    events: list[RawEvent] = []
    rejected: list[Rejection] = []
    try:
        fh = open(path, encoding="utf-8", newline="")
    except OSError as exc:
        raise IngestError(f"cannot read event file {path}: {exc}") from exc
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != EVENT_HEADER:
            raise IngestError(f"{path}: header must be {','.join(EVENT_HEADER)}")
        for lineno, row in enumerate(reader, start=2):
            event, why = _parse_event_row(row)
            if event is None:
                rejected.append(Rejection(lineno, why[0], why[1]))
            else:
                events.append(event)
    return events, rejected


def _parse_event_row(row):
    if len(row) != 5:
        return None, ("malformed", f"expected 5 fields, got {len(row)}")
    enc, pid, minutes, var, value = (c.strip() for c in row)
    if not enc:
        return None, ("malformed", "empty encounter_id")
    if var not in KNOWN_EVENT_VARIABLES:
        return None, ("unknown_variable", var)
    try:
        m = float(minutes)
    except ValueError:
        return None, ("bad_number", f"minutes={minutes!r}")
    if not math.isfinite(m) or m != int(m):
        return None, ("bad_number", f"minutes={minutes!r}")
    if var == "o2_device":
        return RawEvent(enc, pid, int(m), var, value.lower()), None
    try:
        v = float(value)
    except ValueError:
        return None, ("bad_number", f"value={value!r}")
    if not math.isfinite(v):
        return None, ("non_finite", f"value={value!r}")
    return RawEvent(enc, pid, int(m), var, v), None


def parse_outcomes(path) -> dict[str, Outcome]:
    """Read the outcome file; an optional trailing ``icu_stay_index`` column is accepted."""
    out = {}
    try:
        fh = open(path, encoding="utf-8", newline="")
    except OSError as exc:
        raise IngestError(f"cannot read outcome file {path}: {exc}") from exc
    with fh:
        reader = csv.reader(fh)
        header = tuple(h.strip() for h in (next(reader, None) or ()))
        has_index = header == OUTCOME_HEADER + ("icu_stay_index",)
        if header != OUTCOME_HEADER and not has_index:
            raise IngestError(f"{path}: header must be {','.join(OUTCOME_HEADER)}")
        for lineno, row in enumerate(reader, start=2):
            try:
                enc = row[0].strip()
                out[enc] = Outcome(
                    encounter_id=enc,
                    age_years=float(row[1]),
                    died_in_hospital=_flag(row[2]),
                    hospice_death_within_7d=_flag(row[3]),
                    icu_stay_index=int(row[4]) if has_index else None,
                )
            except (IndexError, ValueError) as exc:
                raise IngestError(f"{path}:{lineno}: bad outcome row {row!r}") from exc
    return out


def _flag(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes"):
        return True
    if t in ("0", "false", "no", ""):
        return False
    raise ValueError(text)


def write_events(path, events: Iterable[RawEvent]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(EVENT_HEADER)
        for e in events:
            value = e.value if isinstance(e.value, str) else repr(float(e.value))
            w.writerow((e.encounter_id, e.patient_id, e.minutes, e.variable, value))


def write_outcomes(path, outcomes: Iterable[Outcome]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(OUTCOME_HEADER + ("icu_stay_index",))
        for o in outcomes:
            w.writerow(
                (
                    o.encounter_id,
                    repr(float(o.age_years)),
                    int(o.died_in_hospital),
                    int(o.hospice_death_within_7d),
                    0 if o.icu_stay_index is None else o.icu_stay_index,
                )
            )


# ---------------------------------------------------------------- cleaning


def filter_outliers(events, specs: dict[str, VariableSpec]):
    kept, rejected = [], []
    for e in events:
        spec = specs.get(e.variable)
        if spec is None or spec.contains(e.value):
            kept.append(e)
        else:
            rejected.append(Rejection(0, "outlier", f"{e.encounter_id} {e.variable}={e.value} outside {spec.range_text()}"))
    return kept, rejected


def derive_fio2(events: list[RawEvent]) -> list[RawEvent]:
    """Replace device/flow events of one encounter by imputed FiO2 events.

    The charted device persists until another device is charted. At each
    minute carrying a device or flow event (and no direct FiO2), one FiO2
    value is imputed; minutes where nothing is derivable produce no event.
    """
    direct_minutes = {e.minutes for e in events if e.variable == "fio2"}
    aux = sorted((e for e in events if e.variable in AUX_VARIABLES), key=lambda e: e.minutes)
    out = [e for e in events if e.variable not in AUX_VARIABLES]
    device = None
    i = 0
    while i < len(aux):
        minute = aux[i].minutes
        flow = None
        charted_device = False
        while i < len(aux) and aux[i].minutes == minute:
            e = aux[i]
            if e.variable == "o2_device":
                device = e.value
                charted_device = True
            elif e.value >= 0:
                flow = e.value
            i += 1
        if minute in direct_minutes:
            continue
        if device is None and not charted_device:
            continue
        value = impute_fio2(device, flow)
        if value is not None:
            ref = aux[i - 1]
            out.append(RawEvent(ref.encounter_id, ref.patient_id, minute, "fio2", value))
    return out


# ---------------------------------------------------------------- hourly grid


def build_series(
    events: list[RawEvent],
    specs: dict[str, VariableSpec],
    outcome: Outcome,
    icu_stay_index: Optional[int] = None,
) -> EncounterSeries:
    """Bucket one encounter's events into hours [60h, 60(h+1)) and fill gaps."""
    in_icu = [e for e in events if e.minutes >= 0 and e.variable in VAR_INDEX]
    if not in_icu:
        raise IngestError(f"empty encounter {outcome.encounter_id}")
    T = max(e.minutes for e in in_icu) // 60 + 1
    nvar = len(VARIABLES)
    sums = np.zeros((T, nvar))
    counts = np.zeros((T, nvar), dtype=np.int64)
    hours = np.fromiter((e.minutes // 60 for e in in_icu), dtype=np.int64, count=len(in_icu))
    cols = np.fromiter((VAR_INDEX[e.variable] for e in in_icu), dtype=np.int64, count=len(in_icu))
    vals = np.fromiter((float(e.value) for e in in_icu), dtype=np.float64, count=len(in_icu))
    np.add.at(sums, (hours, cols), vals)
    np.add.at(counts, (hours, cols), 1)
    observed = counts > 0
    grid = np.zeros((T, nvar))
    for j, name in enumerate(VARIABLES):
        spec = specs[name]
        col_obs = observed[:, j]
        col = np.where(col_obs, sums[:, j] / np.maximum(counts[:, j], 1), 0.0)
        if spec.fill_rule == FORWARD_FILL:
            col = _forward_fill(col, col_obs, spec.normal_value)
        grid[:, j] = col
    stay_index = icu_stay_index if icu_stay_index is not None else (outcome.icu_stay_index or 0)
    return EncounterSeries(
        encounter_id=outcome.encounter_id,
        patient_id=in_icu[0].patient_id,
        grid=grid,
        observed=observed,
        label=outcome.label,
        icu_stay_index=stay_index,
        age_years=outcome.age_years,
    )


def _forward_fill(col, obs, normal):
    idx = np.where(obs, np.arange(len(col)), -1)
    np.maximum.accumulate(idx, out=idx)
    return np.where(idx >= 0, col[np.maximum(idx, 0)], normal)


def build_cohort(events, outcomes: dict[str, Outcome], specs):
    """Run the per-encounter pipeline over a parsed event stream.

    Returns ``(series, rejections)`` with series ordered by encounter_id.
    Encounters lacking an outcome record, or left with no in-ICU data, are
    reported rather than raised.
    """
    rejections = []
    pre_icu = [e for e in events if e.minutes < 0]
    if pre_icu:
        rejections.append(Rejection(0, "pre_icu", f"{len(pre_icu)} events before ICU admission dropped"))
    events, outlier_rej = filter_outliers([e for e in events if e.minutes >= 0], specs)
    rejections.extend(outlier_rej)

    by_enc = defaultdict(list)
    for e in events:
        by_enc[e.encounter_id].append(e)

    # stay ordinal within patient when the outcome file does not supply one
    by_patient = defaultdict(list)
    for enc in sorted(by_enc):
        by_patient[by_enc[enc][0].patient_id].append(enc)
    default_index = {enc: i for encs in by_patient.values() for i, enc in enumerate(encs)}

    series = []
    for enc in sorted(by_enc):
        outcome = outcomes.get(enc)
        if outcome is None:
            rejections.append(Rejection(0, "no_outcome", enc))
            continue
        evs = derive_fio2(by_enc[enc])
        idx = outcome.icu_stay_index if outcome.icu_stay_index is not None else default_index[enc]
        try:
            series.append(build_series(evs, specs, outcome, icu_stay_index=idx))
        except IngestError as exc:
            rejections.append(Rejection(0, "empty_encounter", str(exc)))
    return series, rejections


# ---------------------------------------------------------------- cohort filters


def apply_cohort_filters(encounters: list[EncounterSeries], criteria: CohortCriteria):
    """Apply inclusion rules in order; returns ``(kept, exclusion_counts)``."""
    report = {}
    max_hours = criteria.max_stay_days * 24
    rules = [
        ("age", lambda s: s.age_years >= criteria.min_age_years),
        ("stay_length", lambda s: criteria.min_stay_hours <= s.T <= max_hours),
    ]
    if criteria.require_map:
        rules.append(("map_measured", lambda s: bool(s.observed[:, VAR_INDEX["map"]].any())))
    if criteria.require_pao2_or_spo2:
        rules.append(
            (
                "pao2_or_spo2_measured",
                lambda s: bool(s.observed[:, VAR_INDEX["pao2"]].any() or s.observed[:, VAR_INDEX["spo2"]].any()),
            )
        )
    kept = list(encounters)
    for name, ok in rules:
        before = len(kept)
        kept = [s for s in kept if ok(s)]
        report[name] = before - len(kept)

    before = len(kept)
    if criteria.multi_stay_policy != "all":
        stays = defaultdict(list)
        for s in kept:
            stays[s.patient_id].append(s)
        if criteria.multi_stay_policy == "first_only":
            first = {
                pid: min(ss, key=lambda s: (s.icu_stay_index, s.encounter_id)).encounter_id
                for pid, ss in stays.items()
            }
            kept = [s for s in kept if first[s.patient_id] == s.encounter_id]
        else:
            kept = [s for s in kept if len(stays[s.patient_id]) == 1]
    report["multi_stay_policy"] = before - len(kept)
    kept.sort(key=lambda s: s.encounter_id)
    return kept, report


# ---------------------------------------------------------------- serialization


def save_cohort(path, cohort: list[EncounterSeries]) -> None:
    lengths = np.array([s.T for s in cohort], dtype=np.int64)
    nvar = len(VARIABLES)
    meta = {
        "variables": list(VARIABLES),
        "encounter_ids": [s.encounter_id for s in cohort],
        "patient_ids": [s.patient_id for s in cohort],
    }
    write_container(
        path,
        "cohort",
        COHORT_VERSION,
        meta,
        {
            "lengths": lengths,
            "grid": np.concatenate([s.grid for s in cohort]) if cohort else np.zeros((0, nvar)),
            "observed": np.concatenate([s.observed for s in cohort]) if cohort else np.zeros((0, nvar), bool),
            "labels": np.array([s.label for s in cohort], dtype=np.int64),
            "stay_index": np.array([s.icu_stay_index for s in cohort], dtype=np.int64),
            "age_years": np.array([s.age_years for s in cohort], dtype=np.float64),
        },
    )


def load_cohort(path) -> list[EncounterSeries]:
    _, meta, arr = read_container(path, kind="cohort", max_version=COHORT_VERSION)
    if tuple(meta["variables"]) != VARIABLES:
        raise IngestError(f"{path}: variable layout differs from this build")
    bounds = np.concatenate([[0], np.cumsum(arr["lengths"])])
    out = []
    for i, enc in enumerate(meta["encounter_ids"]):
        a, b = bounds[i], bounds[i + 1]
        out.append(
            EncounterSeries(
                encounter_id=enc,
                patient_id=meta["patient_ids"][i],
                grid=arr["grid"][a:b].copy(),
                observed=arr["observed"][a:b].copy(),
                label=int(arr["labels"][i]),
                icu_stay_index=int(arr["stay_index"][i]),
                age_years=float(arr["age_years"][i]),
            )
        )
    return out
