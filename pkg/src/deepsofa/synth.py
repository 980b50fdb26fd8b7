"""Synthetic ICU cohorts with a known, temporally structured mortality mechanism.

Each encounter has smooth latent trajectories for every variable. A subset
receives a deterioration motif over the last 24 hours of the stay (MAP
decline, creatinine rise, GCS drop, falling urine output, late vasopressor
onset). Mortality is Bernoulli with logit ``baseline_logit + effect_weight *
intensity``, so the per-encounter risk is known exactly.

Survivors also carry chronic abnormalities that raise SOFA totals without
raising risk (low platelets, high bilirubin, sedation, chronic kidney
disease, early transient vasopressors). A trailing-window score therefore
sees a noisy version of the signal, while a model of each patient's own
trajectory can separate change from baseline.

Events are sampled at per-variable charting intervals and go through the
ordinary ingest path.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .ingest import Outcome, RawEvent, build_cohort, write_events, write_outcomes
from .numerics import make_rng
from .variables import load_specs

MOTIF_HOURS = 24

# mean charting interval (hours) and probability the variable is never charted in a stay
CHARTING = {
    "map": (1.0, 0.0),
    "spo2": (1.0, 0.02),
    "urine": (1.0, 0.03),
    "gcs": (3.0, 0.04),
    "pao2": (4.5, 0.30),
    "creatinine": (14.0, 0.05),
    "platelets": (18.0, 0.06),
    "bilirubin": (24.0, 0.35),
}


@dataclass
class SynthConfig:
    n_encounters: int = 200
    seed: int = 0
    median_stay_hours: float = 48.0
    stay_sigma: float = 0.6
    min_stay_hours: int = 4
    max_stay_hours: int = 720
    baseline_logit: float = -4.0
    effect_weight: float = 8.0
    motif_fraction: float = 0.3
    noise_scale: float = 1.0
    confounder_rate: float = 1.0
    multi_stay_fraction: float = 0.15
    minor_fraction: float = 0.0
    hospice_fraction: float = 0.1

    def __post_init__(self):
        if self.n_encounters < 2:
            raise ValueError("n_encounters must be >= 2")
        if not 0 < self.min_stay_hours <= self.max_stay_hours:
            raise ValueError("bad stay bounds")


@dataclass
class SyntheticCohort:
    events: list[RawEvent]
    outcomes: dict[str, Outcome]
    risk: dict[str, float]
    intensity: dict[str, float]
    stay_hours: dict[str, int] = field(default_factory=dict)

    def series(self, specs=None):
        series, _ = build_cohort(self.events, self.outcomes, specs or load_specs())
        return series

    def write(self, events_path, outcomes_path) -> None:
        write_events(events_path, self.events)
        write_outcomes(outcomes_path, self.outcomes.values())

    def write_truth(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("encounter_id,risk,motif_intensity,stay_hours\n")
            for enc in self.outcomes:
                fh.write(f"{enc},{self.risk[enc]!r},{self.intensity[enc]!r},{self.stay_hours[enc]}\n")


def _sigmoid(x):
    return 1.0 / (1.0 + math.exp(-x))


def _ar1(rng, n, phi=0.9):
    e = rng.normal(size=n)
    out = np.empty(n)
    acc = rng.normal()
    s = math.sqrt(1 - phi * phi)
    for i in range(n):
        acc = phi * acc + s * e[i]
        out[i] = acc
    return out


def _chart_times(rng, T, interval, always_last=False):
    """Minutes at which a variable is charted over a T-hour stay."""
    if interval <= 1.0:
        mins = np.arange(T) * 60 + rng.integers(0, 60, size=T)
        return mins
    times = []
    t = rng.uniform(0, interval) * 60
    while t < T * 60:
        times.append(int(t))
        t += interval * 60 * rng.uniform(0.6, 1.4)
    return np.array(times, dtype=np.int64)


def _plan_patients(cfg: SynthConfig, rng):
    """(patient_id, stay_index) per encounter, grouping some encounters into multi-stay patients."""
    plan = []
    p = 0
    while len(plan) < cfg.n_encounters:
        n = 1
        if rng.random() < cfg.multi_stay_fraction:
            n = int(rng.integers(2, 4))
        n = min(n, cfg.n_encounters - len(plan))
        for s in range(n):
            plan.append((f"p{p:05d}", s))
        p += 1
    return plan


def generate(cfg: SynthConfig) -> SyntheticCohort:
    master = make_rng(cfg.seed, 0)
    plan = _plan_patients(cfg, master)
    patient_age = {}
    events: list[RawEvent] = []
    outcomes = {}
    risk = {}
    intensity_of = {}
    stays = {}
    for i, (pid, stay_idx) in enumerate(plan):
        rng = make_rng(cfg.seed, 1, i)
        enc = f"e{i:05d}"
        if pid not in patient_age:
            minor = rng.random() < cfg.minor_fraction
            patient_age[pid] = float(rng.uniform(16, 18)) if minor else float(round(rng.uniform(18, 90), 1))
        T = int(np.clip(round(math.exp(rng.normal(math.log(cfg.median_stay_hours), cfg.stay_sigma))),
                        cfg.min_stay_hours, cfg.max_stay_hours))
        intensity = float(rng.uniform(0.3, 1.0)) if rng.random() < cfg.motif_fraction else 0.0
        r = _sigmoid(cfg.baseline_logit + cfg.effect_weight * intensity)
        died = bool(rng.random() < r)
        hospice = died and rng.random() < cfg.hospice_fraction
        outcomes[enc] = Outcome(enc, patient_age[pid], died and not hospice, hospice, stay_idx)
        risk[enc] = r
        intensity_of[enc] = intensity
        stays[enc] = T
        events.extend(_encounter_events(cfg, rng, enc, pid, T, intensity))
    if not any(o.label for o in outcomes.values()) or all(o.label for o in outcomes.values()):
        raise ValueError("degenerate synthetic cohort: only one outcome class; adjust config or seed")
    return SyntheticCohort(events, outcomes, risk, intensity_of, stays)


def _encounter_events(cfg, rng, enc, pid, T, intensity):
    ns = cfg.noise_scale
    cr = cfg.confounder_rate
    hours = np.arange(T)
    ramp = np.clip((hours - (T - MOTIF_HOURS) + 1) / MOTIF_HOURS, 0.0, 1.0) * intensity

    lat = {}
    base_map = float(np.clip(rng.normal(82, 10), 58, 120))
    lat["map"] = base_map + 4 * ns * _ar1(rng, T) - 18 * ramp

    sedated = rng.random() < 0.35 * cr
    base_gcs = float(rng.integers(7, 15)) if sedated else 15.0
    lat["gcs"] = np.round(base_gcs + 0.6 * ns * _ar1(rng, T) - 4 * ramp)

    ckd = rng.random() < 0.2 * cr
    base_cr = float(rng.uniform(2.0, 4.5)) if ckd else float(np.exp(rng.normal(math.log(0.95), 0.3)))
    lat["creatinine"] = base_cr * np.exp(0.04 * ns * _ar1(rng, T)) + 1.2 * ramp

    base_plt = float(rng.uniform(25, 120)) if rng.random() < 0.25 * cr else float(np.exp(rng.normal(math.log(230), 0.3)))
    lat["platelets"] = base_plt * np.exp(0.05 * ns * _ar1(rng, T))

    base_bili = float(rng.uniform(2.0, 10.0)) if rng.random() < 0.2 * cr else float(np.exp(rng.normal(math.log(0.7), 0.35)))
    lat["bilirubin"] = base_bili * np.exp(0.05 * ns * _ar1(rng, T))

    base_urine = float(np.clip(rng.normal(75, 20), 25, 160))
    lat["urine"] = base_urine * (1 - 0.5 * ramp) + 8 * ns * _ar1(rng, T)

    ventilated = rng.random() < 0.3
    base_pao2 = float(np.clip(rng.normal(95, 15), 60, 160))
    if ventilated and rng.random() < 0.5 * cr:
        base_pao2 = float(rng.uniform(55, 75))
    lat["pao2"] = base_pao2 + 6 * ns * _ar1(rng, T) - 15 * ramp
    lat["spo2"] = float(np.clip(rng.normal(96.5, 1.5), 90, 100)) + 0.8 * ns * _ar1(rng, T) - 3 * ramp

    # clip latents into plausible, in-range values
    bounds = {
        "map": (25, 180), "gcs": (3, 15), "creatinine": (0.2, 25), "platelets": (5, 800),
        "bilirubin": (0.1, 45), "urine": (0, 900), "pao2": (35, 600), "spo2": (60, 100),
    }
    for name, (lo, hi) in bounds.items():
        lat[name] = np.clip(lat[name], lo, hi)

    out = []

    def emit(minute, var, value):
        out.append(RawEvent(enc, pid, int(minute), var, value))

    for name, (interval, p_never) in CHARTING.items():
        if name != "map" and rng.random() < p_never:
            continue
        for m in _chart_times(rng, T, interval):
            v = lat[name][m // 60]
            if name == "gcs":
                v = float(v)
            else:
                v = float(round(v, 2))
            emit(m, name, v)

    # oxygen delivery: ventilated stays chart FiO2 directly, others via device/flow
    if ventilated:
        fio2 = np.clip(40 + 8 * _ar1(rng, T) + 35 * ramp, 21, 100)
        for h in range(T):
            emit(h * 60 + int(rng.integers(0, 60)), "mv", 1.0)
            if h % 2 == 0:
                emit(h * 60 + int(rng.integers(0, 60)), "fio2", float(round(fio2[h], 1)))
    else:
        on_o2 = rng.random() < 0.5
        device = "nasal cannula" if rng.random() < 0.7 else "simple mask"
        for h in range(0, T, 2):
            m = h * 60 + int(rng.integers(0, 60))
            if on_o2 or ramp[h] > 0.3:
                flow = float(np.clip(round(2 + 6 * ramp[h] + rng.normal(0, 0.5), 1), 0.5, 15))
                emit(m, "o2_device", device)
                emit(m, "o2_flow_lpm", flow)
            else:
                emit(m, "o2_device", "room air")

    # transient early vasopressors (risk-neutral) and late onset with the motif
    if rng.random() < 0.15 * cr:
        drug = "norepinephrine" if rng.random() < 0.7 else "dopamine"
        dose = float(rng.uniform(0.03, 0.12)) if drug == "norepinephrine" else float(rng.uniform(3, 8))
        stop = min(T, int(rng.integers(6, 30)))
        for h in range(stop):
            emit(h * 60 + int(rng.integers(0, 60)), drug, round(dose, 3))
    if intensity > 0.85:
        onset = max(0, T - int(8 * intensity))
        for h in range(onset, T):
            emit(h * 60 + int(rng.integers(0, 60)), "norepinephrine", round(0.02 + 0.06 * ramp[h], 3))

    out.sort(key=lambda e: (e.minutes, e.variable))
    return out
