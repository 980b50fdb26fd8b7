"""Variable definitions: units, non-outlier ranges, fill rules and normal values.

The default table lives in ``data/variables.ini`` and can be replaced by any
file with the same layout (see :func:`load_specs`).
"""

from __future__ import annotations

import configparser
import math
import re
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

FORWARD_FILL = "forward_fill"
ZERO_FILL = "zero_fill"

# Grid channel order. SpO2 is carried as a channel so the aggregate baseline
# sees 14 variables; the SOFA engine uses it only as the PaO2 fallback.
VARIABLES = (
    "map",
    "fio2",
    "pao2",
    "spo2",
    "mv",
    "gcs",
    "urine",
    "platelets",
    "bilirubin",
    "creatinine",
    "dopamine",
    "dobutamine",
    "epinephrine",
    "norepinephrine",
)
VAR_INDEX = {name: i for i, name in enumerate(VARIABLES)}
VASOPRESSORS = ("dopamine", "dobutamine", "epinephrine", "norepinephrine")

# Auxiliary event variables consumed by FiO2 imputation; never grid channels.
AUX_VARIABLES = ("o2_device", "o2_flow_lpm")

ORGAN_SUBSETS = {
    "all": VARIABLES,
    "cardiovascular": ("map",) + VASOPRESSORS,
    "respiratory": ("fio2", "pao2", "spo2", "mv"),
    "cns": ("gcs",),
    "coagulation": ("platelets",),
    "liver": ("bilirubin",),
    "renal": ("creatinine", "urine"),
}

_RANGE_RE = re.compile(
    r"^\s*([\[(])\s*([-+0-9.eE]+)\s*,\s*([-+0-9.eE]+)\s*([\])])\s*$"
)


@dataclass(frozen=True)
class VariableSpec:
    name: str
    unit: str
    lo: float
    hi: float
    lo_closed: bool
    hi_closed: bool
    fill_rule: str
    normal_value: float

    def __post_init__(self):
        if not self.lo < self.hi:
            raise ValueError(f"{self.name}: range min must be < max")
        if self.fill_rule not in (FORWARD_FILL, ZERO_FILL):
            raise ValueError(f"{self.name}: unknown fill rule {self.fill_rule!r}")
        if not self.contains(self.normal_value):
            raise ValueError(f"{self.name}: normal value outside non-outlier range")

    def contains(self, value: float) -> bool:
        if not math.isfinite(value):
            return False
        above = value >= self.lo if self.lo_closed else value > self.lo
        below = value <= self.hi if self.hi_closed else value < self.hi
        return above and below

    def range_text(self) -> str:
        return (
            f"{'[' if self.lo_closed else '('}{self.lo:g}, "
            f"{self.hi:g}{']' if self.hi_closed else ')'}"
        )


def parse_range(text: str) -> tuple[float, float, bool, bool]:
    m = _RANGE_RE.match(text)
    if m is None:
        raise ValueError(f"bad range {text!r}")
    return float(m.group(2)), float(m.group(3)), m.group(1) == "[", m.group(4) == "]"


def load_specs(path: str | Path | None = None) -> dict[str, VariableSpec]:
    """Read a variable table; with no path, the bundled defaults are used.

    Every grid variable must be present. Extra sections are rejected so that a
    typo cannot silently drop a variable.
    """
    parser = configparser.ConfigParser(interpolation=None)
    if path is None:
        parser.read_string(
            resources.files("deepsofa.data").joinpath("variables.ini").read_text("utf-8")
        )
    else:
        with open(path, encoding="utf-8") as fh:
            parser.read_file(fh)

    specs = {}
    for name in parser.sections():
        if name not in VAR_INDEX:
            raise ValueError(f"unknown variable section {name!r}")
        sec = parser[name]
        lo, hi, lo_c, hi_c = parse_range(sec["range"])
        specs[name] = VariableSpec(
            name=name,
            unit=sec.get("unit", ""),
            lo=lo,
            hi=hi,
            lo_closed=lo_c,
            hi_closed=hi_c,
            fill_rule=sec["fill"].strip(),
            normal_value=float(sec["normal"]),
        )
    missing = [v for v in VARIABLES if v not in specs]
    if missing:
        raise ValueError(f"variable table missing {missing}")
    return {v: specs[v] for v in VARIABLES}


def resolve_subset(subset: str | list[str] | tuple[str, ...]) -> tuple[str, ...]:
    if isinstance(subset, str):
        if subset in ORGAN_SUBSETS:
            return tuple(ORGAN_SUBSETS[subset])
        subset = [s.strip() for s in subset.split(",") if s.strip()]
    unknown = [s for s in subset if s not in VAR_INDEX]
    if unknown or not subset:
        raise ValueError(f"bad feature subset {subset!r}")
    return tuple(subset)
