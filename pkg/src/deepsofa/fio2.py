"""FiO2 imputation from oxygen delivery device and flow rate."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

ROOM_AIR = 21.0
FIO2_MIN = 21.0
FIO2_MAX = 100.0


@dataclass(frozen=True)
class Device:
    name: str
    default: Optional[float]
    flow_min: Optional[float] = None
    flow_max: Optional[float] = None
    formula: Optional[Callable[[float], float]] = None
    cap: Optional[float] = None


def _linear(base, slope, offset=0.0):
    return lambda x: base + (x - offset) * slope


DEVICES = {
    d.name: d
    for d in (
        Device("aerosol mask", 35, 0, None, _linear(21, 4), 60),
        Device("nasal cannula", None, 0, None, _linear(21, 4), 40),
        Device("high flow nasal cannula", 50, 6, 15, _linear(48, 2, 6), 100),
        Device("simple mask", None, 0, 19, _linear(21, 4), 60),
        Device("non-rebreather mask", 60, 8, None, lambda x: 80 + min(x - 10, 2) * 10, 100),
        Device("venturi mask", 35, 4, 8, _linear(26, 2.5, 4), 55),
        Device("trach mask", 30),
        Device("cpap", 40),
        Device("bipap", 40),
        Device("tracheostomy", 40),
        Device("ventilator", 40),
        Device("bag valve mask", 100),
        Device("t-piece", 40),
        Device("transtracheal catheter", 40),
        Device("blow-by", 25),
        Device("partial rebreather mask", 35),
        Device("face tent", 25),
        Device("oxyimiser", 40),
        Device("oscillator", 80),
        Device("oxyhood", 35),
    )
}

ROOM_AIR_NAMES = ("", "room air", "none")


def _clamp(v: float) -> float:
    return min(FIO2_MAX, max(FIO2_MIN, v))


def impute_fio2(
    device: Optional[str] = None,
    flow_lpm: Optional[float] = None,
    direct_fio2: Optional[float] = None,
) -> Optional[float]:
    """Return FiO2 (percent) for one observation, or None if not derivable.

    A directly charted FiO2 wins. Otherwise the flow is clamped into the
    device's imputation limits, the device formula is applied and the result
    capped at the device maximum. Devices without a formula, or charted with
    no flow, fall back to their default. No device and no flow is room air.
    """
    if direct_fio2 is not None:
        return _clamp(float(direct_fio2))
    if flow_lpm is not None and (not math.isfinite(flow_lpm) or flow_lpm < 0):
        raise ValueError(f"flow must be finite and nonnegative, got {flow_lpm}")

    key = (device or "").strip().lower()
    if key in ROOM_AIR_NAMES:
        return ROOM_AIR if flow_lpm is None else None
    dev = DEVICES.get(key)
    if dev is None:
        return None

    if flow_lpm is None or dev.formula is None:
        return None if dev.default is None else _clamp(dev.default)

    x = float(flow_lpm)
    if dev.flow_min is not None:
        x = max(x, dev.flow_min)
    if dev.flow_max is not None:
        x = min(x, dev.flow_max)
    value = dev.formula(x)
    if dev.cap is not None:
        value = min(value, dev.cap)
    return _clamp(value)
