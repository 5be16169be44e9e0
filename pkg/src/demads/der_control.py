"""cos(phi)(P) reactive-power control of PV inverters and its misconfigurations.

Sign convention: generation is positive; a negative reactive setpoint means
the inverter is underexcited (absorbing reactive power).
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np


class InvalidInput(ValueError):
    pass


class ControlCurveVariant(str, enum.Enum):
    CORRECT = "Correct"
    WRONG = "Wrong"        # no reactive power at all
    INVERTED = "Inverted"  # opposite sign of the correct setpoint

    def __str__(self) -> str:
        return self.value


MALFUNCTIONS = (ControlCurveVariant.WRONG, ControlCurveVariant.INVERTED)


@dataclass(frozen=True)
class CosPhiCurve:
    knee_p: float = 0.5
    end_p: float = 1.0
    cosphi_end: float = 0.9

    def __post_init__(self):
        if not (0 <= self.knee_p < self.end_p <= 1):
            raise InvalidInput(f"need 0 <= knee_p < end_p <= 1, got {self.knee_p}, {self.end_p}")
        if not (0 < self.cosphi_end <= 1):
            raise InvalidInput(f"cosphi_end must lie in (0, 1], got {self.cosphi_end}")


@dataclass(frozen=True)
class PvInverter:
    bus: int
    rated_kw: float
    variant: ControlCurveVariant = ControlCurveVariant.CORRECT
    curve: CosPhiCurve = field(default_factory=CosPhiCurve)

    def __post_init__(self):
        if not self.rated_kw > 0:
            raise InvalidInput(f"rated_kw must be positive, got {self.rated_kw}")
        object.__setattr__(self, "variant", ControlCurveVariant(self.variant))


def reactive_setpoint(curve: CosPhiCurve, p_frac):
    """Reactive power (fraction of rated) demanded by the correct curve.

    Unity power factor up to ``knee_p``, then cos(phi) falls linearly to
    ``cosphi_end`` at ``end_p``; beyond ``end_p`` the end power factor is held.
    Accepts scalars or arrays.
    """
    p = np.asarray(p_frac, dtype=float)
    if np.any(p < 0) or not np.all(np.isfinite(p)):
        raise InvalidInput("p_frac must be finite and non-negative")
    frac = np.clip((p - curve.knee_p) / (curve.end_p - curve.knee_p), 0.0, 1.0)
    cosphi = 1.0 - frac * (1.0 - curve.cosphi_end)
    q = -p * np.tan(np.arccos(cosphi))
    q = np.where(p <= curve.knee_p, 0.0, q)
    return float(q) if q.ndim == 0 else q


def variant_setpoint(inverter: PvInverter, p_frac, variant: ControlCurveVariant | None = None):
    """Setpoint under the inverter's configured variant (or an override)."""
    variant = ControlCurveVariant(variant or inverter.variant)
    q = reactive_setpoint(inverter.curve, p_frac)
    if variant is ControlCurveVariant.WRONG:
        return 0.0 * q if isinstance(q, np.ndarray) else 0.0
    if variant is ControlCurveVariant.INVERTED:
        # -0.0 would leak into CSV output below the knee
        return -q + 0.0
    return q


def max_reactive_fraction(curve: CosPhiCurve) -> float:
    return math.tan(math.acos(curve.cosphi_end))


def inverter_to_dict(inv: PvInverter) -> dict:
    return {
        "bus": inv.bus,
        "rated_kw": inv.rated_kw,
        "variant": inv.variant.value,
        "curve": {
            "knee_p": inv.curve.knee_p,
            "end_p": inv.curve.end_p,
            "cosphi_end": inv.curve.cosphi_end,
        },
    }


def inverter_from_dict(data: dict) -> PvInverter:
    curve = CosPhiCurve(**data.get("curve", {}))
    return PvInverter(
        bus=int(data["bus"]),
        rated_kw=float(data["rated_kw"]),
        variant=ControlCurveVariant(data.get("variant", "Correct")),
        curve=curve,
    )
