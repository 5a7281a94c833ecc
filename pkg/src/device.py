import bisect
import logging
import math
from typing import List, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

logger = logging.getLogger(__name__)

DEFAULT_T_MIN_C = -40.0
DEFAULT_T_MAX_C = 125.0
ROOM_TEMPERATURE_C = 25.0


class TemperatureRangeError(ValueError):
    """Raised when a temperature falls outside the simulated range."""


class DeviceParams(BaseModel):
    """
    Read-path parameters of an MTJ population at one temperature.
    tmr0 is a ratio (1.0 = 100 %), vh in volts, rp in ohms.
    """
    model_config = ConfigDict(frozen=True, extra="forbid", allow_inf_nan=False)

    tmr0: float = Field(gt=0)
    vh: float = Field(gt=0)
    rp: float = Field(gt=0)


class ReferencePair(BaseModel):
    """The two reference cells of a block: one held in P, one held in AP."""
    model_config = ConfigDict(frozen=True, extra="forbid")

    p_cell: DeviceParams
    ap_cell: DeviceParams

    @classmethod
    def of(cls, params: DeviceParams) -> "ReferencePair":
        return cls(p_cell=params, ap_cell=params)


MarginSource = Union[DeviceParams, ReferencePair]


class ThermalAnchor(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid", allow_inf_nan=False)

    temp_c: float
    tmr0: float = Field(gt=0)
    vh: float = Field(gt=0)
    # Optional per-anchor override; rp_ref is used when absent.
    rp: Optional[float] = Field(default=None, gt=0)


# Reference design anchors: 100 % / 0.3 V at RT, 70 % / 0.22 V at 125 C.
REFERENCE_ANCHORS = [
    ThermalAnchor(temp_c=ROOM_TEMPERATURE_C, tmr0=1.0, vh=0.3),
    ThermalAnchor(temp_c=125.0, tmr0=0.7, vh=0.22),
]
REFERENCE_RP = 10e3


class ThermalModel(BaseModel):
    """
    Piecewise-linear temperature dependence of tmr0 and vh between anchors,
    linearly extrapolated from the nearest segment outside the anchor span.
    """
    model_config = ConfigDict(frozen=True, extra="forbid", allow_inf_nan=False)

    anchors: List[ThermalAnchor] = Field(default_factory=lambda: list(REFERENCE_ANCHORS))
    rp_ref: float = Field(default=REFERENCE_RP, gt=0)
    t_min_c: float = DEFAULT_T_MIN_C
    t_max_c: float = DEFAULT_T_MAX_C

    @model_validator(mode="after")
    def _check_anchors(self) -> "ThermalModel":
        if len(self.anchors) < 2:
            raise ValueError("thermal model needs at least 2 anchors")
        temps = [a.temp_c for a in self.anchors]
        if any(t1 <= t0 for t0, t1 in zip(temps, temps[1:])):
            raise ValueError(f"anchor temperatures must be strictly increasing, got {temps}")
        if self.t_min_c >= self.t_max_c:
            raise ValueError(f"empty temperature range [{self.t_min_c}, {self.t_max_c}]")
        return self

    @classmethod
    def constant(cls, params: DeviceParams, t_min_c: float = DEFAULT_T_MIN_C,
                 t_max_c: float = DEFAULT_T_MAX_C) -> "ThermalModel":
        """A model that returns the same parameters at every temperature."""
        anchors = [
            ThermalAnchor(temp_c=t, tmr0=params.tmr0, vh=params.vh, rp=params.rp)
            for t in (t_min_c, t_max_c)
        ]
        return cls(anchors=anchors, rp_ref=params.rp, t_min_c=t_min_c, t_max_c=t_max_c)

    @property
    def temperatures(self) -> List[float]:
        return [a.temp_c for a in self.anchors]


def _check_bias(v: float) -> None:
    if not v >= 0:
        raise ValueError(f"read bias must be >= 0 V, got {v}")


def tmr_at(p: DeviceParams, v: float) -> float:
    """Bias-dependent TMR ratio: tmr0 / (1 + v^2/vh^2)."""
    _check_bias(v)
    return p.tmr0 / (1.0 + (v * v) / (p.vh * p.vh))


def cell_currents(p: DeviceParams, v: float) -> Tuple[float, float]:
    """Return (i_p, i_ap) of a cell clamped at bias v."""
    _check_bias(v)
    i_p = v / p.rp
    i_ap = v / (p.rp * (1.0 + tmr_at(p, v)))
    return i_p, i_ap


def reference_current(p: DeviceParams, v: float) -> float:
    """Midpoint current produced by a P/AP reference pair through a 2:1 mirror."""
    i_p, i_ap = cell_currents(p, v)
    return (i_p + i_ap) / 2.0


def margin(p: DeviceParams, v: float) -> float:
    """Sensing margin in amperes; defined as 0 at zero bias."""
    _check_bias(v)
    if v == 0:
        return 0.0
    return p.tmr0 / (2.0 * p.rp) / ((1.0 + p.tmr0) / v + v / (p.vh * p.vh))


def margin_curve(tmr0, vh, rp, v) -> np.ndarray:
    """Array form of margin(); arguments broadcast against each other."""
    tmr0 = np.asarray(tmr0, dtype=float)
    vh = np.asarray(vh, dtype=float)
    rp = np.asarray(rp, dtype=float)
    v = np.asarray(v, dtype=float)
    if np.any(v < 0):
        raise ValueError("read bias must be >= 0 V")
    with np.errstate(divide="ignore", invalid="ignore"):
        out = tmr0 / (2.0 * rp) / ((1.0 + tmr0) / v + v / (vh * vh))
    return np.where(v > 0, out, 0.0)


def ap_current_curve(tmr0, vh, rp, v) -> np.ndarray:
    """Array form of the AP-state cell current."""
    v = np.asarray(v, dtype=float)
    tmr = np.asarray(tmr0, dtype=float) / (1.0 + (v * v) / (np.asarray(vh, dtype=float) ** 2))
    return v / (np.asarray(rp, dtype=float) * (1.0 + tmr))


def pair_reference_current(pair: ReferencePair, v: float) -> float:
    i_p, _ = cell_currents(pair.p_cell, v)
    _, i_ap = cell_currents(pair.ap_cell, v)
    return (i_p + i_ap) / 2.0


def pair_margin(pair: ReferencePair, v: float) -> float:
    """Margin seen by the extraction chain when the two references differ."""
    if pair.p_cell == pair.ap_cell:
        return margin(pair.p_cell, v)
    i_p, _ = cell_currents(pair.p_cell, v)
    _, i_ap = cell_currents(pair.ap_cell, v)
    return (i_p - i_ap) / 2.0


def source_margin(source: MarginSource, v: float) -> float:
    if isinstance(source, ReferencePair):
        return pair_margin(source, v)
    return margin(source, v)


def optimal_bias(tmr0: float, vh: float) -> float:
    """Closed-form argmax of the margin: vh * sqrt(1 + tmr0). tmr0 = 0 is allowed."""
    if not (tmr0 >= 0 and math.isfinite(tmr0)):
        raise ValueError(f"tmr0 must be >= 0, got {tmr0}")
    if not (vh > 0 and math.isfinite(vh)):
        raise ValueError(f"vh must be > 0, got {vh}")
    return vh * math.sqrt(1.0 + tmr0)


def v_opt(p: DeviceParams) -> float:
    return optimal_bias(p.tmr0, p.vh)


def params_at(tm: ThermalModel, t: float) -> DeviceParams:
    """
    Device parameters at temperature t (Celsius).
    Anchor temperatures return the anchor values exactly.
    """
    if not math.isfinite(t) or t < tm.t_min_c or t > tm.t_max_c:
        raise TemperatureRangeError(
            f"temperature {t} C outside simulation range [{tm.t_min_c}, {tm.t_max_c}] C"
        )

    temps = tm.temperatures
    rps = [a.rp if a.rp is not None else tm.rp_ref for a in tm.anchors]

    idx = bisect.bisect_left(temps, t)
    if idx < len(temps) and temps[idx] == t:
        a = tm.anchors[idx]
        return DeviceParams(tmr0=a.tmr0, vh=a.vh, rp=rps[idx])

    # Segment i spans anchors i..i+1; outside the span the end segments extrapolate
    i = min(max(bisect.bisect_right(temps, t) - 1, 0), len(temps) - 2)
    a0, a1 = tm.anchors[i], tm.anchors[i + 1]
    frac = (t - a0.temp_c) / (a1.temp_c - a0.temp_c)

    tmr0 = a0.tmr0 + (a1.tmr0 - a0.tmr0) * frac
    vh = a0.vh + (a1.vh - a0.vh) * frac
    rp = rps[i] + (rps[i + 1] - rps[i]) * frac

    if tmr0 <= 0 or vh <= 0 or rp <= 0:
        raise TemperatureRangeError(
            f"extrapolated parameters at {t} C are non-physical (tmr0={tmr0}, vh={vh}, rp={rp})"
        )
    return DeviceParams(tmr0=tmr0, vh=vh, rp=rp)
