import logging
import math
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from src.analog import AnalogConfig, effective_bias, extract_vm
from src.controller import CycleRecord, DboConfig, DboController, DboState
from src.device import (
    DeviceParams, MarginSource, ThermalModel, margin, margin_curve, params_at, v_opt,
)

logger = logging.getLogger(__name__)

CONVERGENCE_BAND = 0.02
STEADY_FRACTION = 0.25
# Temperatures computed from ramps may overshoot a range limit by rounding only
_TEMP_TOLERANCE_C = 1e-9


class ScheduleError(ValueError):
    """Raised for malformed schedules or schedules leaving the device range."""


class ThermalSegment(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid", allow_inf_nan=False)

    start_time_s: float = Field(ge=0)
    start_temp_c: float
    ramp_c_per_s: float = 0.0


class ThermalSchedule(BaseModel):
    """
    Piecewise-linear temperature program. A segment ramps from its start until
    the next segment begins; the last one runs to total_duration_s.
    """
    model_config = ConfigDict(frozen=True, extra="forbid", allow_inf_nan=False)

    segments: List[ThermalSegment] = Field(
        default_factory=lambda: [ThermalSegment(start_time_s=0.0, start_temp_c=25.0)]
    )
    total_duration_s: float = Field(default=20e-6, gt=0)

    @model_validator(mode="after")
    def _check_segments(self) -> "ThermalSchedule":
        if not self.segments:
            raise ValueError("schedule needs at least one segment")
        if self.segments[0].start_time_s != 0:
            raise ValueError("first segment must start at t = 0")
        starts = [s.start_time_s for s in self.segments]
        if any(b <= a for a, b in zip(starts, starts[1:])):
            raise ValueError(f"segment start times must be strictly increasing, got {starts}")
        if starts[-1] >= self.total_duration_s:
            raise ValueError("last segment starts after the end of the schedule")
        return self

    @classmethod
    def constant(cls, temp_c: float, duration_s: float) -> "ThermalSchedule":
        return cls(segments=[ThermalSegment(start_time_s=0.0, start_temp_c=temp_c)],
                   total_duration_s=duration_s)

    @classmethod
    def ramp(cls, start_c: float, end_c: float, rate_c_per_s: float,
             settle_s: float, hold_s: float) -> "ThermalSchedule":
        """Settle at start_c, ramp to end_c at |rate|, then hold at end_c."""
        if rate_c_per_s <= 0:
            raise ScheduleError(f"ramp rate must be > 0, got {rate_c_per_s}")
        if settle_s <= 0 or hold_s <= 0:
            raise ScheduleError("settle and hold durations must be > 0")
        if end_c == start_c:
            raise ScheduleError("ramp start and end temperatures are equal; use constant()")
        ramp_s = abs(end_c - start_c) / rate_c_per_s
        signed_rate = rate_c_per_s if end_c >= start_c else -rate_c_per_s
        segments = [
            ThermalSegment(start_time_s=0.0, start_temp_c=start_c),
            ThermalSegment(start_time_s=settle_s, start_temp_c=start_c, ramp_c_per_s=signed_rate),
            ThermalSegment(start_time_s=settle_s + ramp_s, start_temp_c=end_c),
        ]
        return cls(segments=segments, total_duration_s=settle_s + ramp_s + hold_s)

    def segment_index(self, t: float) -> int:
        idx = 0
        for i, seg in enumerate(self.segments):
            if seg.start_time_s <= t:
                idx = i
        return idx

    def segment_end(self, i: int) -> float:
        if i + 1 < len(self.segments):
            return self.segments[i + 1].start_time_s
        return self.total_duration_s

    def temperature_at(self, t: float) -> float:
        seg = self.segments[self.segment_index(t)]
        return seg.start_temp_c + seg.ramp_c_per_s * (t - seg.start_time_s)

    def steady_segment(self) -> Tuple[float, float]:
        """Time span of the final segment if it holds a constant temperature, else the whole run."""
        last = len(self.segments) - 1
        if self.segments[last].ramp_c_per_s == 0:
            return self.segments[last].start_time_s, self.segment_end(last)
        return 0.0, self.total_duration_s


class TraceRow(CycleRecord):
    v_opt: float
    margin_a: float
    clamped: bool = False


class Trace(BaseModel):
    model_config = ConfigDict(frozen=True)

    rows: List[TraceRow]
    sample_period: float

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.rows], dtype=float)

    def __len__(self) -> int:
        return len(self.rows)


class MarginSeries(BaseModel):
    """Margin at the DBO bias and at each fixed baseline bias, per cycle."""
    dbo: List[float]
    fixed: Dict[float, List[float]] = Field(default_factory=dict)


class Metrics(BaseModel):
    convergence_cycle: Optional[int]
    tracking_accuracy: float = Field(ge=0, le=1)
    ripple_pp: float = Field(ge=0)
    v_ref_mean: float
    v_opt_mean: float
    margin_mean: float
    window_cycles: Tuple[int, int]
    margin_timeseries: MarginSeries


@dataclass(frozen=True)
class SweepTable:
    v: np.ndarray
    margin: np.ndarray

    @property
    def argmax_v(self) -> float:
        return float(self.v[int(np.argmax(self.margin))])

    def rows(self) -> List[Tuple[float, float]]:
        return list(zip(self.v.tolist(), self.margin.tolist()))


class AccuracyPoint(BaseModel):
    tmr0: float
    vh: float
    accuracy: float


class TemperaturePoint(BaseModel):
    temp_c: float
    v_opt: float
    v_ref_mean: float
    accuracy: float


class VoptShiftRow(BaseModel):
    parameter: str
    value: float
    v_opt_grid: float
    v_opt_closed_form: float


def cycle_count(duration_s: float, sample_period: float) -> int:
    return int(math.floor(duration_s / sample_period + 1e-9))


def run_rng(seed: int, run_index: int = 0) -> np.random.Generator:
    return np.random.default_rng([seed, run_index])


def _run_loop(controller: DboController, analog: AnalogConfig, n_cycles: int,
              conditions: Callable[[int], Tuple[Optional[float], MarginSource]],
              rng: np.random.Generator,
              on_cycle: Optional[Callable[[CycleRecord, MarginSource, bool], None]] = None) -> int:
    """
    Shared cycle loop: conditions(k) gives (temperature, margin source) for
    cycle k = 1..n_cycles. Returns the number of cycles whose bias was clamped.
    """
    clamped_cycles = 0
    for k in range(1, n_cycles + 1):
        temp, source = conditions(k)
        v_in = controller.v_ref
        _, clamped = effective_bias(analog, v_in)
        if clamped:
            clamped_cycles += 1
        v_m = extract_vm(analog, source, v_in, rng)
        record = controller.tick(v_m, temperature=temp)
        if on_cycle is not None:
            on_cycle(record, source, clamped)
    return clamped_cycles


def _checked_temperature(sched: ThermalSchedule, device: ThermalModel, t: float) -> float:
    temp = sched.temperature_at(t)
    if temp < device.t_min_c - _TEMP_TOLERANCE_C or temp > device.t_max_c + _TEMP_TOLERANCE_C:
        raise ScheduleError(
            f"schedule leaves device range at t={t:.9g} s: {temp:.6g} C not in "
            f"[{device.t_min_c}, {device.t_max_c}] C"
        )
    return min(max(temp, device.t_min_c), device.t_max_c)


def steady_window(trace: Trace, sched: ThermalSchedule) -> Tuple[int, int]:
    """Row index span [lo, hi) of the final 25 % of the last constant-temperature segment."""
    t_lo, t_hi = sched.steady_segment()
    eps = 1e-6 * trace.sample_period
    idx = [i for i, r in enumerate(trace.rows) if t_lo - eps <= r.time_s <= t_hi + eps]
    if not idx:
        idx = list(range(len(trace.rows)))
    n = max(1, math.ceil(STEADY_FRACTION * len(idx)))
    return idx[-n], idx[-1] + 1


def _convergence_cycle(trace: Trace, sched: ThermalSchedule) -> Optional[int]:
    t_lo, t_hi = sched.steady_segment()
    eps = 1e-6 * trace.sample_period
    rows = [r for r in trace.rows if t_lo - eps <= r.time_s <= t_hi + eps] or trace.rows
    last_out = None
    for i, r in enumerate(rows):
        if abs(r.v_ref - r.v_opt) > CONVERGENCE_BAND * r.v_opt:
            last_out = i
    if last_out is None:
        return rows[0].cycle
    if last_out == len(rows) - 1:
        return None
    return rows[last_out + 1].cycle


def compute_metrics(trace: Trace, sched: ThermalSchedule,
                    baselines: Sequence[float] = (),
                    device: Optional[ThermalModel] = None) -> Metrics:
    lo, hi = steady_window(trace, sched)
    window = trace.rows[lo:hi]
    v_ref = np.array([r.v_ref for r in window])
    v_o = np.array([r.v_opt for r in window])

    v_ref_mean = math.fsum(v_ref) / len(v_ref)
    v_opt_mean = math.fsum(v_o) / len(v_o)
    accuracy = 1.0 - abs(v_ref_mean - v_opt_mean) / v_opt_mean
    accuracy = min(max(accuracy, 0.0), 1.0)

    fixed: Dict[float, List[float]] = {}
    if baselines:
        if device is None:
            raise ValueError("baseline margins need the thermal model")
        for bias in baselines:
            fixed[float(bias)] = [margin(params_at(device, r.temperature), bias) for r in trace.rows]

    series = MarginSeries(dbo=[r.margin_a for r in trace.rows], fixed=fixed)
    return Metrics(
        convergence_cycle=_convergence_cycle(trace, sched),
        tracking_accuracy=accuracy,
        ripple_pp=float(v_ref.max() - v_ref.min()),
        v_ref_mean=v_ref_mean,
        v_opt_mean=v_opt_mean,
        margin_mean=math.fsum(r.margin_a for r in window) / len(window),
        window_cycles=(window[0].cycle, window[-1].cycle),
        margin_timeseries=series,
    )


def run_transient(device: ThermalModel, analog: AnalogConfig, dbo: DboConfig,
                  sched: ThermalSchedule, seed: int,
                  initial_state: Optional[DboState] = None,
                  baselines: Sequence[float] = (),
                  run_index: int = 0) -> Tuple[Trace, Metrics]:
    """
    Advance the read path in sample-period ticks: temperature -> device
    parameters -> V_M at the current bias -> one controller step.
    """
    n_cycles = cycle_count(sched.total_duration_s, dbo.sample_period)
    if n_cycles < 1:
        raise ScheduleError(
            f"duration {sched.total_duration_s} s is shorter than one sample period ({dbo.sample_period} s)"
        )

    # Validate the whole schedule against the device range before simulating
    temps = [_checked_temperature(sched, device, k * dbo.sample_period) for k in range(1, n_cycles + 1)]
    params = [params_at(device, t) for t in temps]

    rng = run_rng(seed, run_index)
    controller = DboController(dbo, rng=rng, state=initial_state)
    rows: List[TraceRow] = []

    def conditions(k: int):
        return temps[k - 1], params[k - 1]

    def collect(record: CycleRecord, source: DeviceParams, clamped: bool) -> None:
        rows.append(TraceRow(
            **record.model_dump(),
            v_opt=v_opt(source),
            margin_a=margin(source, record.v_ref),
            clamped=clamped,
        ))

    clamped = _run_loop(controller, analog, n_cycles, conditions, rng, collect)
    if clamped:
        logger.warning(f"Analog clamp error forced 0 V bias on {clamped} of {n_cycles} cycles")

    trace = Trace(rows=rows, sample_period=dbo.sample_period)
    metrics = compute_metrics(trace, sched, baselines, device)
    if metrics.convergence_cycle is None:
        logger.warning("Controller did not settle into the +/-2 % V_OPT band")
    logger.info(
        f"Transient run {run_index}: {n_cycles} cycles, convergence_cycle={metrics.convergence_cycle}, "
        f"accuracy={metrics.tracking_accuracy:.4f}, ripple_pp={metrics.ripple_pp * 1e3:.2f} mV"
    )
    return trace, metrics


def run_block(source: MarginSource, analog: AnalogConfig, dbo: DboConfig, n_cycles: int,
              rng: np.random.Generator, temperature: Optional[float] = None) -> List[CycleRecord]:
    """Controller run against one fixed margin curve (a block's reference pair)."""
    if n_cycles < 1:
        raise ValueError(f"n_cycles must be >= 1, got {n_cycles}")
    controller = DboController(dbo, rng=rng)
    records: List[CycleRecord] = []
    _run_loop(controller, analog, n_cycles, lambda k: (temperature, source), rng,
              lambda record, _source, _clamped: records.append(record))
    return records


def steady_v_ref(records: Sequence[CycleRecord]) -> float:
    """Mean v_ref over the final 25 % of a constant-condition run."""
    n = max(1, math.ceil(STEADY_FRACTION * len(records)))
    tail = records[-n:]
    return math.fsum(r.v_ref for r in tail) / len(tail)


def tracking_accuracy_series(trace: Trace) -> np.ndarray:
    """Instantaneous 1 - |v_ref - v_opt| / v_opt per cycle."""
    v_ref = trace.column("v_ref")
    v_o = trace.column("v_opt")
    return np.clip(1.0 - np.abs(v_ref - v_o) / v_o, 0.0, 1.0)


def settled_accuracy(trace: Trace) -> Tuple[Optional[int], float]:
    """
    First cycle whose v_ref lies inside the convergence band, and the lowest
    instantaneous accuracy from that cycle to the end of the trace.
    """
    acc = tracking_accuracy_series(trace)
    inside = np.nonzero(acc >= 1.0 - CONVERGENCE_BAND)[0]
    if inside.size == 0:
        return None, float(acc.min())
    first = int(inside[0])
    return trace.rows[first].cycle, float(acc[first:].min())


def sweep_margin(params: DeviceParams, v_min: float, v_max: float, points: int) -> SweepTable:
    if not (0 <= v_min < v_max):
        raise ValueError(f"sweep needs 0 <= v_min < v_max, got [{v_min}, {v_max}]")
    if points < 2:
        raise ValueError(f"sweep needs at least 2 points, got {points}")
    v = np.linspace(v_min, v_max, points)
    return SweepTable(v=v, margin=margin_curve(params.tmr0, params.vh, params.rp, v))


def vopt_shift(base: DeviceParams, parameter: str, values: Sequence[float],
               v_max: float = 1.0, points: int = 10001,
               device: Optional[ThermalModel] = None) -> List[VoptShiftRow]:
    """Grid and closed-form V_OPT across a family of tmr0, vh or temperature values."""
    rows = []
    for value in values:
        if parameter == "tmr0":
            p = base.model_copy(update={"tmr0": float(value)})
        elif parameter == "vh":
            p = base.model_copy(update={"vh": float(value)})
        elif parameter == "temp":
            if device is None:
                raise ValueError("temperature family needs a thermal model")
            p = params_at(device, float(value))
        else:
            raise ValueError(f"unknown sweep parameter {parameter!r}")
        table = sweep_margin(p, 0.0, v_max, points)
        rows.append(VoptShiftRow(parameter=parameter, value=float(value),
                                 v_opt_grid=table.argmax_v, v_opt_closed_form=v_opt(p)))
    return rows


def relative_shift(rows: Sequence[VoptShiftRow]) -> Tuple[float, float]:
    """(grid, closed-form) relative V_OPT change from the first to the last family member."""
    first, last = rows[0], rows[-1]
    return (last.v_opt_grid / first.v_opt_grid - 1.0,
            last.v_opt_closed_form / first.v_opt_closed_form - 1.0)


def tracking_accuracy_map(tmr0_values: Sequence[float], vh_values: Sequence[float],
                          analog: AnalogConfig, dbo: DboConfig, temperature: float,
                          rp: float = 10e3, duration_s: float = 20e-6,
                          seed: int = 0) -> List[AccuracyPoint]:
    """Steady-state tracking accuracy over a tmr0 x vh grid at constant temperature."""
    points = []
    sched = ThermalSchedule.constant(temperature, duration_s)
    run_index = 0
    for tmr0 in tmr0_values:
        for vh in vh_values:
            p = DeviceParams(tmr0=tmr0, vh=vh, rp=rp)
            _, metrics = run_transient(ThermalModel.constant(p), analog, dbo, sched, seed,
                                       run_index=run_index)
            points.append(AccuracyPoint(tmr0=tmr0, vh=vh, accuracy=metrics.tracking_accuracy))
            run_index += 1
    worst = min(points, key=lambda pt: pt.accuracy)
    logger.info(f"Accuracy map: {len(points)} points, worst {worst.accuracy:.4f} "
                f"at tmr0={worst.tmr0}, vh={worst.vh}")
    return points


def temperature_accuracy_sweep(device: ThermalModel, analog: AnalogConfig, dbo: DboConfig,
                               temps: Sequence[float], duration_s: float = 20e-6,
                               seed: int = 0) -> List[TemperaturePoint]:
    points = []
    for i, t in enumerate(temps):
        _, metrics = run_transient(device, analog, dbo, ThermalSchedule.constant(t, duration_s),
                                   seed, run_index=i)
        points.append(TemperaturePoint(temp_c=t, v_opt=metrics.v_opt_mean,
                                       v_ref_mean=metrics.v_ref_mean,
                                       accuracy=metrics.tracking_accuracy))
    return points
