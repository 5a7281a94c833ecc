import numpy as np
import pytest
from pydantic import ValidationError

from src.analog import AnalogConfig
from src.controller import DboConfig, DboState, Direction
from src.device import DeviceParams, ReferencePair, TemperatureRangeError, ThermalModel, margin, params_at, v_opt
from src.engine import (
    ScheduleError, ThermalSchedule, ThermalSegment, cycle_count, relative_shift, run_block,
    run_transient, settled_accuracy, steady_v_ref, sweep_margin, temperature_accuracy_sweep,
    tracking_accuracy_map, tracking_accuracy_series, vopt_shift,
)

V_OPT_RT = 0.3 * 2 ** 0.5


@pytest.fixture
def device():
    return ThermalModel()


@pytest.fixture
def analog():
    return AnalogConfig()


@pytest.fixture
def dbo():
    return DboConfig()


@pytest.fixture
def nominal():
    return DeviceParams(tmr0=1.0, vh=0.3, rp=10e3)


@pytest.fixture
def nominal_run(device, analog, dbo):
    return run_transient(device, analog, dbo, ThermalSchedule.constant(25.0, 20e-6), seed=0)


def test_nominal_transient(nominal_run, dbo):
    trace, metrics = nominal_run
    assert len(trace) == 100
    assert metrics.convergence_cycle == 18
    assert metrics.ripple_pp <= 0.016
    assert metrics.ripple_pp == pytest.approx(0.008)
    assert metrics.tracking_accuracy >= 0.98
    assert metrics.window_cycles == (76, 100)
    # Accuracy is bounded by half the ripple plus one fine step
    bound = 1 - (metrics.ripple_pp / 2 + dbo.fine_step) / V_OPT_RT
    assert metrics.tracking_accuracy >= bound


def test_trace_time_stamps(nominal_run, dbo):
    trace, _ = nominal_run
    assert [r.cycle for r in trace.rows] == list(range(1, 101))
    for r in trace.rows:
        assert r.time_s == r.cycle * dbo.sample_period
        assert r.temperature == 25.0
        assert r.v_opt == pytest.approx(V_OPT_RT)


def test_transient_is_deterministic(device, analog, dbo):
    sched = ThermalSchedule.constant(25.0, 10e-6)
    noisy = AnalogConfig(vm_noise_sigma=2e-3)
    a, _ = run_transient(device, noisy, dbo, sched, seed=3)
    b, _ = run_transient(device, noisy, dbo, sched, seed=3)
    c, _ = run_transient(device, noisy, dbo, sched, seed=4)
    assert a.rows == b.rows
    assert a.rows != c.rows


def test_start_at_optimum(device, analog, dbo):
    start = DboState(v_ref=V_OPT_RT, direction=Direction.DOWN, coarse=False)
    _, metrics = run_transient(device, analog, dbo, ThermalSchedule.constant(25.0, 20e-6), seed=0,
                               initial_state=start)
    assert metrics.tracking_accuracy >= 0.99
    assert metrics.convergence_cycle == 1


def test_fixed_baseline_series(device, analog, dbo):
    _, metrics = run_transient(device, analog, dbo, ThermalSchedule.constant(25.0, 4e-6), seed=0,
                               baselines=[0.3])
    series = metrics.margin_timeseries
    assert len(series.dbo) == 20
    assert series.fixed[0.3] == pytest.approx([5e-6] * 20)


def test_never_converging_run(device, analog, dbo):
    # Five cycles only reach the coarse slew
    _, metrics = run_transient(device, analog, dbo, ThermalSchedule.constant(25.0, 1e-6), seed=0)
    assert metrics.convergence_cycle is None


def test_drift_tracking_and_margin(device, analog, dbo):
    sched = ThermalSchedule.ramp(25.0, 125.0, 98e3, settle_s=20e-6, hold_s=20e-6)
    fixed_bias = V_OPT_RT
    trace, metrics = run_transient(device, analog, dbo, sched, seed=0, baselines=[fixed_bias])
    assert len(trace) == cycle_count(sched.total_duration_s, dbo.sample_period)

    hot_opt = v_opt(params_at(device, 125.0))
    assert hot_opt == pytest.approx(0.28684, abs=1e-5)
    assert metrics.v_ref_mean == pytest.approx(hot_opt, rel=0.02)

    # Instantaneous accuracy stays above 90 % once the loop has settled
    settled_cycle, min_acc = settled_accuracy(trace)
    assert settled_cycle is not None and settled_cycle < 100
    assert min_acc >= 0.90

    lo, hi = metrics.window_cycles
    fixed = metrics.margin_timeseries.fixed[fixed_bias][lo - 1:hi]
    improvement = metrics.margin_mean / (sum(fixed) / len(fixed)) - 1
    assert improvement == pytest.approx(0.078, abs=0.002)


def test_hot_margins():
    hot = ThermalModel()
    p = params_at(hot, 125.0)
    assert margin(p, v_opt(p)) == pytest.approx(2.95283e-6, rel=1e-4)
    assert margin(p, V_OPT_RT) == pytest.approx(2.74021e-6, rel=1e-4)


def test_schedule_out_of_range(device, analog, dbo):
    with pytest.raises(ScheduleError):
        run_transient(device, analog, dbo, ThermalSchedule.constant(130.0, 1e-6), seed=0)
    with pytest.raises(ScheduleError) as exc:
        run_transient(device, analog, dbo, ThermalSchedule.ramp(25.0, 150.0, 98e3, 1e-6, 1e-6), seed=0)
    assert "t=" in str(exc.value)


def test_duration_shorter_than_period(device, analog, dbo):
    with pytest.raises(ScheduleError):
        run_transient(device, analog, dbo, ThermalSchedule.constant(25.0, 100e-9), seed=0)


def test_schedule_shape():
    sched = ThermalSchedule.ramp(25.0, 125.0, 1e5, settle_s=10e-6, hold_s=10e-6)
    assert sched.total_duration_s == pytest.approx(1.02e-3)
    assert sched.temperature_at(5e-6) == 25.0
    assert sched.temperature_at(10e-6 + 0.5e-3) == pytest.approx(75.0)
    assert sched.temperature_at(1.015e-3) == 125.0
    assert sched.steady_segment() == pytest.approx((1.01e-3, 1.02e-3))

    cooling = ThermalSchedule.ramp(125.0, 25.0, 1e5, settle_s=10e-6, hold_s=10e-6)
    assert cooling.temperature_at(10e-6 + 0.25e-3) == pytest.approx(100.0)


def test_schedule_ending_in_ramp_uses_whole_run(device, analog, dbo):
    sched = ThermalSchedule(segments=[
        ThermalSegment(start_time_s=0.0, start_temp_c=25.0),
        ThermalSegment(start_time_s=10e-6, start_temp_c=25.0, ramp_c_per_s=1e6),
    ], total_duration_s=20e-6)
    assert sched.steady_segment() == (0.0, 20e-6)
    assert sched.temperature_at(20e-6) == pytest.approx(35.0)

    _, metrics = run_transient(device, analog, dbo, sched, seed=0)
    assert metrics.window_cycles == (76, 100)


def test_schedule_validation():
    with pytest.raises(ValidationError):
        ThermalSchedule(segments=[ThermalSegment(start_time_s=1e-6, start_temp_c=25.0)],
                        total_duration_s=1e-5)
    with pytest.raises(ValidationError):
        ThermalSchedule(segments=[ThermalSegment(start_time_s=0.0, start_temp_c=25.0),
                                  ThermalSegment(start_time_s=0.0, start_temp_c=50.0)],
                        total_duration_s=1e-5)
    with pytest.raises(ScheduleError):
        ThermalSchedule.ramp(25.0, 125.0, 0.0, 1e-6, 1e-6)
    with pytest.raises(ScheduleError):
        ThermalSchedule.ramp(25.0, 25.0, 1e3, 1e-6, 1e-6)


def test_sweep_margin(nominal):
    table = sweep_margin(nominal, 0.0, 0.8, 801)
    assert table.v[0] == 0.0 and table.v[-1] == pytest.approx(0.8)
    assert abs(table.argmax_v - V_OPT_RT) <= 0.001
    assert np.all(np.diff(table.v) > 0)

    ends = sweep_margin(nominal, 0.1, 0.5, 2)
    assert ends.v.tolist() == pytest.approx([0.1, 0.5])
    assert ends.margin[1] == pytest.approx(margin(nominal, 0.5))


def test_sweep_margin_fine_grid(nominal):
    table = sweep_margin(nominal, 0.0, 1.0, 10001)
    assert abs(table.argmax_v - V_OPT_RT) <= 1e-4


def test_sweep_margin_rejects_bad_range(nominal):
    with pytest.raises(ValueError):
        sweep_margin(nominal, 0.5, 0.2, 10)
    with pytest.raises(ValueError):
        sweep_margin(nominal, -0.1, 0.5, 10)
    with pytest.raises(ValueError):
        sweep_margin(nominal, 0.0, 0.5, 1)


def test_vopt_shift_families(nominal, device):
    rows = vopt_shift(nominal, "tmr0", [0.6, 1.0, 1.4])
    grid, closed = relative_shift(rows)
    assert closed == pytest.approx(1.2247 - 1, abs=1e-3)
    assert grid == pytest.approx(closed, abs=1e-3)

    rows = vopt_shift(nominal, "vh", [0.15, 0.35])
    assert relative_shift(rows)[1] == pytest.approx(0.35 / 0.15 - 1)

    rows = vopt_shift(nominal, "temp", [25.0, 125.0], device=device)
    assert rows[0].v_opt_closed_form == pytest.approx(V_OPT_RT)

    with pytest.raises(ValueError):
        vopt_shift(nominal, "rp", [1e3, 2e3])


def test_accuracy_map(analog, dbo):
    tmr0s = list(np.linspace(0.6, 1.2, 5))
    vhs = list(np.linspace(0.2, 0.35, 5))
    points = tracking_accuracy_map(tmr0s, vhs, analog, dbo, temperature=25.0)
    assert len(points) == 25
    assert min(p.accuracy for p in points) >= 0.98


def test_accuracy_map_single_point_matches_transient(analog, dbo, nominal):
    [point] = tracking_accuracy_map([1.0], [0.3], analog, dbo, temperature=25.0)
    _, metrics = run_transient(ThermalModel.constant(nominal), analog, dbo,
                               ThermalSchedule.constant(25.0, 20e-6), seed=0)
    assert point.accuracy == metrics.tracking_accuracy


def test_temperature_accuracy_sweep(device, analog, dbo):
    points = temperature_accuracy_sweep(device, analog, dbo, [-40.0, 25.0, 125.0])
    assert [p.temp_c for p in points] == [-40.0, 25.0, 125.0]
    assert all(p.accuracy >= 0.98 for p in points)
    assert points[0].v_opt > points[1].v_opt > points[2].v_opt
    with pytest.raises(ScheduleError):
        temperature_accuracy_sweep(device, analog, dbo, [140.0])


def test_tracking_accuracy_series(nominal_run):
    trace, _ = nominal_run
    acc = tracking_accuracy_series(trace)
    assert acc.shape == (100,)
    assert acc[0] == pytest.approx(0.08 / V_OPT_RT)
    assert np.all((acc >= 0) & (acc <= 1))
    cycle, worst = settled_accuracy(trace)
    assert cycle == 18
    assert worst >= 0.98


def test_run_block_on_reference_pair(analog, dbo, nominal):
    records = run_block(ReferencePair.of(nominal), analog, dbo, 200, np.random.default_rng(0))
    assert len(records) == 200
    assert steady_v_ref(records) == pytest.approx(V_OPT_RT, abs=0.005)
    with pytest.raises(ValueError):
        run_block(nominal, analog, dbo, 0, np.random.default_rng(0))


def test_params_at_range_error_is_value_error(device):
    with pytest.raises(ValueError):
        params_at(device, 200.0)
    assert issubclass(TemperatureRangeError, ValueError)
