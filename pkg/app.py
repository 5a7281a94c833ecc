import argparse
import logging
import os
import sys
from typing import List, Optional

from dotenv import load_dotenv

# Load environment variables
load_dotenv()

from pydantic import ValidationError  # noqa: E402

from src import reporting  # noqa: E402
from src.config import (  # noqa: E402
    ENV_LOG_LEVEL, ConfigError, ScenarioConfig, apply_overrides, dump_config,
    format_validation_error, load_config,
)
from src.device import optimal_bias, params_at, v_opt  # noqa: E402
from src.engine import (  # noqa: E402
    ThermalSchedule, relative_shift, run_transient, settled_accuracy,
    sweep_margin, temperature_accuracy_sweep, tracking_accuracy_map, vopt_shift,
)
from src.variation import ReadMode, estimate_ber, operation_ber  # noqa: E402

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s [%(levelname)s] %(message)s"

# Published figures the analytic model is compared against in the reports
PUBLISHED_DRIFT_IMPROVEMENT = 0.20
PUBLISHED_VOPT_SHIFT = {"tmr0": 0.30, "vh": 1.00}

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2


class UsageError(ValueError):
    pass


def setup_logging(quiet: bool, log_dir: Optional[str]) -> Optional[logging.Handler]:
    """Console logging always; a run.log next to the outputs when a command writes files."""
    level_name = os.getenv(ENV_LOG_LEVEL, "INFO").upper()
    level = logging.WARNING if quiet else getattr(logging, level_name, logging.INFO)

    handlers: List[logging.Handler] = [logging.StreamHandler()]
    file_handler = None
    if log_dir:
        os.makedirs(log_dir, exist_ok=True)
        file_handler = logging.FileHandler(os.path.join(log_dir, "run.log"))
        handlers.append(file_handler)

    logging.basicConfig(level=level, format=LOG_FORMAT, handlers=handlers, force=True)
    return file_handler


def _out(cfg: ScenarioConfig, name: str) -> str:
    return os.path.join(cfg.output_dir, name)


# --- Commands ---

def cmd_vopt(args) -> int:
    if args.tmr0 < 0:
        raise UsageError(f"--tmr0 must be >= 0, got {args.tmr0}")
    if args.vh <= 0:
        raise UsageError(f"--vh must be > 0, got {args.vh}")
    print(f"{optimal_bias(args.tmr0, args.vh):.6f}")
    return EXIT_OK


def cmd_sweep(cfg: ScenarioConfig, args) -> int:
    s = cfg.sweep
    base = params_at(cfg.device, s.temperature)

    if s.vary is None:
        table = sweep_margin(base, s.v_min, s.v_max, s.points)
        path = reporting.write_sweep(_out(cfg, "sweep.csv"), table.rows())
        if args.plot:
            reporting.plot_sweeps([path], [f"{s.temperature:g} C"], _out(cfg, "sweep.svg"))
        print(f"v_opt_grid={table.argmax_v:.6f} v_opt={v_opt(base):.6f}")
        return EXIT_OK

    # Parameter family: one curve per value plus the V_OPT shift table
    paths, labels = [], []
    for value in s.values:
        if s.vary == "temp":
            p = params_at(cfg.device, value)
        else:
            p = base.model_copy(update={s.vary: value})
        table = sweep_margin(p, s.v_min, s.v_max, s.points)
        paths.append(reporting.write_sweep(_out(cfg, f"sweep_{s.vary}_{value:g}.csv"), table.rows()))
        labels.append(f"{s.vary}={value:g}")

    rows = vopt_shift(base, s.vary, s.values, v_max=s.v_max, points=s.points, device=cfg.device)
    reporting.write_vopt_shift(_out(cfg, "vopt_shift.csv"), rows)
    if args.plot:
        reporting.plot_sweeps(paths, labels, _out(cfg, f"sweep_{s.vary}.svg"))

    grid_shift, closed_shift = relative_shift(rows)
    print(f"vopt_shift_grid={grid_shift:.4f} vopt_shift_closed_form={closed_shift:.4f}")
    published = PUBLISHED_VOPT_SHIFT.get(s.vary)
    if published is not None and abs(closed_shift - published) > 0.05:
        logger.warning(
            f"Closed-form V_OPT shift {closed_shift * 100:.1f} % differs from the published "
            f"{published * 100:.0f} % for this {s.vary} family"
        )
    return EXIT_OK


def cmd_transient(cfg: ScenarioConfig, args) -> int:
    trace, metrics = run_transient(cfg.device, cfg.analog, cfg.dbo, cfg.schedule, cfg.seed)
    csv_path = reporting.write_trace(_out(cfg, "trace.csv"), trace)
    reporting.write_report(
        _out(cfg, "transient_summary.md"), "transient_summary.md.j2",
        seed=cfg.seed, n_cycles=len(trace), duration_s=cfg.schedule.total_duration_s,
        sample_period=cfg.dbo.sample_period, metrics=metrics,
    )
    if args.plot:
        reporting.plot_trace(csv_path, _out(cfg, "trace.svg"))

    conv = "none" if metrics.convergence_cycle is None else str(metrics.convergence_cycle)
    print(f"convergence_cycle={conv}")
    print(f"tracking_accuracy={metrics.tracking_accuracy:.6f}")
    print(f"ripple_pp={metrics.ripple_pp:.6f}")
    return EXIT_OK


def cmd_drift(cfg: ScenarioConfig, args) -> int:
    d = cfg.drift
    sched = ThermalSchedule.ramp(d.start_c, d.end_c, d.rate_c_per_s, d.settle_s, d.hold_s)
    p_start = params_at(cfg.device, d.start_c)
    p_end = params_at(cfg.device, d.end_c)
    baselines = list(d.baselines) or [v_opt(p_start)]

    trace, metrics = run_transient(cfg.device, cfg.analog, cfg.dbo, sched, cfg.seed, baselines=baselines)
    fixed_bias = baselines[0]
    fixed_series = metrics.margin_timeseries.fixed[fixed_bias]

    # Steady comparison over the same window the metrics use
    lo, hi = metrics.window_cycles
    margin_fixed = sum(fixed_series[lo - 1:hi]) / (hi - lo + 1)
    improvement = metrics.margin_mean / margin_fixed - 1.0
    settled_cycle, min_acc = settled_accuracy(trace)

    trace_path = reporting.write_trace(_out(cfg, "drift_trace.csv"), trace)
    margins_path = reporting.write_drift_margins(_out(cfg, "drift_margins.csv"), trace, fixed_series)
    reporting.write_report(
        _out(cfg, "drift_summary.md"), "drift_summary.md.j2",
        drift=d, n_cycles=len(trace), v_opt_start=v_opt(p_start), v_opt_end=v_opt(p_end),
        excursion=abs(v_opt(p_end) / v_opt(p_start) - 1.0), fixed_bias=fixed_bias,
        margin_dbo=metrics.margin_mean, margin_fixed=margin_fixed, improvement=improvement,
        published_improvement=PUBLISHED_DRIFT_IMPROVEMENT, settled_cycle=settled_cycle,
        min_accuracy=min_acc, metrics=metrics,
    )
    if args.plot:
        reporting.plot_trace(trace_path, _out(cfg, "drift_trace.svg"))
        reporting.plot_drift(margins_path, _out(cfg, "drift_margins.svg"))

    logger.warning(
        f"Modelled margin improvement {improvement * 100:+.1f} % vs published "
        f"{PUBLISHED_DRIFT_IMPROVEMENT * 100:.0f} % (circuit-level effects not modelled)"
    )
    print(f"margin_improvement={improvement:.4f}")
    print(f"min_tracking_accuracy={min_acc:.6f}")
    return EXIT_OK


def cmd_accuracy(cfg: ScenarioConfig, args) -> int:
    a = cfg.accuracy
    points = tracking_accuracy_map(a.tmr0_values, a.vh_values, cfg.analog, cfg.dbo, a.temperature,
                                   rp=cfg.device.rp_ref, duration_s=a.duration_s, seed=cfg.seed)
    map_path = reporting.write_accuracy_map(_out(cfg, "accuracy_map.csv"), points)

    temps = [t for t in a.temps if cfg.device.t_min_c <= t <= cfg.device.t_max_c]
    if len(temps) < len(a.temps):
        logger.warning(f"Skipping {len(a.temps) - len(temps)} temperatures outside the device range")
    temp_points = temperature_accuracy_sweep(cfg.device, cfg.analog, cfg.dbo, temps,
                                             duration_s=a.duration_s, seed=cfg.seed)
    temp_path = reporting.write_accuracy_temp(_out(cfg, "accuracy_temp.csv"), temp_points)
    if args.plot:
        reporting.plot_accuracy_map(map_path, _out(cfg, "accuracy_map.svg"))
        reporting.plot_accuracy_temp(temp_path, _out(cfg, "accuracy_temp.svg"))

    print(f"min_accuracy_map={min(p.accuracy for p in points):.6f}")
    if temp_points:
        print(f"min_accuracy_temp={min(p.accuracy for p in temp_points):.6f}")
    return EXIT_OK


def cmd_ber(cfg: ScenarioConfig, args) -> int:
    b = cfg.ber
    nominal = params_at(cfg.device, 25.0)
    fixed_biases = list(b.fixed_v_read) or [v_opt(nominal)]

    results, rows = [], []
    for sigma_tmr0, sigma_vh in b.sigma_grid():
        for temp in b.temperatures:
            spec = cfg.variation.spec(sigma_tmr0, sigma_vh, temp, cfg.seed)
            dbo_res = estimate_ber(spec, cfg.device, ReadMode.dbo(), cfg.dbo, cfg.analog)
            fixed_res = [estimate_ber(spec, cfg.device, ReadMode.fixed(v), cfg.dbo, cfg.analog)
                         for v in fixed_biases]
            results.append(dbo_res)
            results.extend(fixed_res)
            rows.append({"sigma_tmr0": sigma_tmr0, "sigma_vh": sigma_vh, "temp_c": temp,
                         "dbo": dbo_res, "fixed": fixed_res})
            logger.info(f"sigma/mu={sigma_tmr0:.2f}/{sigma_vh:.2f} T={temp:g} C: DBO {dbo_res.ber:.3e}, "
                        f"FIXED {', '.join(f'{r.ber:.3e}' for r in fixed_res)}")

    ops = operation_ber(results)
    ber_path = reporting.write_ber(_out(cfg, "ber.csv"), results)
    reporting.write_operation_ber(_out(cfg, "operation_ber.csv"), ops)
    reporting.write_report(
        _out(cfg, "ber_summary.md"), "ber_summary.md.j2",
        n_cells=cfg.variation.n_cells, n_blocks=cfg.variation.n_blocks,
        sa_sigma=cfg.variation.sa_offset_sigma, seed=cfg.seed,
        fixed_biases=fixed_biases, rows=rows, operation=ops,
    )
    if args.plot:
        reporting.plot_ber(ber_path, _out(cfg, "ber.svg"))

    print(f"rows={len(results)}")
    for op in ops:
        bias = "tracked" if op.v_read is None else f"{op.v_read:.4f}"
        print(f"operation_ber mode={op.mode} v_read={bias} sigma_mu_tmr0={op.sigma_mu_tmr0:g} "
              f"sigma_mu_vh={op.sigma_mu_vh:g} ber={op.operation_ber:.3e}")
    return EXIT_OK


COMMANDS = {
    "sweep": cmd_sweep,
    "transient": cmd_transient,
    "drift": cmd_drift,
    "accuracy": cmd_accuracy,
    "ber": cmd_ber,
}


# --- Argument parsing ---

def _add_global_flags(parser: argparse.ArgumentParser, suppress: bool = False) -> None:
    # After the subcommand the flags only overwrite what was given before it
    none = argparse.SUPPRESS if suppress else None
    off = argparse.SUPPRESS if suppress else False
    parser.add_argument("--config", default=none, help="Scenario JSON file (omitted fields take defaults)")
    parser.add_argument("--seed", type=int, default=none, help="Random seed (overrides config and DBO_SEED)")
    parser.add_argument("--out", default=none, help="Output directory (overrides config and DBO_OUTPUT_DIR)")
    parser.add_argument("--plot", action="store_true", default=off, help="Also write SVG plots from the CSVs")
    parser.add_argument("--quiet", action="store_true", default=off, help="Only log warnings and errors")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    _add_global_flags(common, suppress=True)

    parser = argparse.ArgumentParser(description="MRAM read-path simulator with dynamic bias optimization.")
    _add_global_flags(parser)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("vopt", help="Closed-form optimal read bias", parents=[common])
    p.add_argument("--tmr0", type=float, required=True, help="Zero-bias TMR ratio (1.0 = 100 %%)")
    p.add_argument("--vh", type=float, required=True, help="Half-TMR bias voltage (V)")

    p = sub.add_parser("sweep", help="Margin versus read bias", parents=[common])
    p.add_argument("--v-min", type=float)
    p.add_argument("--v-max", type=float)
    p.add_argument("--points", type=int)
    p.add_argument("--temp", type=float, help="Temperature of the base parameters (C)")
    p.add_argument("--vary", choices=["tmr0", "vh", "temp"])
    p.add_argument("--values", type=float, nargs="+")

    p = sub.add_parser("transient", help="Controller transient against a thermal schedule", parents=[common])
    p.add_argument("--duration", type=float, help="Constant-temperature run length (s)")
    p.add_argument("--temp", type=float, help="Constant temperature (C)")

    p = sub.add_parser("drift", help="Temperature ramp with and without DBO", parents=[common])
    p.add_argument("--start", type=float, help="Start temperature (C)")
    p.add_argument("--end", type=float, help="End temperature (C)")
    p.add_argument("--rate", type=float, help="Ramp rate (C/s)")

    p = sub.add_parser("accuracy", help="Tracking accuracy maps", parents=[common])
    p.add_argument("--temp", type=float, help="Temperature of the tmr0 x vh map (C)")

    p = sub.add_parser("ber", help="Monte Carlo BER for DBO and fixed biases", parents=[common])
    p.add_argument("--cells", type=int, help="Data cells evaluated per run")
    p.add_argument("--sa-sigma", type=float, help="Sense-amplifier offset sigma (A)")
    return parser


def overrides_from_args(args, cfg: ScenarioConfig) -> dict:
    o = {"seed": args.seed, "output_dir": args.out}
    cmd = args.command
    if cmd == "sweep":
        o.update({"sweep.v_min": args.v_min, "sweep.v_max": args.v_max, "sweep.points": args.points,
                  "sweep.temperature": args.temp, "sweep.vary": args.vary, "sweep.values": args.values})
    elif cmd == "transient":
        if args.duration is not None or args.temp is not None:
            sched = cfg.schedule
            temp = args.temp if args.temp is not None else sched.temperature_at(0.0)
            duration = args.duration if args.duration is not None else sched.total_duration_s
            o["schedule"] = ThermalSchedule.constant(temp, duration).model_dump()
    elif cmd == "drift":
        o.update({"drift.start_c": args.start, "drift.end_c": args.end, "drift.rate_c_per_s": args.rate})
    elif cmd == "accuracy":
        o["accuracy.temperature"] = args.temp
    elif cmd == "ber":
        o.update({"variation.n_cells": args.cells, "variation.sa_offset_sigma": args.sa_sigma})
    return o


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)

    if args.command == "vopt":
        setup_logging(args.quiet, None)
        try:
            return cmd_vopt(args)
        except (UsageError, ValueError) as e:
            logger.error(f"vopt: {e}")
            print(f"error: {e}", file=sys.stderr)
            return EXIT_USAGE

    # 1. Configuration: flag > file > environment > default
    try:
        cfg = load_config(args.config)
        cfg = apply_overrides(cfg, overrides_from_args(args, cfg))
    except (ConfigError, ValidationError) as e:
        setup_logging(args.quiet, None)
        msg = format_validation_error(e) if isinstance(e, ValidationError) else str(e)
        logger.error(f"Invalid configuration: {msg}")
        print(f"error: {msg}", file=sys.stderr)
        return EXIT_USAGE

    # 2. Logging next to the outputs, then echo the effective config
    file_handler = None
    try:
        file_handler = setup_logging(args.quiet, cfg.output_dir)
        logger.info(f"Running {args.command} -> {cfg.output_dir}")
        reporting.write_text(_out(cfg, "effective_config.json"), dump_config(cfg))

        # 3. Run
        code = COMMANDS[args.command](cfg, args)
        logger.info(f"{args.command} finished")
        return code
    except ValueError as e:
        logger.error(f"{args.command} failed: {e}")
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as e:
        logger.error(f"{args.command} I/O failure: {e}")
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as e:
        logger.error(f"{args.command} crashed: {e}", exc_info=True)
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    finally:
        if file_handler is not None:
            logging.getLogger().removeHandler(file_handler)
            file_handler.close()


if __name__ == "__main__":
    sys.exit(main())
