import csv
import io
import logging
import os
import tempfile
from typing import Dict, Iterable, List, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
from jinja2 import Environment, FileSystemLoader, StrictUndefined  # noqa: E402

from src.engine import AccuracyPoint, TemperaturePoint, Trace, VoptShiftRow  # noqa: E402
from src.variation import BerResult, OperationBer  # noqa: E402

logger = logging.getLogger(__name__)

TEMPLATES_DIR = os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), "templates")

TRACE_HEADER = ["cycle", "time_s", "temp_c", "v_ref", "v_m", "v_s", "flip", "coarse",
                "pump_cmd", "v_opt", "margin_a"]
SWEEP_HEADER = ["v_volts", "margin_a"]
VOPT_SHIFT_HEADER = ["parameter", "value", "v_opt_grid", "v_opt_closed_form"]
DRIFT_MARGIN_HEADER = ["cycle", "time_s", "temp_c", "margin_dbo_a", "margin_fixed_a"]
ACCURACY_MAP_HEADER = ["tmr0", "vh", "accuracy"]
ACCURACY_TEMP_HEADER = ["temp_c", "v_opt", "v_ref_mean", "accuracy"]
BER_HEADER = ["mode", "v_read", "temp_c", "sigma_mu_tmr0", "sigma_mu_vh", "ber", "stderr", "n_cells"]
OPERATION_BER_HEADER = ["mode", "v_read", "sigma_mu_tmr0", "sigma_mu_vh", "operation_ber"]

_env = Environment(
    loader=FileSystemLoader(TEMPLATES_DIR),
    undefined=StrictUndefined,
    keep_trailing_newline=True,
)


def fmt(x) -> str:
    """CSV cell text; floats keep 12 significant digits, booleans become 0/1."""
    if x is None:
        return ""
    if isinstance(x, bool):
        return "1" if x else "0"
    if isinstance(x, float):
        return f"{x:.12g}"
    if hasattr(x, "value"):
        return str(x.value)
    return str(x)


def _atomic_write(path: str, text: str) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.remove(tmp)
        raise


def write_text(path: str, text: str) -> str:
    _atomic_write(path, text)
    logger.info(f"Wrote {path}")
    return path


def write_csv(path: str, header: Sequence[str], rows: Iterable[Sequence]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows([fmt(x) for x in row] for row in rows)
    return write_text(path, buf.getvalue())


def read_csv(path: str) -> List[Dict[str, str]]:
    with open(path, "r", encoding="utf-8", newline="") as f:
        return list(csv.DictReader(f))


def trace_rows(trace: Trace) -> List[list]:
    return [
        [r.cycle, r.time_s, r.temperature, r.v_ref, r.v_m, r.v_s, r.flip, r.coarse,
         r.pump_cmd, r.v_opt, r.margin_a]
        for r in trace.rows
    ]


def write_trace(path: str, trace: Trace) -> str:
    return write_csv(path, TRACE_HEADER, trace_rows(trace))


def write_sweep(path: str, rows) -> str:
    return write_csv(path, SWEEP_HEADER, rows)


def write_vopt_shift(path: str, rows: Sequence[VoptShiftRow]) -> str:
    return write_csv(path, VOPT_SHIFT_HEADER,
                     [[r.parameter, r.value, r.v_opt_grid, r.v_opt_closed_form] for r in rows])


def write_drift_margins(path: str, trace: Trace, fixed: Sequence[float]) -> str:
    rows = [[r.cycle, r.time_s, r.temperature, r.margin_a, m] for r, m in zip(trace.rows, fixed)]
    return write_csv(path, DRIFT_MARGIN_HEADER, rows)


def write_accuracy_map(path: str, points: Sequence[AccuracyPoint]) -> str:
    return write_csv(path, ACCURACY_MAP_HEADER, [[p.tmr0, p.vh, p.accuracy] for p in points])


def write_accuracy_temp(path: str, points: Sequence[TemperaturePoint]) -> str:
    return write_csv(path, ACCURACY_TEMP_HEADER,
                     [[p.temp_c, p.v_opt, p.v_ref_mean, p.accuracy] for p in points])


def write_ber(path: str, results: Sequence[BerResult]) -> str:
    rows = [[r.mode.label, r.v_read, r.temp_c, r.sigma_mu_tmr0, r.sigma_mu_vh, r.ber, r.stderr,
             r.n_cells_evaluated] for r in results]
    return write_csv(path, BER_HEADER, rows)


def write_operation_ber(path: str, rows: Sequence[OperationBer]) -> str:
    return write_csv(path, OPERATION_BER_HEADER,
                     [[r.mode, r.v_read, r.sigma_mu_tmr0, r.sigma_mu_vh, r.operation_ber] for r in rows])


def render(template_name: str, **context) -> str:
    return _env.get_template(template_name).render(**context)


def write_report(path: str, template_name: str, **context) -> str:
    return write_text(path, render(template_name, **context))


# Plots below read CSV files only; they never see simulation objects.

def _save(fig, path: str) -> str:
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    logger.info(f"Wrote {path}")
    return path


def _col(rows: List[Dict[str, str]], name: str) -> List[float]:
    return [float(r[name]) for r in rows]


def plot_sweeps(csv_paths: Sequence[str], labels: Sequence[str], out_path: str) -> str:
    fig, ax = plt.subplots(figsize=(6, 4))
    for path, label in zip(csv_paths, labels):
        rows = read_csv(path)
        ax.plot(_col(rows, "v_volts"), [m * 1e6 for m in _col(rows, "margin_a")], label=label)
    ax.set_xlabel("Read bias (V)")
    ax.set_ylabel("Sensing margin (uA)")
    if len(csv_paths) > 1:
        ax.legend()
    return _save(fig, out_path)


def plot_trace(csv_path: str, out_path: str) -> str:
    rows = read_csv(csv_path)
    t_us = [t * 1e6 for t in _col(rows, "time_s")]
    fig, (ax_v, ax_m) = plt.subplots(2, 1, figsize=(7, 5), sharex=True)
    ax_v.step(t_us, _col(rows, "v_ref"), where="post", label="V_REF")
    ax_v.plot(t_us, _col(rows, "v_opt"), "--", label="V_OPT")
    ax_v.set_ylabel("Bias (V)")
    ax_v.legend()
    ax_m.plot(t_us, _col(rows, "v_m"), label="V_M")
    ax_m.set_ylabel("V_M (V)")
    ax_m.set_xlabel("Time (us)")
    return _save(fig, out_path)


def plot_drift(csv_path: str, out_path: str) -> str:
    rows = read_csv(csv_path)
    t_us = [t * 1e6 for t in _col(rows, "time_s")]
    fig, (ax_t, ax_m) = plt.subplots(2, 1, figsize=(7, 5), sharex=True)
    ax_t.plot(t_us, _col(rows, "temp_c"))
    ax_t.set_ylabel("Temperature (C)")
    ax_m.plot(t_us, [m * 1e6 for m in _col(rows, "margin_dbo_a")], label="with DBO")
    ax_m.plot(t_us, [m * 1e6 for m in _col(rows, "margin_fixed_a")], "--", label="fixed bias")
    ax_m.set_ylabel("Sensing margin (uA)")
    ax_m.set_xlabel("Time (us)")
    ax_m.legend()
    return _save(fig, out_path)


def plot_accuracy_map(csv_path: str, out_path: str) -> str:
    rows = read_csv(csv_path)
    tmr0s = sorted(set(_col(rows, "tmr0")))
    vhs = sorted(set(_col(rows, "vh")))
    grid = [[0.0] * len(tmr0s) for _ in vhs]
    for r in rows:
        grid[vhs.index(float(r["vh"]))][tmr0s.index(float(r["tmr0"]))] = float(r["accuracy"]) * 100
    fig, ax = plt.subplots(figsize=(6, 4))
    mesh = ax.pcolormesh(tmr0s, vhs, grid, shading="nearest")
    fig.colorbar(mesh, ax=ax, label="Tracking accuracy (%)")
    ax.set_xlabel("TMR(0)")
    ax.set_ylabel("V_h (V)")
    return _save(fig, out_path)


def plot_ber(csv_path: str, out_path: str) -> str:
    rows = read_csv(csv_path)
    fig, ax = plt.subplots(figsize=(6, 4))
    series: Dict[str, List[Dict[str, str]]] = {}
    for r in rows:
        key = f"{r['mode']} {float(r['temp_c']):g} C"
        if r["mode"] != "DBO":
            key = f"FIXED {float(r['v_read']):.3f} V, {float(r['temp_c']):g} C"
        series.setdefault(key, []).append(r)
    for label, rs in series.items():
        ber = _col(rs, "ber")
        if any(b > 0 for b in ber):
            ax.semilogy([s * 100 for s in _col(rs, "sigma_mu_tmr0")], ber, "o-", label=label)
    ax.set_xlabel("sigma/mu (%)")
    ax.set_ylabel("BER")
    ax.legend(fontsize="small")
    return _save(fig, out_path)


def plot_accuracy_temp(csv_path: str, out_path: str) -> str:
    rows = read_csv(csv_path)
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(_col(rows, "temp_c"), [a * 100 for a in _col(rows, "accuracy")], "o-")
    ax.set_xlabel("Temperature (C)")
    ax.set_ylabel("Tracking accuracy (%)")
    return _save(fig, out_path)
