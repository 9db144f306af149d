"""Result persistence: delimited series, JSON summaries, figures.

Everything written here is reproducible byte for byte: floats go out
with 17 significant digits through the C locale, JSON keys are sorted,
and figures carry fixed metadata instead of timestamps.
"""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path

import matplotlib
import numpy as np

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

from . import ems, grid, integrate  # noqa: E402
from .errors import ValidationError  # noqa: E402

SCHEMA_VERSION = 1
PNG_METADATA = {"Software": "calciflow"}
FIG_DPI = 120


def _fmt(value) -> str:
    if isinstance(value, (bool, np.bool_)):
        return "1" if value else "0"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, str):
        return value
    return format(float(value), ".17g")


def write_csv(path, columns: dict) -> Path:
    """Write named columns; order follows the dict."""
    path = Path(path)
    names = list(columns)
    arrays = [np.atleast_1d(np.asarray(columns[n])) for n in names]
    length = len(arrays[0]) if arrays else 0
    for n, a in zip(names, arrays):
        if len(a) != length:
            raise ValidationError(
                f"column {n!r} has length {len(a)}, not {length}")
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(names)
        for i in range(length):
            writer.writerow([_fmt(a[i]) for a in arrays])
    return path


def _plain(obj):
    """Recursively convert numpy containers to JSON-serializable types."""
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_plain(v) for v in obj.tolist()]
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer, int)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        if math.isnan(v):
            return None
        return v
    return obj


def write_json(path, payload) -> Path:
    path = Path(path)
    text = json.dumps(_plain(payload), sort_keys=True, indent=2)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text + "\n")
    return path


def schedule_columns(sched: ems.Schedule, fc: ems.Forecasts) -> dict:
    cols = {
        "period": np.arange(fc.horizon),
        "price": fc.price,
        "co2_intensity": fc.co2_intensity,
        "p_ehgg_mw": sched.p_ehgg,
        "p_grid_mw": sched.p_grid,
        "p_bess_mw": sched.p_bess,
        "p_pv_mw": sched.p_pv,
        "p_wind_mw": sched.p_wind,
        "soc_end_mwh": sched.soc[1:],
    }
    for bus in sorted(sched.voltages):
        cols[f"u_plan_{bus}"] = sched.voltages[bus]
    return cols


def schedule_summary(sched: ems.Schedule) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "objective": sched.objective,
        "breakdown": dict(sched.breakdown),
        "production_t": sched.production_t,
        "dt_h": sched.dt,
    }


def verifier_payload(report: dict) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "U_exact": report["U_exact"],
        "losses_mw": report["losses_mw"],
        "slack_mw": report["slack_mw"],
        "max_gap": report["max_gap"],
        "band_violation": report["band_violation"],
        "diverged": report["diverged"],
        "gap_exceeded": report["gap_exceeded"],
    }


# ---------------------------------------------------------------------------
# figures


def _save(fig, path) -> Path:
    fig.savefig(path, dpi=FIG_DPI, metadata=PNG_METADATA)
    plt.close(fig)
    return Path(path)


def schedule_figure(sched: ems.Schedule, fc: ems.Forecasts, path) -> Path:
    """Price, dispatch, and battery state over the horizon."""
    hours = np.arange(fc.horizon)
    fig, (ax_price, ax_disp, ax_soc) = plt.subplots(
        3, 1, figsize=(9.0, 7.5), sharex=True)

    ax_price.step(hours, fc.price, where="post", color="tab:red",
                  label="price")
    ax_price.set_ylabel("currency/MWh")
    ax_co2 = ax_price.twinx()
    ax_co2.step(hours, fc.co2_intensity, where="post", color="tab:gray",
                label="CO2 intensity")
    ax_co2.set_ylabel("tCO2/MWh")
    ax_price.legend(loc="upper left", fontsize=8)
    ax_co2.legend(loc="upper right", fontsize=8)

    ax_disp.step(hours, sched.p_ehgg, where="post", label="heater")
    ax_disp.step(hours, sched.p_grid, where="post", label="grid import")
    ax_disp.step(hours, sched.p_bess, where="post", label="battery (+chg)")
    if np.any(sched.p_pv > 0.0):
        ax_disp.step(hours, sched.p_pv, where="post", label="pv")
    if np.any(sched.p_wind > 0.0):
        ax_disp.step(hours, sched.p_wind, where="post", label="wind")
    ax_disp.set_ylabel("MW")
    ax_disp.legend(loc="best", fontsize=8, ncol=2)

    ax_soc.plot(np.arange(len(sched.soc)), sched.soc, drawstyle="steps-post")
    ax_soc.set_ylabel("stored MWh")
    ax_soc.set_xlabel("hour")
    fig.tight_layout()
    return _save(fig, path)


def trajectory_figure(traj: dict, settings, path) -> Path:
    """Outlet temperature against its band, heater power, and feed."""
    t_h = np.asarray(traj["t"]) / 3600.0
    fig, (ax_t, ax_p) = plt.subplots(2, 1, figsize=(9.0, 6.0), sharex=True)

    ax_t.plot(t_h, traj["T_g_out"], label="outlet gas")
    ax_t.axhline(settings.t_target, color="k", lw=0.8, ls=":")
    for edge in settings.band:
        ax_t.axhline(edge, color="tab:orange", lw=0.8, ls="--")
    ax_t.set_ylabel("K")
    ax_t.legend(loc="best", fontsize=8)

    ax_p.plot(t_h, np.asarray(traj["p_set"]) / 1e6, label="set-point",
              ls="--")
    ax_p.plot(t_h, np.asarray(traj["p_ehgg"]) / 1e6, label="heater", lw=0.9)
    ax_feed = ax_p.twinx()
    ax_feed.plot(t_h, traj["clay_feed"], color="tab:green", lw=0.9,
                 label="clay feed")
    ax_feed.set_ylabel("kg/s")
    ax_p.set_ylabel("MW")
    ax_p.set_xlabel("h")
    ax_p.legend(loc="upper left", fontsize=8)
    ax_feed.legend(loc="upper right", fontsize=8)
    fig.tight_layout()
    return _save(fig, path)


def voltage_figure(sched: ems.Schedule, verifier: dict,
                   net: grid.RadialNetwork, path) -> Path:
    """Planning vs exact squared voltages per bus."""
    hours = np.arange(len(next(iter(sched.voltages.values()))))
    fig, ax = plt.subplots(figsize=(9.0, 4.5))
    colors = plt.cm.tab10(np.linspace(0, 1, 10))
    for i, bus in enumerate(sorted(sched.voltages)):
        if bus == net.substation:
            continue
        c = colors[i % len(colors)]
        ax.plot(hours, sched.voltages[bus], color=c, lw=1.0,
                label=f"{bus} plan")
        ax.plot(hours, verifier["U_exact"][bus], color=c, lw=1.0, ls="--",
                label=f"{bus} exact")
    ax.set_xlabel("hour")
    ax.set_ylabel("U (p.u.$^2$)")
    ax.legend(loc="best", fontsize=7, ncol=3)
    fig.tight_layout()
    return _save(fig, path)


# ---------------------------------------------------------------------------
# bundles


def series_writer(fmt: str):
    if fmt == "json":
        def write(path, columns):
            return write_json(Path(path).with_suffix(".json"),
                              {"schema_version": SCHEMA_VERSION,
                               "columns": {k: np.asarray(v)
                                           for k, v in columns.items()}})
        return write
    return write_csv


def write_schedule_outputs(sched: ems.Schedule, verifier: dict,
                           fc: ems.Forecasts, outdir, fmt: str = "csv"):
    """schedule series + summary + verifier report; returns paths."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    series = series_writer(fmt)
    paths = [
        series(outdir / "schedule.csv", schedule_columns(sched, fc)),
        write_json(outdir / "schedule_summary.json", schedule_summary(sched)),
        write_json(outdir / "verifier.json", verifier_payload(verifier)),
    ]
    return paths


def write_run_bundle(res: integrate.IntegratedResult, sc: integrate.Scenario,
                     outdir, fmt: str = "csv", figures: bool = True):
    """Everything one hierarchical run produces, plus a manifest."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    paths = write_schedule_outputs(res.schedule, res.verifier, sc.forecasts,
                                   outdir, fmt)
    series = series_writer(fmt)
    if res.trajectory:
        paths.append(series(outdir / "trajectory.csv", res.trajectory))
    paths.append(write_json(outdir / "kpis.json",
                            {"schema_version": SCHEMA_VERSION, **res.kpis}))
    if figures:
        figdir = outdir / "figures"
        figdir.mkdir(exist_ok=True)
        paths.append(schedule_figure(res.schedule, sc.forecasts,
                                     figdir / "schedule.png"))
        if res.trajectory:
            paths.append(trajectory_figure(res.trajectory, sc.settings,
                                           figdir / "plant.png"))
        paths.append(voltage_figure(res.schedule, res.verifier, sc.network,
                                    figdir / "voltages.png"))
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "scenario": res.scenario_name,
        "files": sorted(str(p.relative_to(outdir)) for p in paths),
    }
    paths.append(write_json(outdir / "manifest.json", manifest))
    return paths
