"""Command-line front end.

Subcommands: schedule (LP + verifier), simulate (schedule + tracked plant
run, series output), powerflow (one exact sweep on the scenario network),
run (full bundle with figures), calibrate-kappa (steady-state fit).

Exit codes: 0 success, 2 validation problem, 3 solver failure.  Solver
failures still write an error report (with any certificate) into the
output directory.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import ems, grid, integrate, report
from .errors import CalciflowError, StageError, ValidationError

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_SOLVER = 3


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="calciflow",
        description="Clay calcination loop simulation and grid-aware "
                    "electricity scheduling")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_default="out"):
        p.add_argument("--scenario", type=Path,
                       default=integrate.default_scenario_path(),
                       help="scenario JSON (default: shipped desk case)")
        p.add_argument("--out", type=Path, default=Path(out_default),
                       help="output directory (created if missing)")
        p.add_argument("--horizon", type=int, default=None, metavar="H",
                       help="only schedule the first H periods "
                            "(production target is pro-rated)")
        p.add_argument("--format", choices=("csv", "json"), default="csv",
                       help="series file format")

    p = sub.add_parser("schedule", help="solve the scheduling LP and verify "
                                        "it against exact power flow")
    common(p)

    p = sub.add_parser("simulate", help="schedule, then track the set-points "
                                        "with the dynamic plant model")
    common(p)
    p.add_argument("--dt", type=float, default=None, metavar="S",
                   help="simulation step in seconds")

    p = sub.add_parser("run", help="full bundle: schedule, verifier, "
                                   "simulation, KPIs, figures")
    common(p)
    p.add_argument("--dt", type=float, default=None, metavar="S")

    p = sub.add_parser("powerflow", help="one exact power-flow solve at a "
                                         "chosen forecast period")
    common(p)
    p.add_argument("--period", type=int, default=0,
                   help="forecast period for the fixed loads (default 0)")

    p = sub.add_parser("calibrate-kappa",
                       help="fit clay yield per MWh from steady-state runs")
    common(p)
    p.add_argument("--powers", type=str, default=None, metavar="MW,MW,...",
                   help="comma-separated heater power levels in MW")
    p.add_argument("--dt", type=float, default=None, metavar="S")
    return parser


def _scenario(args) -> integrate.Scenario:
    return integrate.load_scenario(args.scenario, horizon=args.horizon,
                                   dt_sim=getattr(args, "dt", None))


def cmd_schedule(args) -> int:
    sc = _scenario(args)
    lp = ems.build_schedule_lp(sc.network, sc.forecasts, sc.devices)
    sched = ems.extract_schedule(ems.solve_lp(lp), lp, sc.network,
                                 sc.forecasts, sc.devices)
    verifier = ems.verify_schedule_ac(sched, sc.network, sc.forecasts,
                                      sc.devices, gap_tol=sc.gap_tol)
    report.write_schedule_outputs(sched, verifier, sc.forecasts, args.out,
                                  args.format)
    print(f"objective {sched.objective:.6g}, production "
          f"{sched.production_t:.6g} t, outputs in {args.out}")
    return EXIT_OK


def cmd_simulate(args) -> int:
    sc = _scenario(args)
    res = integrate.run_hierarchical(sc)
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    series = report.series_writer(args.format)
    series(outdir / "trajectory.csv", res.trajectory)
    report.write_json(outdir / "summary.json",
                      {"schema_version": report.SCHEMA_VERSION,
                       "scenario": res.scenario_name, **res.kpis})
    print(f"simulated {res.kpis['sim_duration_h']:.3g} h, clay "
          f"{res.kpis['clay_t']:.6g} t, outputs in {outdir}")
    return EXIT_OK


def cmd_run(args) -> int:
    sc = _scenario(args)
    res = integrate.run_hierarchical(sc)
    report.write_run_bundle(res, sc, args.out, args.format)
    print(f"objective {res.schedule.objective:.6g}, clay "
          f"{res.kpis['clay_t']:.6g} t, band violations "
          f"{res.kpis['band_violation_min']:.6g} min, bundle in {args.out}")
    return EXIT_OK


def cmd_powerflow(args) -> int:
    sc = _scenario(args)
    fc = sc.forecasts
    t = args.period
    if not 0 <= t < fc.horizon:
        raise ValidationError(f"--period {t} outside 0..{fc.horizon - 1}")
    base = sc.network.base_mva
    withdrawals = {}
    for bus in sc.network.bus_ids:
        p = float(fc.load_p.get(bus, np.zeros(fc.horizon))[t])
        q = float(fc.load_q.get(bus, np.zeros(fc.horizon))[t])
        if bus == sc.devices.ehgg.bus:
            p += sc.devices.ehgg.p_max  # heater flat out: the stress case
        if p != 0.0 or q != 0.0:
            withdrawals[bus] = (p / base, q / base)
    sol = grid.solve_power_flow(sc.network, withdrawals)
    residuals = grid.branch_flow_residuals(sc.network, sol, withdrawals)
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    payload = {
        "schema_version": report.SCHEMA_VERSION,
        "period": t,
        "withdrawals_pu": {b: list(w) for b, w in withdrawals.items()},
        "U": sol.U, "P": {f"{i}->{j}": v for (i, j), v in sol.P.items()},
        "Q": {f"{i}->{j}": v for (i, j), v in sol.Q.items()},
        "l": {f"{i}->{j}": v for (i, j), v in sol.l.items()},
        "slack_injection_pu": [sol.injection_p[sc.network.substation],
                               sol.injection_q[sc.network.substation]],
        "losses_pu": sol.losses(sc.network),
        "sweeps": sol.sweeps,
        "residual_inf_norm": float(np.max(np.abs(residuals))),
    }
    report.write_json(outdir / "powerflow.json", payload)
    print(f"converged in {sol.sweeps} sweeps, residual inf-norm "
          f"{payload['residual_inf_norm']:.3e}, output in {outdir}")
    return EXIT_OK


def cmd_calibrate(args) -> int:
    sc = _scenario(args)
    if args.powers is not None:
        powers = tuple(float(s) for s in args.powers.split(","))
    else:
        powers = (0.9, 1.05, 1.2)
    fit = integrate.calibrate_kappa(sc, powers_mw=powers)
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    report.write_json(outdir / "kappa.json",
                      {"schema_version": report.SCHEMA_VERSION, **fit})
    print(f"kappa = {fit['kappa_t_per_mwh']:.6g} t/MWh "
          f"(rms residual {fit['residual_rms_t_per_h']:.3g} t/h), "
          f"output in {outdir}")
    return EXIT_OK


COMMANDS = {
    "schedule": cmd_schedule,
    "simulate": cmd_simulate,
    "run": cmd_run,
    "powerflow": cmd_powerflow,
    "calibrate-kappa": cmd_calibrate,
}


def _write_error(args, exc: Exception) -> None:
    try:
        outdir = Path(args.out)
        outdir.mkdir(parents=True, exist_ok=True)
        payload = {"error": str(exc), "type": type(exc).__name__}
        if isinstance(exc, StageError):
            payload["stage"] = exc.stage
            exc = exc.__cause__ or exc
            payload["cause"] = type(exc).__name__
        certificate = getattr(exc, "certificate", None)
        if certificate:
            payload["certificate"] = certificate
        ray = getattr(exc, "ray", None)
        if ray is not None:
            payload["ray"] = np.asarray(ray)
        report.write_json(outdir / "error.json", payload)
    except OSError:
        pass  # diagnostics still go to stderr


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except StageError as exc:
        if isinstance(exc.__cause__, ValidationError):
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_VALIDATION
        print(f"error: {exc}", file=sys.stderr)
        _write_error(args, exc)
        return EXIT_SOLVER
    except CalciflowError as exc:
        print(f"error: {exc}", file=sys.stderr)
        _write_error(args, exc)
        return EXIT_SOLVER


if __name__ == "__main__":
    sys.exit(main())
