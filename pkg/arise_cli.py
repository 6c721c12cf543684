#!/usr/bin/env python3
"""
arise - triplet DNP simulation and ARISE pulse optimization

Subcommands:
    simulate    ensemble polarization trace for one pulse
    calibrate   cavity response factor from a Rabi-vs-detuning grid
    arise       linear sweep -> multi-sweep -> dCRAB optimization
    buildup     fit long-term build-up curves and compare them
    pulse-gen   write a pulse family to a pulse CSV
"""

import argparse
import logging
import sys
from typing import Dict, List, Optional

import numpy as np

import charts
from buildup import (
    NEVER_REACHED,
    FitError,
    compare_fits,
    fit_buildup,
    fit_report,
    load_samples,
    sensitivity,
)
from cavity import (
    CalibrationError,
    CavityError,
    FieldTrace,
    RabiGrid,
    calibrate_gamma,
    default_detunings,
    save_error_curve,
    simulate_rabi_grid,
)
from datamanager import DataManager
from ensemble import EnsembleError, ensemble_fom, load_proton_table, simulate_ensemble
from optimizer import FomJournal, OptimizerError, arise, convergence_columns
from pulses import (
    Pulse,
    PulseError,
    fitted_optimal,
    linear_sweep,
    load_pulse,
    precompensate,
    pulse_summary,
    recombine,
    save_pulse,
    sinusoidal_sweep,
    with_constant_amplitude,
)
from runconfig import LOG_LEVELS, ConfigError, RunConfig, describe, load_environment
from solver import SolverError, field_columns, hh_window
from spinsys import ParamError, mhz, to_mhz

logger = logging.getLogger("arise")

# ROYGBIV Color Scheme 🌈
COLORS = {
    "R": "\033[91m",
    "O": "\033[93m",
    "Y": "\033[93m",
    "G": "\033[92m",
    "B": "\033[94m",
    "I": "\033[95m",
    "V": "\033[95m",
    "X": "\033[0m",
    "BOLD": "\033[1m",
}

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_SOLVER = 3
EXIT_FIT = 4
EXIT_OPTIMIZER = 5

TRACE_SAMPLES = 201


def color_text(text, color_code):
    return f"{color_code}{text}{COLORS['X']}"


def build_pulse(config: RunConfig) -> Pulse:
    """Pulse selected by pulse_family"""
    omega_max = mhz(config.omega_max)
    family = config.pulse_family
    if family == "linear":
        return linear_sweep(config.sweep_spec(), config.dt, omega_max)
    if family == "sinusoidal":
        return sinusoidal_sweep(config.multi_sweep_spec(), config.dt, omega_max)
    if family == "fitted":
        return fitted_optimal(
            mhz(config.delta_max),
            config.duration / config.n_segments,
            poly_order=config.poly_order,
            slowdown_frac=config.slowdown_frac,
            n_segments=config.n_segments,
            amplitude=mhz(config.amplitude),
            dt=config.dt,
            omega_max=omega_max,
        )
    return load_pulse(config.pulse_file, omega_max)


def _finish(data: DataManager, config: RunConfig, command: str):
    config.save_config(data)
    data.write_manifest(command, config.to_text(), config.seed)
    print(color_text(f"📁 Outputs in {data.out_dir}", COLORS["B"]))


# -----------------------
# simulate
# -----------------------
def cmd_simulate(config: RunConfig, args) -> int:
    data = DataManager(config.out_dir)
    pulse = build_pulse(config)
    params = config.system_params()
    table = load_proton_table(config.table_path)
    for line in describe(config):
        logger.info(line)

    result, trace, field = simulate_ensemble(
        pulse,
        config.ensemble_spec(),
        params,
        config.cavity_params(),
        n_shots=config.n_shots,
        table=table,
        workers=config.worker_count,
        n_out=TRACE_SAMPLES,
    )

    header, cols = trace.columns()
    data.save_csv("trace.csv", header, cols)

    header, cols = field_columns(field, trace.t, pulse)
    data.save_csv("field.csv", header, cols)

    times = trace.t + field.t[0]
    lower, upper = hh_window(FieldTrace(times, field.at(times)), params.omega_L)
    delta = np.interp(trace.t + pulse.t[0], pulse.t, pulse.delta)
    data.save_csv(
        "hh_window.csv",
        ["t_us", "lower_MHz", "upper_MHz", "delta_MHz"],
        [trace.t, to_mhz(lower), to_mhz(upper), to_mhz(delta)],
    )

    summary = {
        "final_mean": result.mean,
        "final_std_err": result.std_err,
        "fom": result.to_dict(),
        "pulse": pulse_summary(pulse),
        "pulse_family": config.pulse_family,
    }
    data.save_json("summary.json", summary)

    charts.plot_trace(trace.t, trace.p_mean, data.get_file_path("trace.svg"), trace.p_nuc)
    data.track("trace.svg")
    charts.plot_field(
        trace.t,
        to_mhz(np.abs(field.at(times))),
        to_mhz(delta),
        to_mhz(lower),
        to_mhz(upper),
        data.get_file_path("field.svg"),
    )
    data.track("field.svg")

    _finish(data, config, "simulate")
    print(
        color_text(
            f"✅ Final polarization {result.mean:+.6f} ± {result.std_err:.6f} ({result.n} instances)",
            COLORS["G"],
        )
    )
    return EXIT_OK


# -----------------------
# calibrate
# -----------------------
def cmd_calibrate(config: RunConfig, args) -> int:
    data = DataManager(config.out_dir)
    params = config.system_params()
    drive = mhz(config.calib_drive)
    if args.grid:
        grid = RabiGrid.load(args.grid)
    elif args.synthesize:
        logger.info(f"🔄 Simulating a Rabi grid at gamma_cav = {config.gamma_cav:g} MHz")
        grid = simulate_rabi_grid(
            config.cavity_params(),
            default_detunings(config.calib_detunings),
            config.calib_t_max,
            params,
            n_samples=config.calib_samples,
            drive=drive,
            workers=config.worker_count,
        )
        grid.save(data.get_file_path("rabi_grid.csv"))
        data.track("rabi_grid.csv")
    else:
        raise ConfigError("calibrate needs --grid PATH or --synthesize")

    result = calibrate_gamma(
        grid,
        config.calibration_candidates(),
        params,
        t_max=config.calib_t_max,
        drive=drive,
        workers=config.worker_count,
    )
    data.save_json("calibration.json", result.to_dict())
    save_error_curve(result, data.get_file_path("error_curve.csv"))
    data.track("error_curve.csv")

    fitted = result.fitted_curve()
    charts.plot_error_curve(
        to_mhz(result.candidates),
        result.errors,
        data.get_file_path("error_curve.svg"),
        fitted,
        to_mhz(result.gamma_cav),
    )
    data.track("error_curve.svg")

    _finish(data, config, "calibrate")
    print(color_text(f"✅ gamma_cav = {to_mhz(result.gamma_cav):.3f} MHz", COLORS["G"]))
    return EXIT_OK


# -----------------------
# arise
# -----------------------
def _save_record(data: DataManager, record):
    header, cols = convergence_columns(record)
    data.save_csv("convergence.csv", header, cols)
    if record.iterations:
        charts.plot_convergence(cols[3], cols[5], cols[1], data.get_file_path("convergence.svg"))
        data.track("convergence.svg")


def cmd_arise(config: RunConfig, args) -> int:
    data = DataManager(config.out_dir)
    table = load_proton_table(config.table_path)
    fom_eval = ensemble_fom(
        config.ensemble_spec(),
        config.system_params(),
        config.cavity_params(),
        n_shots=config.n_shots,
        table=table,
        workers=config.worker_count,
    )
    journal = FomJournal(data, "record.jsonl")
    try:
        result = arise(
            config.step1_grid(),
            config.step2_n_osc,
            config.step2_tau,
            config.dcrab_config(),
            fom_eval,
            dt=config.dt,
            journal=journal,
        )
    except OptimizerError as e:
        if e.record is not None and e.record.iterations:
            _save_record(data, e.record)
            data.write_manifest("arise", config.to_text(), config.seed)
        raise

    save_pulse(result.step1.pulse, data.get_file_path("linear_winner.csv"))
    save_pulse(result.step2.pulse, data.get_file_path("multi_winner.csv"))
    save_pulse(result.step3.pulse, data.get_file_path("best_pulse.csv"))
    for name in ("linear_winner.csv", "multi_winner.csv", "best_pulse.csv"):
        data.track(name)
    _save_record(data, result.record)
    data.save_json("summary.json", result.to_dict())

    _finish(data, config, "arise")
    linear, multi, final = result.chain()
    print(
        color_text(
            f"✅ FoM linear {linear:+.6f} -> multi-sweep {multi:+.6f} -> dCRAB {final:+.6f}",
            COLORS["G"],
        )
    )
    return EXIT_OK


# -----------------------
# buildup
# -----------------------
def _named_samples(entries: List[str]) -> Dict[str, str]:
    named = {}
    for k, entry in enumerate(entries):
        name, sep, path = entry.partition("=")
        if not sep:
            name, path = f"curve{k + 1}", entry
        if name in named:
            raise ConfigError(f"duplicate build-up curve name: {name}")
        named[name] = path
    return named


def cmd_buildup(config: RunConfig, args) -> int:
    if not args.samples:
        raise ConfigError("buildup needs at least one --samples [NAME=]PATH")
    data = DataManager(config.out_dir)
    fits = {}
    curves = {}
    report = {"curves": {}}
    for name, path in _named_samples(args.samples).items():
        try:
            t, signal = load_samples(path)
        except OSError as e:
            raise ConfigError(f"cannot read samples {path}: {e}") from e
        fit = fit_buildup(t, signal)
        fits[name] = fit
        curves[name] = {"t": t, "signal": signal, "fit": fit.curve(t)}
        entry = fit_report(fit, config.buildup_gamma, config.buildup_gamma_err, config.buildup_threshold_frac)
        entry["sensitivity"] = sensitivity(fit, _sensitivity_gammas(config.buildup_gamma, fit))
        report["curves"][name] = entry

    level = args.level
    if len(fits) >= 2 or level is not None:
        comparison = compare_fits(fits, level=level, frac=config.buildup_threshold_frac)
        report["comparison"] = comparison
        for name, value in comparison["times_min"].items():
            if value == NEVER_REACHED:
                print(color_text(f"⚠️  {name}: threshold {NEVER_REACHED}", COLORS["O"]))
            else:
                print(color_text(f"🔄 {name}: {value:.1f} min to threshold", COLORS["B"]))
        if comparison["speedup"] is not None:
            print(color_text(f"✅ Speed-up factor {comparison['speedup']:.2f}", COLORS["G"]))
        level = comparison["level"]

    data.save_json("buildup_report.json", report)
    charts.plot_buildup(curves, data.get_file_path("buildup.svg"), level)
    data.track("buildup.svg")
    _finish(data, config, "buildup")
    return EXIT_OK


def _sensitivity_gammas(gamma: float, fit) -> List[float]:
    # alternative nuclear lifetimes of 200 and 180 min next to the configured one
    gammas = [gamma, 1.0 / 200.0, 1.0 / 180.0]
    return [g for g in dict.fromkeys(gammas) if g < fit.gamma_tilde]


# -----------------------
# pulse-gen
# -----------------------
def cmd_pulse_gen(config: RunConfig, args) -> int:
    data = DataManager(config.out_dir)
    pulse = build_pulse(config)
    if args.constant_amplitude is not None:
        pulse = with_constant_amplitude(pulse, mhz(args.constant_amplitude))
    if args.phase_from:
        pulse = recombine(pulse, load_pulse(args.phase_from, pulse.omega_max))
    if args.precompensate:
        pulse = precompensate(pulse, config.cavity_params())
    save_pulse(pulse, data.get_file_path(args.name))
    data.track(args.name)
    data.save_json("pulse_summary.json", pulse_summary(pulse))
    _finish(data, config, "pulse-gen")
    return EXIT_OK


COMMANDS = {
    "simulate": cmd_simulate,
    "calibrate": cmd_calibrate,
    "arise": cmd_arise,
    "buildup": cmd_buildup,
    "pulse-gen": cmd_pulse_gen,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value run configuration")
    common.add_argument("--seed", type=int, help="override the configured seed")
    common.add_argument("--workers", type=int, help="worker threads (0 = automatic)")
    common.add_argument("--out", help="output directory")
    common.add_argument("--log-level", choices=LOG_LEVELS, help="logging level")

    parser = argparse.ArgumentParser(prog="arise", description=__doc__.split("\n")[1])
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("simulate", parents=[common], help="ensemble trace for one pulse")

    p = sub.add_parser("calibrate", parents=[common], help="estimate the cavity response factor")
    p.add_argument("--grid", help="measured Rabi grid CSV")
    p.add_argument("--synthesize", action="store_true", help="simulate the grid at the configured gamma_cav")

    sub.add_parser("arise", parents=[common], help="three-step pulse optimization")

    p = sub.add_parser("buildup", parents=[common], help="fit build-up curves")
    p.add_argument("--samples", action="append", default=[], help="[NAME=]CSV with t_min, signal")
    p.add_argument("--level", type=float, help="absolute threshold for the time comparison")

    p = sub.add_parser("pulse-gen", parents=[common], help="write a pulse CSV")
    p.add_argument("--name", default="pulse.csv", help="output file name")
    p.add_argument("--precompensate", action="store_true", help="scale by the inverse cavity response")
    p.add_argument("--phase-from", help="pulse CSV whose phase replaces the generated one")
    p.add_argument("--constant-amplitude", type=float, help="fixed amplitude in MHz")
    return parser


def _exit_code(error: Exception) -> Optional[int]:
    if isinstance(error, OptimizerError):
        cause = error.__cause__
        if isinstance(cause, (SolverError, EnsembleError)):
            return EXIT_SOLVER
        return EXIT_OPTIMIZER
    if isinstance(error, (ConfigError, ParamError, PulseError, CavityError)):
        return EXIT_CONFIG
    if isinstance(error, (SolverError, EnsembleError)):
        return EXIT_SOLVER
    if isinstance(error, (FitError, CalibrationError)):
        return EXIT_FIT
    return None


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    env = load_environment()
    level = args.log_level or env.get("log_level") or "INFO"
    if level not in LOG_LEVELS:
        level = "INFO"
    logging.basicConfig(level=getattr(logging, level), format="%(asctime)s [%(levelname)s] %(message)s")

    try:
        overrides = {
            "seed": args.seed,
            "workers": args.workers if args.workers is not None else env.get("workers"),
            "out_dir": args.out,
        }
        config = RunConfig(args.config, overrides)
        return COMMANDS[args.command](config, args)
    except Exception as e:
        code = _exit_code(e)
        if code is None:
            logger.exception(f"💥 Unexpected error in {args.command}: {e}")
            raise
        logger.error(f"❌ {e}")
        print(color_text(f"❌ {args.command} failed: {e}", COLORS["R"]), file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
