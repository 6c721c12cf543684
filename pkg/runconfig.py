#!/usr/bin/env python3
"""
runconfig.py - run configuration for the arise command line

Flat ``key = value`` files. Frequencies are linear MHz, times microseconds,
build-up rates per minute. Lists are comma separated.
"""

import configparser
import logging
import os
from typing import Dict, List, Optional

from dotenv import load_dotenv

from cavity import CavityParams, default_candidates
from datamanager import DataManager
from ensemble import DEFAULT_TABLE, EnsembleError, EnsembleSpec
from optimizer import DcrabConfig, OptimizerError
from pulses import CHANNELS, MultiSweepSpec, SweepSpec, grid_specs
from spinsys import PARAM_KEYS, SystemParams, mhz, params_from_config, to_mhz

logger = logging.getLogger("runconfig")

PULSE_FAMILIES = ("linear", "sinusoidal", "fitted", "file")
LOG_LEVELS = ("DEBUG", "INFO", "WARNING", "ERROR")

DEFAULTS = {
    # paths
    "proton_table": "",
    "out_dir": "arise-out",
    # cavity (MHz)
    "gamma_cav": 9.24,
    "delta_cs": 0.0,
    "omega_max": 19.3,
    # ensemble
    "n_instances": 1000,
    "n_pick": 3,
    "pool_size": 30,
    "detuning_fwhm": 10.0,
    "fom_noise": 0.0,
    "fom_direction": 0,
    "n_shots": 1,
    "seed": 0,
    "workers": 0,
    "dt": 0.001,
    # pulse family (MHz, us)
    "pulse_family": "linear",
    "delta_max": 20.0,
    "duration": 100.0,
    "amplitude": 6.0,
    "n_osc": 8,
    "tau": 40.0,
    "poly_order": 3,
    "slowdown_frac": 0.25,
    "n_segments": 4,
    "pulse_file": "",
    # ARISE grids
    "step1_delta_max": [10.0, 20.0, 30.0],
    "step1_duration": [50.0, 100.0],
    "step2_n_osc": [2, 4, 8],
    "step2_tau": [40.0, 50.0],
    # dCRAB
    "n_super": 5,
    "n_basis": 3,
    "freq_lo": 0.01,
    "freq_hi": 2.0,
    "channels": ["phase"],
    "max_fom_evals": 120,
    "simplex_init_scale": 0.5,
    "amplitude_init_scale": 1.0,
    "noise_threshold": 1.0,
    "bandwidth_cap": 20.0,
    # calibration
    "calib_candidates": [],
    "calib_detunings": 51,
    "calib_t_max": 0.6,
    "calib_samples": 256,
    "calib_drive": 19.3,
    # build-up (1/min)
    "buildup_gamma": 1.0 / 223.0,
    "buildup_gamma_err": 0.0,
    "buildup_threshold_frac": 0.98,
}


class ConfigError(ValueError):
    pass


def _parse(key: str, text: str, default):
    text = text.strip()
    if isinstance(default, list):
        items = [x.strip() for x in text.split(",") if x.strip()]
        if key == "channels":
            return items
        if key == "step2_n_osc":
            return [int(x) for x in items]
        return [float(x) for x in items]
    if isinstance(default, str):
        return text
    if isinstance(default, int):
        return int(text)
    return float(text)


def _format(value) -> str:
    if isinstance(value, list):
        return ", ".join(str(v) for v in value)
    return str(value)


def load_environment() -> Dict[str, str]:
    """ARISE_* overrides from the process environment or a .env file"""
    load_dotenv()
    env = {}
    if os.getenv("ARISE_WORKERS"):
        env["workers"] = os.getenv("ARISE_WORKERS")
    if os.getenv("ARISE_LOG_LEVEL"):
        env["log_level"] = os.getenv("ARISE_LOG_LEVEL").upper()
    return env


class RunConfig:
    def __init__(self, config_file: Optional[str] = None, overrides: Optional[Dict] = None):
        self.config_file = config_file
        self.params: Dict[str, str] = {}
        self.load_config(overrides or {})
        self.validate_config()

    def load_config(self, overrides: Dict):
        values = dict(DEFAULTS)
        raw: Dict[str, str] = {}
        if self.config_file:
            try:
                raw = DataManager.read_kv(self.config_file)
            except FileNotFoundError as e:
                raise ConfigError(str(e)) from e
            except configparser.Error as e:
                raise ConfigError(f"{self.config_file}: {e}") from e

        unknown = sorted(set(raw) - set(DEFAULTS) - set(PARAM_KEYS))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")

        self.params = {k: v for k, v in raw.items() if k in PARAM_KEYS}
        for key, text in raw.items():
            if key in PARAM_KEYS:
                continue
            try:
                values[key] = _parse(key, text, DEFAULTS[key])
            except ValueError as e:
                raise ConfigError(f"bad value for {key}: {text!r} ({e})") from e

        for key, value in overrides.items():
            if value is None:
                continue
            if key not in DEFAULTS:
                raise ConfigError(f"unknown override: {key}")
            try:
                values[key] = _parse(key, str(value), DEFAULTS[key]) if isinstance(value, str) else value
            except ValueError as e:
                raise ConfigError(f"bad value for {key}: {value!r} ({e})") from e

        for key, value in values.items():
            setattr(self, key, value)

    def validate_config(self):
        """Validate all configuration values"""
        if self.pulse_family not in PULSE_FAMILIES:
            raise ConfigError(f"pulse_family must be one of {PULSE_FAMILIES}, got {self.pulse_family!r}")
        if self.pulse_family == "file" and not self.pulse_file:
            raise ConfigError("pulse_family = file needs pulse_file")
        for key in ("proton_table", "pulse_file"):
            path = getattr(self, key)
            if path and not os.path.exists(path):
                raise ConfigError(f"{key} not found: {path}")
        if any(c not in CHANNELS for c in self.channels):
            raise ConfigError(f"channels must be a subset of {CHANNELS}, got {self.channels}")
        if self.workers < 0:
            raise ConfigError(f"workers must be >= 0, got {self.workers}")
        if self.n_shots < 1:
            raise ConfigError(f"n_shots must be >= 1, got {self.n_shots}")
        if not self.dt > 0:
            raise ConfigError(f"dt must be > 0, got {self.dt}")
        if not 0 < self.buildup_threshold_frac < 1:
            raise ConfigError("buildup_threshold_frac must lie in (0, 1)")
        if self.calib_samples < 4 or self.calib_detunings < 1:
            raise ConfigError("calib_samples must be >= 4 and calib_detunings >= 1")
        if not (self.step1_delta_max and self.step1_duration):
            raise ConfigError("step1_delta_max and step1_duration must not be empty")
        try:
            self.system_params()
            self.cavity_params()
            self.ensemble_spec()
            self.dcrab_config()
        except (ValueError, EnsembleError, OptimizerError) as e:
            raise ConfigError(str(e)) from e

    # -----------------------
    # Domain objects
    # -----------------------
    @property
    def worker_count(self) -> Optional[int]:
        return self.workers or None

    @property
    def table_path(self) -> str:
        return self.proton_table or DEFAULT_TABLE

    def system_params(self) -> SystemParams:
        return params_from_config(self.params)

    def cavity_params(self) -> CavityParams:
        return CavityParams(mhz(self.gamma_cav), mhz(self.delta_cs))

    def ensemble_spec(self) -> EnsembleSpec:
        return EnsembleSpec(
            n_instances=self.n_instances,
            n_pick=self.n_pick,
            pool_size=self.pool_size,
            detuning_fwhm=mhz(self.detuning_fwhm),
            seed=self.seed,
            fom_noise=self.fom_noise,
            fom_direction=self.fom_direction,
        )

    def dcrab_config(self) -> DcrabConfig:
        return DcrabConfig(
            n_super=self.n_super,
            n_basis=self.n_basis,
            freq_interval=(mhz(self.freq_lo), mhz(self.freq_hi)),
            channels=tuple(self.channels),
            max_fom_evals=self.max_fom_evals,
            simplex_init_scale=self.simplex_init_scale,
            amplitude_init_scale=mhz(self.amplitude_init_scale),
            seed=self.seed,
            noise_threshold=self.noise_threshold,
            bandwidth_cap=mhz(self.bandwidth_cap),
        )

    def sweep_spec(self) -> SweepSpec:
        return SweepSpec(mhz(self.delta_max), self.duration, mhz(self.amplitude))

    def multi_sweep_spec(self) -> MultiSweepSpec:
        return MultiSweepSpec(mhz(self.delta_max), self.n_osc, self.tau, mhz(self.amplitude))

    def step1_grid(self):
        return grid_specs([mhz(d) for d in self.step1_delta_max], self.step1_duration, mhz(self.amplitude))

    def calibration_candidates(self):
        if not self.calib_candidates:
            return default_candidates()
        return mhz(sorted(self.calib_candidates))

    # -----------------------
    # Files
    # -----------------------
    def items(self) -> Dict[str, str]:
        items = {key: _format(getattr(self, key)) for key in DEFAULTS}
        items.update(self.params)
        return items

    def to_text(self) -> str:
        """Canonical text, hashed into the manifest"""
        return "".join(f"{k} = {v}\n" for k, v in sorted(self.items().items()))

    def save_config(self, data: DataManager, filename: str = "run.cfg"):
        return data.save_kv(filename, self.items())


def describe(config: RunConfig) -> List[str]:
    """Short human-readable summary lines"""
    params = config.system_params()
    return [
        f"pulse family: {config.pulse_family}",
        f"ensemble: {config.n_instances} instances, {config.n_pick} of {config.pool_size} nuclei",
        f"cavity: gamma={config.gamma_cav:g} MHz, delta_cs={config.delta_cs:g} MHz",
        f"electron: D={to_mhz(params.zfs.D):g} MHz, B0={params.zfs.B0:g} mT",
    ]
