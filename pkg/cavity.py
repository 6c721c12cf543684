#!/usr/bin/env python3
"""
cavity.py

First-order cavity response between the applied drive and the field seen
by the electron, and calibration of the response factor from Rabi
spectra recorded over a range of cavity detunings.

The response ODE

    dOmega_int/dt = gamma (Omega_ext e^{-i phi} - Omega_int) - i delta_cs Omega_int

is linear with constant coefficients, so it is solved exactly for a drive
that is piecewise linear between samples (first-order hold) and applied
as a two-tap IIR filter.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.optimize import curve_fit
from scipy.signal import lfilter, lfiltic

from datamanager import DataManager
from pulses import OMEGA_MAX, Pulse, check_uniform, time_grid
from spinsys import TWO_PI, HyperfineTensor, SystemParams, mhz, to_mhz

logger = logging.getLogger("cavity")

DEFAULT_GAMMA_CAV = TWO_PI * 9.24
DEFAULT_T_MAX = 0.6
DEFAULT_SAMPLES = 256
DEFAULT_CALIB_DRIVE = OMEGA_MAX
MIN_CANDIDATES = 4


class CavityError(ValueError):
    """Bad cavity inputs (parameters, grids, candidate lists)"""


class CalibrationError(RuntimeError):
    """The error-curve fit did not converge"""


@dataclass(frozen=True)
class CavityParams:
    gamma_cav: float = DEFAULT_GAMMA_CAV
    delta_cs: float = 0.0

    def __post_init__(self):
        if not (math.isfinite(self.gamma_cav) and self.gamma_cav > 0):
            raise CavityError(f"gamma_cav must be finite and > 0, got {self.gamma_cav}")
        if not math.isfinite(self.delta_cs):
            raise CavityError(f"delta_cs must be finite, got {self.delta_cs}")


@dataclass(frozen=True, eq=False)
class FieldTrace:
    """Intracavity field Omega_int (complex, rad/us) on a uniform grid"""

    t: np.ndarray
    omega_int: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.t, dtype=float)
        omega = np.asarray(self.omega_int, dtype=complex)
        if t.shape != omega.shape:
            raise CavityError(f"t and omega_int differ in shape: {t.shape} vs {omega.shape}")
        check_uniform(t, "field grid")
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "omega_int", omega)

    @property
    def dt(self) -> float:
        return (self.t[-1] - self.t[0]) / (self.t.size - 1)

    @property
    def duration(self) -> float:
        return self.t[-1] - self.t[0]

    def at(self, times) -> np.ndarray:
        """Linear interpolation of the complex field"""
        times = np.asarray(times, dtype=float)
        return np.interp(times, self.t, self.omega_int.real) + 1j * np.interp(
            times, self.t, self.omega_int.imag
        )

    def spline(self) -> CubicSpline:
        """Cubic spline through the samples; columns are (Re, Im)"""
        return CubicSpline(self.t, np.column_stack([self.omega_int.real, self.omega_int.imag]))

    @classmethod
    def constant(cls, value: complex, duration: float, dt: float = 1e-3) -> "FieldTrace":
        t = time_grid(duration, dt)
        return cls(t, np.full(t.shape, complex(value)))


def _hold_coefficients(cav: CavityParams, h: float) -> Tuple[np.ndarray, np.ndarray]:
    """Exact discretization of the response ODE for a linearly varying drive"""
    lam = complex(cav.gamma_cav, cav.delta_cs)
    z = lam * h
    decay = np.exp(-z)
    i0 = -np.expm1(-z) / lam
    if abs(z) < 1e-4:
        j = h * h * (0.5 - z / 3.0 + z * z / 8.0)
    else:
        j = (-np.expm1(-z) - z * decay) / (lam * lam)
    k = h * i0 - j
    b = np.array([cav.gamma_cav * k / h, cav.gamma_cav * (i0 - k / h)], dtype=complex)
    a = np.array([1.0, -decay], dtype=complex)
    return b, a


def _filter_samples(u: np.ndarray, cav: CavityParams, h: float) -> np.ndarray:
    b, a = _hold_coefficients(cav, h)
    out = np.zeros(u.shape, dtype=complex)
    if u.size > 1:
        zi = lfiltic(b, a, y=[0.0], x=[u[0]])
        out[1:], _ = lfilter(b, a, u[1:], zi=zi)
    return out


def filter_pulse(pulse: Pulse, cav: CavityParams, dt_out: Optional[float] = None) -> FieldTrace:
    """Intracavity field for an applied pulse, Omega_int(0) = 0.

    With ``dt_out`` unset the field shares the pulse grid. Otherwise the
    drive is resampled (linearly) onto the finer of the two spacings and the
    result is returned on a grid with spacing ``dt_out``.
    """
    if not (np.all(np.isfinite(pulse.omega_ext)) and np.all(np.isfinite(pulse.phi_ext))):
        raise CavityError("pulse has non-finite samples")
    u = pulse.drive()
    if dt_out is None or math.isclose(dt_out, pulse.dt, rel_tol=1e-12):
        return FieldTrace(pulse.t, _filter_samples(u, cav, pulse.dt))

    if dt_out <= 0:
        raise CavityError(f"dt_out must be > 0, got {dt_out}")
    fine = time_grid(pulse.duration, min(dt_out, pulse.dt)) + pulse.t[0]
    u_fine = np.interp(fine, pulse.t, u.real) + 1j * np.interp(fine, pulse.t, u.imag)
    trace = FieldTrace(fine, _filter_samples(u_fine, cav, (fine[-1] - fine[0]) / (fine.size - 1)))
    out_t = time_grid(pulse.duration, dt_out) + pulse.t[0]
    return FieldTrace(out_t, trace.at(out_t))


def steady_state(omega_ext: float, phi: float, cav: CavityParams) -> complex:
    return cav.gamma_cav * omega_ext * np.exp(-1j * phi) / complex(cav.gamma_cav, cav.delta_cs)


# -----------------------
# Rabi spectra and calibration
# -----------------------
def default_detunings(n: int = 51, span: float = TWO_PI * 25.0) -> np.ndarray:
    return np.linspace(-span, span, n)


def default_candidates() -> np.ndarray:
    return mhz(np.arange(5.0, 14.0 + 1e-9, 0.5))


@dataclass(frozen=True, eq=False)
class RabiGrid:
    """|DFT| of the electron population: one row per cavity detuning"""

    detunings: np.ndarray
    freqs: np.ndarray
    spectra: np.ndarray

    def __post_init__(self):
        if self.spectra.shape != (len(self.detunings), len(self.freqs)):
            raise CavityError(
                f"spectra shape {self.spectra.shape} does not match "
                f"{len(self.detunings)} detunings x {len(self.freqs)} frequencies"
            )

    def save(self, path: str):
        """CSV: first row frequency axis (MHz), first column detuning axis (MHz)"""
        body = np.column_stack([to_mhz(self.detunings), self.spectra])
        head = np.concatenate([[np.nan], self.freqs])
        np.savetxt(path, np.vstack([head, body]), delimiter=",", fmt="%.12g")

    @classmethod
    def load(cls, path: str) -> "RabiGrid":
        data = np.loadtxt(path, delimiter=",", ndmin=2)
        if data.shape[0] < 2 or data.shape[1] < 2:
            raise CavityError(f"{path}: spectrum grid needs an axis row, an axis column and a body")
        return cls(mhz(data[1:, 0]), data[0, 1:].copy(), data[1:, 1:].copy())


def calibration_params(params: SystemParams) -> SystemParams:
    """One uncoupled nucleus, electron on resonance"""
    return params.with_nuclei((HyperfineTensor(),), delta_es=0.0)


def _rabi_column(
    delta_cs: float,
    cav_candidate: CavityParams,
    params: SystemParams,
    t_max: float,
    n_samples: int,
    drive: float,
) -> np.ndarray:
    # Import here to avoid circular imports
    from solver import initial_state, propagate

    t = np.linspace(0.0, t_max, n_samples)
    pulse = Pulse(t, np.full(n_samples, drive), np.zeros(n_samples), omega_max=max(drive, OMEGA_MAX))
    cav = replace(cav_candidate, delta_cs=float(delta_cs))
    trace, _ = propagate(initial_state(params), pulse, params, cav, n_out=n_samples)
    signal = trace.pop_electron[:, 0]
    return np.abs(np.fft.rfft(signal - signal.mean()))


def simulate_rabi_grid(
    cav_candidate: CavityParams,
    detunings: Sequence[float] = None,
    t_max: float = DEFAULT_T_MAX,
    params: Optional[SystemParams] = None,
    n_samples: int = DEFAULT_SAMPLES,
    drive: float = DEFAULT_CALIB_DRIVE,
    workers: Optional[int] = None,
) -> RabiGrid:
    """Rabi spectrum for each cavity detuning under a constant resonant drive"""
    detunings = default_detunings() if detunings is None else np.asarray(detunings, dtype=float)
    if detunings.size == 0:
        raise CavityError("detuning list is empty")
    if n_samples < 4:
        raise CavityError(f"need at least 4 samples, got {n_samples}")
    params = calibration_params(params or SystemParams())

    def column(delta_cs):
        return _rabi_column(delta_cs, cav_candidate, params, t_max, n_samples, drive)

    with ThreadPoolExecutor(max_workers=workers) as pool:
        rows = list(pool.map(column, detunings))
    freqs = np.fft.rfftfreq(n_samples, d=t_max / (n_samples - 1))
    logger.debug(
        f"Rabi grid at gamma_cav={to_mhz(cav_candidate.gamma_cav):.3f} MHz, {detunings.size} detunings"
    )
    return RabiGrid(detunings, freqs, np.array(rows))


def rabi_peaks(grid: RabiGrid) -> np.ndarray:
    """Peak frequency (MHz) of every row, skipping the zero bin when it has neighbours"""
    if grid.freqs.size > 1:
        return grid.freqs[1 + np.argmax(grid.spectra[:, 1:], axis=1)]
    return grid.freqs[np.argmax(grid.spectra, axis=1)]


def overlap_error(measured: np.ndarray, simulated: np.ndarray) -> float:
    """Summed absolute difference of the sum-normalized grids"""
    if measured.shape != simulated.shape:
        raise CavityError(f"grid shape mismatch: {measured.shape} vs {simulated.shape}")
    m_total = np.sum(measured)
    s_total = np.sum(simulated)
    m = measured / m_total if m_total > 0 else measured
    s = simulated / s_total if s_total > 0 else simulated
    return float(np.sum(np.abs(m - s)))


def _inverted_gaussian(g, c0, c1, mu, s):
    return c0 - c1 * np.exp(-((g - mu) ** 2) / (2.0 * s * s))


@dataclass(frozen=True, eq=False)
class CalibrationResult:
    gamma_cav: float
    candidates: np.ndarray
    errors: np.ndarray
    fit_params: Tuple[float, float, float, float]
    fit_ok: bool = True
    notes: List[str] = field(default_factory=list)

    def fitted_curve(self, gammas=None) -> np.ndarray:
        gammas = self.candidates if gammas is None else np.asarray(gammas, dtype=float)
        return _inverted_gaussian(gammas, *self.fit_params)

    def to_dict(self):
        c0, c1, mu, s = self.fit_params
        return {
            "gamma_cav_MHz": to_mhz(self.gamma_cav),
            "candidates_MHz": [float(to_mhz(c)) for c in self.candidates],
            "errors": [float(e) for e in self.errors],
            "fit": {
                "offset": float(c0),
                "depth": float(c1),
                "center_MHz": float(to_mhz(mu)),
                "width_MHz": float(to_mhz(abs(s))),
            },
            "fit_ok": self.fit_ok,
            "best_sample_MHz": float(to_mhz(self.candidates[int(np.argmin(self.errors))])),
            "notes": list(self.notes),
        }


def fit_error_curve(candidates: np.ndarray, errors: np.ndarray) -> Tuple[float, Tuple]:
    """Gaussian-dip fit of error vs gamma; returns the fitted minimum location"""
    i_min = int(np.argmin(errors))
    span = float(candidates[-1] - candidates[0])
    guess = (
        float(np.max(errors)),
        float(np.max(errors) - np.min(errors)),
        float(candidates[i_min]),
        span / 4.0 if span > 0 else 1.0,
    )
    try:
        popt, _ = curve_fit(_inverted_gaussian, candidates, errors, p0=guess, maxfev=5000)
    except (RuntimeError, ValueError) as e:
        raise CalibrationError(f"Gaussian fit of the error curve failed: {e}") from e
    if not np.all(np.isfinite(popt)):
        raise CalibrationError(f"Gaussian fit returned non-finite parameters: {popt}")
    return float(popt[2]), tuple(float(p) for p in popt)


def _sample_count(freqs: np.ndarray, t_max: float) -> int:
    """Number of time samples whose rfft axis over t_max is ``freqs``"""
    for n in (2 * (freqs.size - 1), 2 * freqs.size - 1):
        if n < 4:
            continue
        expected = np.fft.rfftfreq(n, d=t_max / (n - 1))
        if np.allclose(freqs, expected, rtol=1e-6, atol=1e-9):
            return n
    raise CavityError(
        f"measured frequency axis ({freqs.size} bins) is not the spectrum of a "
        f"uniform record over {t_max:g} us"
    )


def calibrate_gamma(
    measured_grid: RabiGrid,
    candidates: Sequence[float] = None,
    params: Optional[SystemParams] = None,
    t_max: float = DEFAULT_T_MAX,
    drive: float = DEFAULT_CALIB_DRIVE,
    delta_cs: float = 0.0,
    workers: Optional[int] = None,
) -> CalibrationResult:
    """Response factor that best reproduces a measured Rabi-vs-detuning grid"""
    candidates = default_candidates() if candidates is None else np.sort(np.asarray(candidates, dtype=float))
    if candidates.size < MIN_CANDIDATES:
        raise CavityError(
            f"need at least {MIN_CANDIDATES} gamma candidates for the Gaussian fit "
            f"(underdetermined with {candidates.size})"
        )
    n_samples = _sample_count(measured_grid.freqs, t_max)

    def error_for(gamma):
        sim = simulate_rabi_grid(
            CavityParams(gamma, delta_cs),
            measured_grid.detunings,
            t_max,
            params,
            n_samples=n_samples,
            drive=drive,
            workers=1,
        )
        return overlap_error(measured_grid.spectra, sim.spectra)

    with ThreadPoolExecutor(max_workers=workers) as pool:
        errors = np.array(list(pool.map(error_for, candidates)))

    notes = []
    center, popt = fit_error_curve(candidates, errors)
    fit_ok = bool(candidates[0] <= center <= candidates[-1])
    if not fit_ok:
        notes.append("fitted minimum outside the candidate range")
        logger.warning(f"⚠️  Fitted minimum {to_mhz(center):.3f} MHz lies outside the candidates")
    else:
        logger.info(f"✅ Calibrated gamma_cav = {to_mhz(center):.3f} MHz")
    return CalibrationResult(center, candidates, errors, popt, fit_ok=fit_ok, notes=notes)


def save_error_curve(result: CalibrationResult, path: str):
    DataManager.write_csv(path, ("gamma_MHz", "error"), (to_mhz(result.candidates), result.errors))
