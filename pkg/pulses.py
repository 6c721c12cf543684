#!/usr/bin/env python3
"""
pulses.py

Microwave pulse model and the pulse families used by the optimizer:

- linear sweep (integrated solid effect)
- sinusoidal multi-sweep
- mirrored polynomial "fitted optimal" sweep
- Fourier superposition on a base pulse (dCRAB candidates)
- amplitude/phase recombination and naive cavity precompensation

A pulse is stored as amplitude envelope and phase on a uniform grid;
the detuning is the phase derivative.
"""

import logging
import math
from dataclasses import dataclass
from typing import TYPE_CHECKING, Iterable, Optional, Sequence, Tuple

import numpy as np
from scipy.integrate import cumulative_trapezoid

from datamanager import CSV_FORMAT, DataManager
from spinsys import TWO_PI, mhz, to_mhz

if TYPE_CHECKING:
    from cavity import CavityParams

logger = logging.getLogger("pulses")

OMEGA_MAX = TWO_PI * 19.3
DEFAULT_DT = 1e-3
DEFAULT_BANDWIDTH_CAP = TWO_PI * 20.0
CHANNELS = ("amplitude", "phase")
PULSE_HEADER = ("t_us", "omega_ext_MHz", "phi_rad", "delta_MHz")

_AMP_TOL = 1e-9
_GRID_TOL = 1e-6


class PulseError(ValueError):
    """Raised for pulses that violate amplitude, grid or continuity rules"""


def time_grid(duration: float, dt: float) -> np.ndarray:
    """Uniform grid on [0, duration] whose spacing is as close to dt as fits"""
    if duration <= 0 or dt <= 0:
        raise PulseError(f"duration and dt must be > 0 (got {duration}, {dt})")
    n = max(int(round(duration / dt)), 1) + 1
    return np.linspace(0.0, duration, n)


def check_uniform(t: np.ndarray, what: str = "grid"):
    if t.ndim != 1 or t.size < 2:
        raise PulseError(f"{what} needs at least two samples")
    steps = np.diff(t)
    if np.any(steps <= 0):
        raise PulseError(f"{what} must be strictly increasing")
    h = (t[-1] - t[0]) / (t.size - 1)
    if np.max(np.abs(steps - h)) > _GRID_TOL * h:
        raise PulseError(f"{what} must be uniformly spaced")


@dataclass(frozen=True, eq=False)
class Pulse:
    """External drive: amplitude (rad/us) and phase (rad) per sample.

    Finiteness is checked where samples are consumed (cavity filter, files).
    """

    t: np.ndarray
    omega_ext: np.ndarray
    phi_ext: np.ndarray
    omega_max: float = OMEGA_MAX

    def __post_init__(self):
        t = np.asarray(self.t, dtype=float)
        omega = np.asarray(self.omega_ext, dtype=float)
        phi = np.asarray(self.phi_ext, dtype=float)
        if not (t.shape == omega.shape == phi.shape):
            raise PulseError(
                f"t, omega_ext and phi_ext must share one shape: {t.shape}, {omega.shape}, {phi.shape}"
            )
        check_uniform(t, "pulse grid")
        if np.any(omega < 0):
            raise PulseError("omega_ext must be >= 0")
        if np.any(omega > self.omega_max * (1 + _AMP_TOL)):
            raise PulseError(
                f"omega_ext exceeds omega_max ({to_mhz(float(np.nanmax(omega))):.4f} MHz > "
                f"{to_mhz(self.omega_max):.4f} MHz)"
            )
        if np.any(np.abs(np.diff(phi)) >= math.pi):
            raise PulseError("phi_ext jumps by pi or more between samples")
        for name, arr in (("t", t), ("omega_ext", omega), ("phi_ext", phi)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def n(self) -> int:
        return self.t.size

    @property
    def dt(self) -> float:
        return (self.t[-1] - self.t[0]) / (self.t.size - 1)

    @property
    def duration(self) -> float:
        return self.t[-1] - self.t[0]

    @property
    def delta(self) -> np.ndarray:
        """Drive detuning, the phase derivative (rad/us)"""
        return phase_to_detuning(self.phi_ext, self.dt)

    def drive(self) -> np.ndarray:
        """Complex external drive Omega_ext * exp(-i phi)"""
        return self.omega_ext * np.exp(-1j * self.phi_ext)

    def same_grid(self, other: "Pulse") -> bool:
        """Equal sample times up to the rounding of a pulse file"""
        if self.t.shape != other.t.shape:
            return False
        return bool(np.allclose(self.t, other.t, rtol=0.0, atol=_GRID_TOL * self.dt))


@dataclass(frozen=True)
class SweepSpec:
    """Linear sweep from -delta_max to +delta_max over duration"""

    delta_max: float
    duration: float
    amplitude: float

    def __post_init__(self):
        if not self.delta_max > 0:
            raise PulseError(f"delta_max must be > 0, got {self.delta_max}")
        if not self.duration > 0:
            raise PulseError(f"duration must be > 0, got {self.duration}")
        if self.amplitude < 0:
            raise PulseError(f"amplitude must be >= 0, got {self.amplitude}")

    def to_dict(self):
        return {
            "delta_max_MHz": to_mhz(self.delta_max),
            "duration_us": self.duration,
            "amplitude_MHz": to_mhz(self.amplitude),
        }


@dataclass(frozen=True)
class MultiSweepSpec:
    """Detuning -delta_max*cos(2 pi t / tau) over n_osc half-periods"""

    delta_max: float
    n_osc: int
    tau: float
    amplitude: float

    def __post_init__(self):
        if not self.delta_max > 0:
            raise PulseError(f"delta_max must be > 0, got {self.delta_max}")
        if int(self.n_osc) != self.n_osc or self.n_osc < 1:
            raise PulseError(f"n_osc must be an integer >= 1, got {self.n_osc}")
        if not self.tau > 0:
            raise PulseError(f"tau must be > 0, got {self.tau}")
        if self.amplitude < 0:
            raise PulseError(f"amplitude must be >= 0, got {self.amplitude}")

    @property
    def duration(self) -> float:
        return self.n_osc * self.tau / 2.0

    def to_dict(self):
        return {
            "delta_max_MHz": to_mhz(self.delta_max),
            "n_osc": int(self.n_osc),
            "tau_us": self.tau,
            "amplitude_MHz": to_mhz(self.amplitude),
        }


# -----------------------
# Phase <-> detuning
# -----------------------
def detuning_to_phase(delta, dt: float) -> np.ndarray:
    """Cumulative trapezoid integral, phi(0) = 0"""
    return cumulative_trapezoid(np.asarray(delta, dtype=float), dx=dt, initial=0.0)


def phase_to_detuning(phi, dt: float) -> np.ndarray:
    """Second-order finite-difference derivative of the phase"""
    phi = np.asarray(phi, dtype=float)
    if phi.size < 3:
        return np.gradient(phi, dt)
    return np.gradient(phi, dt, edge_order=2)


def _from_detuning(t, delta, amplitude, omega_max=OMEGA_MAX) -> Pulse:
    dt = (t[-1] - t[0]) / (t.size - 1)
    return Pulse(t, np.full(t.shape, float(amplitude)), detuning_to_phase(delta, dt), omega_max)


# -----------------------
# Pulse families
# -----------------------
def linear_sweep(spec: SweepSpec, dt: float = DEFAULT_DT, omega_max: float = OMEGA_MAX) -> Pulse:
    t = time_grid(spec.duration, dt)
    delta = spec.delta_max * (2.0 * t / spec.duration - 1.0)
    return _from_detuning(t, delta, spec.amplitude, omega_max)


def sinusoidal_sweep(
    spec: MultiSweepSpec, dt: float = DEFAULT_DT, omega_max: float = OMEGA_MAX
) -> Pulse:
    t = time_grid(spec.duration, dt)
    delta = -spec.delta_max * np.cos(TWO_PI * t / spec.tau)
    return _from_detuning(t, delta, spec.amplitude, omega_max)


def fitted_optimal(
    delta_max: float,
    segment: float,
    poly_order: int = 3,
    slowdown_frac: float = 0.25,
    n_segments: int = 4,
    amplitude: float = TWO_PI * 6.0,
    dt: float = DEFAULT_DT,
    omega_max: float = OMEGA_MAX,
) -> Pulse:
    """Repeated mirrored polynomial sweeps that slow down near resonance.

    Within a segment, x runs from -1 to 1 and the detuning is
    delta_max * ((1 - w) * sign(x)|x|^p + w * x) with w = slowdown_frac,
    so the slope at the zero crossing is w times the linear-sweep slope.
    Odd segments run in the opposite direction.
    """
    if not 0.0 < slowdown_frac <= 1.0:
        raise PulseError(f"slowdown_frac must lie in (0, 1], got {slowdown_frac}")
    if int(poly_order) != poly_order or poly_order < 1 or poly_order % 2 == 0:
        raise PulseError(f"poly_order must be an odd integer >= 1, got {poly_order}")
    if n_segments < 1:
        raise PulseError(f"n_segments must be >= 1, got {n_segments}")
    if not (delta_max > 0 and segment > 0):
        raise PulseError("delta_max and segment must be > 0")

    t = time_grid(segment * n_segments, dt)
    k = np.minimum(np.floor(t / segment + 1e-9), n_segments - 1).astype(int)
    x = np.clip(2.0 * (t - k * segment) / segment - 1.0, -1.0, 1.0)
    shape = (1.0 - slowdown_frac) * np.sign(x) * np.abs(x) ** poly_order + slowdown_frac * x
    direction = np.where(k % 2 == 0, 1.0, -1.0)
    return _from_detuning(t, delta_max * direction * shape, amplitude, omega_max)


def fourier_pulse(
    base: Pulse,
    coeffs: Iterable[Tuple[float, float, float]],
    target: str = "phase",
    bandwidth_cap: float = DEFAULT_BANDWIDTH_CAP,
) -> Pulse:
    """Add sum of A sin(w t) + B cos(w t) to one control channel of base"""
    if target not in CHANNELS:
        raise PulseError(f"target must be one of {CHANNELS}, got {target!r}")
    u = np.zeros(base.n)
    for a, b, w in coeffs:
        if w > bandwidth_cap:
            raise PulseError(
                f"basis frequency {to_mhz(w):.4f} MHz above cap {to_mhz(bandwidth_cap):.4f} MHz"
            )
        u += a * np.sin(w * base.t) + b * np.cos(w * base.t)
    if target == "phase":
        return Pulse(base.t, base.omega_ext, base.phi_ext + u, base.omega_max)
    omega = np.clip(base.omega_ext + u, 0.0, base.omega_max)
    return Pulse(base.t, omega, base.phi_ext, base.omega_max)


def recombine(amp_from: Pulse, phase_from: Pulse) -> Pulse:
    """Amplitude of the first pulse with the phase of the second"""
    if not amp_from.same_grid(phase_from):
        raise PulseError("recombine needs pulses on identical grids")
    return Pulse(amp_from.t, amp_from.omega_ext, phase_from.phi_ext, amp_from.omega_max)


def precompensate(pulse: Pulse, cav: "CavityParams") -> Pulse:
    """Scale the amplitude by the inverse quasi-static cavity response.

    For a drive rotating at the instantaneous detuning delta the filtered
    field settles at gamma / (gamma + i (delta_cs - delta)) times the drive.
    """
    delta_inst = cav.delta_cs - pulse.delta
    gain = np.abs(cav.gamma_cav + 1j * delta_inst) / cav.gamma_cav
    omega = np.clip(pulse.omega_ext * gain, 0.0, pulse.omega_max)
    clipped = int(np.count_nonzero(pulse.omega_ext * gain > pulse.omega_max))
    if clipped:
        logger.warning(f"⚠️  Precompensation clamped {clipped} samples at omega_max")
    return Pulse(pulse.t, omega, pulse.phi_ext, pulse.omega_max)


def with_constant_amplitude(pulse: Pulse, amplitude: float) -> Pulse:
    return Pulse(pulse.t, np.full(pulse.n, float(amplitude)), pulse.phi_ext, pulse.omega_max)


def zero_pulse(duration: float, dt: float = DEFAULT_DT) -> Pulse:
    t = time_grid(duration, dt)
    return Pulse(t, np.zeros_like(t), np.zeros_like(t))


def pulse_from_voltage(t, voltage, phi, gain: float, omega_max: float = OMEGA_MAX) -> Pulse:
    """AWG voltage envelope to Rabi amplitude through one linear gain (rad/us per V)"""
    omega = gain * np.abs(np.asarray(voltage, dtype=float))
    return Pulse(np.asarray(t, dtype=float), omega, np.asarray(phi, dtype=float), omega_max)


# -----------------------
# Files
# -----------------------
def _as_written(values: np.ndarray) -> np.ndarray:
    return np.char.mod(CSV_FORMAT, np.asarray(values, dtype=float)).astype(float)


def save_pulse(pulse: Pulse, path: str):
    if not (np.all(np.isfinite(pulse.omega_ext)) and np.all(np.isfinite(pulse.phi_ext))):
        raise PulseError("cannot save a pulse with non-finite samples")
    # delta is derived from the values as written so a reload reproduces the file
    t = _as_written(pulse.t)
    phi = _as_written(pulse.phi_ext)
    delta = phase_to_detuning(phi, (t[-1] - t[0]) / (t.size - 1))
    DataManager.write_csv(path, PULSE_HEADER, (t, to_mhz(pulse.omega_ext), phi, to_mhz(delta)))
    logger.info(f"💾 Saved pulse ({pulse.n} samples, {pulse.duration:g} us) to {path}")


def load_pulse(path: str, omega_max: float = OMEGA_MAX) -> Pulse:
    header, data = DataManager.read_csv(path)
    if tuple(header[:3]) != PULSE_HEADER[:3]:
        raise PulseError(f"{path}: expected columns {PULSE_HEADER}, got {header}")
    omega = mhz(data[:, 1])
    clamped = int(np.count_nonzero(omega > omega_max * (1.0 + _AMP_TOL)))
    if clamped:
        logger.warning(f"⚠️  {path}: clamped {clamped} amplitude samples at omega_max")
    omega = np.minimum(omega, omega_max)
    return Pulse(data[:, 0], omega, data[:, 2], omega_max)


def pulse_summary(pulse: Pulse) -> dict:
    return {
        "samples": pulse.n,
        "duration_us": float(pulse.duration),
        "dt_us": float(pulse.dt),
        "omega_ext_max_MHz": float(to_mhz(np.max(pulse.omega_ext))),
        "delta_range_MHz": [float(to_mhz(np.min(pulse.delta))), float(to_mhz(np.max(pulse.delta)))],
    }


def grid_specs(
    delta_max_values: Sequence[float], durations: Sequence[float], amplitude: float
) -> Tuple[SweepSpec, ...]:
    """Cartesian product of sweep ranges and durations"""
    return tuple(SweepSpec(d, t, amplitude) for d in delta_max_values for t in durations)


def multi_specs(
    delta_max: float,
    n_osc_values: Sequence[int],
    tau_values: Sequence[float],
    amplitude: float,
    seed_half_period: Optional[float] = None,
) -> Tuple[MultiSweepSpec, ...]:
    """Multi-sweep grid; the single passage with half-period seed_half_period comes first"""
    specs = []
    if seed_half_period is not None:
        specs.append(MultiSweepSpec(delta_max, 1, 2.0 * seed_half_period, amplitude))
    for n in n_osc_values:
        for tau in tau_values:
            spec = MultiSweepSpec(delta_max, int(n), tau, amplitude)
            if spec not in specs:
                specs.append(spec)
    return tuple(specs)
