# pulses_tests.py
import logging
import math
import os
import sys
import tempfile

import numpy as np
import pytest

sys.path.append(os.path.dirname(os.path.abspath(__file__)))

from cavity import CavityParams  # noqa: E402
from pulses import (  # noqa: E402
    OMEGA_MAX,
    MultiSweepSpec,
    Pulse,
    PulseError,
    SweepSpec,
    detuning_to_phase,
    fitted_optimal,
    fourier_pulse,
    grid_specs,
    linear_sweep,
    load_pulse,
    multi_specs,
    phase_to_detuning,
    precompensate,
    pulse_from_voltage,
    recombine,
    save_pulse,
    sinusoidal_sweep,
    time_grid,
    with_constant_amplitude,
)
from spinsys import mhz  # noqa: E402

DELTA_MAX = mhz(20.0)
AMPLITUDE = mhz(6.0)


@pytest.fixture
def temp_dir():
    """Create a temporary directory for pulse files"""
    with tempfile.TemporaryDirectory() as d:
        yield d


def constant_detuning_pulse(detuning, amplitude=AMPLITUDE, duration=2.0, dt=1e-3):
    t = time_grid(duration, dt)
    return Pulse(t, np.full(t.shape, amplitude), detuning * t)


class TestPulseModel:
    """Pulse invariants"""

    def test_negative_amplitude(self):
        t = time_grid(1.0, 0.1)
        with pytest.raises(PulseError):
            Pulse(t, np.full(t.shape, -1.0), np.zeros_like(t))

    def test_amplitude_above_max(self):
        t = time_grid(1.0, 0.1)
        with pytest.raises(PulseError):
            Pulse(t, np.full(t.shape, OMEGA_MAX * 1.01), np.zeros_like(t))

    def test_phase_jump(self):
        t = time_grid(1.0, 0.1)
        phi = np.zeros_like(t)
        phi[5:] = 3.5
        with pytest.raises(PulseError):
            Pulse(t, np.zeros_like(t), phi)

    def test_non_uniform_grid(self):
        t = np.array([0.0, 0.1, 0.3, 0.4])
        with pytest.raises(PulseError):
            Pulse(t, np.zeros(4), np.zeros(4))

    def test_shape_mismatch(self):
        with pytest.raises(PulseError):
            Pulse(time_grid(1.0, 0.1), np.zeros(3), np.zeros(3))

    def test_samples_read_only(self):
        pulse = linear_sweep(SweepSpec(DELTA_MAX, 1.0, AMPLITUDE), dt=0.01)
        with pytest.raises(ValueError):
            pulse.phi_ext[0] = 1.0


class TestPhaseDetuning:
    """Phase integral and derivative"""

    def test_zero_detuning(self):
        assert np.all(detuning_to_phase(np.zeros(50), 0.01) == 0.0)

    def test_linear_detuning(self):
        dt = 0.01
        t = np.arange(0, 201) * dt
        a = 3.0
        phi = detuning_to_phase(a * t, dt)
        assert np.max(np.abs(phi - a * t**2 / 2)) < a * dt**2

    def test_round_trip(self):
        dt = 1e-3
        t = np.arange(0, 2001) * dt
        delta = 40.0 * np.sin(2.0 * t) + 5.0 * t
        back = phase_to_detuning(detuning_to_phase(delta, dt), dt)
        assert np.max(np.abs(back[1:-1] - delta[1:-1])) < 100.0 * dt**2 * 40.0


class TestLinearSweep:
    """Integrated solid effect sweep"""

    def test_endpoints_and_center(self):
        pulse = linear_sweep(SweepSpec(DELTA_MAX, 10.0, AMPLITUDE))
        delta = pulse.delta
        assert delta[0] == pytest.approx(-DELTA_MAX, rel=1e-9)
        assert delta[-1] == pytest.approx(DELTA_MAX, rel=1e-9)
        assert abs(delta[pulse.n // 2]) < 1e-6 * DELTA_MAX

    def test_constant_amplitude(self):
        pulse = linear_sweep(SweepSpec(DELTA_MAX, 10.0, AMPLITUDE))
        assert np.all(pulse.omega_ext == AMPLITUDE)

    def test_phase_returns_to_zero(self):
        pulse = linear_sweep(SweepSpec(DELTA_MAX, 10.0, AMPLITUDE))
        assert abs(pulse.phi_ext[-1]) < 1e-9 * DELTA_MAX * 10.0

    def test_spec_validation(self):
        with pytest.raises(PulseError):
            SweepSpec(0.0, 10.0, AMPLITUDE)
        with pytest.raises(PulseError):
            SweepSpec(DELTA_MAX, -1.0, AMPLITUDE)


class TestSinusoidalSweep:
    """Multi-sweep through the resonance"""

    def test_single_passage_is_monotone(self):
        pulse = sinusoidal_sweep(MultiSweepSpec(DELTA_MAX, 1, 20.0, AMPLITUDE), dt=1e-2)
        delta = pulse.delta
        assert pulse.duration == pytest.approx(10.0)
        assert np.all(np.diff(delta) > -1e-4 * DELTA_MAX)
        assert delta[0] == pytest.approx(-DELTA_MAX, rel=1e-3)
        assert delta[-1] == pytest.approx(DELTA_MAX, rel=1e-3)

    def test_eight_half_periods(self):
        pulse = sinusoidal_sweep(MultiSweepSpec(DELTA_MAX, 8, 40.0, AMPLITUDE), dt=1e-2)
        assert pulse.duration == pytest.approx(160.0)
        crossings = np.count_nonzero(np.diff(np.signbit(pulse.delta)))
        assert crossings == 8

    def test_crosses_resonance_with_linear_sweep(self):
        duration = 10.0
        linear = linear_sweep(SweepSpec(DELTA_MAX, duration, AMPLITUDE), dt=1e-2)
        single = sinusoidal_sweep(MultiSweepSpec(DELTA_MAX, 1, 2 * duration, AMPLITUDE), dt=1e-2)
        assert np.argmin(np.abs(linear.delta)) == np.argmin(np.abs(single.delta))

    def test_n_osc_must_be_integer(self):
        with pytest.raises(PulseError):
            MultiSweepSpec(DELTA_MAX, 1.5, 40.0, AMPLITUDE)


class TestFittedOptimal:
    """Mirrored polynomial sweep"""

    def test_degenerate_is_linear(self):
        fitted = fitted_optimal(DELTA_MAX, 10.0, poly_order=1, slowdown_frac=1.0, n_segments=1, amplitude=AMPLITUDE)
        linear = linear_sweep(SweepSpec(DELTA_MAX, 10.0, AMPLITUDE))
        assert np.allclose(fitted.phi_ext, linear.phi_ext, atol=1e-12)

    def test_slow_near_resonance(self):
        pulse = fitted_optimal(DELTA_MAX, 10.0, poly_order=3, slowdown_frac=0.25, n_segments=1, dt=1e-2)
        slope = np.abs(np.gradient(pulse.delta, pulse.dt))
        assert slope[pulse.n // 2] < slope[2]
        assert slope[pulse.n // 2] < slope[-3]

    def test_two_segments_mirror(self):
        pulse = fitted_optimal(DELTA_MAX, 5.0, n_segments=2, dt=1e-2)
        mid = pulse.n // 2
        assert pulse.t[mid] == pytest.approx(5.0)
        assert np.allclose(pulse.phi_ext + pulse.phi_ext[::-1], 2 * pulse.phi_ext[mid], atol=1e-9)
        assert np.allclose(pulse.delta, pulse.delta[::-1], atol=1e-6 * DELTA_MAX)

    def test_rejects_even_order(self):
        with pytest.raises(PulseError):
            fitted_optimal(DELTA_MAX, 10.0, poly_order=2)

    def test_rejects_bad_slowdown(self):
        with pytest.raises(PulseError):
            fitted_optimal(DELTA_MAX, 10.0, slowdown_frac=0.0)


class TestFourierPulse:
    """Superposition of basis functions on one channel"""

    def test_empty(self):
        base = linear_sweep(SweepSpec(DELTA_MAX, 2.0, AMPLITUDE))
        out = fourier_pulse(base, [])
        assert np.array_equal(out.phi_ext, base.phi_ext)
        assert np.array_equal(out.omega_ext, base.omega_ext)

    def test_single_phase_term(self):
        base = linear_sweep(SweepSpec(DELTA_MAX, 2.0, AMPLITUDE))
        eps, w = 0.05, mhz(1.0)
        out = fourier_pulse(base, [(eps, 0.0, w)], "phase")
        assert np.allclose(out.phi_ext - base.phi_ext, eps * np.sin(w * base.t), atol=1e-12)
        assert np.array_equal(out.omega_ext, base.omega_ext)

    def test_amplitude_is_clamped(self):
        base = linear_sweep(SweepSpec(DELTA_MAX, 2.0, AMPLITUDE))
        out = fourier_pulse(base, [(1e4, 0.0, mhz(0.5))], "amplitude")
        assert np.max(out.omega_ext) <= base.omega_max
        assert np.min(out.omega_ext) >= 0.0
        assert np.array_equal(out.phi_ext, base.phi_ext)

    def test_bandwidth_cap(self):
        base = linear_sweep(SweepSpec(DELTA_MAX, 2.0, AMPLITUDE))
        with pytest.raises(PulseError):
            fourier_pulse(base, [(0.1, 0.0, mhz(25.0))], "phase", bandwidth_cap=mhz(20.0))

    def test_unknown_channel(self):
        base = linear_sweep(SweepSpec(DELTA_MAX, 2.0, AMPLITUDE))
        with pytest.raises(PulseError):
            fourier_pulse(base, [], "frequency")


class TestRecombine:
    """Amplitude from one pulse, phase from another"""

    def test_identity(self):
        p = fitted_optimal(DELTA_MAX, 2.0, n_segments=2, amplitude=AMPLITUDE)
        out = recombine(p, p)
        assert np.array_equal(out.omega_ext, p.omega_ext)
        assert np.array_equal(out.phi_ext, p.phi_ext)

    def test_phase_taken_from_second(self):
        linear = linear_sweep(SweepSpec(DELTA_MAX, 4.0, AMPLITUDE))
        optimal = fourier_pulse(
            fitted_optimal(DELTA_MAX, 2.0, n_segments=2, amplitude=mhz(3.0)), [(0.0, 0.3, mhz(0.7))], "amplitude"
        )
        out = recombine(linear, optimal)
        assert np.array_equal(out.phi_ext, optimal.phi_ext)
        assert np.array_equal(out.omega_ext, linear.omega_ext)

    def test_idempotent(self):
        a = linear_sweep(SweepSpec(DELTA_MAX, 4.0, AMPLITUDE))
        b = fitted_optimal(DELTA_MAX, 2.0, n_segments=2, amplitude=mhz(3.0))
        once = recombine(a, b)
        twice = recombine(once, b)
        assert np.array_equal(once.phi_ext, twice.phi_ext)
        assert np.array_equal(once.omega_ext, twice.omega_ext)

    def test_grid_mismatch(self):
        a = linear_sweep(SweepSpec(DELTA_MAX, 4.0, AMPLITUDE))
        b = linear_sweep(SweepSpec(DELTA_MAX, 2.0, AMPLITUDE))
        with pytest.raises(PulseError):
            recombine(a, b)

    def test_phase_from_file(self, temp_dir):
        a = linear_sweep(SweepSpec(DELTA_MAX, 3.0, AMPLITUDE), dt=0.003)
        path = os.path.join(temp_dir, "phase.csv")
        save_pulse(fitted_optimal(DELTA_MAX, 1.0, n_segments=3, amplitude=mhz(3.0), dt=0.003), path)
        out = recombine(a, load_pulse(path))
        assert np.array_equal(out.omega_ext, a.omega_ext)
        assert np.array_equal(out.t, a.t)


class TestPrecompensate:
    """Inverse quasi-static cavity response"""

    def test_on_resonance_unchanged(self):
        pulse = constant_detuning_pulse(0.0)
        out = precompensate(pulse, CavityParams(mhz(9.24), 0.0))
        assert np.allclose(out.omega_ext, pulse.omega_ext, rtol=1e-12)

    def test_root_two_at_gamma(self):
        gamma = mhz(9.24)
        pulse = constant_detuning_pulse(gamma)
        out = precompensate(pulse, CavityParams(gamma, 0.0))
        assert np.allclose(out.omega_ext / pulse.omega_ext, math.sqrt(2.0), rtol=1e-8)

    def test_clamped_at_omega_max(self):
        pulse = constant_detuning_pulse(mhz(40.0), amplitude=mhz(15.0))
        out = precompensate(pulse, CavityParams(mhz(9.24), 0.0))
        assert np.max(out.omega_ext) == pytest.approx(OMEGA_MAX)


class TestPulseHelpers:
    """Constant amplitude, voltage conversion and grids"""

    def test_constant_amplitude(self):
        pulse = with_constant_amplitude(fitted_optimal(DELTA_MAX, 2.0, amplitude=mhz(2.0)), mhz(5.0))
        assert np.all(pulse.omega_ext == mhz(5.0))

    def test_voltage_gain(self):
        t = time_grid(1.0, 0.1)
        pulse = pulse_from_voltage(t, np.linspace(-0.5, 0.5, t.size), np.zeros_like(t), gain=mhz(20.0))
        assert pulse.omega_ext[0] == pytest.approx(mhz(10.0))
        assert pulse.omega_ext[t.size // 2] == pytest.approx(0.0, abs=1e-12)

    def test_grid_specs(self):
        specs = grid_specs([1.0, 2.0, 3.0], [10.0, 20.0], AMPLITUDE)
        assert len(specs) == 6
        assert specs[0] == SweepSpec(1.0, 10.0, AMPLITUDE)

    def test_multi_specs_seed_first(self):
        specs = multi_specs(DELTA_MAX, [1, 4], [20.0, 100.0], AMPLITUDE, seed_half_period=50.0)
        assert specs[0] == MultiSweepSpec(DELTA_MAX, 1, 100.0, AMPLITUDE)
        assert len(specs) == 4
        assert len(set(specs)) == len(specs)


class TestPulseFiles:
    """Pulse CSV"""

    def test_reload_reproduces_file(self, temp_dir):
        pulse = fitted_optimal(DELTA_MAX, 2.0, n_segments=2, amplitude=AMPLITUDE)
        first = os.path.join(temp_dir, "a.csv")
        second = os.path.join(temp_dir, "b.csv")
        save_pulse(pulse, first)
        loaded = load_pulse(first)
        save_pulse(loaded, second)
        with open(first, "rb") as f1, open(second, "rb") as f2:
            assert f1.read() == f2.read()
        assert np.allclose(loaded.phi_ext, pulse.phi_ext, rtol=1e-11, atol=1e-12)
        assert np.allclose(loaded.omega_ext, pulse.omega_ext, rtol=1e-11)

    def test_wrong_header(self, temp_dir):
        path = os.path.join(temp_dir, "bad.csv")
        with open(path, "w") as f:
            f.write("a,b,c\n0,1,2\n1,1,2\n")
        with pytest.raises(PulseError):
            load_pulse(path)

    def test_amplitude_above_limit_clamped_with_warning(self, temp_dir, caplog):
        path = os.path.join(temp_dir, "loud.csv")
        with open(path, "w") as f:
            f.write("t_us,omega_ext_MHz,phi_rad,delta_MHz\n0,6,0,0\n0.001,25,0,0\n0.002,6,0,0\n")
        with caplog.at_level(logging.WARNING, logger="pulses"):
            pulse = load_pulse(path)
        assert pulse.omega_ext[1] == OMEGA_MAX
        assert pulse.omega_ext[0] == pytest.approx(mhz(6.0))
        assert "clamped 1 amplitude samples" in caplog.text

    def test_amplitude_within_limit_is_quiet(self, temp_dir, caplog):
        path = os.path.join(temp_dir, "quiet.csv")
        save_pulse(linear_sweep(SweepSpec(DELTA_MAX, 0.1, AMPLITUDE)), path)
        with caplog.at_level(logging.WARNING, logger="pulses"):
            load_pulse(path)
        assert "clamped" not in caplog.text
