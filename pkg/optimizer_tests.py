# optimizer_tests.py
import json
import os
import sys
import tempfile

import numpy as np
import pytest
from scipy.optimize import rosen

sys.path.append(os.path.dirname(os.path.abspath(__file__)))

from cavity import CavityParams  # noqa: E402
from datamanager import DataManager  # noqa: E402
from ensemble import EnsembleSpec, ensemble_fom  # noqa: E402
from optimizer import (  # noqa: E402
    DcrabConfig,
    FomJournal,
    OptimizationRecord,
    OptimizerError,
    arise,
    candidate_pulse,
    convergence_columns,
    dcrab_optimize,
    nelder_mead,
)
from pulses import MultiSweepSpec, SweepSpec, linear_sweep  # noqa: E402
from spinsys import SystemParams, mhz  # noqa: E402

W0 = mhz(0.5)


@pytest.fixture
def temp_dir():
    """Create a temporary directory for journals"""
    with tempfile.TemporaryDirectory() as d:
        yield d


@pytest.fixture
def base_pulse():
    return linear_sweep(SweepSpec(mhz(5.0), 2.0, mhz(6.0)), dt=1e-2)


def narrow_config(**kwargs):
    """One basis function whose frequency is pinned at W0"""
    values = dict(n_super=1, n_basis=1, freq_interval=(W0, W0 * (1 + 1e-9)), max_fom_evals=200)
    values.update(kwargs)
    return DcrabConfig(**values)


def phase_bowl(base, amplitude=0.3):
    """FoM peaked where the phase carries amplitude * sin(W0 t) on top of base"""
    target = base.phi_ext + amplitude * np.sin(W0 * base.t)

    def fom_eval(pulse):
        return -float(np.mean((pulse.phi_ext - target) ** 2)), 0.0

    return fom_eval


class CountingFom:
    """Wraps a FoM and fails after a given number of calls"""

    def __init__(self, fom_eval, fail_after=None):
        self.fom_eval = fom_eval
        self.fail_after = fail_after
        self.calls = 0

    def __call__(self, pulse):
        if self.fail_after is not None and self.calls >= self.fail_after:
            raise RuntimeError("lost connection to the spectrometer")
        self.calls += 1
        return self.fom_eval(pulse)


class TestNelderMead:
    """Bounded-budget simplex search"""

    def test_quadratic_1d(self):
        x, value, trace = nelder_mead(lambda x: -((x[0] - 0.3) ** 2), [0.0], 1.0, 200)
        assert x[0] == pytest.approx(0.3, abs=1e-4)
        assert value == pytest.approx(0.0, abs=1e-8)
        assert len(trace) <= 200

    def test_rosenbrock(self):
        x, _, _ = nelder_mead(lambda x: -rosen(x), [-1.2, 1.0], 1.0, 2000)
        assert np.allclose(x, [1.0, 1.0], atol=1e-3)

    def test_maximizes_at_origin(self):
        x, value, _ = nelder_mead(lambda x: -float(np.sum(x**2)), [0.4, -0.7, 0.2], 0.5, 1000)
        assert np.allclose(x, 0.0, atol=1e-4)
        assert value <= 0.0

    def test_budget_is_hard(self):
        calls = []

        def unbounded(x):
            calls.append(x)
            return float(np.sum(x))

        _, _, trace = nelder_mead(unbounded, [0.0, 0.0], 1.0, 7)
        assert len(calls) == 7
        assert len(trace) == 7

    def test_best_of_trace(self):
        _, value, trace = nelder_mead(lambda x: float(np.sin(3 * x[0])), [0.0], 0.4, 15)
        assert value == max(v for _, v in trace)

    def test_first_point_is_start(self):
        _, _, trace = nelder_mead(lambda x: -float(np.sum(x**2)), [1.0, 2.0], 0.1, 5)
        assert np.array_equal(trace[0][0], [1.0, 2.0])

    def test_non_finite(self):
        with pytest.raises(OptimizerError):
            nelder_mead(lambda x: float("nan"), [0.0], 1.0, 10)

    def test_bad_budget(self):
        with pytest.raises(OptimizerError):
            nelder_mead(lambda x: 0.0, [0.0], 1.0, 0)


class TestDcrabConfig:
    """Validation of the dCRAB settings"""

    def test_defaults(self):
        config = DcrabConfig()
        assert config.dim == 6
        assert np.allclose(config.scales(), 0.5)

    def test_two_channels(self):
        config = DcrabConfig(channels=("phase", "amplitude"), n_basis=2)
        assert config.dim == 8
        assert np.allclose(config.scales()[:4], 0.5)
        assert np.allclose(config.scales()[4:], mhz(1.0))

    @pytest.mark.parametrize(
        "kwargs",
        [
            dict(freq_interval=(0.0, 1.0)),
            dict(freq_interval=(2.0, 1.0)),
            dict(freq_interval=(1.0, mhz(30.0))),
            dict(channels=("frequency",)),
            dict(channels=("phase", "phase")),
            dict(channels=()),
            dict(max_fom_evals=7),
            dict(n_super=0),
            dict(noise_threshold=-1.0),
        ],
    )
    def test_rejected(self, kwargs):
        with pytest.raises(OptimizerError):
            DcrabConfig(**kwargs)


class TestCandidatePulse:
    """Fourier terms on the configured channels"""

    def test_phase_channel(self, base_pulse):
        config = narrow_config()
        freqs = {"phase": np.array([W0])}
        pulse = candidate_pulse(base_pulse, np.array([0.2, -0.1]), freqs, config)
        expected = base_pulse.phi_ext + 0.2 * np.sin(W0 * base_pulse.t) - 0.1 * np.cos(W0 * base_pulse.t)
        assert np.allclose(pulse.phi_ext, expected)
        assert np.array_equal(pulse.omega_ext, base_pulse.omega_ext)

    def test_both_channels(self, base_pulse):
        config = narrow_config(channels=("phase", "amplitude"))
        freqs = {"phase": np.array([W0]), "amplitude": np.array([W0])}
        pulse = candidate_pulse(base_pulse, np.array([0.0, 0.0, 0.0, mhz(1.0)]), freqs, config)
        assert np.allclose(pulse.phi_ext, base_pulse.phi_ext)
        assert np.allclose(pulse.omega_ext, base_pulse.omega_ext + mhz(1.0) * np.cos(W0 * base_pulse.t))


class TestDcrab:
    """Super-iterations around the incumbent pulse"""

    def test_recovers_phase_modulation(self, base_pulse):
        record = dcrab_optimize(base_pulse, phase_bowl(base_pulse), narrow_config())
        best = max(record.iterations, key=lambda row: row.fom)
        assert best.coeffs[0] == pytest.approx(0.3, abs=1e-2)
        assert best.coeffs[1] == pytest.approx(0.0, abs=1e-2)
        assert record.best_fom == best.fom
        deviation = record.best_pulse.phi_ext - base_pulse.phi_ext
        assert np.allclose(deviation, 0.3 * np.sin(W0 * base_pulse.t), atol=2e-2)

    def test_guess_already_optimal(self, base_pulse):
        record = dcrab_optimize(base_pulse, phase_bowl(base_pulse, 0.0), narrow_config(max_fom_evals=40))
        assert record.best_fom == 0.0
        assert np.array_equal(record.best_pulse.phi_ext, base_pulse.phi_ext)
        assert record.iterations[0].coeffs == [0.0, 0.0]

    def test_best_so_far_monotone(self, base_pulse):
        config = DcrabConfig(n_super=3, n_basis=2, max_fom_evals=25, seed=4)
        record = dcrab_optimize(base_pulse, phase_bowl(base_pulse), config)
        best = record.best_so_far()
        assert len(best) == len(record.iterations) <= 75
        assert all(b >= a for a, b in zip(best, best[1:]))
        assert len(record.frequencies_per_si) == 3

    def test_frequencies_seeded_and_in_range(self, base_pulse):
        config = DcrabConfig(n_super=2, n_basis=3, max_fom_evals=10, seed=9)
        first = dcrab_optimize(base_pulse, phase_bowl(base_pulse), config)
        second = dcrab_optimize(base_pulse, phase_bowl(base_pulse), config)
        assert first.frequencies_per_si == second.frequencies_per_si
        lo, hi = config.freq_interval
        for si in first.frequencies_per_si:
            assert len(si["phase"]) == 3
            assert all(lo <= w <= hi for w in si["phase"])
        assert first.frequencies_per_si[0] != first.frequencies_per_si[1]

    def test_phase_only_keeps_amplitude(self, base_pulse):
        seen = []

        def fom_eval(pulse):
            seen.append(pulse)
            return phase_bowl(base_pulse)(pulse)

        dcrab_optimize(base_pulse, fom_eval, DcrabConfig(n_super=2, max_fom_evals=15))
        assert all(np.array_equal(p.omega_ext, base_pulse.omega_ext) for p in seen)

    def test_noise_threshold_protects_incumbent(self, base_pulse):
        def noisy(pulse):
            if np.array_equal(pulse.phi_ext, base_pulse.phi_ext):
                return 0.0, 1.0
            return 0.5, 1.0

        record = dcrab_optimize(base_pulse, noisy, narrow_config(max_fom_evals=12), guess_fom=(0.0, 1.0))
        assert record.best_fom == 0.0
        assert record.best_pulse is base_pulse
        assert all(row.best_so_far == 0.0 for row in record.iterations)

    def test_clear_improvement_accepted(self, base_pulse):
        def better(pulse):
            if np.array_equal(pulse.phi_ext, base_pulse.phi_ext):
                return 0.0, 0.1
            return 0.5, 0.1

        record = dcrab_optimize(base_pulse, better, narrow_config(max_fom_evals=12), guess_fom=(0.0, 0.1))
        assert record.best_fom == 0.5

    def test_failure_keeps_partial_record(self, base_pulse):
        fom_eval = CountingFom(phase_bowl(base_pulse), fail_after=5)
        with pytest.raises(OptimizerError) as info:
            dcrab_optimize(base_pulse, fom_eval, narrow_config())
        assert len(info.value.record.iterations) == 5
        assert isinstance(info.value.__cause__, RuntimeError)

    def test_non_finite_fom(self, base_pulse):
        with pytest.raises(OptimizerError):
            dcrab_optimize(base_pulse, lambda p: (float("inf"), 0.0), narrow_config())

    def test_summary(self, base_pulse):
        record = dcrab_optimize(base_pulse, phase_bowl(base_pulse), narrow_config(max_fom_evals=20))
        summary = record.summary()
        assert summary["evaluations"] == len(record.iterations)
        assert summary["frequencies_MHz"][0]["phase"][0] == pytest.approx(0.5)


class TestJournal:
    """Replaying a JSON-lines record after an interruption"""

    def test_resume_reproduces_clean_run(self, temp_dir, base_pulse):
        config = DcrabConfig(n_super=2, n_basis=1, max_fom_evals=30, seed=2)
        clean_fom = CountingFom(phase_bowl(base_pulse))
        clean = dcrab_optimize(
            base_pulse, clean_fom, config, journal=FomJournal(DataManager(os.path.join(temp_dir, "clean")))
        )

        data = DataManager(os.path.join(temp_dir, "resumed"))
        with pytest.raises(OptimizerError):
            dcrab_optimize(base_pulse, CountingFom(phase_bowl(base_pulse), fail_after=10), config,
                           journal=FomJournal(data))
        assert len(data.read_jsonl("record.jsonl")) == 10

        resumed_fom = CountingFom(phase_bowl(base_pulse))
        journal = FomJournal(data)
        assert journal.replaying
        resumed = dcrab_optimize(base_pulse, resumed_fom, config, journal=journal)

        assert resumed_fom.calls == clean_fom.calls - 10
        assert [r.to_dict() for r in resumed.iterations] == [r.to_dict() for r in clean.iterations]
        assert resumed.best_fom == clean.best_fom
        assert len(data.read_jsonl("record.jsonl")) == len(clean.iterations)

    def test_complete_journal_needs_no_evaluations(self, temp_dir, base_pulse):
        config = narrow_config(max_fom_evals=20)
        data = DataManager(temp_dir)
        first = dcrab_optimize(base_pulse, phase_bowl(base_pulse), config, journal=FomJournal(data))
        replay = CountingFom(phase_bowl(base_pulse), fail_after=0)
        second = dcrab_optimize(base_pulse, replay, config, journal=FomJournal(data))
        assert replay.calls == 0
        assert second.best_fom == first.best_fom

    def test_mismatch_detected(self, temp_dir, base_pulse):
        data = DataManager(temp_dir)
        dcrab_optimize(base_pulse, phase_bowl(base_pulse), narrow_config(max_fom_evals=20), journal=FomJournal(data))
        with pytest.raises(OptimizerError):
            dcrab_optimize(
                base_pulse,
                phase_bowl(base_pulse),
                narrow_config(max_fom_evals=20, simplex_init_scale=0.25),
                journal=FomJournal(data),
            )

    def test_torn_line_dropped(self, temp_dir):
        data = DataManager(temp_dir)
        data.append_jsonl("record.jsonl", {"fom": 0.1, "fom_err": 0.0})
        with open(data.get_file_path("record.jsonl"), "a") as f:
            f.write('{"fom": 0.2, "fom_e')
        journal = FomJournal(data)
        assert journal.recorded() == {"fom": 0.1, "fom_err": 0.0}
        assert len(data.read_jsonl("record.jsonl")) == 1


def duration_fom(pulse):
    """Prefers 80 us pulses and ignores everything else"""
    return -abs(pulse.duration - 80.0) / 100.0, 0.0


class TestArise:
    """Linear sweep -> multi-sweep -> dCRAB"""

    def test_budget_arithmetic(self):
        grid = (SweepSpec(mhz(20.0), 100.0, mhz(6.0)),)
        config = DcrabConfig(n_super=1, n_basis=1, max_fom_evals=10)
        result = arise(grid, [4], [40.0], config, duration_fom)
        assert len(result.record.iterations) <= 13
        assert [r.step for r in result.record.iterations[:3]] == ["linear", "multi", "multi"]

    def test_chain_is_monotone(self):
        grid = (SweepSpec(mhz(20.0), 50.0, mhz(6.0)), SweepSpec(mhz(20.0), 100.0, mhz(6.0)))
        config = DcrabConfig(n_super=1, n_basis=1, max_fom_evals=8)
        result = arise(grid, [4], [40.0], config, duration_fom)
        s1, s2, s3 = result.chain()
        assert s1 <= s2 <= s3
        assert result.step1.spec == grid[1]
        assert s1 == pytest.approx(-0.2)
        assert result.step2.spec == MultiSweepSpec(mhz(20.0), 4, 40.0, mhz(6.0))
        assert s2 == pytest.approx(0.0)
        best = result.record.best_so_far()
        assert all(b >= a for a, b in zip(best, best[1:]))

    def test_single_passage_seed_first(self):
        seen = []

        def fom_eval(pulse):
            seen.append(pulse.duration)
            return duration_fom(pulse)

        grid = (SweepSpec(mhz(10.0), 30.0, mhz(6.0)),)
        arise(grid, [2], [50.0], DcrabConfig(n_super=1, n_basis=1, max_fom_evals=4), fom_eval)
        assert seen[:3] == pytest.approx([30.0, 30.0, 50.0])

    def test_step2_keeps_linear_winner(self):
        def prefers_linear(pulse):
            return (1.0 if np.allclose(np.diff(pulse.delta), np.diff(pulse.delta)[0], rtol=1e-6) else 0.0), 0.0

        grid = (SweepSpec(mhz(20.0), 40.0, mhz(6.0)),)
        result = arise(grid, [2], [40.0], DcrabConfig(n_super=1, n_basis=1, max_fom_evals=4), prefers_linear)
        assert result.step2.spec == grid[0]
        assert result.step2.fom == result.step1.fom

    def test_empty_grid(self):
        with pytest.raises(OptimizerError):
            arise((), [2], [40.0], DcrabConfig(), duration_fom)

    def test_failure_in_grid(self):
        grid = (SweepSpec(mhz(20.0), 50.0, mhz(6.0)),)
        with pytest.raises(OptimizerError) as info:
            arise(grid, [2], [40.0], DcrabConfig(), CountingFom(duration_fom, fail_after=1))
        assert len(info.value.record.iterations) == 1

    def test_to_dict_and_columns(self):
        grid = (SweepSpec(mhz(20.0), 100.0, mhz(6.0)),)
        result = arise(grid, [4], [40.0], DcrabConfig(n_super=1, n_basis=1, max_fom_evals=6), duration_fom)
        data = result.to_dict()
        assert data["step1_linear"]["spec"]["duration_us"] == 100.0
        assert data["step3_dcrab"]["spec"] is None
        header, cols = convergence_columns(result.record)
        assert header[1] == "step"
        assert list(cols[1][:3]) == [1, 2, 2]
        assert set(cols[1][3:]) == {3}
        assert all(len(c) == len(result.record.iterations) for c in cols)

    def test_journal_resume(self, temp_dir):
        grid = (SweepSpec(mhz(20.0), 50.0, mhz(6.0)), SweepSpec(mhz(20.0), 100.0, mhz(6.0)))
        config = DcrabConfig(n_super=1, n_basis=1, max_fom_evals=6)
        data = DataManager(temp_dir)
        with pytest.raises(OptimizerError):
            arise(grid, [4], [40.0], config, CountingFom(duration_fom, fail_after=3), journal=FomJournal(data))
        fom_eval = CountingFom(duration_fom)
        resumed = arise(grid, [4], [40.0], config, fom_eval, journal=FomJournal(data))
        clean = arise(grid, [4], [40.0], config, duration_fom)
        assert resumed.chain() == clean.chain()
        assert fom_eval.calls == len(clean.record.iterations) - 3


class TestRecord:
    """Optimization record bookkeeping"""

    def test_empty(self):
        record = OptimizationRecord()
        assert record.best_so_far() == []
        assert record.summary()["evaluations"] == 0


class TestDeskScale:
    """Full protocol on a simulated 50-instance ensemble"""

    @pytest.mark.slow
    def test_arise_improves_on_linear_sweep(self):
        spec = EnsembleSpec(n_instances=50, seed=0)
        fom_eval = ensemble_fom(spec, SystemParams(), CavityParams())
        grid = (SweepSpec(mhz(20.0), 100.0, mhz(6.0)),)
        config = DcrabConfig(n_super=3, n_basis=3, max_fom_evals=60)
        result = arise(grid, [8], [40.0], config, fom_eval)
        linear, multi, final = result.chain()
        assert linear <= multi <= final
        assert len(result.record.iterations) <= 1 + 2 + 3 * 60
        sinusoidal = [
            r.fom for r in result.record.iterations if r.step == "multi" and json.loads(r.label)["n_osc"] == 8
        ]
        assert len(sinusoidal) == 1
        assert sinusoidal[0] >= linear
