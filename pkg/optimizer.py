#!/usr/bin/env python3
"""
optimizer.py

Closed-loop pulse optimization against a black-box figure of merit:

- nelder_mead: bounded-budget simplex search (maximizing)
- dcrab_optimize: random Fourier basis super-iterations on top of the
  incumbent pulse
- arise: tuned linear sweep -> multi-sweep -> dCRAB

Every figure-of-merit evaluation can be written to a JSON-lines journal.
Restarting with the same journal replays the recorded values, so an
interrupted run resumes exactly where it stopped.
"""

import json
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import minimize

from datamanager import DataManager
from pulses import (
    CHANNELS,
    DEFAULT_BANDWIDTH_CAP,
    DEFAULT_DT,
    Pulse,
    PulseError,
    SweepSpec,
    fourier_pulse,
    linear_sweep,
    multi_specs,
    sinusoidal_sweep,
)
from spinsys import TWO_PI, to_mhz

logger = logging.getLogger("optimizer")

FomEval = Callable[[Pulse], Tuple[float, float]]


class OptimizerError(RuntimeError):
    """Optimization aborted; ``record`` holds whatever was completed"""

    def __init__(self, message: str, record: Optional["OptimizationRecord"] = None):
        super().__init__(message)
        self.record = record


class _BudgetExhausted(Exception):
    pass


@dataclass(frozen=True)
class DcrabConfig:
    n_super: int = 5
    n_basis: int = 3
    freq_interval: Tuple[float, float] = (TWO_PI * 0.01, TWO_PI * 2.0)
    channels: Tuple[str, ...] = ("phase",)
    max_fom_evals: int = 120
    simplex_init_scale: float = 0.5
    amplitude_init_scale: float = TWO_PI * 1.0
    seed: int = 0
    noise_threshold: float = 1.0
    bandwidth_cap: float = DEFAULT_BANDWIDTH_CAP
    xatol: float = 1e-6

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(self.channels))
        object.__setattr__(self, "freq_interval", tuple(float(f) for f in self.freq_interval))
        lo, hi = self.freq_interval
        if not (0 < lo < hi):
            raise OptimizerError(f"freq_interval needs 0 < lo < hi, got {self.freq_interval}")
        if hi > self.bandwidth_cap:
            raise OptimizerError(
                f"freq_interval upper end {to_mhz(hi):.3f} MHz exceeds the bandwidth cap"
            )
        if not self.channels or any(c not in CHANNELS for c in self.channels):
            raise OptimizerError(f"channels must be a non-empty subset of {CHANNELS}")
        if len(set(self.channels)) != len(self.channels):
            raise OptimizerError(f"duplicate channels: {self.channels}")
        if self.n_super < 1 or self.n_basis < 1:
            raise OptimizerError("n_super and n_basis must be >= 1")
        if self.max_fom_evals < self.dim + 2:
            raise OptimizerError(
                f"budget {self.max_fom_evals} too small for {self.dim} coefficients (need {self.dim + 2})"
            )
        if self.noise_threshold < 0:
            raise OptimizerError("noise_threshold must be >= 0")

    @property
    def dim(self) -> int:
        return 2 * self.n_basis * len(self.channels)

    def scales(self) -> np.ndarray:
        per_channel = {"phase": self.simplex_init_scale, "amplitude": self.amplitude_init_scale}
        return np.concatenate(
            [np.full(2 * self.n_basis, per_channel[c]) for c in self.channels]
        )


# -----------------------
# Nelder-Mead
# -----------------------
def nelder_mead(
    f: Callable[[np.ndarray], float],
    x0,
    scale,
    budget: int,
    xatol: float = 1e-6,
) -> Tuple[np.ndarray, float, List[Tuple[np.ndarray, float]]]:
    """Maximize f with at most ``budget`` evaluations.

    The search runs in coordinates y with x = x0 + scale * y, starting from
    the simplex {0, e_1, ..., e_n}, so termination on simplex size is
    relative to ``scale``. Returns the best point seen, its value and every
    evaluation in order.
    """
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    dim = x0.size
    if dim < 1:
        raise OptimizerError("nelder_mead needs at least one dimension")
    if budget < 1:
        raise OptimizerError(f"budget must be >= 1, got {budget}")
    scale = np.broadcast_to(np.asarray(scale, dtype=float), x0.shape)
    trace: List[Tuple[np.ndarray, float]] = []

    def negated(y):
        if len(trace) >= budget:
            raise _BudgetExhausted
        x = x0 + scale * y
        value = float(f(x))
        if not math.isfinite(value):
            raise OptimizerError(f"objective returned non-finite value {value} at {x}")
        trace.append((x.copy(), value))
        return -value

    simplex = np.vstack([np.zeros(dim), np.eye(dim)])
    try:
        minimize(
            negated,
            np.zeros(dim),
            method="Nelder-Mead",
            options={
                "initial_simplex": simplex,
                "xatol": xatol,
                "fatol": np.inf,
                "maxfev": budget,
                "maxiter": 100 * budget,
                "adaptive": False,
            },
        )
    except _BudgetExhausted:
        logger.debug(f"Nelder-Mead stopped at the budget of {budget} evaluations")

    best = max(range(len(trace)), key=lambda k: trace[k][1])
    return trace[best][0], trace[best][1], trace


# -----------------------
# dCRAB
# -----------------------
@dataclass
class IterationRow:
    step: str
    super_idx: int
    eval_idx: int
    coeffs: List[float]
    fom: float
    fom_err: float
    best_so_far: float
    label: str = ""

    def to_dict(self) -> Dict:
        return {
            "step": self.step,
            "super_idx": self.super_idx,
            "eval_idx": self.eval_idx,
            "coeffs": self.coeffs,
            "fom": self.fom,
            "fom_err": self.fom_err,
            "best_so_far": self.best_so_far,
            "label": self.label,
        }


@dataclass
class OptimizationRecord:
    iterations: List[IterationRow] = field(default_factory=list)
    best_pulse: Optional[Pulse] = None
    best_fom: float = -math.inf
    best_err: float = 0.0
    frequencies_per_si: List[Dict[str, List[float]]] = field(default_factory=list)

    def best_so_far(self) -> List[float]:
        return [row.best_so_far for row in self.iterations]

    def summary(self) -> Dict:
        return {
            "evaluations": len(self.iterations),
            "best_fom": self.best_fom,
            "best_err": self.best_err,
            "frequencies_MHz": [
                {ch: [to_mhz(w) for w in ws] for ch, ws in si.items()}
                for si in self.frequencies_per_si
            ],
        }


class FomJournal:
    """Append-only JSON-lines log of FoM evaluations with replay on restart"""

    def __init__(self, data: DataManager, filename: str = "record.jsonl"):
        self.data = data
        self.filename = filename
        self._replay = data.read_jsonl(filename)
        self._pos = 0
        if self._replay:
            logger.info(f"🔄 Resuming: {len(self._replay)} recorded evaluations in {filename}")

    @property
    def replaying(self) -> bool:
        return self._pos < len(self._replay)

    def recorded(self) -> Optional[Dict]:
        """Next recorded row while replaying, else None"""
        return self._replay[self._pos] if self.replaying else None

    def commit(self, row: Dict):
        """Check a replayed row against the recomputed one, or append a new row"""
        if self.replaying:
            expected = json.loads(json.dumps(row, sort_keys=True))
            if self._replay[self._pos] != expected:
                raise OptimizerError(
                    f"journal entry {self._pos} does not match this run; "
                    f"use a fresh output directory or the original configuration"
                )
            self._pos += 1
            return
        self.data.append_jsonl(self.filename, row)


class _Incumbent:
    """Best candidate so far; replaced only by a clear improvement"""

    def __init__(self, pulse: Optional[Pulse], fom: Optional[Tuple[float, float]], threshold: float):
        self.pulse = pulse
        self.threshold = threshold
        self.fom = -math.inf if fom is None else float(fom[0])
        self.err = 0.0 if fom is None else float(fom[1])

    def offer(self, pulse: Pulse, value: float, err: float) -> bool:
        if self.pulse is None or value > self.fom + self.threshold * err:
            self.pulse, self.fom, self.err = pulse, value, err
            return True
        return False


def _evaluate(
    fom_eval: FomEval,
    pulse: Pulse,
    journal: Optional[FomJournal],
    record: OptimizationRecord,
) -> Tuple[float, float]:
    recorded = journal.recorded() if journal is not None else None
    if recorded is not None:
        return float(recorded["fom"]), float(recorded["fom_err"])
    try:
        value, err = fom_eval(pulse)
    except Exception as e:
        raise OptimizerError(f"figure-of-merit evaluation failed: {e}", record) from e
    value, err = float(value), float(err)
    if not (math.isfinite(value) and math.isfinite(err)):
        raise OptimizerError(f"figure of merit is not finite ({value}, {err})", record)
    return value, err


def _record(
    record: OptimizationRecord,
    journal: Optional[FomJournal],
    incumbent: _Incumbent,
    row: IterationRow,
):
    record.iterations.append(row)
    record.best_pulse = incumbent.pulse
    record.best_fom = incumbent.fom
    record.best_err = incumbent.err
    if journal is not None:
        journal.commit(row.to_dict())


def candidate_pulse(
    base: Pulse,
    coeffs: np.ndarray,
    freqs: Dict[str, np.ndarray],
    config: DcrabConfig,
) -> Pulse:
    """Superimpose A sin + B cos per drawn frequency on each configured channel"""
    pulse = base
    n = config.n_basis
    for c, channel in enumerate(config.channels):
        block = coeffs[2 * n * c : 2 * n * (c + 1)]
        terms = [(block[2 * l], block[2 * l + 1], freqs[channel][l]) for l in range(n)]
        pulse = fourier_pulse(pulse, terms, channel, config.bandwidth_cap)
    return pulse


def dcrab_optimize(
    guess: Pulse,
    fom_eval: FomEval,
    config: DcrabConfig,
    guess_fom: Optional[Tuple[float, float]] = None,
    journal: Optional[FomJournal] = None,
    record: Optional[OptimizationRecord] = None,
) -> OptimizationRecord:
    """dCRAB super-iterations starting from ``guess``.

    Each super-iteration draws fresh basis frequencies and runs Nelder-Mead
    over the coefficients from zero, i.e. from the current best pulse.
    ``guess_fom`` seeds the incumbent when the guess was already evaluated.
    """
    record = record if record is not None else OptimizationRecord()
    rng = np.random.default_rng(config.seed)
    incumbent = _Incumbent(guess if guess_fom is not None else None, guess_fom, config.noise_threshold)
    lo, hi = config.freq_interval
    scale = config.scales()

    for si in range(config.n_super):
        freqs = {ch: rng.uniform(lo, hi, size=config.n_basis) for ch in config.channels}
        record.frequencies_per_si.append({ch: [float(w) for w in ws] for ch, ws in freqs.items()})
        base = incumbent.pulse if incumbent.pulse is not None else guess
        counter = [0]

        def objective(x, base=base, freqs=freqs, si=si):
            try:
                pulse = candidate_pulse(base, x, freqs, config)
            except PulseError as e:
                raise OptimizerError(f"invalid candidate pulse: {e}", record) from e
            value, err = _evaluate(fom_eval, pulse, journal, record)
            incumbent.offer(pulse, value, err)
            row = IterationRow(
                step="dcrab",
                super_idx=si,
                eval_idx=counter[0],
                coeffs=[float(c) for c in x],
                fom=value,
                fom_err=err,
                best_so_far=incumbent.fom,
            )
            counter[0] += 1
            _record(record, journal, incumbent, row)
            return value

        _, best_value, trace = nelder_mead(
            objective, np.zeros(config.dim), scale, config.max_fom_evals, config.xatol
        )
        logger.info(
            f"🔄 Super-iteration {si + 1}/{config.n_super}: {len(trace)} evaluations, "
            f"best {best_value:+.6f}, incumbent {incumbent.fom:+.6f}"
        )

    if incumbent.pulse is None:
        raise OptimizerError("no successful figure-of-merit evaluation", record)
    return record


# -----------------------
# ARISE
# -----------------------
@dataclass
class StepWinner:
    spec: object
    pulse: Pulse
    fom: float
    fom_err: float

    def to_dict(self):
        spec = self.spec.to_dict() if hasattr(self.spec, "to_dict") else None
        return {"spec": spec, "fom": self.fom, "fom_err": self.fom_err}


@dataclass
class AriseResult:
    step1: StepWinner
    step2: StepWinner
    step3: StepWinner
    record: OptimizationRecord

    def chain(self) -> Tuple[float, float, float]:
        return (self.step1.fom, self.step2.fom, self.step3.fom)

    def to_dict(self):
        return {
            "step1_linear": self.step1.to_dict(),
            "step2_multi": self.step2.to_dict(),
            "step3_dcrab": self.step3.to_dict(),
            "record": self.record.summary(),
        }


def _grid_step(
    name: str,
    specs: Sequence,
    build: Callable[[object], Pulse],
    fom_eval: FomEval,
    incumbent: _Incumbent,
    incumbent_spec,
    journal: Optional[FomJournal],
    record: OptimizationRecord,
):
    best_spec = incumbent_spec
    for k, spec in enumerate(specs):
        pulse = build(spec)
        value, err = _evaluate(fom_eval, pulse, journal, record)
        if incumbent.pulse is None or value > incumbent.fom:
            incumbent.pulse, incumbent.fom, incumbent.err = pulse, value, err
            best_spec = spec
        row = IterationRow(
            step=name,
            super_idx=-1,
            eval_idx=k,
            coeffs=[],
            fom=value,
            fom_err=err,
            best_so_far=incumbent.fom,
            label=json.dumps(spec.to_dict(), sort_keys=True),
        )
        _record(record, journal, incumbent, row)
        logger.info(f"🔄 {name} {k + 1}/{len(specs)}: FoM {value:+.6f} ± {err:.6f}")
    return best_spec


def arise(
    step1_grid: Sequence[SweepSpec],
    step2_n_osc: Sequence[int],
    step2_tau: Sequence[float],
    config: DcrabConfig,
    fom_eval: FomEval,
    dt: float = DEFAULT_DT,
    journal: Optional[FomJournal] = None,
) -> AriseResult:
    """Three-step protocol.

    The step-2 multi-sweeps take delta_max and amplitude from the step-1
    winner; a single passage as long as the winning linear sweep is always
    evaluated first. Each step keeps the previous winner as incumbent, so
    the recorded FoM never decreases along the chain.
    """
    if not step1_grid:
        raise OptimizerError("step-1 grid is empty")
    record = OptimizationRecord()
    incumbent = _Incumbent(None, None, 0.0)

    spec1 = _grid_step(
        "linear", step1_grid, lambda s: linear_sweep(s, dt), fom_eval, incumbent, None, journal, record
    )
    if incumbent.pulse is None:
        raise OptimizerError("no successful figure-of-merit evaluation", record)
    step1 = StepWinner(spec1, incumbent.pulse, incumbent.fom, incumbent.err)

    multi = multi_specs(
        spec1.delta_max, step2_n_osc, step2_tau, spec1.amplitude, seed_half_period=spec1.duration
    )
    spec2 = _grid_step(
        "multi", multi, lambda s: sinusoidal_sweep(s, dt), fom_eval, incumbent, spec1, journal, record
    )
    step2 = StepWinner(spec2, incumbent.pulse, incumbent.fom, incumbent.err)

    dcrab_optimize(
        step2.pulse,
        fom_eval,
        config,
        guess_fom=(step2.fom, step2.fom_err),
        journal=journal,
        record=record,
    )
    step3 = StepWinner(None, record.best_pulse, record.best_fom, record.best_err)
    logger.info(
        f"✅ ARISE chain: linear {step1.fom:+.6f} -> multi {step2.fom:+.6f} -> dCRAB {step3.fom:+.6f}"
    )
    return AriseResult(step1, step2, step3, record)


def convergence_columns(record: OptimizationRecord):
    header = ["eval", "step", "super_idx", "fom", "fom_err", "best_so_far"]
    steps = {"linear": 1, "multi": 2, "dcrab": 3}
    rows = record.iterations
    cols = [
        np.arange(len(rows)),
        [steps[r.step] for r in rows],
        [r.super_idx for r in rows],
        [r.fom for r in rows],
        [r.fom_err for r in rows],
        [r.best_so_far for r in rows],
    ]
    return header, cols
