#!/usr/bin/env python3
"""
solver.py

Lindblad master-equation propagation of the electron(+shelf) ⊗ nuclei
density matrix during one microwave shot, repeated shots with electron
re-initialization, and the observables derived from them.

The right-hand side uses the effective non-Hermitian Hamiltonian
Heff = H - i/2 sum R^dagger R:

    drho/dt = -i (Heff rho - rho Heff^dagger) + sum R rho R^dagger

A fixed-step matrix-exponential propagator of the full Liouvillian is
kept alongside as a reference for the adaptive integrator.
"""

import logging
import math
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.integrate import solve_ivp
from scipy.linalg import expm
from scipy.optimize import curve_fit

from cavity import CavityParams, FieldTrace, filter_pulse
from datamanager import DataManager
from pulses import Pulse
from spinsys import (
    N_ELECTRON_LEVELS,
    SystemParams,
    build_lindblad_ops,
    check_nuclei,
    electron_ops_full,
    hamiltonian_parts,
    to_mhz,
)

logger = logging.getLogger("solver")

HERMITIAN_TOL = 1e-10
TRACE_TOL = 1e-9
EIGEN_TOL = 1e-8
BOUND_TOL = 1e-8
FIELD_DT = 1e-3


class SolverError(RuntimeError):
    """Integration failure or a broken density-matrix invariant.

    ``index`` names the batch member when one is to blame.
    """

    def __init__(self, message: str, t: Optional[float] = None, index: Optional[int] = None):
        if t is not None:
            message = f"{message} (t = {t:.6g} us)"
        super().__init__(message)
        self.t = t
        self.index = index


@dataclass(frozen=True)
class SolverSettings:
    method: str = "DOP853"
    rtol: float = 1e-8
    atol: float = 1e-10
    max_step: float = np.inf
    field_dt: float = FIELD_DT
    check_invariants: bool = True


@dataclass(eq=False)
class DensityState:
    rho: np.ndarray
    t: float = 0.0

    @property
    def dim(self) -> int:
        return self.rho.shape[0]

    @property
    def n_nuc(self) -> int:
        return int(round(math.log2(self.dim // N_ELECTRON_LEVELS)))

    def check(self):
        """Raise SolverError when hermiticity, trace or positivity is broken"""
        rho = self.rho
        herm = np.max(np.abs(rho - rho.conj().T))
        if herm >= HERMITIAN_TOL:
            raise SolverError(f"density matrix not Hermitian (max |rho - rho^dagger| = {herm:.3e})", self.t)
        tr = np.trace(rho)
        if abs(tr - 1.0) >= TRACE_TOL:
            raise SolverError(f"trace drifted to {tr.real:.12f}", self.t)
        low = np.linalg.eigvalsh(0.5 * (rho + rho.conj().T))[0]
        if low <= -EIGEN_TOL:
            raise SolverError(f"negative eigenvalue {low:.3e}", self.t)

    def purity(self) -> float:
        return float(np.real(np.trace(self.rho @ self.rho)))

    def nuclear_reduced(self) -> np.ndarray:
        """Partial trace over the electron factor"""
        n = self.dim // N_ELECTRON_LEVELS
        return np.einsum("aiaj->ij", self.rho.reshape(N_ELECTRON_LEVELS, n, N_ELECTRON_LEVELS, n))

    def electron_populations(self) -> np.ndarray:
        n = self.dim // N_ELECTRON_LEVELS
        diag = np.real(np.diagonal(self.rho)).reshape(N_ELECTRON_LEVELS, n)
        return diag.sum(axis=1)


@dataclass(frozen=True, eq=False)
class PolarizationTrace:
    """Observables sampled during one shot"""

    t: np.ndarray
    p_nuc: np.ndarray
    pop_electron: np.ndarray

    def __post_init__(self):
        if np.any(np.abs(self.p_nuc) > 1.0 + BOUND_TOL):
            raise SolverError("nuclear polarization outside [-1, 1]")
        totals = self.pop_electron.sum(axis=1)
        if np.any(np.abs(totals - 1.0) > BOUND_TOL):
            raise SolverError("electron populations do not sum to 1")

    @property
    def p_mean(self) -> np.ndarray:
        return self.p_nuc.mean(axis=1)

    @property
    def final(self) -> float:
        return float(self.p_mean[-1])

    def columns(self):
        header = ["t", "p_mean"] + [f"p_nuc_{i + 1}" for i in range(self.p_nuc.shape[1])]
        header += ["pop0", "pop1", "pop_shelf"]
        cols = [self.t, self.p_mean] + list(self.p_nuc.T) + list(self.pop_electron.T)
        return header, cols

    def save(self, path: str):
        header, cols = self.columns()
        DataManager.write_csv(path, header, cols)

    @classmethod
    def mean_of(cls, traces: Sequence["PolarizationTrace"]) -> "PolarizationTrace":
        """Sample-wise average of traces on a common grid"""
        return cls(
            traces[0].t,
            np.mean([tr.p_nuc for tr in traces], axis=0),
            np.mean([tr.pop_electron for tr in traces], axis=0),
        )


# -----------------------
# States and observables
# -----------------------
def _nuclear_state(polarizations: Sequence[float]) -> np.ndarray:
    rho = np.ones((1, 1), dtype=complex)
    for p in polarizations:
        rho = np.kron(rho, np.diag([(1.0 + p) / 2.0, (1.0 - p) / 2.0]).astype(complex))
    return rho


def initial_state(params: SystemParams) -> DensityState:
    """diag(p0, p1, ps) ⊗ nuclear product state"""
    check_nuclei(params.n_nuc)
    electron = np.diag(params.electron_init).astype(complex)
    return DensityState(np.kron(electron, _nuclear_state(params.nuclear_polarizations())), 0.0)


def reinitialize(state: DensityState, params: SystemParams) -> DensityState:
    """Fresh electron, nuclear block (with its correlations) kept"""
    electron = np.diag(params.electron_init).astype(complex)
    return DensityState(np.kron(electron, state.nuclear_reduced()), state.t)


def _z_signs(n_nuc: int) -> np.ndarray:
    """<2 I_z^i> eigenvalue of every nuclear basis state, shape (N, 2^N)"""
    idx = np.arange(2**n_nuc)
    return np.array([1.0 - 2.0 * ((idx >> (n_nuc - 1 - i)) & 1) for i in range(n_nuc)])


def observables(rhos: np.ndarray, n_nuc: int) -> Tuple[np.ndarray, np.ndarray]:
    """Per-nucleus <2 I_z> and electron populations for a stack of states"""
    n = 2**n_nuc
    diag = np.real(np.diagonal(rhos, axis1=-2, axis2=-1)).reshape(-1, N_ELECTRON_LEVELS, n)
    pops = diag.sum(axis=2)
    p_nuc = diag.sum(axis=1) @ _z_signs(n_nuc).T
    return p_nuc, pops


# -----------------------
# Propagation
# -----------------------
class _Dynamics:
    """Right-hand side pieces for a batch of parameter sets sharing one field.

    Every set must have the same number of nuclei and the same rates; only
    the static Hamiltonian differs between batch members. The jump
    operators act on the electron factor alone, so their sandwich term is
    applied as a contraction over the electron indices.
    """

    def __init__(self, params_list: Sequence[SystemParams]):
        first = params_list[0]
        for p in params_list[1:]:
            if p.n_nuc != first.n_nuc or p.rates != first.rates:
                raise SolverError("batched parameter sets must share nuclei count and rates")
        parts = [hamiltonian_parts(p) for p in params_list]
        h0 = np.array([part[0] for part in parts])
        sx, sy = parts[0][1], parts[0][2]
        ops = [r for r in build_lindblad_ops(first.rates, first.n_nuc) if np.any(r)]
        loss = sum((r.conj().T @ r for r in ops), np.zeros_like(sx))
        n = 2**first.n_nuc
        self.heff0 = h0 - 0.5j * loss
        self.sx = sx
        self.sy = sy
        self.ops = [(r, r.conj().T) for r in ops]
        self.size = h0.shape[0]
        self.dim = h0.shape[1]
        self.blocks = (self.size, N_ELECTRON_LEVELS, n, N_ELECTRON_LEVELS, n)
        # r = r_e ⊗ 1, so the electron factor sits on the stride-n sub-grid
        electron = [r[::n, ::n] for r in ops]
        self.jump = sum(np.einsum("ac,bd->acbd", e, e.conj()) for e in electron) if electron else None

    def rhs(self, omega: complex, rho: np.ndarray) -> np.ndarray:
        """rho: Hermitian stack of shape (batch, dim, dim)"""
        heff = self.heff0 + (omega.real * self.sx + omega.imag * self.sy)
        a = heff @ rho
        out = -1j * (a - np.conj(np.swapaxes(a, -1, -2)))
        if self.jump is not None:
            moved = np.tensordot(rho.reshape(self.blocks), self.jump, axes=([1, 3], [1, 3]))
            out += moved.transpose(0, 3, 1, 4, 2).reshape(rho.shape)
        return out

    def liouvillian(self, omega: complex, k: int = 0) -> np.ndarray:
        """Row-major superoperator of member k: vec(A rho B) = (A ⊗ B^T) vec(rho)"""
        eye = np.eye(self.dim)
        heff = self.heff0[k] + omega.real * self.sx + omega.imag * self.sy
        sup = -1j * (np.kron(heff, eye) - np.kron(eye, heff.conj()))
        for r, _ in self.ops:
            sup = sup + np.kron(r, r.conj())
        return sup


def _resolve_field(
    pulse: Optional[Pulse], cav: Optional[CavityParams], field: Optional[FieldTrace], dt: float
) -> FieldTrace:
    if field is not None:
        return field
    if pulse is None or cav is None:
        raise SolverError("need either a pulse with cavity parameters or a field trace")
    return filter_pulse(pulse, cav, dt_out=min(pulse.dt, dt))


def _field_interpolator(field: FieldTrace):
    """Scalar evaluation of the field's cubic spline (C2 in time)"""
    coef = field.spline().c
    c0, c1, c2, c3 = (coef[k, :, 0] + 1j * coef[k, :, 1] for k in range(4))
    knots = field.t
    t0 = knots[0]
    h = field.dt
    last = c0.size - 1

    def omega_at(t: float) -> complex:
        i = min(max(int((t - t0) / h), 0), last)
        x = t - knots[i]
        return ((c0[i] * x + c1[i]) * x + c2[i]) * x + c3[i]

    return omega_at


def propagate_batch(
    states: Sequence[DensityState],
    params_list: Sequence[SystemParams],
    field: FieldTrace,
    n_out: int = 201,
    settings: Optional[SolverSettings] = None,
) -> Tuple[List[PolarizationTrace], List[DensityState]]:
    """One shot for several parameter sets driven by the same field.

    All members are integrated as one system, so the adaptive step is shared.
    A broken invariant raises SolverError with ``index`` set to the member.
    """
    settings = settings or SolverSettings()
    if n_out < 2:
        raise SolverError(f"n_out must be >= 2, got {n_out}")
    if len(states) != len(params_list) or not states:
        raise SolverError(f"need one state per parameter set, got {len(states)} and {len(params_list)}")
    for k, (state, params) in enumerate(zip(states, params_list)):
        if state.dim != params.dim:
            raise SolverError(
                f"state dimension {state.dim} does not match parameters ({params.dim})", index=k
            )

    dyn = _Dynamics(params_list)
    omega_at = _field_interpolator(field)
    shape = (dyn.size, dyn.dim, dyn.dim)
    t0, t1 = float(field.t[0]), float(field.t[-1])
    t_eval = np.linspace(t0, t1, n_out)
    start = states[0].t

    def rhs(t, y):
        return dyn.rhs(omega_at(t), y.reshape(shape)).ravel()

    y0 = np.array([s.rho for s in states], dtype=complex).ravel()
    sol = solve_ivp(
        rhs,
        (t0, t1),
        y0,
        method=settings.method,
        t_eval=t_eval,
        rtol=settings.rtol,
        atol=settings.atol,
        max_step=settings.max_step,
    )
    if sol.status != 0 or sol.y.shape[1] != n_out:
        reached = float(sol.t[-1]) if sol.t.size else t0
        raise SolverError(f"integrator failed: {sol.message}", start + reached - t0)

    rhos = sol.y.T.reshape((n_out,) + shape)
    n_nuc = params_list[0].n_nuc
    traces, finals = [], []
    for k, state in enumerate(states):
        member = rhos[:, k]
        if settings.check_invariants:
            for j in range(n_out):
                try:
                    DensityState(member[j], state.t + t_eval[j] - t0).check()
                except SolverError as e:
                    e.index = k
                    raise
        p_nuc, pops = observables(member, n_nuc)
        traces.append(PolarizationTrace(t_eval - t0, p_nuc, pops))
        finals.append(DensityState(member[-1].copy(), state.t + (t1 - t0)))
    logger.debug(f"Propagated {dyn.size} parameter sets over {t1 - t0:g} us")
    return traces, finals


def propagate(
    state: DensityState,
    pulse: Optional[Pulse],
    params: SystemParams,
    cav: Optional[CavityParams] = None,
    n_out: int = 201,
    settings: Optional[SolverSettings] = None,
    field: Optional[FieldTrace] = None,
) -> Tuple[PolarizationTrace, DensityState]:
    """One shot of the master equation under a pulse (or a given field).

    Returns ``n_out`` equally spaced observable samples in pulse time and the
    final state, whose time is advanced by the pulse duration.
    """
    settings = settings or SolverSettings()
    field = _resolve_field(pulse, cav, field, settings.field_dt)
    traces, finals = propagate_batch([state], [params], field, n_out, settings)
    logger.debug(f"Final p_mean = {traces[0].final:+.6f}")
    return traces[0], finals[0]


def propagate_expm(
    state: DensityState,
    field: FieldTrace,
    params: SystemParams,
    n_out: int = 201,
    step: float = 1e-3,
) -> Tuple[PolarizationTrace, DensityState]:
    """Fixed-step reference propagator.

    The field (same spline as the adaptive integrator) is held at its
    midpoint value over each step and the exact Liouvillian exponential is
    applied; propagators are cached per field value.
    """
    if step > 1e-3 + 1e-15:
        raise SolverError(f"reference step must be <= 1 ns, got {step} us")
    dyn = _Dynamics([params])
    t0, t1 = float(field.t[0]), float(field.t[-1])
    n_steps = int(round((t1 - t0) / step))
    h = (t1 - t0) / n_steps
    per_out = n_steps / (n_out - 1)
    if abs(per_out - round(per_out)) > 1e-9:
        raise SolverError("output samples must fall on reference steps")
    per_out = int(round(per_out))

    cache = {}
    spline = field.spline()
    mids = spline(t0 + (np.arange(n_steps) + 0.5) * h)
    mids = mids[:, 0] + 1j * mids[:, 1]
    vec = state.rho.ravel().astype(complex)
    rhos = [vec.reshape(dyn.dim, dyn.dim).copy()]
    for k in range(n_steps):
        key = complex(mids[k])
        if key not in cache:
            cache[key] = expm(dyn.liouvillian(key) * h)
        vec = cache[key] @ vec
        if (k + 1) % per_out == 0:
            rhos.append(vec.reshape(dyn.dim, dyn.dim).copy())

    rhos = np.array(rhos)
    p_nuc, pops = observables(rhos, params.n_nuc)
    t_out = np.linspace(0.0, t1 - t0, n_out)
    return PolarizationTrace(t_out, p_nuc, pops), DensityState(rhos[-1], state.t + t1 - t0)


def run_shots_batch(
    params_list: Sequence[SystemParams],
    field: FieldTrace,
    n_shots: int,
    settings: Optional[SolverSettings] = None,
    n_out: int = 2,
) -> Tuple[np.ndarray, List[PolarizationTrace]]:
    """Repeated shots for a batch; values have shape (batch, n_shots)"""
    if n_shots < 1:
        raise SolverError(f"n_shots must be >= 1, got {n_shots}")
    states = [initial_state(p) for p in params_list]
    values = np.empty((len(params_list), n_shots))
    traces = []
    for shot in range(n_shots):
        if shot:
            states = [reinitialize(s, p) for s, p in zip(states, params_list)]
        traces, states = propagate_batch(states, params_list, field, n_out, settings)
        values[:, shot] = [tr.final for tr in traces]
    return values, traces


def run_shots(
    pulse: Optional[Pulse],
    params: SystemParams,
    cav: Optional[CavityParams],
    n_shots: int,
    settings: Optional[SolverSettings] = None,
    field: Optional[FieldTrace] = None,
    n_out: int = 2,
) -> Tuple[np.ndarray, PolarizationTrace]:
    """Repeated shots; returns p_mean after every shot and the last shot's trace"""
    if n_shots < 1:
        raise SolverError(f"n_shots must be >= 1, got {n_shots}")
    settings = settings or SolverSettings()
    field = _resolve_field(pulse, cav, field, settings.field_dt)
    values, traces = run_shots_batch([params], field, n_shots, settings, n_out)
    return values[0], traces[0]


def repeat_shots(
    pulse: Optional[Pulse],
    params: SystemParams,
    cav: Optional[CavityParams],
    n_shots: int,
    settings: Optional[SolverSettings] = None,
    field: Optional[FieldTrace] = None,
) -> np.ndarray:
    """Mean nuclear polarization after each shot"""
    values, _ = run_shots(pulse, params, cav, n_shots, settings, field)
    return values


# -----------------------
# Hartmann-Hahn window
# -----------------------
def hh_window(field: FieldTrace, omega_L: float) -> Tuple[np.ndarray, np.ndarray]:
    """Detuning bounds -/+ sqrt(omega_L^2 - |Omega_int|^2); NaN where the window is closed"""
    gap = omega_L**2 - np.abs(field.omega_int) ** 2
    bound = np.full(gap.shape, np.nan)
    open_ = gap >= 0
    bound[open_] = np.sqrt(gap[open_])
    return -bound, bound


def window_rate_ratio(
    trace: PolarizationTrace, field: FieldTrace, omega_L: float, delta: np.ndarray
) -> float:
    """Mean |dp/dt| inside the Hartmann-Hahn window over the mean outside it.

    ``delta`` is the drive detuning sampled on the field grid.
    """
    times = trace.t + field.t[0]
    _, upper = hh_window(FieldTrace(times, field.at(times)), omega_L)
    det = np.interp(times, field.t, delta)
    rate = np.abs(np.gradient(trace.p_mean, trace.t))
    inside = np.isfinite(upper) & (np.abs(det) <= np.nan_to_num(upper, nan=-1.0))
    if not inside.any() or inside.all():
        raise SolverError("window rate ratio needs samples both inside and outside the window")
    outside_rate = rate[~inside].mean()
    inside_rate = rate[inside].mean()
    return math.inf if outside_rate == 0 else float(inside_rate / outside_rate)


# -----------------------
# Hahn echo
# -----------------------
@dataclass(frozen=True, eq=False)
class EchoResult:
    two_tau: np.ndarray
    amplitude: np.ndarray
    t2: float

    def to_dict(self):
        return {
            "two_tau_us": [float(x) for x in self.two_tau],
            "amplitude": [float(x) for x in self.amplitude],
            "t2_us": self.t2,
        }


def _rotation(params: SystemParams, angle: float) -> np.ndarray:
    sx, _, _ = electron_ops_full(params.n_nuc)
    return expm(-1j * angle * sx)


def hahn_echo(params: SystemParams, tau_values: Sequence[float]) -> EchoResult:
    """Ideal pi/2 - tau - pi - tau echo; coherence 2|rho_01| against 2 tau.

    The free evolution uses the undriven Liouvillian, so static detuning is
    refocused and only the Lindblad channels shorten the echo.
    """
    tau_values = np.asarray(tau_values, dtype=float)
    if tau_values.size < 3 or np.any(tau_values <= 0):
        raise SolverError("hahn_echo needs at least three positive delays")
    dyn = _Dynamics([params])
    free = dyn.liouvillian(0j)
    half = _rotation(params, math.pi / 2)
    flip = _rotation(params, math.pi)
    rho0 = initial_state(params).rho
    n = 2**params.n_nuc
    amps = []
    for tau in tau_values:
        evolve = expm(free * tau)
        rho = half @ rho0 @ half.conj().T
        rho = (evolve @ rho.ravel()).reshape(rho.shape)
        rho = flip @ rho @ flip.conj().T
        rho = (evolve @ rho.ravel()).reshape(rho.shape)
        block = rho.reshape(N_ELECTRON_LEVELS, n, N_ELECTRON_LEVELS, n)
        amps.append(2.0 * abs(np.einsum("ii->", block[0, :, 1, :])))
    amps = np.array(amps)
    two_tau = 2.0 * tau_values

    def decay(x, a, t2):
        return a * np.exp(-x / t2)

    try:
        (a, t2), _ = curve_fit(decay, two_tau, amps, p0=(amps[0], two_tau[-1]), maxfev=2000)
    except RuntimeError as e:
        raise SolverError(f"echo decay fit failed: {e}") from e
    logger.info(f"✅ Simulated echo T2 = {t2:.3f} us")
    return EchoResult(two_tau, amps, float(t2))


def field_columns(field: FieldTrace, times: np.ndarray, pulse: Optional[Pulse] = None):
    """FieldTrace CSV columns resampled onto ``times``"""
    omega = field.at(times + field.t[0])
    header = ["t_us", "omega_int_abs_MHz", "omega_int_re_MHz", "omega_int_im_MHz"]
    cols = [times, to_mhz(np.abs(omega)), to_mhz(omega.real), to_mhz(omega.imag)]
    if pulse is not None:
        header.append("omega_ext_MHz")
        cols.append(to_mhz(np.interp(times + pulse.t[0], pulse.t, pulse.omega_ext)))
    return header, cols
