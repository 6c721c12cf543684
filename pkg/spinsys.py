#!/usr/bin/env python3
"""
spinsys.py

Physical parameters and operators for the photoexcited triplet electron
coupled to a handful of nuclear spins:

- the electron is reduced to the two driven sublevels |0>, |1> plus a
  non-interacting shelf level |s> that collects the triplet decay
- each nucleus is a spin-1/2 with secular hyperfine coupling to S_z
- Hamiltonian in the rotating frame of the microwave drive
- Lindblad operators for electron dephasing and triplet decay

Units: time in microseconds, every frequency stored as angular frequency
(rad/us). Files and user-facing values are linear MHz; convert with
``mhz`` / ``to_mhz`` at the boundary.
"""

import logging
import math
from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import Dict, List, Optional, Tuple

import numpy as np
from scipy import constants

from datamanager import DataManager

logger = logging.getLogger("spinsys")

TWO_PI = 2.0 * math.pi

# Electron gyromagnetic ratio in rad/us per mT (CODATA magnitude)
GAMMA_ELECTRON = abs(constants.physical_constants["electron gyromag. ratio"][0]) * 1e-9
# Proton gyromagnetic ratio in rad/us per mT
GAMMA_PROTON = abs(constants.physical_constants["proton gyromag. ratio"][0]) * 1e-9

N_ELECTRON_LEVELS = 3
SHELF = 2
ALLOWED_NUCLEI = (1, 2, 3)


class ParamError(ValueError):
    """Raised when physical parameters violate their invariants"""


def mhz(value):
    """Linear MHz -> angular rad/us"""
    return TWO_PI * np.asarray(value, dtype=float) if np.ndim(value) else TWO_PI * float(value)


def to_mhz(value):
    """Angular rad/us -> linear MHz"""
    return np.asarray(value) / TWO_PI if np.ndim(value) else float(value) / TWO_PI


def _check_finite(name: str, value: float):
    if not math.isfinite(value):
        raise ParamError(f"{name} must be finite, got {value}")


@dataclass(frozen=True)
class ZeroFieldParams:
    """Zero-field splitting and Zeeman inputs of the triplet.

    E is carried for completeness only; the propagated dynamics use the
    two-level reduction and E never enters them.
    """

    D: float = TWO_PI * 1395.0
    E: float = TWO_PI * -53.0
    gamma_S: float = GAMMA_ELECTRON
    B0: float = 230.0

    def __post_init__(self):
        for name in ("D", "E", "gamma_S", "B0"):
            _check_finite(name, getattr(self, name))
        if self.D < 0:
            raise ParamError(f"D must be >= 0, got {self.D}")
        if self.B0 < 0:
            raise ParamError(f"B0 must be >= 0, got {self.B0}")

    @property
    def omega_0S(self) -> float:
        return -self.gamma_S * self.B0


@dataclass(frozen=True)
class HyperfineTensor:
    """Secular hyperfine row (A_zx, A_zy, A_zz) in rad/us"""

    a_zx: float = 0.0
    a_zy: float = 0.0
    a_zz: float = 0.0

    def __post_init__(self):
        for name in ("a_zx", "a_zy", "a_zz"):
            _check_finite(name, getattr(self, name))

    @property
    def norm(self) -> float:
        return math.sqrt(self.a_zx**2 + self.a_zy**2 + self.a_zz**2)

    def as_tuple(self) -> Tuple[float, float, float]:
        return (self.a_zx, self.a_zy, self.a_zz)


@dataclass(frozen=True)
class DissipationRates:
    """Electron dephasing and triplet-to-singlet loss rates (1/us)"""

    gamma_el: float = 1.0 / 10.0
    gamma_loss0: float = 1.0 / 80.0
    gamma_loss1: float = 1.0 / 180.0

    def __post_init__(self):
        for name in ("gamma_el", "gamma_loss0", "gamma_loss1"):
            value = getattr(self, name)
            _check_finite(name, value)
            if value < 0:
                raise ParamError(f"{name} must be >= 0, got {value}")


def _default_couplings() -> Tuple[HyperfineTensor, ...]:
    return (HyperfineTensor(), HyperfineTensor(), HyperfineTensor())


@dataclass(frozen=True)
class SystemParams:
    """Everything the Hamiltonian and dissipators depend on.

    ``nuclear_init`` holds one initial polarization <2 I_z> per nucleus;
    ``None`` means an unpolarized (maximally mixed) bath.
    """

    zfs: ZeroFieldParams = field(default_factory=ZeroFieldParams)
    omega_L: float = TWO_PI * 9.2
    couplings: Tuple[HyperfineTensor, ...] = field(default_factory=_default_couplings)
    delta_es: float = 0.0
    rates: DissipationRates = field(default_factory=DissipationRates)
    electron_init: Tuple[float, float, float] = (1.0, 0.0, 0.0)
    nuclear_init: Optional[Tuple[float, ...]] = None

    def __post_init__(self):
        object.__setattr__(self, "couplings", tuple(self.couplings))
        object.__setattr__(self, "electron_init", tuple(float(p) for p in self.electron_init))
        _check_finite("omega_L", self.omega_L)
        _check_finite("delta_es", self.delta_es)
        if self.omega_L <= 0:
            raise ParamError(f"omega_L must be > 0, got {self.omega_L}")

        if len(self.electron_init) != 3:
            raise ParamError("electron_init needs three populations (p0, p1, ps)")
        if any(p < 0 for p in self.electron_init):
            raise ParamError(f"electron_init populations must be >= 0: {self.electron_init}")
        if abs(sum(self.electron_init) - 1.0) > 1e-9:
            raise ParamError(f"electron_init must sum to 1, got {sum(self.electron_init)}")

        if self.nuclear_init is not None:
            init = tuple(float(p) for p in self.nuclear_init)
            object.__setattr__(self, "nuclear_init", init)
            if len(init) != len(self.couplings):
                raise ParamError(
                    f"nuclear_init has {len(init)} entries for {len(self.couplings)} nuclei"
                )
            if any(abs(p) > 1.0 for p in init):
                raise ParamError(f"nuclear polarizations must lie in [-1, 1]: {init}")

    @property
    def n_nuc(self) -> int:
        return len(self.couplings)

    @property
    def dim(self) -> int:
        return N_ELECTRON_LEVELS * 2**self.n_nuc

    def nuclear_polarizations(self) -> Tuple[float, ...]:
        if self.nuclear_init is None:
            return (0.0,) * self.n_nuc
        return self.nuclear_init

    def with_nuclei(
        self, couplings, delta_es: Optional[float] = None
    ) -> "SystemParams":
        """Copy with a new coupling set; per-nucleus initial polarization is reset"""
        changes = {"couplings": tuple(couplings), "nuclear_init": None}
        if delta_es is not None:
            changes["delta_es"] = float(delta_es)
        return replace(self, **changes)


def resonance_frequency(zfs: ZeroFieldParams) -> float:
    """Angular frequency of the driven transition, D - omega_0S"""
    return zfs.D - zfs.omega_0S


# -----------------------
# Operators
# -----------------------
def check_nuclei(n_nuc: int):
    if n_nuc not in ALLOWED_NUCLEI:
        raise ParamError(f"number of nuclei must be one of {ALLOWED_NUCLEI}, got {n_nuc}")


def _frozen(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@lru_cache(maxsize=None)
def electron_ops() -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """S_x, S_y, S_z on {|0>, |1>, |s>}; zero on the shelf row and column"""
    sx = np.zeros((3, 3), dtype=complex)
    sy = np.zeros((3, 3), dtype=complex)
    sz = np.zeros((3, 3), dtype=complex)
    sx[0, 1] = sx[1, 0] = 0.5
    sy[0, 1] = -0.5j
    sy[1, 0] = 0.5j
    sz[0, 0] = 0.5
    sz[1, 1] = -0.5
    return _frozen(sx), _frozen(sy), _frozen(sz)


@lru_cache(maxsize=None)
def _pauli_halves() -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    ix = np.array([[0, 0.5], [0.5, 0]], dtype=complex)
    iy = np.array([[0, -0.5j], [0.5j, 0]], dtype=complex)
    iz = np.array([[0.5, 0], [0, -0.5]], dtype=complex)
    return ix, iy, iz


def embed(op_electron: np.ndarray, n_nuc: int, nuc_ops: Optional[Dict[int, np.ndarray]] = None):
    """Kronecker product electron ⊗ nucleus_1 ⊗ ... ⊗ nucleus_N"""
    nuc_ops = nuc_ops or {}
    out = op_electron
    for i in range(n_nuc):
        out = np.kron(out, nuc_ops.get(i, np.eye(2)))
    return out


@lru_cache(maxsize=None)
def nuclear_ops(n_nuc: int) -> Tuple[Tuple[np.ndarray, np.ndarray, np.ndarray], ...]:
    """(I_x, I_y, I_z) of every nucleus embedded in the full space"""
    ix, iy, iz = _pauli_halves()
    eye_e = np.eye(N_ELECTRON_LEVELS)
    ops = []
    for i in range(n_nuc):
        ops.append(tuple(_frozen(embed(eye_e, n_nuc, {i: op})) for op in (ix, iy, iz)))
    return tuple(ops)


@lru_cache(maxsize=None)
def electron_ops_full(n_nuc: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    return tuple(_frozen(embed(op, n_nuc)) for op in electron_ops())


def hamiltonian_parts(params: SystemParams) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Split H into the static part and the two drive quadratures.

    H(Omega) = H0 + Re(Omega) * Sx + Im(Omega) * Sy
    """
    n_nuc = params.n_nuc
    check_nuclei(n_nuc)
    sx, sy, sz = electron_ops_full(n_nuc)
    h0 = params.delta_es * sz
    for (ix, iy, iz), a in zip(nuclear_ops(n_nuc), params.couplings):
        h0 = h0 + params.omega_L * iz
        h0 = h0 + sz @ (a.a_zx * ix + a.a_zy * iy + a.a_zz * iz)
    return h0, sx, sy


def build_hamiltonian(params: SystemParams, omega_int: complex) -> np.ndarray:
    """Rotating-frame Hamiltonian (units of hbar) for one intracavity field value"""
    omega_int = complex(omega_int)
    if not (math.isfinite(omega_int.real) and math.isfinite(omega_int.imag)):
        raise ParamError(f"omega_int must be finite, got {omega_int}")
    h0, sx, sy = hamiltonian_parts(params)
    return h0 + omega_int.real * sx + omega_int.imag * sy


def build_lindblad_ops(rates: DissipationRates, n_nuc: int = 3) -> List[np.ndarray]:
    """R1 dephasing, R2/R3 decay of |0>/|1> into the shelf"""
    check_nuclei(n_nuc)
    _, _, sz = electron_ops()
    to_shelf0 = np.zeros((3, 3), dtype=complex)
    to_shelf1 = np.zeros((3, 3), dtype=complex)
    to_shelf0[SHELF, 0] = 1.0
    to_shelf1[SHELF, 1] = 1.0
    return [
        math.sqrt(rates.gamma_el / 2.0) * embed(sz, n_nuc),
        math.sqrt(rates.gamma_loss0) * embed(to_shelf0, n_nuc),
        math.sqrt(rates.gamma_loss1) * embed(to_shelf1, n_nuc),
    ]


# -----------------------
# Parameter files
# -----------------------
PARAM_KEYS = (
    "D",
    "E",
    "gamma_S",
    "B0",
    "omega_L",
    "delta_es",
    "gamma_el",
    "gamma_loss0",
    "gamma_loss1",
    "electron_init",
    "nuclear_init",
    "couplings",
)

PARAM_UNITS = {
    "D": "MHz",
    "E": "MHz",
    "gamma_S": "MHz/mT",
    "B0": "mT",
    "omega_L": "MHz",
    "delta_es": "MHz",
    "gamma_el": "1/us",
    "gamma_loss0": "1/us",
    "gamma_loss1": "1/us",
    "electron_init": "populations p0, p1, ps",
    "nuclear_init": "<2 I_z> per nucleus, empty for unpolarized",
    "couplings": "A_zx, A_zy, A_zz in MHz; nuclei separated by ';'",
}


def _floats(text: str) -> List[float]:
    return [float(x) for x in text.split(",") if x.strip()]


def params_to_config(params: SystemParams) -> Dict[str, str]:
    """Flat string mapping with linear-MHz frequencies"""
    couplings = "; ".join(
        ", ".join(repr(to_mhz(c)) for c in a.as_tuple()) for a in params.couplings
    )
    nuclear = "" if params.nuclear_init is None else ", ".join(repr(p) for p in params.nuclear_init)
    return {
        "D": repr(to_mhz(params.zfs.D)),
        "E": repr(to_mhz(params.zfs.E)),
        "gamma_S": repr(to_mhz(params.zfs.gamma_S)),
        "B0": repr(params.zfs.B0),
        "omega_L": repr(to_mhz(params.omega_L)),
        "delta_es": repr(to_mhz(params.delta_es)),
        "gamma_el": repr(params.rates.gamma_el),
        "gamma_loss0": repr(params.rates.gamma_loss0),
        "gamma_loss1": repr(params.rates.gamma_loss1),
        "electron_init": ", ".join(repr(p) for p in params.electron_init),
        "nuclear_init": nuclear,
        "couplings": couplings,
    }


def params_from_config(values: Dict[str, str], base: Optional[SystemParams] = None) -> SystemParams:
    """Overlay the keys present in ``values`` on ``base`` (defaults if omitted)"""
    base = base or SystemParams()
    unknown = set(values) - set(PARAM_KEYS)
    if unknown:
        raise ParamError(f"unknown parameter keys: {sorted(unknown)}")

    def get(key, convert, default):
        if key not in values or str(values[key]).strip() == "":
            return default
        try:
            return convert(values[key])
        except ValueError as e:
            raise ParamError(f"bad value for {key}: {values[key]!r} ({e})") from e

    from_mhz = lambda s: mhz(float(s))  # noqa: E731
    zfs = ZeroFieldParams(
        D=get("D", from_mhz, base.zfs.D),
        E=get("E", from_mhz, base.zfs.E),
        gamma_S=get("gamma_S", from_mhz, base.zfs.gamma_S),
        B0=get("B0", float, base.zfs.B0),
    )
    rates = DissipationRates(
        gamma_el=get("gamma_el", float, base.rates.gamma_el),
        gamma_loss0=get("gamma_loss0", float, base.rates.gamma_loss0),
        gamma_loss1=get("gamma_loss1", float, base.rates.gamma_loss1),
    )

    def parse_couplings(text: str) -> Tuple[HyperfineTensor, ...]:
        tensors = []
        for chunk in text.split(";"):
            comps = _floats(chunk)
            if len(comps) != 3:
                raise ValueError(f"coupling needs 3 components, got {chunk.strip()!r}")
            tensors.append(HyperfineTensor(*(mhz(c) for c in comps)))
        return tuple(tensors)

    couplings = get("couplings", parse_couplings, base.couplings)
    nuclear_init = get("nuclear_init", lambda s: tuple(_floats(s)), None)
    if nuclear_init is None and "couplings" not in values:
        nuclear_init = base.nuclear_init

    return SystemParams(
        zfs=zfs,
        omega_L=get("omega_L", from_mhz, base.omega_L),
        couplings=couplings,
        delta_es=get("delta_es", from_mhz, base.delta_es),
        rates=rates,
        electron_init=get("electron_init", lambda s: tuple(_floats(s)), base.electron_init),
        nuclear_init=nuclear_init,
    )


def save_params(params: SystemParams, path: str):
    """Write a ``key = value`` parameter file with units in comments"""
    DataManager.write_kv(path, params_to_config(params), comments=PARAM_UNITS)
    logger.info(f"💾 Saved system parameters to {path}")


def load_params(path: str, base: Optional[SystemParams] = None) -> SystemParams:
    values = DataManager.read_kv(path)
    return params_from_config(values, base)
