#!/usr/bin/env python3
"""
ensemble.py

Coupling table from proton positions, ensemble sampling (three nuclei out
of the most strongly coupled ones plus a static electron detuning) and the
figure of merit averaged over instances.
"""

import hashlib
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
from scipy import constants

from cavity import CavityParams, FieldTrace, filter_pulse
from datamanager import DataManager
from pulses import Pulse
from solver import PolarizationTrace, SolverError, SolverSettings, run_shots_batch
from spinsys import (
    ALLOWED_NUCLEI,
    GAMMA_ELECTRON,
    GAMMA_PROTON,
    TWO_PI,
    HyperfineTensor,
    SystemParams,
)

logger = logging.getLogger("ensemble")

MIN_DISTANCE_NM = 0.05
FWHM_TO_SIGMA = 1.0 / (2.0 * math.sqrt(2.0 * math.log(2.0)))
DEFAULT_TABLE = os.path.join(os.path.dirname(os.path.abspath(__file__)), "data", "proton_table.csv")
TABLE_HEADER = ("x_nm", "y_nm", "z_nm")
BATCH_SIZE = 25


class EnsembleError(RuntimeError):
    """Bad ensemble inputs or a failing instance"""

    def __init__(self, message: str, index: Optional[int] = None):
        if index is not None:
            message = f"instance {index}: {message}"
        super().__init__(message)
        self.index = index


def compute_hyperfine(
    position, gamma_S: float = GAMMA_ELECTRON, gamma_I: float = GAMMA_PROTON
) -> HyperfineTensor:
    """Point-dipole secular row A_zk = d (delta_zk - 3 n_z n_k).

    Position in nm, gyromagnetic ratios in rad/us per mT, result in rad/us.
    """
    r_vec = np.asarray(position, dtype=float)
    r = float(np.linalg.norm(r_vec))
    if r <= MIN_DISTANCE_NM:
        raise EnsembleError(f"nucleus at {r:.4f} nm is too close for the point-dipole model")
    n = r_vec / r
    # rad/us per mT -> rad/s per T
    g_s = gamma_S * 1e9
    g_i = gamma_I * 1e9
    d = constants.mu_0 * g_s * g_i * constants.hbar / (4.0 * math.pi * (r * 1e-9) ** 3)
    d *= 1e-6
    return HyperfineTensor(
        a_zx=-3.0 * d * n[2] * n[0],
        a_zy=-3.0 * d * n[2] * n[1],
        a_zz=d * (1.0 - 3.0 * n[2] * n[2]),
    )


@dataclass(frozen=True, eq=False)
class ProtonTable:
    positions: np.ndarray
    tensors: Tuple[HyperfineTensor, ...]
    ranking: np.ndarray

    def __post_init__(self):
        if len(self.positions) != len(self.tensors):
            raise EnsembleError("positions and tensors differ in length")
        if len(self.positions) and np.any(np.linalg.norm(self.positions, axis=1) <= MIN_DISTANCE_NM):
            raise EnsembleError("a proton sits at the electron origin")
        if not np.array_equal(np.sort(self.ranking), np.arange(len(self.tensors))):
            raise EnsembleError("ranking is not a permutation of the table indices")

    def __len__(self):
        return len(self.tensors)

    @property
    def norms(self) -> np.ndarray:
        return np.array([a.norm for a in self.tensors])

    @classmethod
    def from_positions(
        cls, positions, gamma_S: float = GAMMA_ELECTRON, gamma_I: float = GAMMA_PROTON
    ) -> "ProtonTable":
        positions = np.asarray(positions, dtype=float).reshape(-1, 3)
        tensors = tuple(compute_hyperfine(p, gamma_S, gamma_I) for p in positions)
        norms = np.array([a.norm for a in tensors])
        ranking = np.argsort(-norms, kind="stable")
        return cls(positions, tensors, ranking)


def load_proton_table(path: str = DEFAULT_TABLE, **kwargs) -> ProtonTable:
    header, data = DataManager.read_csv(path)
    if tuple(header) != TABLE_HEADER:
        raise EnsembleError(f"{path}: expected header {','.join(TABLE_HEADER)}, got {header}")
    table = ProtonTable.from_positions(data, **kwargs)
    logger.info(f"✅ Loaded {len(table)} protons from {path}")
    return table


def synthetic_proton_positions(n: int = 574, cells: int = 3) -> np.ndarray:
    """Illustrative naphthalene-like packing around a central molecule.

    Two molecules per monoclinic cell, eight ring hydrogens each in a
    rigid molecular frame; the central molecule hosts the electron and its
    own hydrogens are excluded. Not crystallographic data.
    """
    a = np.array([0.8235, 0.0, 0.0])
    b = np.array([0.0, 0.6003, 0.0])
    c = np.array([-0.47028, 0.0, 0.72694])
    long_axis = np.array([0.5, 0.0, 0.8660254])
    short_axes = (
        np.array([-0.2961981, 0.9396926, 0.1710101]),
        np.array([-0.2961981, -0.9396926, 0.1710101]),
    )
    centers = (np.zeros(3), np.array([0.41175, 0.30015, 0.0]))
    frame = [(sl * 0.1245, ss * 0.2482) for sl in (1, -1) for ss in (1, -1)]
    frame += [(sl * 0.3392, ss * 0.1241) for sl in (1, -1) for ss in (1, -1)]

    sites = []
    rng = range(-cells, cells + 1)
    for i in rng:
        for j in rng:
            for k in rng:
                shift = i * a + j * b + k * c
                for m, (center, short) in enumerate(zip(centers, short_axes)):
                    if i == j == k == 0 and m == 0:
                        continue
                    for u, v in frame:
                        sites.append(shift + center + u * long_axis + v * short)
    sites = np.array(sites)
    dist = np.linalg.norm(sites, axis=1)
    order = np.lexsort((np.arange(len(sites)), dist))
    return sites[order[:n]]


@dataclass(frozen=True)
class EnsembleSpec:
    """Sampling rules for one figure-of-merit evaluation.

    ``fom_direction`` selects the sign the optimizer maximizes: +1 or -1
    times the mean, or 0 for its magnitude.
    """

    n_instances: int = 1000
    n_pick: int = 3
    pool_size: int = 30
    detuning_fwhm: float = TWO_PI * 10.0
    seed: int = 0
    fom_noise: float = 0.0
    fom_direction: int = 0

    def __post_init__(self):
        if self.n_instances < 1:
            raise EnsembleError(f"n_instances must be >= 1, got {self.n_instances}")
        if self.n_pick not in ALLOWED_NUCLEI:
            raise EnsembleError(f"n_pick must be one of {ALLOWED_NUCLEI}, got {self.n_pick}")
        if self.pool_size < self.n_pick:
            raise EnsembleError(f"pool_size {self.pool_size} smaller than n_pick {self.n_pick}")
        if not self.detuning_fwhm >= 0:
            raise EnsembleError(f"detuning_fwhm must be >= 0, got {self.detuning_fwhm}")
        if self.fom_noise < 0:
            raise EnsembleError(f"fom_noise must be >= 0, got {self.fom_noise}")
        if self.fom_direction not in (-1, 0, 1):
            raise EnsembleError(f"fom_direction must be -1, 0 or 1, got {self.fom_direction}")

    @property
    def sigma(self) -> float:
        return self.detuning_fwhm * FWHM_TO_SIGMA


def sample_instance(
    spec: EnsembleSpec, table: ProtonTable, rng: np.random.Generator
) -> Tuple[np.ndarray, float]:
    """Distinct nuclei from the top of the ranking and one static detuning"""
    if spec.pool_size > len(table):
        raise EnsembleError(f"pool_size {spec.pool_size} exceeds table length {len(table)}")
    pool = table.ranking[: spec.pool_size]
    indices = rng.choice(pool, size=spec.n_pick, replace=False)
    delta_es = float(rng.normal(0.0, spec.sigma))
    return indices, delta_es


@dataclass(frozen=True)
class FomResult:
    mean: float
    std_err: float
    per_instance: Tuple[float, ...]
    n: int
    seed: int
    fom: float

    def to_dict(self):
        return {
            "mean": self.mean,
            "std_err": self.std_err,
            "n": self.n,
            "seed": self.seed,
            "fom": self.fom,
            "per_instance": list(self.per_instance),
        }


def _direction(value: float, direction: int) -> float:
    return abs(value) if direction == 0 else direction * value


def _summarize(values: np.ndarray, spec: EnsembleSpec, noise_key: int = 0) -> FomResult:
    n = values.size
    mean = float(values.mean())
    std_err = float(values.std(ddof=1) / math.sqrt(n)) if n > 1 else 0.0
    if spec.fom_noise > 0:
        noise_rng = np.random.default_rng([spec.seed, 1, noise_key])
        mean = float(np.clip(mean + noise_rng.normal(0.0, spec.fom_noise), -1.0, 1.0))
        std_err = math.hypot(std_err, spec.fom_noise)
    return FomResult(
        mean=mean,
        std_err=std_err,
        per_instance=tuple(float(v) for v in values),
        n=n,
        seed=spec.seed,
        fom=_direction(mean, spec.fom_direction),
    )


def pulse_key(pulse: Pulse) -> int:
    """64-bit digest of the pulse samples"""
    digest = hashlib.sha256()
    for samples in (pulse.t, pulse.omega_ext, pulse.phi_ext):
        digest.update(np.ascontiguousarray(samples, dtype=float).tobytes())
    return int.from_bytes(digest.digest()[:8], "little")


def draw_instances(spec: EnsembleSpec, table: ProtonTable) -> List[Tuple[np.ndarray, float]]:
    rng = np.random.default_rng(spec.seed)
    return [sample_instance(spec, table, rng) for _ in range(spec.n_instances)]


def _run_ensemble(
    pulse: Pulse,
    spec: EnsembleSpec,
    base_params: SystemParams,
    cav: CavityParams,
    n_shots: int,
    table: Optional[ProtonTable],
    workers: Optional[int],
    settings: Optional[SolverSettings],
    n_out: int,
) -> Tuple[FomResult, List[PolarizationTrace], FieldTrace]:
    table = table if table is not None else load_proton_table()
    settings = settings or SolverSettings()
    instances = draw_instances(spec, table)
    field = filter_pulse(pulse, cav, dt_out=min(pulse.dt, settings.field_dt))
    params = [base_params.with_nuclei((table.tensors[i] for i in idx), delta_es) for idx, delta_es in instances]
    # batch boundaries depend on the instance count only, never on workers
    starts = range(0, len(params), BATCH_SIZE)

    def run(start):
        batch = params[start : start + BATCH_SIZE]
        try:
            values, traces = run_shots_batch(batch, field, n_shots, settings, n_out)
        except SolverError as e:
            if e.index is None:
                raise EnsembleError(f"batch of instances {start}-{start + len(batch) - 1}: {e}") from e
            raise EnsembleError(str(e), index=start + e.index) from e
        return values[:, -1], traces

    with ThreadPoolExecutor(max_workers=workers) as pool:
        results = list(pool.map(run, starts))

    values = np.concatenate([v for v, _ in results])
    result = _summarize(values, spec, pulse_key(pulse))
    logger.info(
        f"🔄 FoM over {result.n} instances: mean {result.mean:+.6f} ± {result.std_err:.6f}"
    )
    return result, [tr for _, traces in results for tr in traces], field


def evaluate_fom(
    pulse: Pulse,
    spec: EnsembleSpec,
    base_params: SystemParams,
    cav: CavityParams,
    n_shots: int = 1,
    table: Optional[ProtonTable] = None,
    workers: Optional[int] = None,
    settings: Optional[SolverSettings] = None,
) -> FomResult:
    """Ensemble-mean final polarization after ``n_shots`` shots"""
    result, _, _ = _run_ensemble(pulse, spec, base_params, cav, n_shots, table, workers, settings, 2)
    return result


def simulate_ensemble(
    pulse: Pulse,
    spec: EnsembleSpec,
    base_params: SystemParams,
    cav: CavityParams,
    n_shots: int = 1,
    table: Optional[ProtonTable] = None,
    workers: Optional[int] = None,
    settings: Optional[SolverSettings] = None,
    n_out: int = 201,
) -> Tuple[FomResult, PolarizationTrace, FieldTrace]:
    """Like evaluate_fom, plus the instance-averaged trace of the last shot"""
    result, traces, field = _run_ensemble(
        pulse, spec, base_params, cav, n_shots, table, workers, settings, n_out
    )
    return result, PolarizationTrace.mean_of(traces), field


def ensemble_fom(
    spec: EnsembleSpec,
    base_params: SystemParams,
    cav: CavityParams,
    n_shots: int = 1,
    table: Optional[ProtonTable] = None,
    workers: Optional[int] = None,
    settings: Optional[SolverSettings] = None,
) -> Callable[[Pulse], Tuple[float, float]]:
    """Black-box pulse -> (fom, std_err) for the optimizer"""
    table = table if table is not None else load_proton_table()

    def fom_eval(pulse: Pulse) -> Tuple[float, float]:
        result = evaluate_fom(pulse, spec, base_params, cav, n_shots, table, workers, settings)
        return result.fom, result.std_err

    return fom_eval


def save_proton_table(positions: Sequence, path: str):
    positions = np.asarray(positions, dtype=float)
    DataManager.write_csv(path, TABLE_HEADER, positions.T)
