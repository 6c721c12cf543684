#!/usr/bin/env python3
"""
buildup.py

Macroscopic build-up of nuclear polarization under repeated transfer:

    dp/dt = alpha (1 - p) - gamma p

with alpha the polarization power per minute and gamma the nuclear decay
rate. Measured curves are fitted with p_max (1 - exp(-gamma_tilde t)),
where gamma_tilde = alpha + gamma. Times are in minutes.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import brentq, curve_fit

from datamanager import DataManager

logger = logging.getLogger("buildup")

SAMPLES_HEADER = ("t_min", "signal")
MAX_FIT_ITERATIONS = 500
DEFAULT_THRESHOLD_FRAC = 0.98
NEVER_REACHED = "never reached"


class FitError(RuntimeError):
    pass


@dataclass(frozen=True)
class BuildupParams:
    alpha: float
    gamma: float

    def __post_init__(self):
        if not (math.isfinite(self.alpha) and math.isfinite(self.gamma)):
            raise FitError("alpha and gamma must be finite")
        if self.alpha < 0 or self.gamma < 0:
            raise FitError(f"alpha and gamma must be >= 0, got {self.alpha}, {self.gamma}")
        if self.alpha + self.gamma <= 0:
            raise FitError("alpha + gamma must be > 0")

    @property
    def steady_state(self) -> float:
        return self.alpha / (self.alpha + self.gamma)


@dataclass(frozen=True)
class BuildupFit:
    gamma_tilde: float
    p_max: float
    covariance: np.ndarray = field(default_factory=lambda: np.zeros((2, 2)))

    def __post_init__(self):
        if not self.gamma_tilde > 0:
            raise FitError(f"gamma_tilde must be > 0, got {self.gamma_tilde}")
        if not self.p_max > 0:
            raise FitError(f"p_max must be > 0, got {self.p_max}")
        cov = np.asarray(self.covariance, dtype=float)
        if cov.shape != (2, 2):
            raise FitError(f"covariance must be 2x2, got {cov.shape}")
        object.__setattr__(self, "covariance", cov)

    @property
    def gamma_tilde_err(self) -> float:
        return float(math.sqrt(max(self.covariance[0, 0], 0.0)))

    @property
    def p_max_err(self) -> float:
        return float(math.sqrt(max(self.covariance[1, 1], 0.0)))

    def curve(self, t) -> np.ndarray:
        return _model(np.asarray(t, dtype=float), self.gamma_tilde, self.p_max)

    def to_dict(self) -> Dict:
        return {
            "gamma_tilde": self.gamma_tilde,
            "gamma_tilde_err": self.gamma_tilde_err,
            "p_max": self.p_max,
            "p_max_err": self.p_max_err,
            "covariance": self.covariance.tolist(),
        }


def _model(t, gamma_tilde, p_max):
    return p_max * -np.expm1(-gamma_tilde * t)


def buildup_curve(params: BuildupParams, t) -> np.ndarray:
    rate = params.alpha + params.gamma
    return params.steady_state * -np.expm1(-rate * np.asarray(t, dtype=float))


def _initial_guess(t: np.ndarray, p: np.ndarray) -> Tuple[float, float]:
    p_max = float(p[-1]) if p[-1] > 0 else float(np.max(p))
    if not p_max > 0:
        raise FitError("build-up signal never becomes positive")
    # log-linearized early slope: -ln(1 - p/p_max) ~ gamma_tilde t
    early = (t > 0) & (p > 0) & (p < 0.9 * p_max)
    if np.count_nonzero(early) >= 1:
        k = min(int(np.count_nonzero(early)), max(2, t.size // 3))
        tt = t[early][:k]
        yy = -np.log1p(-p[early][:k] / p_max)
        rate = float(np.dot(tt, yy) / np.dot(tt, tt))
    else:
        rate = 1.0 / float(t[-1] - t[0])
    if not (math.isfinite(rate) and rate > 0):
        rate = 1.0 / float(t[-1] - t[0])
    return rate, p_max


def fit_buildup(t, signal) -> BuildupFit:
    """Least-squares fit of p_max (1 - exp(-gamma_tilde t))"""
    t = np.asarray(t, dtype=float)
    p = np.asarray(signal, dtype=float)
    if t.shape != p.shape or t.ndim != 1:
        raise FitError("t and signal must be 1-D arrays of equal length")
    if t.size < 3:
        raise FitError(f"need at least 3 samples, got {t.size}")
    if not (np.all(np.isfinite(t)) and np.all(np.isfinite(p))):
        raise FitError("samples must be finite")
    if np.any(np.diff(t) <= 0):
        raise FitError("sample times must be strictly increasing")

    guess = _initial_guess(t, p)
    try:
        popt, pcov = curve_fit(
            _model,
            t,
            p,
            p0=guess,
            maxfev=MAX_FIT_ITERATIONS,
            xtol=1e-14,
            ftol=1e-14,
            gtol=1e-14,
        )
    except (RuntimeError, ValueError) as e:
        raise FitError(f"build-up fit did not converge: {e}") from e
    if not np.all(np.isfinite(pcov)):
        pcov = np.zeros((2, 2))
    fit = BuildupFit(float(popt[0]), float(popt[1]), pcov)
    logger.info(
        f"✅ Build-up fit: gamma_tilde={fit.gamma_tilde:.6g} ± {fit.gamma_tilde_err:.2g} /min, "
        f"p_max={fit.p_max:.6g} ± {fit.p_max_err:.2g}"
    )
    return fit


def absolute_polarization(
    fit: BuildupFit, gamma: float, gamma_err: float = 0.0
) -> Tuple[float, float]:
    """Saturation polarization alpha / gamma_tilde = 1 - gamma / gamma_tilde, with its error"""
    if gamma < 0:
        raise FitError(f"gamma must be >= 0, got {gamma}")
    if fit.gamma_tilde <= gamma:
        raise FitError(
            f"gamma_tilde {fit.gamma_tilde:.6g} <= gamma {gamma:.6g}: no polarization power left"
        )
    frac = 1.0 - gamma / fit.gamma_tilde
    var = (gamma / fit.gamma_tilde**2) ** 2 * fit.covariance[0, 0] + (gamma_err / fit.gamma_tilde) ** 2
    return frac, float(math.sqrt(max(var, 0.0)))


def time_to_threshold(fit: BuildupFit, level: float) -> float:
    """Minutes until the fitted curve reaches ``level``"""
    if level < 0:
        raise FitError(f"level must be >= 0, got {level}")
    if level >= fit.p_max:
        raise FitError(f"level {level:.6g} is never reached (p_max {fit.p_max:.6g})")
    t = -math.log1p(-level / fit.p_max) / fit.gamma_tilde
    if level > 0:
        hi = 2.0 * t
        while _model(hi, fit.gamma_tilde, fit.p_max) < level:
            hi *= 2.0
        root = brentq(lambda x: _model(x, fit.gamma_tilde, fit.p_max) - level, 0.0, hi, xtol=1e-12, rtol=1e-12)
        if abs(root - t) > 1e-6 * t:
            raise FitError(f"closed form {t:.9g} and bisection {root:.9g} disagree")
    return t


def compare_fits(
    fits: Dict[str, BuildupFit], level: Optional[float] = None, frac: float = DEFAULT_THRESHOLD_FRAC
) -> Dict:
    """Times for every fit to reach one common level.

    The default level is ``frac`` times the smallest p_max. Fits that never
    reach it are marked rather than dropped.
    """
    if not fits:
        raise FitError("no fits to compare")
    if level is None:
        level = frac * min(f.p_max for f in fits.values())
    times: Dict[str, object] = {}
    for name, fit in fits.items():
        try:
            times[name] = time_to_threshold(fit, level)
        except FitError:
            times[name] = NEVER_REACHED
    reached = {k: v for k, v in times.items() if v != NEVER_REACHED}
    ratio = None
    if len(reached) >= 2:
        ratio = max(reached.values()) / min(reached.values())
    return {"level": level, "times_min": times, "speedup": ratio}


def sensitivity(fit: BuildupFit, gammas: Iterable[float]) -> List[Dict]:
    rows = []
    for g in gammas:
        frac, err = absolute_polarization(fit, g)
        rows.append({"gamma": g, "lifetime_min": 1.0 / g if g > 0 else None, "p_max_frac": frac, "err": err})
    return rows


def load_samples(path: str) -> Tuple[np.ndarray, np.ndarray]:
    header, data = DataManager.read_csv(path)
    if tuple(header[:2]) != SAMPLES_HEADER:
        raise FitError(f"{path}: expected columns {SAMPLES_HEADER}, got {header}")
    return data[:, 0], data[:, 1]


def save_samples(path: str, t: Sequence[float], signal: Sequence[float]):
    DataManager.write_csv(path, SAMPLES_HEADER, (np.asarray(t), np.asarray(signal)))


def fit_report(
    fit: BuildupFit, gamma: Optional[float] = None, gamma_err: float = 0.0, frac: float = DEFAULT_THRESHOLD_FRAC
) -> Dict:
    report = fit.to_dict()
    report["p_max_frac"] = None
    report["p_max_frac_err"] = None
    if gamma is not None:
        try:
            report["p_max_frac"], report["p_max_frac_err"] = absolute_polarization(fit, gamma, gamma_err)
        except FitError as e:
            logger.warning(f"⚠️  {e}")
    report["t_to_98pct"] = time_to_threshold(fit, frac * fit.p_max)
    return report
