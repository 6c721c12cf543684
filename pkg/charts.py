#!/usr/bin/env python3
"""
charts.py - static SVG line charts for simulation and optimization outputs
"""

import logging
from typing import Dict, Optional, Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import seaborn as sns  # noqa: E402

logger = logging.getLogger("charts")

plt.style.use("seaborn-v0_8")
sns.set_palette("husl")
# fixed ids and no timestamp so reruns give identical files
plt.rcParams["svg.hashsalt"] = "arise"
SVG_METADATA = {"Date": None}


def _save(fig, path: str):
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata=SVG_METADATA)
    plt.close(fig)
    logger.info(f"💾 Saved chart {path}")
    return path


def plot_trace(t, p_mean, path: str, p_nuc: Optional[np.ndarray] = None, title: str = "Nuclear polarization"):
    fig, ax = plt.subplots(figsize=(8, 4.5))
    if p_nuc is not None:
        for i, column in enumerate(np.asarray(p_nuc).T):
            ax.plot(t, column, lw=0.8, alpha=0.6, label=f"nucleus {i + 1}")
    ax.plot(t, p_mean, "k-", lw=1.6, label="mean")
    ax.set_xlabel("Time (µs)")
    ax.set_ylabel("Polarization")
    ax.set_title(title)
    ax.legend()
    ax.grid(True, alpha=0.3)
    return _save(fig, path)


def plot_field(t, omega_int_mhz, delta_mhz, lower_mhz, upper_mhz, path: str):
    """Internal field amplitude and drive detuning over the Hartmann-Hahn band"""
    fig, (ax1, ax2) = plt.subplots(2, 1, figsize=(8, 6), sharex=True)
    ax1.plot(t, omega_int_mhz, "b-", label="|Ω_int|")
    ax1.set_ylabel("Rabi frequency (MHz)")
    ax1.legend()
    ax1.grid(True, alpha=0.3)

    ax2.fill_between(t, lower_mhz, upper_mhz, color="orange", alpha=0.35, label="HH window")
    ax2.plot(t, delta_mhz, "k-", lw=1.0, label="Δ")
    ax2.set_xlabel("Time (µs)")
    ax2.set_ylabel("Detuning (MHz)")
    ax2.legend()
    ax2.grid(True, alpha=0.3)
    return _save(fig, path)


def plot_error_curve(candidates_mhz, errors, path: str, fitted: Optional[np.ndarray] = None, best_mhz=None):
    fig, ax = plt.subplots(figsize=(7, 4.5))
    ax.plot(candidates_mhz, errors, "o", label="overlap error")
    if fitted is not None:
        ax.plot(candidates_mhz, fitted, "r--", label="Gaussian fit")
    if best_mhz is not None:
        ax.axvline(best_mhz, color="g", lw=1.0, label=f"γ = {best_mhz:.2f} MHz")
    ax.set_xlabel("γ_cav (MHz)")
    ax.set_ylabel("Error")
    ax.legend()
    ax.grid(True, alpha=0.3)
    return _save(fig, path)


def plot_convergence(fom: Sequence[float], best: Sequence[float], steps: Sequence[int], path: str):
    fig, ax = plt.subplots(figsize=(8, 4.5))
    x = np.arange(len(fom))
    steps = np.asarray(steps)
    for code, name in ((1, "linear"), (2, "multi-sweep"), (3, "dCRAB")):
        sel = steps == code
        if sel.any():
            ax.plot(x[sel], np.asarray(fom)[sel], ".", label=name)
    ax.plot(x, best, "k-", lw=1.4, label="best so far")
    ax.set_xlabel("FoM evaluation")
    ax.set_ylabel("FoM")
    ax.legend()
    ax.grid(True, alpha=0.3)
    return _save(fig, path)


def plot_buildup(curves: Dict[str, Dict[str, np.ndarray]], path: str, level: Optional[float] = None):
    """``curves`` maps a name to {"t", "signal", "fit"} arrays"""
    fig, ax = plt.subplots(figsize=(8, 4.5))
    for name, c in curves.items():
        (line,) = ax.plot(c["t"], c["fit"], "-", label=f"{name} fit")
        ax.plot(c["t"], c["signal"], "o", ms=3, color=line.get_color(), label=name)
    if level is not None:
        ax.axhline(level, color="gray", ls=":", label="threshold")
    ax.set_xlabel("Time (min)")
    ax.set_ylabel("Signal")
    ax.legend()
    ax.grid(True, alpha=0.3)
    return _save(fig, path)
