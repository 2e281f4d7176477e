"""Figure rendering for run outputs (PNG alongside the CSV data)."""

from __future__ import annotations

from pathlib import Path

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np


def voltage_profile_png(path, rows, v_min=0.95, v_max=1.05, title="Bus voltages"):
    """rows: list of (bus, phase, vmag_pu)."""
    fig, ax = plt.subplots(figsize=(8, 4))
    by_phase = {"a": [], "b": [], "c": []}
    for k, (bus, phase, vmag) in enumerate(rows):
        by_phase[phase].append((k, vmag))
    for phase, color in zip("abc", ("tab:blue", "tab:orange", "tab:green")):
        if by_phase[phase]:
            xs, ys = zip(*by_phase[phase])
            ax.scatter(xs, ys, s=10, color=color, label=f"phase {phase}")
    ax.axhline(v_min, color="red", ls="--", lw=0.8)
    ax.axhline(v_max, color="red", ls="--", lw=0.8)
    ax.set_xlabel("bus-phase index")
    ax.set_ylabel("|V| (pu)")
    ax.set_title(title)
    ax.legend(loc="best", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def convergence_png(path, residual_by_round, tol=1e-4):
    fig, ax = plt.subplots(figsize=(6, 4))
    if residual_by_round:
        rounds = sorted(residual_by_round)
        vals = [max(residual_by_round[r], 1e-16) for r in rounds]
        ax.semilogy(rounds, vals, marker="o")
    ax.axhline(tol, color="red", ls="--", lw=0.8, label="tolerance")
    ax.set_xlabel("communication round")
    ax.set_ylabel("max boundary change (pu)")
    ax.set_title("Boundary consensus residual")
    ax.legend(loc="best", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def stress_png(path, rows):
    """rows: dicts with topology, bandwidth_bps, sim_time_s, objective."""
    fig, ax = plt.subplots(figsize=(6, 4))
    topos = sorted({r["topology"] for r in rows})
    markers = {"ideal": "*", "ring": "o", "blackout": "s"}
    for topo in topos:
        pts = sorted([(r["bandwidth_bps"], r["sim_time_s"]) for r in rows
                      if r["topology"] == topo])
        if pts:
            xs, ys = zip(*pts)
            ax.plot(xs, ys, marker=markers.get(topo, "x"), label=topo)
    ax.set_xlabel("link bandwidth (bps)")
    ax.set_ylabel("time to converge (simulated s)")
    ax.set_title("Communication stress")
    ax.legend(loc="best", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def voltage_histogram_png(path, baseline, optimized, v_min=0.95, v_max=1.05):
    fig, ax = plt.subplots(figsize=(6, 4))
    bins = np.linspace(min(min(baseline), v_min) - 0.005,
                       max(max(optimized), max(baseline), v_max) + 0.005, 60)
    ax.hist(baseline, bins=bins, alpha=0.6, label="no control", color="tab:gray")
    ax.hist(optimized, bins=bins, alpha=0.6, label="optimized", color="tab:blue")
    ax.axvline(v_min, color="red", ls="--", lw=0.8)
    ax.axvline(v_max, color="red", ls="--", lw=0.8)
    ax.set_xlabel("|V| (pu)")
    ax.set_ylabel("bus-phase samples")
    ax.set_title("Voltage distribution over the time series")
    ax.legend(loc="best", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def timeseries_png(path, steps, objectives, ylabel):
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(steps, objectives, marker=".")
    ax.set_xlabel("step")
    ax.set_ylabel(ylabel)
    ax.set_title("Time-series objective")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def ensure_dir(path) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p
