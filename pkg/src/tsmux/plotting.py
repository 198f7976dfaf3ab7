"""Figures written next to the benchmark and simulation CSVs."""

from __future__ import annotations

from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from tsmux.simulator import SimulationReport  # noqa: E402


def _save(fig, path) -> None:
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_optimality(rows: Sequence[dict], path) -> None:
    fig, ax = plt.subplots(figsize=(6, 3.5))
    sizes = sorted({r["modules"] for r in rows})
    bins = np.linspace(min(r["ratio"] for r in rows) - 1e-3, 1.0 + 1e-3, 21)
    for n in sizes:
        ratios = [r["ratio"] for r in rows if r["modules"] == n]
        ax.hist(ratios, bins=bins, alpha=0.6, label=f"{n} modules (median {np.median(ratios):.3f})")
    ax.set_xlabel("optimality ratio (oracle time / solver time)")
    ax.set_ylabel("instances")
    ax.legend(fontsize=8)
    _save(fig, path)


def plot_scale(rows: Sequence[dict], path) -> None:
    fig, ax = plt.subplots(figsize=(6, 3.5))
    gpus = [r["gpus"] for r in rows]
    x = np.arange(len(rows))
    w = 0.27
    for k, (col, label) in enumerate(
        [("solver_time", "multiplexed"), ("distmm_time", "disjoint GPUs"), ("megatron_time", "all GPUs per module")]
    ):
        ax.bar(x + (k - 1) * w, [r[col] for r in rows], w, label=label)
    ax.set_xticks(x, [str(g) for g in gpus])
    ax.set_xlabel("GPUs")
    ax.set_ylabel("iteration time (s)")
    ax.legend(fontsize=8)
    _save(fig, path)


def plot_granularity(summary: Sequence[dict], path) -> None:
    fig, ax = plt.subplots(figsize=(6, 3.5))
    gs = [s["granularity"] for s in summary]
    labels = [f"{g:g}" for g in gs]
    x = np.arange(len(gs))
    ax.bar(x, [s["total_solve_s"] for s in summary], color="tab:gray", alpha=0.7)
    ax.set_yscale("log")
    ax.set_ylabel("total solve time (s)")
    ax.set_xticks(x, labels)
    ax.set_xlabel("SM-quota granularity")
    ax2 = ax.twinx()
    ax2.plot(x, [s["median_ratio"] for s in summary], "o-", color="tab:red")
    ax2.set_ylabel("median optimality ratio", color="tab:red")
    _save(fig, path)


def plot_ablation(rows: Sequence[dict], path) -> None:
    variants = list(dict.fromkeys(r["variant"] for r in rows))
    err = [np.mean([r["mean_prediction_error"] for r in rows if r["variant"] == v]) for v in variants]
    act = [np.mean([r["actual_time"] for r in rows if r["variant"] == v]) for v in variants]
    fig, (a, b) = plt.subplots(1, 2, figsize=(8, 3.2))
    a.bar(variants, np.array(err) * 100)
    a.set_ylabel("mean prediction error (%)")
    b.bar(variants, act)
    b.set_ylabel("iteration time under true model (s)")
    _save(fig, path)


def plot_timeline(report: SimulationReport, path, iteration: int = 0) -> None:
    """Per-GPU Gantt chart; bar height is the module's SM quota, stacked within a GPU lane."""
    ivs = [iv for iv in report.timeline if iv.iteration == iteration]
    gpus = sorted({iv.gpu for iv in ivs})
    modules = sorted({iv.module for iv in ivs})
    cmap = plt.get_cmap("tab20")
    colors = {m: cmap(i % 20) for i, m in enumerate(modules)}
    fig, ax = plt.subplots(figsize=(8, 0.6 * len(gpus) + 1.2))
    for g in gpus:
        lane = sorted((iv for iv in ivs if iv.gpu == g), key=lambda iv: (iv.stage, iv.module))
        offset: dict[int, float] = {}
        for iv in lane:
            y0 = offset.get(iv.stage, 0.0)
            ax.broken_barh([(iv.start, iv.end - iv.start)], (g + y0 * 0.8, iv.quota * 0.8), color=colors[iv.module])
            offset[iv.stage] = y0 + iv.quota
    ax.set_yticks([g + 0.4 for g in gpus], [f"GPU {g}" for g in gpus])
    ax.set_xlabel("time (s)")
    handles = [plt.Rectangle((0, 0), 1, 1, color=colors[m]) for m in modules]
    ax.legend(handles, modules, fontsize=7, ncol=min(len(modules), 5), loc="upper center", bbox_to_anchor=(0.5, -0.25))
    _save(fig, path)
