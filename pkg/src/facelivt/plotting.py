"""Figures written next to the CSV reports."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .analysis import CostReport  # noqa: E402
from .bench import BenchResult  # noqa: E402


def figure_path(csv_path, suffix: str) -> Path:
    p = Path(csv_path)
    return p.with_name(f"{p.stem}_{suffix}.png")


def plot_costs(report: CostReport, path) -> Path:
    stages = report.by_stage()
    names = list(stages)
    params = np.array([stages[s][0] for s in names]) / 1e6
    madds = np.array([stages[s][1] for s in names]) / 1e6
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.5))
    axes[0].bar(names, params, color="tab:blue")
    axes[0].set_ylabel("params (M)")
    axes[1].bar(names, madds, color="tab:orange")
    axes[1].set_ylabel("MAdds (M)")
    for ax in axes:
        ax.tick_params(axis="x", rotation=30)
    fig.suptitle(f"{report.variant} ({report.form}): {report.params / 1e6:.2f}M params, "
                 f"{report.madds / 1e6:.1f}M MAdds")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return Path(path)


def plot_latency(result: BenchResult, path) -> Path:
    ms = np.asarray(result.latencies_us) / 1e3
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.5))
    axes[0].plot(np.arange(len(ms)), ms, lw=0.8)
    axes[0].axhline(result.median / 1e3, color="k", ls="--", lw=0.8, label="median")
    axes[0].set_xlabel("run")
    axes[0].set_ylabel("latency (ms)")
    axes[0].legend()
    axes[1].hist(ms, bins=min(30, max(5, len(ms) // 3)))
    axes[1].set_xlabel("latency (ms)")
    fig.suptitle(result.summary(), fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return Path(path)
