"""Figures for reports and training logs, written straight to PNG files."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .metrics import MetricsReport  # noqa: E402

# stripped so identical figures give identical bytes
_PNG_META = {"Software": None}


def _save(fig, path: str | Path) -> Path:
    path = Path(path)
    fig.savefig(path, dpi=120, metadata=_PNG_META)
    plt.close(fig)
    return path


def plot_violations(reports: Sequence[MetricsReport], path: str | Path, title: str = "") -> Path:
    """Per-class throughput and TSLS violation fractions, one bar group per report."""
    classes = sorted({c for r in reports for c in r.classes})
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.6), sharey=True)
    width = 0.8 / max(1, len(reports))
    x = np.arange(len(classes))
    for k, r in enumerate(reports):
        agg = r.classes
        for ax, key in zip(axes, ("tpt_violation_frac", "tsls_violation_frac")):
            vals = [agg.get(c, {}).get(key, np.nan) for c in classes]
            ax.bar(x + (k - (len(reports) - 1) / 2) * width, vals, width, label=r.policy)
    for ax, name in zip(axes, ("throughput violation", "TSLS violation")):
        ax.set_xticks(x, classes)
        ax.set_title(name)
        ax.set_ylim(0, 1)
        ax.grid(axis="y", alpha=0.3)
    axes[0].set_ylabel("fraction of TTIs")
    axes[1].legend(fontsize=8)
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    return _save(fig, path)


def plot_ue_throughput(report: MetricsReport, path: str | Path) -> Path:
    fig, ax = plt.subplots(figsize=(6, 3.4))
    labels = [f"{u.ue_id}:{u.class_id}" for u in report.ues]
    ax.bar(np.arange(len(labels)), [u.mean_tpt_mbps for u in report.ues], color="tab:gray")
    ax.set_xticks(np.arange(len(labels)), labels, rotation=45, ha="right", fontsize=8)
    ax.set_ylabel("mean throughput (Mbps)")
    ax.set_title(report.policy)
    fig.tight_layout()
    return _save(fig, path)


def plot_training(history: Sequence[dict], path: str | Path, title: str = "") -> Path:
    b = np.array([h["batch"] for h in history])
    fig, (ax1, ax2) = plt.subplots(2, 1, figsize=(6, 4.5), sharex=True)
    ax1.plot(b, [h["mean_return"] for h in history], lw=1)
    ax1.set_ylabel("mean return")
    ax2.plot(b, [h["grad_norm"] for h in history], lw=1, color="tab:orange")
    ax2.set_yscale("log")
    ax2.set_ylabel("gradient norm")
    ax2.set_xlabel("batch")
    if title:
        ax1.set_title(title)
    fig.tight_layout()
    return _save(fig, path)
