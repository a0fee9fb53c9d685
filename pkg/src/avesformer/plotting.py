"""Figures written next to CSV reports."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .profiler import ProfileReport  # noqa: E402

_STYLE = {
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "figure.dpi": 120,
}


def _component_color(name: str) -> str:
    if "transformer" in name or name == "query_generator":
        return "#c0504d"
    if "conv" in name:
        return "#4f81bd"
    return "#9bbb59"


def plot_runtime_breakdown(report: ProfileReport, path: str | Path) -> Path:
    """Horizontal bars of per-component median time, labelled with their share."""
    path = Path(path)
    names = [e.component for e in report.entries]
    med = np.array([e.wall_ms.median for e in report.entries])
    err = np.array([[e.wall_ms.median - e.wall_ms.p25, e.wall_ms.p75 - e.wall_ms.median] for e in report.entries]).T
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots(figsize=(6.0, 0.45 * len(names) + 1.2))
        y = np.arange(len(names))[::-1]
        ax.barh(y, med, xerr=err, color=[_component_color(n) for n in names], capsize=2)
        for yi, e in zip(y, report.entries):
            ax.text(e.wall_ms.p75, yi, f"  {e.percent:.1f}%", va="center")
        ax.set_yticks(y, names)
        ax.set_xlabel("median wall time per forward (ms)")
        ax.set_title(report.title or "runtime breakdown")
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
    return path


def plot_layout_comparison(layouts: Sequence[str], gflops: Sequence[float], median_ms: Sequence[float], path: str | Path) -> Path:
    path = Path(path)
    with plt.rc_context(_STYLE):
        fig, (ax0, ax1) = plt.subplots(1, 2, figsize=(7.0, 2.8))
        x = np.arange(len(layouts))
        ax0.bar(x, gflops, color="#4f81bd")
        ax0.set_xticks(x, layouts)
        ax0.set_ylabel("GFLOPs")
        lo = min(gflops)
        ax0.set_ylim(lo * 0.95, max(gflops) * 1.01)
        ax1.bar(x, median_ms, color="#c0504d")
        ax1.set_xticks(x, layouts)
        ax1.set_ylabel("median latency (ms)")
        fig.suptitle("decoder stage layouts")
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
    return path


def plot_attention_maps(weights, height: int, width: int, path: str | Path, title: str = "") -> Path:
    """One panel per key token showing its attention mass over the patch grid."""
    path = Path(path)
    w = np.asarray(weights)
    m = w.shape[1]
    cols = min(m, 8)
    rows = -(-m // cols)
    with plt.rc_context(_STYLE):
        fig, axes = plt.subplots(rows, cols, figsize=(1.3 * cols, 1.3 * rows + 0.4), squeeze=False)
        vmax = float(w.max()) or 1.0
        for j, ax in enumerate(axes.ravel()):
            ax.set_axis_off()
            if j < m:
                ax.imshow(w[:, j].reshape(height, width), cmap="viridis", vmin=0.0, vmax=vmax)
                ax.set_title(f"key {j}", fontsize=7)
        if title:
            fig.suptitle(title)
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
    return path
