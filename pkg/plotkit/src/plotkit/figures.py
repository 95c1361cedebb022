"""Figure rendering: loss curves with SE bands and per-layer drift panels.

Rendering is a pure function of (CSV, FigureSpec). Determinism is
best-effort: the Agg backend plus a pinned svg hash salt and stripped
date metadata make repeated renders byte-stable for a fixed matplotlib
version; the version itself is embedded by upstream and out of our hands.
"""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
matplotlib.rcParams["svg.hashsalt"] = "plotkit"

import matplotlib.pyplot as plt
import numpy as np

from .csvio import aggregate_curves, read_coordcheck, read_curves

__all__ = ["FigureSpec", "render_curves", "render_coordcheck"]

_COLORS = plt.rcParams["axes.prop_cycle"].by_key()["color"]


@dataclass
class FigureSpec:
    csv_path: str
    out_path: str
    log_y: bool = True
    ood_step: int | None = None  # falls back to the CSV's own ood flags
    dpi: int = 110


def _save(fig, out_path, dpi):
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    meta = {"Date": None} if out_path.suffix == ".svg" else {"Software": "plotkit"}
    fig.savefig(out_path, dpi=dpi, metadata=meta)
    plt.close(fig)
    return out_path


def _panel_grid(n):
    cols = min(3, n)
    rows = math.ceil(n / cols)
    return rows, cols


def render_curves(spec: FigureSpec) -> Path:
    """One panel per task; one mean line per optimizer with an SE band.

    Diverged stretches are drawn with x markers; the meta-training-horizon
    marker is a vertical dotted line.
    """
    groups = aggregate_curves(read_curves(spec.csv_path))
    tasks = sorted({g.task_id for g in groups})
    rows, cols = _panel_grid(len(tasks))
    fig, axes = plt.subplots(rows, cols, figsize=(4.2 * cols, 3.4 * rows), squeeze=False)
    color_of = {}
    for g in groups:
        if g.optimizer not in color_of:
            color_of[g.optimizer] = _COLORS[len(color_of) % len(_COLORS)]
    for idx, task in enumerate(tasks):
        ax = axes[idx // cols][idx % cols]
        marker_step = spec.ood_step
        for g in [g for g in groups if g.task_id == task]:
            c = color_of[g.optimizer]
            label = f"{g.optimizer} ({g.param_mode})"
            ax.plot(g.steps, g.mean, color=c, label=label, linewidth=1.4)
            if g.se is not None:
                ax.fill_between(g.steps, g.mean - g.se, g.mean + g.se, color=c, alpha=0.25, linewidth=0)
            if g.any_diverged.any():
                ax.plot(
                    g.steps[g.any_diverged],
                    g.mean[g.any_diverged],
                    linestyle="none",
                    marker="x",
                    markersize=4,
                    color=c,
                )
            if marker_step is None and g.ood_step is not None:
                marker_step = g.ood_step
        if marker_step is not None:
            ax.axvline(marker_step, color="red", linestyle=":", linewidth=1.2)
        if spec.log_y:
            ax.set_yscale("log")
        ax.set_title(task, fontsize=10)
        ax.set_xlabel("inner step")
        ax.set_ylabel("training loss")
        ax.legend(fontsize=7)
    for idx in range(len(tasks), rows * cols):
        axes[idx // cols][idx % cols].axis("off")
    fig.tight_layout()
    return _save(fig, spec.out_path, spec.dpi)


def render_coordcheck(spec: FigureSpec) -> Path:
    """One panel per (optimizer, layer); one line per width; log-scale y."""
    rows_in = read_coordcheck(spec.csv_path)
    panels = sorted({(r["optimizer"], r["layer"]) for r in rows_in})
    widths = sorted({r["width"] for r in rows_in})
    rows, cols = _panel_grid(len(panels))
    fig, axes = plt.subplots(rows, cols, figsize=(4.2 * cols, 3.4 * rows), squeeze=False)
    width_color = {w: _COLORS[i % len(_COLORS)] for i, w in enumerate(widths)}
    for idx, (opt, layer) in enumerate(panels):
        ax = axes[idx // cols][idx % cols]
        sub = [r for r in rows_in if r["optimizer"] == opt and r["layer"] == layer]
        mode = sub[0]["param_mode"]
        for w in widths:
            pts = defaultdict(list)  # step -> per-seed stds
            for r in sub:
                if r["width"] == w:
                    pts[r["step"]].append(r["std"])
            if not pts:
                continue
            steps = np.array(sorted(pts))
            mean = np.array([np.mean(pts[s]) for s in steps])
            ax.plot(steps, mean, color=width_color[w], label=f"w={w}", linewidth=1.3)
        if spec.log_y:
            ax.set_yscale("log")
        ax.set_title(f"{opt} ({mode}), layer {layer}", fontsize=10)
        ax.set_xlabel("step")
        ax.set_ylabel("std of preactivation drift")
        ax.legend(fontsize=7)
    for idx in range(len(panels), rows * cols):
        axes[idx // cols][idx % cols].axis("off")
    fig.tight_layout()
    return _save(fig, spec.out_path, spec.dpi)
