"""Matplotlib renderings of the pipeline artifacts.

All functions write a PNG to the given path and return that path.  The
Agg backend is forced so rendering works in headless environments.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

from .fisher import FisherMap, normalize_heatmap
from .search import BitSchedule


def _layer_labels(model) -> list:
    return [layer.name for layer in model.layers]


def save_heatmap_figure(model, fisher_map: FisherMap, path):
    """Per-layer min-max normalized sensitivity scores over timesteps."""
    grid = normalize_heatmap(fisher_map)
    fig, ax = plt.subplots(figsize=(7, 4.5))
    im = ax.imshow(grid, aspect="auto", cmap="viridis", origin="lower")
    ax.set_xlabel("layer")
    ax.set_ylabel("timestep")
    ax.set_xticks(range(grid.shape[1]))
    ax.set_xticklabels(_layer_labels(model), rotation=45, ha="right", fontsize=7)
    ax.set_yticks(range(grid.shape[0]))
    ax.set_yticklabels([str(t + 1) for t in range(grid.shape[0])])
    ax.set_title("Sensitivity heatmap (normalized per layer)")
    fig.colorbar(im, ax=ax, label="normalized score")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def save_calib_errors_figure(calib_report, model, path):
    """Weight reconstruction error per layer as a function of timestep."""
    per_layer: dict = {}
    for layer_idx, name, t, error, _alpha in calib_report.rows:
        per_layer.setdefault((layer_idx, name), []).append((t, error))
    fig, ax = plt.subplots(figsize=(7, 4.5))
    for (idx, name), points in sorted(per_layer.items()):
        points.sort()
        ts = [p[0] for p in points]
        errs = [p[1] for p in points]
        ax.plot(ts, errs, marker="o", markersize=3, linewidth=1, label=name)
    ax.set_xlabel("timestep")
    ax.set_ylabel("mean squared reconstruction error")
    ax.set_yscale("symlog", linthresh=1e-12)
    ax.set_title("Calibration error by layer and timestep")
    ax.legend(fontsize=6, ncol=2)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def save_frontier_figure(frontier, path):
    """Accumulated loss versus total bits for the surviving search paths."""
    fig, ax = plt.subplots(figsize=(6, 4.5))
    if frontier:
        bits = [p.bits for p in frontier]
        losses = [p.loss for p in frontier]
        ax.plot(bits, losses, "o-", color="tab:blue", markersize=5)
        for p in frontier:
            ax.annotate(f"{p.avg_bits:.2f}b", (p.bits, p.loss), fontsize=6, xytext=(3, 3), textcoords="offset points")
    ax.set_xlabel("total bits")
    ax.set_ylabel("accumulated step loss")
    ax.set_title("Pareto frontier of surviving paths")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def save_schedule_figure(schedule: BitSchedule, model, path):
    """The selected bit-width grid, timesteps by layers."""
    grid = schedule.grid
    fig, ax = plt.subplots(figsize=(7, 4.5))
    im = ax.imshow(grid, aspect="auto", cmap="cividis", origin="lower", vmin=0, vmax=16)
    for t in range(grid.shape[0]):
        for l in range(grid.shape[1]):
            ax.text(l, t, str(int(grid[t, l])), ha="center", va="center", fontsize=7, color="white")
    ax.set_xlabel("layer")
    ax.set_ylabel("timestep")
    ax.set_xticks(range(grid.shape[1]))
    ax.set_xticklabels(_layer_labels(model), rotation=45, ha="right", fontsize=7)
    ax.set_yticks(range(grid.shape[0]))
    ax.set_yticklabels([str(t + 1) for t in range(grid.shape[0])])
    ax.set_title(f"Selected schedule (avg {schedule.avg_bits:.2f} bits)")
    fig.colorbar(im, ax=ax, label="activation bits")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
