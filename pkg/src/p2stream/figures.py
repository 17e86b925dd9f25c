"""Matplotlib renderers for the report paths (always written to files)."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .anomaly import AnomalyFlag, ErrorSeries, moving_threshold
from .evaluate import BenchResult, UpdateReport

_DPI = 150


def _finish(fig, path) -> None:
    fig.tight_layout()
    fig.savefig(path, dpi=_DPI)
    plt.close(fig)


def render_error_figure(
    errors: ErrorSeries, window: int, flags: list[AnomalyFlag], path
) -> None:
    """Tensor-level error per update with its moving threshold and flags."""
    thresholds = moving_threshold(errors.tensor_errors, window)
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(errors.updates, errors.tensor_errors, marker="o", ms=3, label="tensor error")
    ax.plot(errors.updates, thresholds, ls="--", color="gray", label="threshold")
    flagged = [f for f in flags if f.level == "tensor"]
    if flagged:
        ax.scatter(
            [f.update_index for f in flagged],
            [f.score for f in flagged],
            color="crimson",
            zorder=5,
            label="flagged",
        )
    ax.set_xlabel("update")
    ax.set_ylabel("reconstruction error")
    ax.legend()
    ax.grid(alpha=0.3)
    _finish(fig, path)


def render_timing_figure(reports: list[UpdateReport], path) -> None:
    """Per-update wall time, with the full-refit baseline when present."""
    idx = [r.update_index for r in reports]
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(idx, [r.seconds for r in reports], marker="o", ms=3, label="streaming update")
    refit = [(r.update_index, r.refit_seconds) for r in reports if r.refit_seconds is not None]
    if refit:
        ax.plot(*zip(*refit), marker="s", ms=3, label="full refit")
    ax.set_xlabel("update")
    ax.set_ylabel("seconds")
    ax.set_yscale("log")
    ax.legend()
    ax.grid(alpha=0.3, which="both")
    _finish(fig, path)


def render_scaling_figure(bench: BenchResult, path) -> None:
    """Median update time vs. new-row count across cycles, log-log."""
    x = np.asarray(bench.median_rows)
    y = np.asarray(bench.median_seconds)
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.loglog(x, y, marker="o", label="measured")
    coeffs = np.polyfit(np.log(x), np.log(y), 1)
    ax.loglog(
        x,
        np.exp(np.polyval(coeffs, np.log(x))),
        ls="--",
        color="gray",
        label=f"fit, slope {bench.slope:.2f}",
    )
    for cycle, xr, yr in zip(bench.cycles, x, y):
        ax.annotate(str(cycle), (xr, yr), textcoords="offset points", xytext=(4, 4))
    ax.set_xlabel("new rows per update")
    ax.set_ylabel("median update seconds")
    ax.legend()
    ax.grid(alpha=0.3, which="both")
    _finish(fig, path)
