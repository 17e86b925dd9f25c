"""Reconstruction-error anomaly scoring for streaming updates.

Each update yields a slice-level error per slice that received data (mean
absolute deviation between the new rows and their reconstruction) and a
tensor-level error (mean of the slice-level errors over slices with data).
A score is flagged when it exceeds the trailing moving average plus moving
standard deviation of its own history.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .als import reconstruct_rows

DEFAULT_WINDOW = 5


def slice_error(x_new: np.ndarray, u_new: np.ndarray, s: np.ndarray, V: np.ndarray) -> float:
    """Mean absolute deviation of new rows from their reconstruction."""
    x_new = np.asarray(x_new, dtype=float)
    rec = reconstruct_rows(u_new, s, V)
    return float(np.abs(x_new - rec).mean())


def tensor_error(
    contributions: list[tuple[np.ndarray, np.ndarray, np.ndarray]], V: np.ndarray
) -> float:
    """Mean of slice-level errors over the slices receiving data.

    The divisor is the number of slices actually present in the batch, which
    coincides with the total slice count whenever every slice has new data.
    """
    if not contributions:
        raise ValueError("tensor_error needs at least one contribution")
    return float(
        np.mean([slice_error(x, u, s, V) for x, u, s in contributions])
    )


def moving_threshold(series, window: int = DEFAULT_WINDOW) -> list[float]:
    """Trailing moving-average-plus-std threshold for each position.

    Position t uses the up-to-``window`` values strictly before t (population
    standard deviation).  Positions with fewer than two prior values have no
    defined threshold and come back as NaN, so nothing can be flagged there.
    """
    if window < 2:
        raise ValueError("window must be at least 2")
    values = np.asarray(list(series), dtype=float)
    out = []
    for t in range(len(values)):
        prior = values[max(0, t - window) : t]
        if prior.size < 2:
            out.append(float("nan"))
        else:
            out.append(float(prior.mean() + prior.std()))
    return out


@dataclass
class ErrorSeries:
    """Per-update tensor-level errors and per-slice error histories."""

    updates: list[int] = field(default_factory=list)
    tensor_errors: list[float] = field(default_factory=list)
    slice_errors: dict[str, list[tuple[int, float]]] = field(default_factory=dict)

    def record(self, update_index: int, te: float, per_slice: dict[str, float]) -> None:
        self.updates.append(update_index)
        self.tensor_errors.append(te)
        for sid, se in per_slice.items():
            self.slice_errors.setdefault(sid, []).append((update_index, se))

    def __len__(self) -> int:
        return len(self.updates)


@dataclass
class AnomalyFlag:
    level: str  # "tensor" or "slice"
    update_index: int
    slice_id: str | None
    score: float
    threshold: float


def detect(errors: ErrorSeries, window: int = DEFAULT_WINDOW) -> list[AnomalyFlag]:
    """Flag every update (and per-slice update) whose error beats its threshold.

    Slice thresholds are computed over that slice's own error history.  The
    returned list holds tensor-level flags first, then slice-level flags,
    each sorted by score descending.
    """
    if not errors.updates:
        raise ValueError("empty error series")
    flags: list[AnomalyFlag] = []
    thresholds = moving_threshold(errors.tensor_errors, window)
    for n, te, thr in zip(errors.updates, errors.tensor_errors, thresholds):
        if te > thr:
            flags.append(AnomalyFlag("tensor", n, None, te, thr))
    flags.sort(key=lambda f: -f.score)

    slice_flags: list[AnomalyFlag] = []
    for sid in sorted(errors.slice_errors):
        history = errors.slice_errors[sid]
        thr_series = moving_threshold([se for _, se in history], window)
        for (n, se), thr in zip(history, thr_series):
            if se > thr:
                slice_flags.append(AnomalyFlag("slice", n, sid, se, thr))
    slice_flags.sort(key=lambda f: -f.score)
    return flags + slice_flags


# ---------------------------------------------------------------------------
# Plot-ready outputs.
# ---------------------------------------------------------------------------

def write_flags_json(flags: list[AnomalyFlag], path) -> None:
    payload = [
        {
            "level": f.level,
            "update_index": f.update_index,
            "slice_id": f.slice_id,
            "score": f.score,
            "threshold": f.threshold,
        }
        for f in flags
    ]
    Path(path).write_text(json.dumps(payload, indent=2))


def write_error_csv(
    errors: ErrorSeries, window: int, tensor_path, slice_path
) -> None:
    """Write (update, error, threshold) rows for tensor and slice levels."""
    thresholds = moving_threshold(errors.tensor_errors, window)
    with open(tensor_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["update_index", "tensor_error", "threshold"])
        for n, te, thr in zip(errors.updates, errors.tensor_errors, thresholds):
            writer.writerow([n, repr(te), "" if np.isnan(thr) else repr(thr)])
    with open(slice_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["update_index", "slice_id", "slice_error", "threshold"])
        for sid in sorted(errors.slice_errors):
            history = errors.slice_errors[sid]
            thr_series = moving_threshold([se for _, se in history], window)
            for (n, se), thr in zip(history, thr_series):
                writer.writerow([n, sid, repr(se), "" if np.isnan(thr) else repr(thr)])
