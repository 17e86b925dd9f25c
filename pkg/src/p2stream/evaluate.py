"""Experiment harness: metrics, replay runs, sweeps, and scaling benchmarks."""
from __future__ import annotations

import csv
import hashlib
import json
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy import stats as scipy_stats

from .als import parafac2_als, reconstruct_rows, relative_error
from .anomaly import ErrorSeries
from .stream import StreamState, initialize
from .synth import SynthParams, synthesize
from .tensor import (
    CAUSAL,
    GLOBAL,
    apply_batch,
    global_stats,
    load_dataset,
    normalize_batch,
    normalize_tensor,
    replay,
)


@dataclass
class ExperimentConfig:
    """One replay run: data source, hyperparameters, and what to track."""

    dataset: str | None = None
    synth: SynthParams | None = None
    rank: int = 10
    forgetting: float = 0.7
    update_cycle: int = 20
    init_fraction: float = 0.2
    iters: int = 10
    seed: int = 0
    window: int = 5
    baseline: bool = False
    normalize: bool | None = None  # None: datasets yes, synthetic no
    stats_policy: str = CAUSAL
    passes: int = 1
    track_global: bool = True

    def resolved_normalize(self) -> bool:
        if self.normalize is not None:
            return self.normalize
        return self.dataset is not None

    def validate(self) -> None:
        if (self.dataset is None) == (self.synth is None):
            raise ValueError("configure exactly one of dataset or synth")
        if self.rank < 1:
            raise ValueError("rank must be at least 1")
        if not 0.0 < self.forgetting <= 1.0:
            raise ValueError("forgetting factor must lie in (0, 1]")
        if self.update_cycle < 1:
            raise ValueError("update_cycle must be at least 1")
        if not 0.0 < self.init_fraction < 1.0:
            raise ValueError("init_fraction must lie strictly between 0 and 1")
        if self.window < 2:
            raise ValueError("window must be at least 2")


@dataclass
class UpdateReport:
    """Timings and errors for one consumed batch."""

    update_index: int
    seconds: float
    refit_seconds: float | None
    local_error: float
    global_error: float | None
    rows_new: int
    new_slices: int
    slices_in_batch: int
    total_slices: int


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    reports: list[UpdateReport]
    errors: ErrorSeries
    state: StreamState
    init_losses: list[float]
    init_relative_error: float


def local_error(
    batch_items: list[tuple[str, np.ndarray]],
    u_new: dict[str, np.ndarray],
    state: StreamState,
) -> tuple[float, dict[str, float]]:
    """Tensor-level error of a batch under the post-update factors.

    Returns the tensor-level error and the per-slice errors behind it.
    Slices of equal height are reconstructed in one batched product, which
    keeps this metric cheap next to the update it measures.
    """
    by_height: dict[int, list[tuple[str, np.ndarray]]] = {}
    for sid, rows in batch_items:
        by_height.setdefault(rows.shape[0], []).append((sid, rows))
    per_slice: dict[str, float] = {}
    for items in by_height.values():
        sids = [sid for sid, _ in items]
        x = np.stack([rows for _, rows in items])  # (G, I, J)
        u = np.stack([u_new[sid] for sid in sids])
        w = state.W[[state.row_of(sid) for sid in sids]]
        rec = (u * w[:, None, :]) @ state.V.T
        mads = np.abs(x - rec).reshape(len(sids), -1).mean(axis=1)
        for sid, mad in zip(sids, mads):
            per_slice[sid] = float(mad)
    te = float(np.mean([per_slice[sid] for sid, _ in batch_items]))
    return te, per_slice


def global_error(
    old_data: dict[str, np.ndarray],
    old_factors: dict[str, np.ndarray],
    new_data: dict[str, np.ndarray],
    new_factors: dict[str, np.ndarray],
    w_rows: dict[str, np.ndarray],
    V: np.ndarray,
) -> float:
    """Two-term accumulated error: old rows plus the newest batch.

    The first term averages, over slices that existed before the update, the
    mean absolute deviation of their accumulated old rows reconstructed with
    the stored old row factors and the *current* diagonal weights and column
    factor.  The second term does the same over the newest batch.  The two
    means are summed as-is.
    """
    def term(data: dict[str, np.ndarray], factors: dict[str, np.ndarray]) -> float:
        vals = []
        for sid, rows in data.items():
            rec = reconstruct_rows(factors[sid], w_rows[sid], V)
            vals.append(float(np.abs(rows - rec).mean()))
        return float(np.mean(vals)) if vals else 0.0

    return term(old_data, old_factors) + term(new_data, new_factors)


def run_experiment(config: ExperimentConfig) -> ExperimentResult:
    """Initialize on the first data window, then consume every batch.

    Deterministic for a fixed seed.  Only factor/helper math is timed; data
    loading, normalization, and metric evaluation stay outside the clock.
    """
    config.validate()
    if config.dataset is not None:
        tensor = load_dataset(config.dataset)
    else:
        tensor = synthesize(config.synth, config.seed)
    initial, batches = replay(tensor, config.init_fraction, config.update_cycle)

    stats = None
    if config.resolved_normalize():
        if config.stats_policy == GLOBAL:
            stats = global_stats(tensor)
            initial, _ = normalize_tensor(initial, stats, GLOBAL)
        else:
            initial, stats = normalize_tensor(initial, None, CAUSAL)

    state, info = initialize(
        initial,
        config.rank,
        iters=config.iters,
        seed=config.seed,
        forgetting=config.forgetting,
        passes=config.passes,
    )
    init_rel = relative_error(initial, state.factor_set())

    # retained rows are only needed for the accumulated-error metric
    history: dict[str, np.ndarray] | None = None
    if config.track_global:
        history = {s.slice_id: s.rows for s in initial.slices}
    accumulated = initial if config.baseline else None

    errors = ErrorSeries()
    reports: list[UpdateReport] = []
    for batch in batches:
        if stats is not None:
            batch, stats = normalize_batch(batch, stats, config.stats_policy)

        old_factors = None
        if config.track_global:
            old_factors = {sid: state.u_matrix(sid) for sid in state.slice_ids}

        result = state.update(batch)

        batch_items = [(sid, rows) for sid, rows, _ in batch.items()]
        te, per_slice = local_error(batch_items, result.u_new, state)
        errors.record(result.update_index, te, per_slice)

        gerr = None
        if config.track_global:
            w_rows = {sid: state.W[state.row_of(sid)] for sid in state.slice_ids}
            gerr = global_error(
                old_data=history,
                old_factors=old_factors,
                new_data=dict(batch_items),
                new_factors=result.u_new,
                w_rows=w_rows,
                V=state.V,
            )

        refit_seconds = None
        if config.baseline:
            accumulated = apply_batch(accumulated, batch)
            refit_seed = config.seed + 7919 * result.update_index
            tic = time.perf_counter()
            # fixed sweep count: the baseline cost should reflect data size,
            # not the luck of early convergence
            parafac2_als(
                accumulated, config.rank, iters=config.iters, seed=refit_seed, tol=0.0
            )
            refit_seconds = time.perf_counter() - tic

        if history is not None:
            for sid, rows in batch_items:
                prev = history.get(sid)
                history[sid] = rows if prev is None else np.vstack([prev, rows])

        reports.append(
            UpdateReport(
                update_index=result.update_index,
                seconds=result.seconds,
                refit_seconds=refit_seconds,
                local_error=te,
                global_error=gerr,
                rows_new=result.rows_new,
                new_slices=len(result.new_slice_ids),
                slices_in_batch=batch.slice_count,
                total_slices=len(state.slice_ids),
            )
        )

    return ExperimentResult(
        config=config,
        reports=reports,
        errors=errors,
        state=state,
        init_losses=info.losses,
        init_relative_error=init_rel,
    )


# ---------------------------------------------------------------------------
# Summaries, sweeps, and the scaling benchmark.
# ---------------------------------------------------------------------------

def _mean_std_se(values: list[float]) -> dict[str, float]:
    arr = np.asarray(values, dtype=float)
    return {
        "mean": float(arr.mean()),
        "std": float(arr.std()),
        "se": float(arr.std() / np.sqrt(len(arr))) if len(arr) else 0.0,
    }


def spearman(x, y) -> float:
    rho = scipy_stats.spearmanr(x, y).statistic
    return float(rho)


def summarize(result: ExperimentResult) -> dict:
    reports = result.reports
    indices = [r.update_index for r in reports]
    seconds = [r.seconds for r in reports]
    summary = {
        "updates": len(reports),
        "init_loss": result.init_losses[-1] if result.init_losses else None,
        "init_relative_error": result.init_relative_error,
        "local_error": _mean_std_se([r.local_error for r in reports]),
        "median_update_seconds": float(np.median(seconds)) if seconds else None,
        "update_time_spearman": spearman(indices, seconds) if len(reports) > 2 else None,
    }
    gvals = [r.global_error for r in reports if r.global_error is not None]
    summary["global_error"] = _mean_std_se(gvals) if gvals else None
    refit = [r.refit_seconds for r in reports if r.refit_seconds is not None]
    if refit:
        summary["median_refit_seconds"] = float(np.median(refit))
        summary["refit_time_spearman"] = (
            spearman(indices[: len(refit)], refit) if len(refit) > 2 else None
        )
    return summary


def write_report_csv(reports: list[UpdateReport], path) -> None:
    columns = [
        "update_index",
        "seconds",
        "refit_seconds",
        "local_error",
        "global_error",
        "rows_new",
        "new_slices",
        "slices_in_batch",
        "total_slices",
    ]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)
        for r in reports:
            writer.writerow(
                [
                    r.update_index,
                    repr(r.seconds),
                    "" if r.refit_seconds is None else repr(r.refit_seconds),
                    repr(r.local_error),
                    "" if r.global_error is None else repr(r.global_error),
                    r.rows_new,
                    r.new_slices,
                    r.slices_in_batch,
                    r.total_slices,
                ]
            )


def config_hash(config: ExperimentConfig) -> str:
    blob = json.dumps(asdict(config), sort_keys=True, default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:12]


def sweep_forgetting(config: ExperimentConfig, values) -> list[dict]:
    """Re-run one configuration across forgetting factors.

    Returns one row per value with the local/global error statistics; the
    trade-off only shows on drifting data, where down-weighting old data
    buys local fit at the cost of accumulated fit.
    """
    rows = []
    for lam in values:
        result = run_experiment(replace(config, forgetting=lam))
        summary = summarize(result)
        rows.append(
            {
                "forgetting": lam,
                "local_error": summary["local_error"],
                "global_error": summary["global_error"],
            }
        )
    return rows


@dataclass
class BenchResult:
    """Median update cost per cycle length and the fitted scaling exponent."""

    cycles: list[int]
    median_rows: list[float]
    median_seconds: list[float]
    slope: float
    per_cycle: list[dict] = field(default_factory=list)


def cycle_benchmark(config: ExperimentConfig, cycles) -> BenchResult:
    """Replay the same data at several update cycles and fit a log-log slope.

    The regressor is the median per-update count of new rows, the response
    the median update time; a slope near one means the update cost scales
    linearly with the size of newly arrived data.
    """
    cycles = list(cycles)
    median_rows: list[float] = []
    median_seconds: list[float] = []
    per_cycle: list[dict] = []
    for cycle in cycles:
        cfg = replace(config, update_cycle=cycle, track_global=False)
        result = run_experiment(cfg)
        rows = float(np.median([r.rows_new for r in result.reports]))
        secs = float(np.median([r.seconds for r in result.reports]))
        median_rows.append(rows)
        median_seconds.append(secs)
        entry = {
            "cycle": cycle,
            "updates": len(result.reports),
            "median_rows_new": rows,
            "median_seconds": secs,
        }
        if cfg.baseline:
            refit = [r.refit_seconds for r in result.reports]
            entry["median_refit_seconds"] = float(np.median(refit))
        per_cycle.append(entry)
    slope = float(
        np.polyfit(np.log(median_rows), np.log(median_seconds), 1)[0]
    )
    return BenchResult(cycles, median_rows, median_seconds, slope, per_cycle)
