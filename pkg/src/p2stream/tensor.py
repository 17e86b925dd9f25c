"""Irregular-tensor data model, min-max normalization, and streaming replay.

An irregular tensor is an ordered collection of dense real matrices (slices)
that share a column count J while their row counts differ.  Rows are time
steps: each slice covers a contiguous range of the global time axis starting
at its ``first_time_step``.  The replay driver partitions such a tensor into
an initialization tensor plus a sequence of update batches, which is how a
recorded dataset is turned back into a stream.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from math import ceil
from pathlib import Path

import numpy as np

# Normalization statistics policies.
CAUSAL = "causal"
GLOBAL = "global"
_POLICIES = (CAUSAL, GLOBAL)

BATCH_FORMAT_VERSION = 1


class DatasetError(ValueError):
    """Malformed dataset directory, batch file, or inconsistent slice data."""


@dataclass
class SliceMatrix:
    """One slice: a dense (I_k, J) matrix with one row per time step."""

    slice_id: str
    rows: np.ndarray
    first_time_step: int = 0

    def __post_init__(self):
        self.rows = np.asarray(self.rows, dtype=float)
        if self.rows.ndim != 2 or self.rows.shape[0] < 1:
            raise DatasetError(
                f"slice {self.slice_id!r} needs a 2-D matrix with at least one row"
            )

    @property
    def row_count(self) -> int:
        return self.rows.shape[0]

    @property
    def end_step(self) -> int:
        """First time step after the slice's active range."""
        return self.first_time_step + self.rows.shape[0]


class IrregularTensor:
    """Ordered collection of slices sharing a column count.

    Treated as immutable after construction; all transformations return new
    instances.
    """

    def __init__(self, slices):
        slices = list(slices)
        if not slices:
            raise DatasetError("an irregular tensor needs at least one slice")
        column_count = slices[0].rows.shape[1]
        by_id = {}
        for s in slices:
            if s.rows.shape[1] != column_count:
                raise DatasetError(
                    f"slice {s.slice_id!r} has {s.rows.shape[1]} columns, "
                    f"expected {column_count}"
                )
            if s.slice_id in by_id:
                raise DatasetError(f"duplicate slice id {s.slice_id!r}")
            by_id[s.slice_id] = s
        self.slices = slices
        self.column_count = column_count
        self._by_id = by_id

    def __len__(self) -> int:
        return len(self.slices)

    def __iter__(self):
        return iter(self.slices)

    @property
    def slice_ids(self) -> list[str]:
        return [s.slice_id for s in self.slices]

    def get(self, slice_id: str) -> SliceMatrix:
        return self._by_id[slice_id]

    def has(self, slice_id: str) -> bool:
        return slice_id in self._by_id

    @property
    def start_step(self) -> int:
        return min(s.first_time_step for s in self.slices)

    @property
    def end_step(self) -> int:
        return max(s.end_step for s in self.slices)

    @property
    def duration(self) -> int:
        """Overall duration: total number of time steps spanned by the data."""
        return self.end_step - self.start_step

    @property
    def total_rows(self) -> int:
        return sum(s.row_count for s in self.slices)


@dataclass
class NewSlice:
    """A slice that starts inside an update window."""

    slice_id: str
    rows: np.ndarray
    first_time_step: int

    def __post_init__(self):
        self.rows = np.asarray(self.rows, dtype=float)


@dataclass
class UpdateBatch:
    """Payload of one update: new rows of existing slices plus new slices.

    ``cycle_span`` is the inclusive (first, last) time-step range the batch
    covers.  A batch may lack either kind of entry but never both.
    """

    update_index: int
    existing_rows: dict[str, np.ndarray]
    new_slices: list[NewSlice]
    cycle_span: tuple[int, int]

    def __post_init__(self):
        self.existing_rows = {
            sid: np.asarray(mat, dtype=float) for sid, mat in self.existing_rows.items()
        }
        for sid, mat in self.existing_rows.items():
            if mat.ndim != 2 or mat.shape[0] < 1:
                raise DatasetError(f"existing-rows entry {sid!r} must be a nonempty matrix")
        new_ids = set()
        for ns in self.new_slices:
            if ns.slice_id in self.existing_rows or ns.slice_id in new_ids:
                raise DatasetError(f"new slice id {ns.slice_id!r} collides inside the batch")
            new_ids.add(ns.slice_id)
        if not self.existing_rows and not self.new_slices:
            raise DatasetError("an update batch cannot be empty")

    @property
    def total_new_rows(self) -> int:
        rows = sum(m.shape[0] for m in self.existing_rows.values())
        return rows + sum(ns.rows.shape[0] for ns in self.new_slices)

    @property
    def slice_count(self) -> int:
        """Number of slices receiving data in this batch."""
        return len(self.existing_rows) + len(self.new_slices)

    def items(self):
        """Yield (slice_id, rows, is_new) in deterministic batch order."""
        for sid, mat in self.existing_rows.items():
            yield sid, mat, False
        for ns in self.new_slices:
            yield ns.slice_id, ns.rows, True


def replay(
    tensor: IrregularTensor, init_fraction: float, update_cycle: int
) -> tuple[IrregularTensor, list[UpdateBatch]]:
    """Split a recorded tensor into an initial tensor plus update batches.

    The initial tensor holds every row with a time step before
    ``ceil(init_fraction * duration)`` (measured from the earliest step);
    the remaining steps are cut into consecutive windows of ``update_cycle``
    steps (the last window may be shorter).  A slice starting inside window N
    arrives in batch N as a new slice; rows of slices that started earlier
    arrive as existing rows.  Concatenating the initial tensor with all
    batches reproduces the input exactly.
    """
    if not 0.0 < init_fraction < 1.0:
        raise ValueError("init_fraction must lie strictly between 0 and 1")
    if update_cycle < 1:
        raise ValueError("update_cycle must be at least 1")

    start = tensor.start_step
    boundary = start + ceil(init_fraction * tensor.duration)
    end = tensor.end_step

    initial = []
    for s in tensor.slices:
        if s.first_time_step < boundary:
            block = s.rows[: boundary - s.first_time_step]
            initial.append(SliceMatrix(s.slice_id, block.copy(), s.first_time_step))
    if not initial:
        raise DatasetError("initialization window contains no slice data")

    batches = []
    index = 1
    win_start = boundary
    while win_start < end:
        win_end = min(win_start + update_cycle, end)
        existing: dict[str, np.ndarray] = {}
        fresh: list[NewSlice] = []
        for s in tensor.slices:
            lo = max(s.first_time_step, win_start)
            hi = min(s.end_step, win_end)
            if lo >= hi:
                continue
            block = s.rows[lo - s.first_time_step : hi - s.first_time_step].copy()
            if s.first_time_step >= win_start:
                fresh.append(NewSlice(s.slice_id, block, s.first_time_step))
            else:
                existing[s.slice_id] = block
        if existing or fresh:
            batches.append(UpdateBatch(index, existing, fresh, (win_start, win_end - 1)))
            index += 1
        win_start += update_cycle
    return IrregularTensor(initial), batches


def apply_batch(tensor: IrregularTensor, batch: UpdateBatch) -> IrregularTensor:
    """Append a batch to a tensor, returning the accumulated tensor."""
    slices = []
    for s in tensor.slices:
        extra = batch.existing_rows.get(s.slice_id)
        if extra is None:
            slices.append(s)
        else:
            rows = np.vstack([s.rows, extra])
            slices.append(SliceMatrix(s.slice_id, rows, s.first_time_step))
    known = set(tensor.slice_ids)
    for sid in batch.existing_rows:
        if sid not in known:
            raise DatasetError(f"batch references unknown existing slice {sid!r}")
    for ns in batch.new_slices:
        slices.append(SliceMatrix(ns.slice_id, ns.rows.copy(), ns.first_time_step))
    return IrregularTensor(slices)


# ---------------------------------------------------------------------------
# Per-column min-max normalization.
# ---------------------------------------------------------------------------

@dataclass
class ColumnStats:
    """Running per-(slice, column) minima and maxima."""

    minimum: dict[str, np.ndarray] = field(default_factory=dict)
    maximum: dict[str, np.ndarray] = field(default_factory=dict)

    def has(self, slice_id: str) -> bool:
        return slice_id in self.minimum

    def observe(self, slice_id: str, rows: np.ndarray) -> None:
        lo = rows.min(axis=0)
        hi = rows.max(axis=0)
        if slice_id in self.minimum:
            self.minimum[slice_id] = np.minimum(self.minimum[slice_id], lo)
            self.maximum[slice_id] = np.maximum(self.maximum[slice_id], hi)
        else:
            self.minimum[slice_id] = lo.copy()
            self.maximum[slice_id] = hi.copy()

    def copy(self) -> "ColumnStats":
        return ColumnStats(
            {k: v.copy() for k, v in self.minimum.items()},
            {k: v.copy() for k, v in self.maximum.items()},
        )


def _scale_columns(rows: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    """Map each column through (x - lo) / (hi - lo); degenerate columns to 0."""
    span = hi - lo
    out = np.zeros_like(rows, dtype=float)
    live = span > 0
    out[:, live] = (rows[:, live] - lo[live]) / span[live]
    return out


def _check_policy(policy: str) -> None:
    if policy not in _POLICIES:
        raise ValueError(f"unknown stats policy {policy!r}; expected one of {_POLICIES}")


def global_stats(tensor: IrregularTensor) -> ColumnStats:
    """Column stats over an entire recorded tensor (for offline parity runs)."""
    stats = ColumnStats()
    for s in tensor.slices:
        stats.observe(s.slice_id, s.rows)
    return stats


def normalize_tensor(
    tensor: IrregularTensor,
    stats: ColumnStats | None = None,
    policy: str = CAUSAL,
) -> tuple[IrregularTensor, ColumnStats]:
    """Normalize every slice column to the recorded min-max range.

    With the causal policy, a slice with no prior stats is scaled by its own
    data (there is nothing earlier to use) and the stats are extended with
    what was seen.  With the global policy the supplied stats are used as-is
    and returned unchanged.
    """
    _check_policy(policy)
    stats = ColumnStats() if stats is None else stats.copy()
    slices = []
    for s in tensor.slices:
        if stats.has(s.slice_id):
            lo, hi = stats.minimum[s.slice_id], stats.maximum[s.slice_id]
        else:
            lo, hi = s.rows.min(axis=0), s.rows.max(axis=0)
        slices.append(SliceMatrix(s.slice_id, _scale_columns(s.rows, lo, hi), s.first_time_step))
        if policy == CAUSAL:
            stats.observe(s.slice_id, s.rows)
    return IrregularTensor(slices), stats


def normalize_batch(
    batch: UpdateBatch,
    stats: ColumnStats,
    policy: str = CAUSAL,
) -> tuple[UpdateBatch, ColumnStats]:
    """Normalize one batch with stats from strictly earlier data.

    Existing slices must already be covered by ``stats`` (their history was
    seen); brand-new slices fall back to their own batch data, matching how
    the first sight of any slice is scaled.  Under the causal policy the
    returned stats additionally cover this batch.
    """
    _check_policy(policy)
    stats = stats.copy()
    existing: dict[str, np.ndarray] = {}
    for sid, mat in batch.existing_rows.items():
        if not stats.has(sid):
            raise DatasetError(f"no normalization stats for existing slice {sid!r}")
        existing[sid] = _scale_columns(mat, stats.minimum[sid], stats.maximum[sid])
        if policy == CAUSAL:
            stats.observe(sid, mat)
    fresh: list[NewSlice] = []
    for ns in batch.new_slices:
        if stats.has(ns.slice_id):
            lo, hi = stats.minimum[ns.slice_id], stats.maximum[ns.slice_id]
        else:
            lo, hi = ns.rows.min(axis=0), ns.rows.max(axis=0)
        fresh.append(
            NewSlice(ns.slice_id, _scale_columns(ns.rows, lo, hi), ns.first_time_step)
        )
        if policy == CAUSAL:
            stats.observe(ns.slice_id, ns.rows)
    return UpdateBatch(batch.update_index, existing, fresh, batch.cycle_span), stats


# ---------------------------------------------------------------------------
# Dataset directory and batch-file formats.
# ---------------------------------------------------------------------------

def _read_csv_matrix(path: Path) -> np.ndarray:
    """Read a CSV matrix; a non-numeric header row is permitted and skipped."""
    with open(path) as fh:
        first = fh.readline()
    tokens = [t.strip() for t in first.strip().split(",") if t.strip() != ""]
    skip = 0
    if tokens:
        try:
            [float(t) for t in tokens]
        except ValueError:
            skip = 1
    try:
        mat = np.loadtxt(path, delimiter=",", skiprows=skip, ndmin=2, dtype=float)
    except ValueError as exc:
        raise DatasetError(f"cannot parse CSV matrix {path}: {exc}") from None
    return mat


def load_dataset(path) -> IrregularTensor:
    """Load a dataset directory: ``manifest.json`` plus one CSV per slice."""
    root = Path(path)
    manifest_path = root / "manifest.json"
    if not manifest_path.is_file():
        raise DatasetError(f"missing manifest.json under {root}")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise DatasetError(f"invalid manifest.json: {exc}") from None
    entries = manifest.get("slices")
    if not isinstance(entries, list) or not entries:
        raise DatasetError("manifest.json must list slices under the 'slices' key")
    slices = []
    for entry in entries:
        try:
            sid = str(entry["id"])
            file_name = entry["file"]
            first = int(entry.get("first_time_step", 0))
        except (KeyError, TypeError, ValueError) as exc:
            raise DatasetError(f"bad manifest entry {entry!r}: {exc}") from None
        rows = _read_csv_matrix(root / file_name)
        slices.append(SliceMatrix(sid, rows, first))
    return IrregularTensor(slices)


def save_dataset(tensor: IrregularTensor, path) -> None:
    """Write a tensor as a dataset directory (manifest + CSVs, no headers)."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    entries = []
    for idx, s in enumerate(tensor.slices):
        file_name = f"slice_{idx:04d}.csv"
        np.savetxt(root / file_name, s.rows, delimiter=",")
        entries.append(
            {"id": s.slice_id, "file": file_name, "first_time_step": s.first_time_step}
        )
    (root / "manifest.json").write_text(json.dumps({"slices": entries}, indent=2))


def save_batch(batch: UpdateBatch, path) -> None:
    """Write one update batch as a JSON file."""
    payload = {
        "format_version": BATCH_FORMAT_VERSION,
        "update_index": batch.update_index,
        "cycle_span": list(batch.cycle_span),
        "existing_rows": {sid: mat.tolist() for sid, mat in batch.existing_rows.items()},
        "new_slices": [
            {
                "id": ns.slice_id,
                "first_time_step": ns.first_time_step,
                "rows": ns.rows.tolist(),
            }
            for ns in batch.new_slices
        ],
    }
    Path(path).write_text(json.dumps(payload))


def load_batch(path) -> UpdateBatch:
    """Read an update batch written by :func:`save_batch`."""
    try:
        payload = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise DatasetError(f"invalid batch file {path}: {exc}") from None
    if payload.get("format_version") != BATCH_FORMAT_VERSION:
        raise DatasetError(f"unsupported batch format version in {path}")
    try:
        existing = {
            str(sid): np.asarray(mat, dtype=float)
            for sid, mat in payload.get("existing_rows", {}).items()
        }
        fresh = [
            NewSlice(
                str(entry["id"]),
                np.asarray(entry["rows"], dtype=float),
                int(entry["first_time_step"]),
            )
            for entry in payload.get("new_slices", [])
        ]
        span = tuple(payload["cycle_span"])
        return UpdateBatch(int(payload["update_index"]), existing, fresh, span)
    except (KeyError, TypeError, ValueError) as exc:
        raise DatasetError(f"malformed batch file {path}: {exc}") from None
