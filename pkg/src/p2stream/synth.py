"""Synthetic irregular-tensor generator with planted low-rank structure."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import IrregularTensor, SliceMatrix


@dataclass
class AnomalyInjection:
    """Additive bias over a time-step window.

    ``slice_id`` of None applies the bias to every slice active in the window
    (a batch-wide event); ``start``/``stop`` are global time steps, half-open.
    """

    slice_id: str | None
    start: int
    stop: int
    magnitude: float


@dataclass
class SynthParams:
    """Knobs for the planted-model generator.

    ``stagger`` spreads slice start steps over the leading fraction of the
    duration, so later starters show up mid-stream as new slices.  ``drift``
    rotates the shared column factor by that many radians per time step,
    making old and new data genuinely disagree.  ``init_window`` marks the
    global step up to which per-slice row profiles are orthonormalized; the
    coupled static model then fits rows before that step exactly, which is
    what an exact-recovery initialization needs.  Left as None, the whole
    active range of each slice is orthonormalized instead.

    ``noise_period``, ``noise_mod``, and ``noise_duty`` give the noise
    amplitude a seasonal duty-cycle pattern: during the leading
    ``noise_duty`` fraction of each ``noise_period``-step period the level
    drops to ``noise * (1 - noise_mod)``, and sits at ``noise`` otherwise.
    This mimics the quiet-day seasonality of real measurement streams
    (weekends in traffic or trading data).
    """

    num_slices: int = 20
    num_columns: int = 15
    rank: int = 3
    duration: int = 200
    noise: float = 0.0
    stagger: float = 0.0
    drift: float = 0.0
    scale_min: float = 0.5
    scale_max: float = 1.5
    init_window: int | None = None
    noise_period: int = 0
    noise_mod: float = 0.0
    noise_duty: float = 0.5
    anomalies: list[AnomalyInjection] = field(default_factory=list)


def _random_mixing(rng: np.random.Generator, rank: int) -> np.ndarray:
    """Well-conditioned random mixing matrix (condition number below ~2)."""
    q1, _ = np.linalg.qr(rng.standard_normal((rank, rank)))
    q2, _ = np.linalg.qr(rng.standard_normal((rank, rank)))
    return q1 @ np.diag(rng.uniform(0.7, 1.3, rank)) @ q2


def _drifted_rows(
    coeffs: np.ndarray,
    steps: np.ndarray,
    v0: np.ndarray,
    v_perp: np.ndarray,
    drift: float,
) -> np.ndarray:
    """Emit rows under a column factor whose span rotates over time.

    Each column of the planted factor turns at ``drift`` radians per step
    inside its own plane spanned with an orthogonal complement direction, so
    the column span itself moves and no single static factor fits all time
    steps.  Column r gets a slightly different rate to break symmetry.
    """
    rank = coeffs.shape[1]
    rows = np.zeros((coeffs.shape[0], v0.shape[0]))
    for r in range(rank):
        theta = drift * (1.0 + r / rank) * steps
        col = np.cos(theta)[:, None] * v0[:, r] + np.sin(theta)[:, None] * v_perp[:, r]
        rows += coeffs[:, r : r + 1] * col
    return rows


def synthesize(params: SynthParams, seed: int) -> IrregularTensor:
    """Generate ``X_k = U_k S_k V^T + noise`` with smooth random factors.

    Deterministic for a fixed seed.  With zero noise and zero drift the
    result is exactly rank ``params.rank`` with a shared column factor, so a
    factorization at that rank can recover it to machine precision.
    """
    p = params
    if p.num_slices < 1 or p.num_columns < 1 or p.duration < 2:
        raise ValueError("need at least one slice, one column, and two time steps")
    rng = np.random.default_rng(seed)

    max_start = int(p.stagger * p.duration)
    starts = np.zeros(p.num_slices, dtype=int)
    if max_start > 0:
        starts = rng.integers(0, max_start + 1, size=p.num_slices)
        starts[0] = 0  # anchor the time axis and the initialization window
    lengths = p.duration - starts
    if p.rank > min(p.num_columns, int(lengths.min())):
        raise ValueError(
            f"rank {p.rank} exceeds min(columns, shortest slice) = "
            f"{min(p.num_columns, int(lengths.min()))}"
        )

    # Shared column factor: orthonormal for a well-conditioned planted model.
    # Under drift each column needs its own orthogonal escape direction.
    if p.drift != 0.0 and p.num_columns < 2 * p.rank:
        raise ValueError("drift needs num_columns >= 2 * rank")
    basis_cols = 2 * p.rank if p.drift != 0.0 else p.rank
    basis, _ = np.linalg.qr(rng.standard_normal((p.num_columns, basis_cols)))
    v0 = basis[:, : p.rank]
    v_perp = basis[:, p.rank :] if p.drift != 0.0 else None
    # Shared row-factor mixing: every slice's U_k is an orthonormal basis
    # times this matrix, so the cross products U_k^T U_k agree across slices
    # and the planted tensor is exactly representable by the coupled model.
    mixing = _random_mixing(rng, p.rank)

    slices = []
    for k in range(p.num_slices):
        start, length = int(starts[k]), int(lengths[k])
        steps = np.arange(start, start + length)
        phase = rng.uniform(0.0, 2 * np.pi, size=p.rank)
        freq = rng.uniform(0.5, 3.0, size=p.rank)
        amp = rng.uniform(0.8, 1.2, size=p.rank)
        # Smooth per-row profiles: sinusoid columns orthonormalized over the
        # leading window, with the same change of basis carried through the
        # remaining rows so the curves stay smooth across the boundary.
        base = amp * np.sin(2 * np.pi * freq * steps[:, None] / p.duration + phase)
        prefix = length if p.init_window is None else min(max(p.init_window - start, 0), length)
        if prefix < p.rank:
            prefix = length
        ortho, tri = np.linalg.qr(base[:prefix])
        u = base @ np.linalg.inv(tri) @ mixing
        s = rng.uniform(p.scale_min, p.scale_max, size=p.rank)
        coeffs = u * s
        if p.drift != 0.0:
            rows = _drifted_rows(coeffs, steps, v0, v_perp, p.drift)
        else:
            rows = coeffs @ v0.T
        if p.noise > 0.0:
            level = np.full(length, p.noise)
            if p.noise_period > 0 and p.noise_mod != 0.0:
                phase = steps % p.noise_period
                quiet = phase < p.noise_duty * p.noise_period
                level = np.where(quiet, p.noise * (1.0 - p.noise_mod), p.noise)
            rows = rows + level[:, None] * rng.standard_normal(rows.shape)
        slices.append(SliceMatrix(f"s{k:03d}", rows, start))

    tensor = IrregularTensor(slices)
    for inj in p.anomalies:
        _inject(tensor, inj)
    return tensor


def _inject(tensor: IrregularTensor, inj: AnomalyInjection) -> None:
    targets = tensor.slices if inj.slice_id is None else [tensor.get(inj.slice_id)]
    for s in targets:
        lo = max(inj.start, s.first_time_step)
        hi = min(inj.stop, s.end_step)
        if lo >= hi:
            continue
        s.rows[lo - s.first_time_step : hi - s.first_time_step, :] += inj.magnitude
