"""Direct-fitting alternating least squares for irregular tensors.

Fits the model ``X_k ~ U_k S_k V^T`` with slice-specific row factors U_k,
per-slice diagonal weights S_k (kept as rows of W), and a shared column
factor V.  Used both to initialize the streaming engine on the first chunk
of data and as the full-refit baseline in benchmarks.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .linalg import ridge_solve
from .tensor import IrregularTensor


class FactorizationError(RuntimeError):
    """Raised when the alternating solve breaks down on a slice."""


@dataclass
class FactorSet:
    """Factors of an irregular tensor.

    ``U`` maps slice id to its (I_k, R) block, ``W`` holds one row per slice
    (the diagonal of that slice's S_k, rows ordered like ``slice_ids``), and
    ``V`` is the shared (J, R) column factor.  S_k is never materialized as a
    full matrix.
    """

    slice_ids: list[str]
    U: dict[str, np.ndarray]
    W: np.ndarray
    V: np.ndarray
    _row_of: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        self.W = np.asarray(self.W, dtype=float)
        self.V = np.asarray(self.V, dtype=float)
        self._row_of = {sid: k for k, sid in enumerate(self.slice_ids)}
        rank = self.V.shape[1]
        if self.W.shape != (len(self.slice_ids), rank):
            raise ValueError("W must have one row per slice and rank columns")
        for sid in self.slice_ids:
            if self.U[sid].shape[1] != rank:
                raise ValueError(f"U block {sid!r} does not match rank {rank}")

    @property
    def rank(self) -> int:
        return self.V.shape[1]

    def row_of(self, slice_id: str) -> int:
        return self._row_of[slice_id]

    def s_row(self, slice_id: str) -> np.ndarray:
        return self.W[self._row_of[slice_id]]


@dataclass
class ALSInfo:
    """Per-iteration diagnostics from one alternating-least-squares fit."""

    losses: list[float]
    projections: dict[str, np.ndarray]

    @property
    def final_loss(self) -> float:
        return self.losses[-1]


def reconstruct_rows(u_rows: np.ndarray, s: np.ndarray, V: np.ndarray) -> np.ndarray:
    """Rebuild data rows from their factors: ``U diag(s) V^T``."""
    return (u_rows * s) @ V.T


def reconstruct(factors: FactorSet, k: int) -> np.ndarray:
    """Reconstruct slice number ``k`` (in ``slice_ids`` order)."""
    sid = factors.slice_ids[k]
    return reconstruct_rows(factors.U[sid], factors.W[k], factors.V)


def factorization_loss(tensor: IrregularTensor, factors: FactorSet) -> float:
    """Sum of squared Frobenius residuals over all slices."""
    total = 0.0
    for s in tensor.slices:
        rec = reconstruct_rows(factors.U[s.slice_id], factors.s_row(s.slice_id), factors.V)
        total += float(np.sum((s.rows - rec) ** 2))
    return total


def relative_error(tensor: IrregularTensor, factors: FactorSet) -> float:
    """Relative Frobenius error ``||X - X_hat||_F / ||X||_F``."""
    norm_sq = sum(float(np.sum(s.rows**2)) for s in tensor.slices)
    if norm_sq == 0.0:
        return 0.0
    return float(np.sqrt(factorization_loss(tensor, factors) / norm_sq))


def parafac2_als(
    tensor: IrregularTensor,
    rank: int,
    iters: int = 10,
    seed: int = 0,
    tol: float = 1e-8,
    return_info: bool = False,
):
    """Fit factors by classical direct-fitting alternating least squares.

    Each sweep (i) aligns a column-orthonormal basis Q_k per slice from the
    polar factor of ``X_k (V * s_k) H^T``, (ii) projects the slices to
    ``Y_k = Q_k^T X_k``, (iii) runs one CP sweep on the stacked projected
    tensor to refresh H, W, and V, and (iv) sets ``U_k = Q_k H``.  The loss
    is non-increasing across sweeps up to numerical tolerance; iteration
    stops early once the relative loss change drops below ``tol``.

    Parameters
    ----------
    tensor : IrregularTensor
    rank : int
        Target rank; must not exceed min(J, min_k I_k).
    iters : int
        Hard cap on sweeps.
    seed : int
        Seeds the uniform random initialization of V and H.
    tol : float
        Relative loss-change threshold for early exit.
    return_info : bool
        Also return :class:`ALSInfo` with the loss log and Q_k bases.
    """
    min_rows = min(s.row_count for s in tensor.slices)
    if rank > min(tensor.column_count, min_rows):
        raise ValueError(
            f"rank {rank} exceeds min(columns, shortest slice) = "
            f"{min(tensor.column_count, min_rows)}"
        )
    if iters < 1:
        raise ValueError("iters must be at least 1")

    rng = np.random.default_rng(seed)
    J = tensor.column_count
    K = len(tensor)
    V = rng.uniform(size=(J, rank))
    H = rng.uniform(size=(rank, rank))
    W = np.ones((K, rank))

    projections: dict[str, np.ndarray] = {}
    proj_slices = np.empty((K, rank, J))  # stacked Y_k = Q_k^T X_k
    losses: list[float] = []

    for _ in range(iters):
        # (i)-(ii) per-slice orthonormal alignment and projection
        for k, s in enumerate(tensor.slices):
            target = s.rows @ (V * W[k]) @ H.T
            try:
                left, _, right = np.linalg.svd(target, full_matrices=False)
            except np.linalg.LinAlgError as exc:
                raise FactorizationError(
                    f"SVD failed for slice {s.slice_id!r}: {exc}"
                ) from None
            q = left @ right
            projections[s.slice_id] = q
            proj_slices[k] = q.T @ s.rows

        # (iii) one CP sweep on the projected tensor: H, then W, then V
        vtv = V.T @ V
        wtw = W.T @ W
        yv = proj_slices @ V  # (K, R, R)
        rhs_h = np.einsum("krz,kz->rz", yv, W)
        H = ridge_solve(vtv * wtw, rhs_h.T).T

        hth = H.T @ H
        rhs_w = np.einsum("krz,rz->kz", yv, H)
        W = ridge_solve(hth * vtv, rhs_w.T).T

        wtw = W.T @ W
        rhs_v = np.einsum("krj,rz,kz->jz", proj_slices, H, W)
        V = ridge_solve(hth * wtw, rhs_v.T).T

        # (iv) implicit U_k = Q_k H; evaluate the true loss
        loss = 0.0
        for k, s in enumerate(tensor.slices):
            rec = (projections[s.slice_id] @ (H * W[k])) @ V.T
            loss += float(np.sum((s.rows - rec) ** 2))
        losses.append(loss)
        if len(losses) >= 2:
            prev = losses[-2]
            if prev == 0.0 or abs(prev - loss) <= tol * prev:
                break

    factors = FactorSet(
        slice_ids=tensor.slice_ids,
        U={sid: projections[sid] @ H for sid in tensor.slice_ids},
        W=W,
        V=V,
    )
    if return_info:
        return factors, ALSInfo(losses=losses, projections=projections)
    return factors


def export_factors(factors: FactorSet, out_dir, losses: list[float] | None = None) -> None:
    """Write factors as CSV files plus a JSON metadata file."""
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    files = {}
    for idx, sid in enumerate(factors.slice_ids):
        name = f"U_{idx:04d}.csv"
        np.savetxt(root / name, factors.U[sid], delimiter=",")
        files[sid] = name
    np.savetxt(root / "V.csv", factors.V, delimiter=",")
    np.savetxt(root / "W.csv", factors.W, delimiter=",")
    meta = {
        "rank": factors.rank,
        "slice_ids": factors.slice_ids,
        "u_files": files,
        "iteration_loss": list(losses) if losses is not None else [],
    }
    (root / "factors.json").write_text(json.dumps(meta, indent=2))
