"""Ridge-stabilized dense solves shared by the factor-update rules."""
from __future__ import annotations

import numpy as np

# Relative ridge added to every Gram-type left-hand side before solving.
RIDGE_EPS = 1e-10


class SolveError(ValueError):
    """A normal-equation system could not be solved reliably."""

    def __init__(self, message: str, slice_id=None):
        if slice_id is not None:
            message = f"{message} (slice {slice_id!r})"
        super().__init__(message)
        self.slice_id = slice_id


def symmetrize(mat: np.ndarray) -> np.ndarray:
    """Average a (batch of) square matrices with their transposes."""
    return (mat + mat.swapaxes(-1, -2)) / 2.0


def ridge_solve(lhs, rhs, eps: float = RIDGE_EPS, slice_id=None) -> np.ndarray:
    """Solve ``lhs @ x = rhs`` after adding a tiny relative ridge to ``lhs``.

    ``lhs`` is a symmetric positive semidefinite matrix (or a stack of them,
    shape ``(..., n, n)``); the ridge is ``eps * mean(diag(lhs)) * I`` computed
    per matrix, so well-scaled systems are perturbed at the 1e-10 level while
    nearly singular ones stay solvable.  Raises :class:`SolveError` when the
    system is singular beyond what the ridge can absorb.
    """
    lhs = np.asarray(lhs, dtype=float)
    rhs = np.asarray(rhs, dtype=float)
    n = lhs.shape[-1]
    diag_mean = np.einsum("...ii->...", lhs) / n
    ridged = lhs + (eps * diag_mean)[..., None, None] * np.eye(n)
    try:
        out = np.linalg.solve(ridged, rhs)
    except np.linalg.LinAlgError as exc:
        raise SolveError(f"singular normal equations: {exc}", slice_id) from None
    if not np.all(np.isfinite(out)):
        raise SolveError("non-finite solution from normal equations", slice_id)
    return out


