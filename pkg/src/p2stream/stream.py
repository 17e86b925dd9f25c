"""Streaming factor updates backed by helper summaries of old data.

Once factors are fitted on an initial tensor, each arriving batch is folded
in without ever touching accumulated data: per-slice summaries (c_k, D_k)
carry what the S-row solve needs, global summaries (F, G) carry what the
shared column factor solve needs, and a forgetting factor in (0, 1] decays
the old-data side of every summary so the factors track recent behavior.
The cost of one update is linear in the number of new rows.

Update order for a batch: new row factors U_new per slice (current V and
S_k; brand-new slices bootstrap S_k = identity), then c/D accumulation and
the S-row solve per slice, then F/G accumulation (with the refreshed S rows)
and the V solve.  Old U blocks are never rewritten.
"""
from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ._kernels import group_update as _fast_group_update
from .als import ALSInfo, FactorSet, parafac2_als
from .linalg import RIDGE_EPS, SolveError, ridge_solve, symmetrize
from .tensor import ColumnStats, IrregularTensor, UpdateBatch

STATE_FORMAT_VERSION = 1

# Compiled fast path for the per-slice update phase; flip off to force the
# pure-numpy implementation (the two are arithmetically equivalent).
USE_FAST_KERNEL = _fast_group_update is not None


@dataclass
class HelperState:
    """Frozen, forgetting-weighted summaries of everything already folded in.

    c maps slice id to a length-R vector, D to an (R, R) Gram accumulator;
    F is (J, R) and G is (R, R).  D and G stay symmetric positive
    semidefinite by construction.
    """

    c: dict[str, np.ndarray]
    D: dict[str, np.ndarray]
    F: np.ndarray
    G: np.ndarray
    forgetting: float

    def __post_init__(self):
        if not 0.0 < self.forgetting <= 1.0:
            raise ValueError("forgetting factor must lie in (0, 1]")


def init_helpers(
    tensor: IrregularTensor, factors: FactorSet, forgetting: float = 0.7
) -> HelperState:
    """Build helper summaries from factors fitted on the initial tensor.

    For each slice, ``c_k[r] = sum_{i,j} X_k(i,j) U_k(i,r) V(j,r)`` and
    ``D_k = U_k^T U_k``; globally ``F = sum_k X_k^T U_k S_k`` and
    ``G = sum_k S_k U_k^T U_k S_k``.
    """
    V = factors.V
    J, rank = V.shape
    c: dict[str, np.ndarray] = {}
    D: dict[str, np.ndarray] = {}
    F = np.zeros((J, rank))
    G = np.zeros((rank, rank))
    for s in tensor.slices:
        u = factors.U[s.slice_id]
        if u.shape[0] != s.row_count:
            raise ValueError(f"factor block {s.slice_id!r} does not match slice rows")
        srow = factors.s_row(s.slice_id)
        xv = s.rows @ V  # (I_k, R)
        c[s.slice_id] = np.einsum("ir,ir->r", xv, u)
        gram = u.T @ u
        D[s.slice_id] = symmetrize(gram)
        F += s.rows.T @ (u * srow)
        G += gram * np.outer(srow, srow)
    return HelperState(c=c, D=D, F=F, G=symmetrize(G), forgetting=forgetting)


# ---------------------------------------------------------------------------
# The three update rules plus the two accumulation steps, one slice at a time.
# The engine below applies the same math batched over equal-height slices;
# these are the reference forms, handy for driving a single slice by hand.
# ---------------------------------------------------------------------------

def update_u_new(x_new: np.ndarray, V: np.ndarray, s: np.ndarray, slice_id=None) -> np.ndarray:
    """Solve ``U_new (S_k V^T V S_k) = X_new V S_k`` for the new row factors."""
    x_new = np.asarray(x_new, dtype=float)
    s = np.asarray(s, dtype=float)
    lhs = (V.T @ V) * np.outer(s, s)
    rhs = (x_new @ V) * s  # (I_new, R)
    return ridge_solve(lhs, rhs.T, slice_id=slice_id).T


def accumulate_cd(
    helpers: HelperState,
    slice_id: str,
    x_new: np.ndarray,
    u_new: np.ndarray,
    V: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """Fold a slice's new rows into its (c, D) summaries.

    ``c <- lam * c_old + sum_{i,j} X_new(i,j) U_new(i,r) V(j,r)`` and
    ``D <- lam * D_old + U_new^T U_new``; a slice with no prior summaries
    starts from the fresh terms alone.  The helper map is replaced in place.
    """
    lam = helpers.forgetting
    xv = np.asarray(x_new, dtype=float) @ V
    c_fresh = np.einsum("ir,ir->r", xv, u_new)
    d_fresh = symmetrize(u_new.T @ u_new)
    c_old = helpers.c.get(slice_id)
    if c_old is None:
        c_new, d_new = c_fresh, d_fresh
    else:
        c_new = lam * c_old + c_fresh
        d_new = symmetrize(lam * helpers.D[slice_id] + d_fresh)
    helpers.c[slice_id] = c_new
    helpers.D[slice_id] = d_new
    return c_new, d_new


def update_s_row(c_new: np.ndarray, d_new: np.ndarray, V: np.ndarray, slice_id=None) -> np.ndarray:
    """Solve ``w (V^T V * D) = c`` for a slice's diagonal weights."""
    lhs = (V.T @ V) * d_new
    return ridge_solve(lhs, np.asarray(c_new, dtype=float), slice_id=slice_id)


def accumulate_fg(
    helpers: HelperState,
    contributions: list[tuple[np.ndarray, np.ndarray, np.ndarray]],
) -> tuple[np.ndarray, np.ndarray]:
    """Fold a batch into the global (F, G) summaries.

    Each contribution is ``(X_new, U_new, s_k)`` with s_k the just-refreshed
    diagonal weights.  F and G decay by the forgetting factor on every
    update, even for an empty contribution list.
    """
    lam = helpers.forgetting
    f_fresh = np.zeros_like(helpers.F)
    g_fresh = np.zeros_like(helpers.G)
    for x_new, u_new, s in contributions:
        us = u_new * s
        f_fresh += np.asarray(x_new, dtype=float).T @ us
        g_fresh += (u_new.T @ u_new) * np.outer(s, s)
    f_new = lam * helpers.F + f_fresh
    g_new = symmetrize(lam * helpers.G + g_fresh)
    helpers.F = f_new
    helpers.G = g_new
    return f_new, g_new


def update_v(f_new: np.ndarray, g_new: np.ndarray) -> np.ndarray:
    """Solve ``V G = F`` for the shared column factor."""
    return ridge_solve(g_new, f_new.T).T


# ---------------------------------------------------------------------------
# Stream state and the batched update engine.
# ---------------------------------------------------------------------------

@dataclass
class UpdateResult:
    """What one consumed batch produced.

    ``v_used`` is the column factor the row-factor and summary solves saw
    (the pre-update factor for single-pass operation), kept for diagnostics
    such as residual checks.
    """

    update_index: int
    u_new: dict[str, np.ndarray]
    new_slice_ids: list[str]
    rows_new: int
    seconds: float
    v_used: np.ndarray = None


@dataclass
class StreamState:
    """Factors plus helper summaries of a live stream.

    Per-slice summaries live in arrays aligned with the W rows (row k of
    ``C`` and ``D`` belongs to ``slice_ids[k]``), so an update touches a few
    array slices instead of thousands of dict entries.  U blocks are kept
    per batch and concatenated on demand, so appending rows never rewrites
    history.  Exclusively owned during an update; read-only snapshots may be
    taken between updates.
    """

    slice_ids: list[str]
    u_blocks: dict[str, list[np.ndarray]]
    W: np.ndarray
    V: np.ndarray
    C: np.ndarray  # (K, R) per-slice c summaries
    D: np.ndarray  # (K, R, R) per-slice Gram summaries
    F: np.ndarray  # (J, R)
    G: np.ndarray  # (R, R)
    forgetting: float
    update_index: int = 0
    passes: int = 1
    _row_of: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        if not 0.0 < self.forgetting <= 1.0:
            raise ValueError("forgetting factor must lie in (0, 1]")
        if self.passes < 1:
            raise ValueError("passes must be at least 1")
        self._row_of = {sid: k for k, sid in enumerate(self.slice_ids)}

    @property
    def rank(self) -> int:
        return self.V.shape[1]

    def row_of(self, slice_id: str) -> int:
        return self._row_of[slice_id]

    def has_slice(self, slice_id: str) -> bool:
        return slice_id in self._row_of

    def u_matrix(self, slice_id: str) -> np.ndarray:
        blocks = self.u_blocks[slice_id]
        return blocks[0].copy() if len(blocks) == 1 else np.vstack(blocks)

    def factor_set(self) -> FactorSet:
        return FactorSet(
            slice_ids=list(self.slice_ids),
            U={sid: self.u_matrix(sid) for sid in self.slice_ids},
            W=self.W.copy(),
            V=self.V.copy(),
        )

    @property
    def helpers(self) -> HelperState:
        """Copy of the helper summaries in per-slice map form."""
        return HelperState(
            c={sid: self.C[k].copy() for k, sid in enumerate(self.slice_ids)},
            D={sid: self.D[k].copy() for k, sid in enumerate(self.slice_ids)},
            F=self.F.copy(),
            G=self.G.copy(),
            forgetting=self.forgetting,
        )

    # -- the update ---------------------------------------------------------

    def update(self, batch: UpdateBatch) -> UpdateResult:
        """Consume one batch, refreshing factors and helper summaries.

        Slices absent from the batch keep their factors and per-slice
        summaries untouched (their decay happens when they next receive
        data); the global summaries decay on every update.
        """
        started = time.perf_counter()
        rank = self.rank
        lam = self.forgetting

        entries: list[tuple[str, np.ndarray, bool]] = []
        for sid, rows, is_new in batch.items():
            if is_new and sid in self._row_of:
                raise ValueError(f"batch declares known slice {sid!r} as new")
            if not is_new and sid not in self._row_of:
                raise ValueError(f"batch references unknown existing slice {sid!r}")
            entries.append((sid, rows, is_new))

        # Register new slices: W rows bootstrap to ones (so their first
        # row-factor solve is a plain fit against V), summaries to zero.
        new_ids = [sid for sid, _, is_new in entries if is_new]
        if new_ids:
            fresh = len(new_ids)
            self.W = np.vstack([self.W, np.ones((fresh, rank))])
            self.C = np.vstack([self.C, np.zeros((fresh, rank))])
            self.D = np.concatenate([self.D, np.zeros((fresh, rank, rank))])
            for sid in new_ids:
                self._row_of[sid] = len(self.slice_ids)
                self.slice_ids.append(sid)

        # Group equal-height slices so each pass runs a few batched solves
        # instead of thousands of tiny ones; cost stays linear in new rows.
        # Prior summaries are snapshotted (fancy indexing copies) so repeated
        # refinement passes decay old data exactly once.
        by_height: dict[int, list[int]] = {}
        for pos, (_, rows, _) in enumerate(entries):
            by_height.setdefault(rows.shape[0], []).append(pos)
        groups = []
        for height, positions in by_height.items():
            sids = [entries[p][0] for p in positions]
            w_rows = np.fromiter((self._row_of[s] for s in sids), dtype=np.intp)
            x = np.concatenate([entries[p][1] for p in positions]).reshape(
                len(positions), height, -1
            )
            groups.append((sids, w_rows, x, self.C[w_rows], self.D[w_rows]))
        f_snap = self.F
        g_snap = self.G

        use_kernel = USE_FAST_KERNEL and _fast_group_update is not None
        results: list[tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]] = []
        v_used = self.V
        for _ in range(self.passes):
            V = v_used = self.V
            vtv = V.T @ V
            f_fresh = np.zeros_like(f_snap)
            g_fresh = np.zeros_like(g_snap)
            results = []
            for sids, w_rows, x, c_old, d_old in groups:
                s_used = self.W[w_rows]  # (G, R)

                fast = None
                if use_kernel:
                    flat = x.reshape(-1, x.shape[2])
                    xv3 = (flat @ V).reshape(x.shape[0], x.shape[1], rank)
                    fast = _fast_group_update(
                        xv3, vtv, s_used, c_old, d_old, lam, RIDGE_EPS
                    )
                if fast is not None and fast[6]:
                    u, us, c_new, d_new, w = fast[0], fast[1], fast[2], fast[3], fast[4]
                    f_fresh += flat.T @ us.reshape(-1, rank)
                    g_fresh += fast[5]
                else:
                    # pure-numpy path; also reached when the kernel hits a
                    # non-positive-definite system, for attributed errors
                    xv = x @ V  # (G, I, R)
                    lhs_u = vtv[None, :, :] * (s_used[:, :, None] * s_used[:, None, :])
                    rhs_u = (xv * s_used[:, None, :]).transpose(0, 2, 1)
                    u = self._solve_group(lhs_u, rhs_u, sids).transpose(0, 2, 1)

                    c_fresh = np.einsum("gir,gir->gr", xv, u)
                    d_fresh = symmetrize(np.einsum("gir,giz->grz", u, u))
                    c_new = lam * c_old + c_fresh
                    d_new = symmetrize(lam * d_old + d_fresh)
                    lhs_w = vtv[None, :, :] * d_new
                    w = self._solve_group(lhs_w, c_new[:, :, None], sids)[:, :, 0]

                    f_fresh += np.einsum("gij,gir->jr", x, u * w[:, None, :])
                    g_fresh += np.einsum("grz,gr,gz->rz", d_fresh, w, w)

                self.W[w_rows] = w
                results.append((w_rows, u, c_new, d_new))

            self.F = lam * f_snap + f_fresh
            self.G = symmetrize(lam * g_snap + g_fresh)
            self.V = ridge_solve(self.G, self.F.T).T

        for w_rows, _, c_new, d_new in results:
            self.C[w_rows] = c_new
            self.D[w_rows] = d_new

        u_new: dict[str, np.ndarray] = {}
        fresh_set = set(new_ids)
        for (sids, _, _, _, _), (_, u, _, _) in zip(groups, results):
            for g, sid in enumerate(sids):
                u_new[sid] = u[g]
                if sid in fresh_set:
                    self.u_blocks[sid] = [u[g]]
                else:
                    self.u_blocks[sid].append(u[g])
        self.update_index += 1

        return UpdateResult(
            update_index=self.update_index,
            u_new=u_new,
            new_slice_ids=new_ids,
            rows_new=batch.total_new_rows,
            seconds=time.perf_counter() - started,
            v_used=v_used,
        )

    @staticmethod
    def _solve_group(lhs: np.ndarray, rhs: np.ndarray, sids: list[str]) -> np.ndarray:
        """Batched ridge solve; re-runs per slice on failure to name the culprit."""
        try:
            return ridge_solve(lhs, rhs)
        except SolveError:
            for g, sid in enumerate(sids):
                ridge_solve(lhs[g], rhs[g], slice_id=sid)
            raise


def initialize(
    tensor: IrregularTensor,
    rank: int,
    iters: int = 10,
    seed: int = 0,
    forgetting: float = 0.7,
    passes: int = 1,
) -> tuple[StreamState, ALSInfo]:
    """Fit factors on an initial tensor and wrap them as stream state."""
    factors, info = parafac2_als(tensor, rank, iters=iters, seed=seed, return_info=True)
    helpers = init_helpers(tensor, factors, forgetting=forgetting)
    state = StreamState(
        slice_ids=list(factors.slice_ids),
        u_blocks={sid: [factors.U[sid]] for sid in factors.slice_ids},
        W=factors.W,
        V=factors.V,
        C=np.stack([helpers.c[sid] for sid in factors.slice_ids]),
        D=np.stack([helpers.D[sid] for sid in factors.slice_ids]),
        F=helpers.F,
        G=helpers.G,
        forgetting=forgetting,
        update_index=0,
        passes=passes,
    )
    return state, info


# ---------------------------------------------------------------------------
# Checkpoints.  JSON mode round-trips bit-exactly (Python float repr is
# shortest-exact); npz mode stores raw float64 arrays.
# ---------------------------------------------------------------------------

def save_state(state: StreamState, path, column_stats: ColumnStats | None = None) -> None:
    """Serialize stream state to ``.json`` or ``.npz`` (chosen by suffix).

    Normalization stats, when given, ride along so a resumed consumer can
    keep scaling incoming batches consistently.
    """
    path = Path(path)
    if path.suffix == ".json":
        payload = {
            "format_version": STATE_FORMAT_VERSION,
            "kind": "stream-state",
            "forgetting": state.forgetting,
            "update_index": state.update_index,
            "passes": state.passes,
            "rank": state.rank,
            "slice_ids": list(state.slice_ids),
            "u": {sid: state.u_matrix(sid).tolist() for sid in state.slice_ids},
            "w": state.W.tolist(),
            "v": state.V.tolist(),
            "helpers": {
                "c": {sid: state.C[k].tolist() for k, sid in enumerate(state.slice_ids)},
                "d": {sid: state.D[k].tolist() for k, sid in enumerate(state.slice_ids)},
                "f": state.F.tolist(),
                "g": state.G.tolist(),
            },
            "column_stats": None
            if column_stats is None
            else {
                "minimum": {k: v.tolist() for k, v in column_stats.minimum.items()},
                "maximum": {k: v.tolist() for k, v in column_stats.maximum.items()},
            },
        }
        path.write_text(json.dumps(payload))
    elif path.suffix == ".npz":
        arrays = {
            "w": state.W,
            "v": state.V,
            "c": state.C,
            "d": state.D,
            "f": state.F,
            "g": state.G,
        }
        for idx, sid in enumerate(state.slice_ids):
            arrays[f"u_{idx}"] = state.u_matrix(sid)
        stats_ids = None
        if column_stats is not None:
            stats_ids = sorted(column_stats.minimum)
            for idx, sid in enumerate(stats_ids):
                arrays[f"smin_{idx}"] = column_stats.minimum[sid]
                arrays[f"smax_{idx}"] = column_stats.maximum[sid]
        meta = {
            "format_version": STATE_FORMAT_VERSION,
            "kind": "stream-state",
            "forgetting": state.forgetting,
            "update_index": state.update_index,
            "passes": state.passes,
            "slice_ids": list(state.slice_ids),
            "stats_ids": stats_ids,
        }
        arrays["meta"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
        np.savez(path, **arrays)
    else:
        raise ValueError(f"unsupported checkpoint suffix {path.suffix!r} (use .json or .npz)")


def load_state(path) -> tuple[StreamState, ColumnStats | None]:
    """Load a checkpoint written by :func:`save_state`."""
    path = Path(path)
    if path.suffix == ".json":
        payload = json.loads(path.read_text())
        if payload.get("format_version") != STATE_FORMAT_VERSION:
            raise ValueError(f"unsupported checkpoint format in {path}")
        slice_ids = list(payload["slice_ids"])
        state = StreamState(
            slice_ids=slice_ids,
            u_blocks={sid: [np.asarray(payload["u"][sid], dtype=float)] for sid in slice_ids},
            W=np.asarray(payload["w"], dtype=float),
            V=np.asarray(payload["v"], dtype=float),
            C=np.asarray(
                [payload["helpers"]["c"][sid] for sid in slice_ids], dtype=float
            ),
            D=np.asarray(
                [payload["helpers"]["d"][sid] for sid in slice_ids], dtype=float
            ),
            F=np.asarray(payload["helpers"]["f"], dtype=float),
            G=np.asarray(payload["helpers"]["g"], dtype=float),
            forgetting=float(payload["forgetting"]),
            update_index=int(payload["update_index"]),
            passes=int(payload.get("passes", 1)),
        )
        stats = None
        if payload.get("column_stats") is not None:
            raw = payload["column_stats"]
            stats = ColumnStats(
                {k: np.asarray(v, dtype=float) for k, v in raw["minimum"].items()},
                {k: np.asarray(v, dtype=float) for k, v in raw["maximum"].items()},
            )
        return state, stats
    if path.suffix == ".npz":
        with np.load(path) as data:
            meta = json.loads(bytes(data["meta"]).decode())
            if meta.get("format_version") != STATE_FORMAT_VERSION:
                raise ValueError(f"unsupported checkpoint format in {path}")
            slice_ids = list(meta["slice_ids"])
            state = StreamState(
                slice_ids=slice_ids,
                u_blocks={sid: [data[f"u_{idx}"]] for idx, sid in enumerate(slice_ids)},
                W=data["w"],
                V=data["v"],
                C=data["c"],
                D=data["d"],
                F=data["f"],
                G=data["g"],
                forgetting=float(meta["forgetting"]),
                update_index=int(meta["update_index"]),
                passes=int(meta.get("passes", 1)),
            )
            stats = None
            if meta.get("stats_ids") is not None:
                ids = list(meta["stats_ids"])
                stats = ColumnStats(
                    {sid: data[f"smin_{idx}"] for idx, sid in enumerate(ids)},
                    {sid: data[f"smax_{idx}"] for idx, sid in enumerate(ids)},
                )
        return state, stats
    raise ValueError(f"unsupported checkpoint suffix {path.suffix!r} (use .json or .npz)")
