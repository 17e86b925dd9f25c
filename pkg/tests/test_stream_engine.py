import numpy as np
import pytest

import p2stream.stream as stream_mod
from p2stream.stream import initialize, load_state, save_state
from p2stream.synth import SynthParams, synthesize
from p2stream.tensor import ColumnStats, NewSlice, UpdateBatch, replay

from oracles import HelperLedger, c_vector_loops


def planted_stream(seed=0, stagger=0.0, noise=0.05, slices=6, cols=8, rank=3,
                   duration=90, cycle=10, lam=0.7, iters=8, passes=1):
    tensor = synthesize(
        SynthParams(num_slices=slices, num_columns=cols, rank=rank,
                    duration=duration, noise=noise, stagger=stagger),
        seed=seed,
    )
    initial, batches = replay(tensor, 0.3, cycle)
    state, _ = initialize(initial, rank, iters=iters, seed=seed, forgetting=lam,
                          passes=passes)
    return initial, batches, state


class TestStructure:
    def test_new_slice_grows_every_container(self):
        initial, batches, state = planted_stream(stagger=0.6, seed=3)
        fresh_batch = next(b for b in batches if b.new_slices)
        before = len(state.slice_ids)
        f_before, g_before = state.F.copy(), state.G.copy()
        for batch in batches:
            result = state.update(batch)
            if batch is fresh_batch:
                break
        assert len(state.slice_ids) == before + sum(
            1 for b in batches[: batches.index(fresh_batch) + 1] for _ in b.new_slices
        )
        sid = fresh_batch.new_slices[0].slice_id
        assert sid in result.new_slice_ids
        assert state.W.shape[0] == len(state.slice_ids)
        assert state.C.shape[0] == len(state.slice_ids)
        assert state.D.shape[0] == len(state.slice_ids)
        assert sid in state.u_blocks
        assert not np.array_equal(state.F, f_before)
        assert not np.array_equal(state.G, g_before)

    def test_u_rows_track_ingested_rows(self):
        initial, batches, state = planted_stream(seed=1)
        counts = {s.slice_id: s.row_count for s in initial.slices}
        for batch in batches:
            state.update(batch)
            for sid, rows, _ in batch.items():
                counts[sid] = counts.get(sid, 0) + rows.shape[0]
        for sid, count in counts.items():
            assert state.u_matrix(sid).shape[0] == count
        assert state.W.shape == (len(counts), state.rank)
        assert state.V.shape == (initial.column_count, state.rank)

    def test_dormant_slices_are_left_alone(self):
        initial, batches, state = planted_stream(seed=2)
        batch = batches[0]
        dormant = initial.slice_ids[0]
        trimmed = UpdateBatch(
            batch.update_index,
            {k: v for k, v in batch.existing_rows.items() if k != dormant},
            batch.new_slices,
            batch.cycle_span,
        )
        row = state.row_of(dormant)
        w_before = state.W[row].copy()
        c_before = state.C[row].copy()
        d_before = state.D[row].copy()
        u_before = state.u_matrix(dormant)
        state.update(trimmed)
        assert np.array_equal(state.W[row], w_before)
        assert np.array_equal(state.C[row], c_before)
        assert np.array_equal(state.D[row], d_before)
        assert np.array_equal(state.u_matrix(dormant), u_before)

    def test_unknown_existing_slice_is_rejected(self):
        _, batches, state = planted_stream(seed=4)
        bogus = UpdateBatch(1, {"ghost": np.ones((2, 8))}, [], (0, 1))
        with pytest.raises(ValueError, match="ghost"):
            state.update(bogus)

    def test_known_id_cannot_arrive_as_new(self):
        initial, batches, state = planted_stream(seed=4)
        sid = initial.slice_ids[0]
        bogus = UpdateBatch(1, {}, [NewSlice(sid, np.ones((2, 8)), 50)], (50, 51))
        with pytest.raises(ValueError, match="as new"):
            state.update(bogus)

    def test_update_index_increments(self):
        _, batches, state = planted_stream(seed=5)
        assert state.update_index == 0
        for n, batch in enumerate(batches, start=1):
            result = state.update(batch)
            assert result.update_index == n
            assert state.update_index == n


class TestNormalEquationResiduals:
    def assert_residuals(self, state, batch, v_before, w_before, row_before, result):
        vtv = v_before.T @ v_before
        for sid, rows, is_new in batch.items():
            u = result.u_new[sid]
            s = np.ones(state.rank) if is_new else w_before[row_before[sid]]
            lhs = u @ (vtv * np.outer(s, s))
            rhs = (rows @ v_before) * s
            assert np.linalg.norm(lhs - rhs) <= 1e-8 * max(np.linalg.norm(rhs), 1e-12)
            row = state.row_of(sid)
            w = state.W[row]
            lhs_w = w @ (vtv * state.D[row])
            assert np.linalg.norm(lhs_w - state.C[row]) <= 1e-8 * max(
                np.linalg.norm(state.C[row]), 1e-12
            )
        assert np.linalg.norm(state.V @ state.G - state.F) <= 1e-8 * max(
            np.linalg.norm(state.F), 1e-12
        )

    def test_residuals_hold_across_a_run(self):
        _, batches, state = planted_stream(seed=6, stagger=0.5, noise=0.1)
        for batch in batches:
            v_before = state.V.copy()
            w_before = state.W.copy()
            row_before = {sid: state.row_of(sid) for sid in state.slice_ids}
            result = state.update(batch)
            self.assert_residuals(state, batch, v_before, w_before, row_before, result)


class TestLedgerOracle:
    def run_with_ledger(self, seed, lam, stagger=0.4, passes=1):
        tensor = synthesize(
            SynthParams(num_slices=5, num_columns=6, rank=2, duration=60,
                        noise=0.05, stagger=stagger),
            seed=seed,
        )
        initial, batches = replay(tensor, 0.3, 8)
        state, _ = initialize(initial, 2, iters=6, seed=seed, forgetting=lam,
                              passes=passes)
        ledger = HelperLedger(initial, state.factor_set(), lam)
        for batch in batches:
            result = state.update(batch)
            touched = {}
            for sid, rows, _ in batch.items():
                touched[sid] = (
                    rows,
                    result.u_new[sid].copy(),
                    state.W[state.row_of(sid)].copy(),
                    result.v_used,
                )
            ledger.record_update(touched)
        return state, ledger

    @pytest.mark.parametrize("lam", [0.4, 0.7, 1.0])
    def test_incremental_helpers_equal_unrolled_sums(self, lam):
        state, ledger = self.run_with_ledger(seed=11, lam=lam)
        for sid in state.slice_ids:
            row = state.row_of(sid)
            assert np.abs(state.C[row] - ledger.expected_c(sid)).max() < 1e-10
            assert np.abs(state.D[row] - ledger.expected_d(sid)).max() < 1e-10
        f, g = ledger.expected_fg()
        assert np.abs(state.F - f).max() < 1e-10
        assert np.abs(state.G - g).max() < 1e-10

    def test_multi_pass_still_decays_exactly_once(self):
        # with several refinement passes the ledger contract is unchanged:
        # one decay per update, fresh terms from the final pass
        state, ledger = self.run_with_ledger(seed=12, lam=0.6, passes=3)
        for sid in state.slice_ids:
            row = state.row_of(sid)
            assert np.abs(state.C[row] - ledger.expected_c(sid)).max() < 1e-10
        f, g = ledger.expected_fg()
        assert np.abs(state.F - f).max() < 1e-10
        assert np.abs(state.G - g).max() < 1e-10

    def test_first_update_uses_stale_column_factor_for_old_term(self):
        # after one update with no decay, c splits into the initialization
        # term (old column factor) plus the fresh term (pre-update factor)
        tensor = synthesize(
            SynthParams(num_slices=4, num_columns=6, rank=2, duration=40, noise=0.05),
            seed=13,
        )
        initial, batches = replay(tensor, 0.5, 10)
        state, _ = initialize(initial, 2, iters=6, seed=0, forgetting=1.0)
        factors0 = state.factor_set()
        v_used = state.V.copy()
        result = state.update(batches[0])
        for s in initial.slices:
            sid = s.slice_id
            old_term = c_vector_loops(s.rows, factors0.U[sid], factors0.V)
            fresh = c_vector_loops(
                batches[0].existing_rows[sid], result.u_new[sid], v_used
            )
            assert np.allclose(state.C[state.row_of(sid)], old_term + fresh, atol=1e-10)


class TestKernelParity:
    def test_fast_and_numpy_paths_agree(self):
        if not stream_mod.USE_FAST_KERNEL:
            pytest.skip("compiled kernel unavailable")
        results = []
        for use_kernel in (True, False):
            stream_mod.USE_FAST_KERNEL = use_kernel
            try:
                _, batches, state = planted_stream(seed=14, stagger=0.5, noise=0.1)
                for batch in batches:
                    state.update(batch)
                results.append(state)
            finally:
                stream_mod.USE_FAST_KERNEL = True
        a, b = results
        assert np.abs(a.V - b.V).max() < 1e-9
        assert np.abs(a.W - b.W).max() < 1e-9
        assert np.abs(a.C - b.C).max() < 1e-9
        assert np.abs(a.D - b.D).max() < 1e-9
        assert np.abs(a.F - b.F).max() < 1e-9
        for sid in a.slice_ids:
            assert np.abs(a.u_matrix(sid) - b.u_matrix(sid)).max() < 1e-9


class TestCheckpoints:
    def test_json_round_trip_is_bit_exact(self, tmp_path):
        _, batches, state = planted_stream(seed=15)
        for batch in batches[:3]:
            state.update(batch)
        path = tmp_path / "state.json"
        save_state(state, path)
        loaded, stats = load_state(path)
        assert stats is None
        second = tmp_path / "again.json"
        save_state(loaded, second)
        assert path.read_bytes() == second.read_bytes()

    def test_npz_round_trip_is_value_exact(self, tmp_path):
        _, batches, state = planted_stream(seed=16)
        for batch in batches[:3]:
            state.update(batch)
        path = tmp_path / "state.npz"
        stats = ColumnStats(
            {"s000": np.array([0.0, 1.0])}, {"s000": np.array([2.0, 3.5])}
        )
        save_state(state, path, column_stats=stats)
        loaded, stats_back = load_state(path)
        assert np.array_equal(loaded.V, state.V)
        assert np.array_equal(loaded.W, state.W)
        assert np.array_equal(loaded.C, state.C)
        assert np.array_equal(loaded.D, state.D)
        assert np.array_equal(loaded.F, state.F)
        assert np.array_equal(loaded.G, state.G)
        assert loaded.update_index == state.update_index
        assert np.array_equal(stats_back.minimum["s000"], stats.minimum["s000"])

    def test_resume_equals_uninterrupted_run(self, tmp_path):
        _, batches, straight = planted_stream(seed=18, stagger=0.5)
        _, _, resumed = planted_stream(seed=18, stagger=0.5)
        half = len(batches) // 2
        for batch in batches:
            straight.update(batch)
        for batch in batches[:half]:
            resumed.update(batch)
        path = tmp_path / "mid.json"
        save_state(resumed, path)
        resumed, _ = load_state(path)
        for batch in batches[half:]:
            resumed.update(batch)
        assert np.array_equal(straight.V, resumed.V)
        assert np.array_equal(straight.W, resumed.W)
        assert np.array_equal(straight.C, resumed.C)
        assert np.array_equal(straight.F, resumed.F)
        for sid in straight.slice_ids:
            assert np.array_equal(straight.u_matrix(sid), resumed.u_matrix(sid))

    def test_unsupported_suffix_rejected(self, tmp_path):
        _, _, state = planted_stream(seed=18)
        with pytest.raises(ValueError):
            save_state(state, tmp_path / "state.txt")


class TestHelpersView:
    def test_helpers_property_copies(self):
        _, batches, state = planted_stream(seed=19)
        helpers = state.helpers
        sid = state.slice_ids[0]
        helpers.c[sid][:] = 123.0
        assert not np.array_equal(state.C[state.row_of(sid)], helpers.c[sid])
        assert helpers.forgetting == state.forgetting
