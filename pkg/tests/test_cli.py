import json

import numpy as np
import pytest

from p2stream.cli import main
from p2stream.stream import load_state
from p2stream.synth import SynthParams, synthesize
from p2stream.tensor import replay, save_batch, save_dataset


@pytest.fixture()
def dataset_dir(tmp_path):
    tensor = synthesize(
        SynthParams(num_slices=4, num_columns=6, rank=2, duration=80, noise=0.05),
        seed=0,
    )
    path = tmp_path / "dataset"
    save_dataset(tensor, path)
    return path


def run_cli(*args):
    return main([str(a) for a in args])


class TestInit:
    def test_writes_checkpoint_factors_and_manifest(self, dataset_dir, tmp_path, capsys):
        out = tmp_path / "out"
        code = run_cli(
            "init", "--dataset", dataset_dir, "--rank", 2, "--iters", 4,
            "--seed", 1, "--out", out,
        )
        assert code == 0
        assert (out / "checkpoint.json").is_file()
        assert (out / "factors" / "V.csv").is_file()
        manifest = json.loads((out / "run_manifest.json").read_text())
        assert manifest["command"] == "init"
        printed = capsys.readouterr().out
        assert "initialization loss" in printed

    def test_bad_dataset_exits_nonzero(self, tmp_path, capsys):
        code = run_cli("init", "--dataset", tmp_path / "nowhere", "--out", tmp_path / "o")
        assert code == 1
        assert "error" in capsys.readouterr().err

    def test_fixed_seed_gives_identical_checkpoints(self, dataset_dir, tmp_path):
        outs = []
        for name in ("a", "b"):
            out = tmp_path / name
            run_cli("init", "--dataset", dataset_dir, "--rank", 2, "--iters", 4,
                    "--seed", 7, "--out", out)
            outs.append((out / "checkpoint.json").read_bytes())
        assert outs[0] == outs[1]

    def test_npz_checkpoint_format(self, dataset_dir, tmp_path):
        out = tmp_path / "out"
        code = run_cli("init", "--dataset", dataset_dir, "--rank", 2, "--iters", 2,
                       "--out", out, "--checkpoint-format", "npz")
        assert code == 0
        state, stats = load_state(out / "checkpoint.npz")
        assert state.rank == 2
        assert stats is not None  # dataset runs normalize by default


class TestUpdate:
    def test_chained_updates_match_replay(self, tmp_path):
        tensor = synthesize(
            SynthParams(num_slices=4, num_columns=6, rank=2, duration=80,
                        noise=0.05, stagger=0.4),
            seed=5,
        )
        initial, batches = replay(tensor, 0.3, 10)

        init_dir = tmp_path / "initial"
        save_dataset(initial, init_dir)
        full_dir = tmp_path / "full"
        save_dataset(tensor, full_dir)

        out_replay = tmp_path / "replay"
        code = run_cli(
            "replay", "--dataset", full_dir, "--rank", 2, "--iters", 4, "--seed", 3,
            "--cycle", 10, "--init-fraction", 0.3, "--no-normalize", "--out", out_replay,
        )
        assert code == 0

        out = tmp_path / "chain0"
        code = run_cli("init", "--dataset", init_dir, "--rank", 2, "--iters", 4,
                       "--seed", 3, "--no-normalize", "--out", out)
        assert code == 0
        checkpoint = out / "checkpoint.json"
        for n, batch in enumerate(batches, start=1):
            batch_path = tmp_path / f"batch_{n}.json"
            save_batch(batch, batch_path)
            step_out = tmp_path / f"chain{n}"
            code = run_cli("update", "--checkpoint", checkpoint, "--batch", batch_path,
                           "--out", step_out)
            assert code == 0
            checkpoint = step_out / "checkpoint.json"

        final_chain = checkpoint.read_bytes()
        final_replay = (out_replay / "checkpoint_final.json").read_bytes()
        assert final_chain == final_replay

    def test_update_report_fields(self, dataset_dir, tmp_path):
        out = tmp_path / "init"
        run_cli("init", "--dataset", dataset_dir, "--rank", 2, "--iters", 2, "--out", out)
        tensor = synthesize(
            SynthParams(num_slices=4, num_columns=6, rank=2, duration=90, noise=0.05),
            seed=0,
        )
        _, batches = replay(tensor, 80 / 90, 10)
        batch_path = tmp_path / "batch.json"
        save_batch(batches[0], batch_path)
        step = tmp_path / "step"
        code = run_cli("update", "--checkpoint", out / "checkpoint.json",
                       "--batch", batch_path, "--out", step)
        assert code == 0
        report = json.loads((step / "update_report.json").read_text())
        assert report["update_index"] == 1
        assert report["rows_new"] == batches[0].total_new_rows
        assert report["local_error"] >= 0
        assert report["global_error"] is None

    def test_empty_batch_file_fails(self, dataset_dir, tmp_path, capsys):
        out = tmp_path / "init"
        run_cli("init", "--dataset", dataset_dir, "--rank", 2, "--iters", 2, "--out", out)
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({
            "format_version": 1, "update_index": 1, "cycle_span": [0, 0],
            "existing_rows": {}, "new_slices": [],
        }))
        code = run_cli("update", "--checkpoint", out / "checkpoint.json",
                       "--batch", bad, "--out", tmp_path / "step")
        assert code == 1
        assert "error" in capsys.readouterr().err


class TestReplay:
    def test_outputs_and_reproducibility(self, tmp_path):
        outs = []
        for name in ("r1", "r2"):
            out = tmp_path / name
            code = run_cli(
                "replay", "--synth", "K=4,J=6,R=2,T=120,noise=0.05", "--rank", 2,
                "--iters", 3, "--seed", 9, "--cycle", 10, "--out", out,
            )
            assert code == 0
            outs.append(out)
        for out in outs:
            manifest = json.loads((out / "run_manifest.json").read_text())
            for name in manifest["outputs"]:
                assert (out / name).is_file(), name
            assert any(n.startswith("errors_") and n.endswith(".png") for n in manifest["outputs"])
            assert any(n.startswith("timing_") for n in manifest["outputs"])
        report_name = next(
            n for n in json.loads((outs[0] / "run_manifest.json").read_text())["outputs"]
            if n.startswith("report_")
        )
        # error fields are byte-identical across runs; timings are not
        import csv as _csv

        def error_fields(path):
            with open(path) as fh:
                return [
                    (row["update_index"], row["local_error"], row["global_error"], row["rows_new"])
                    for row in _csv.DictReader(fh)
                ]

        assert error_fields(outs[0] / report_name) == error_fields(outs[1] / report_name)
        # anomaly outputs carry no timings and match exactly
        flags_name = next(
            n for n in json.loads((outs[0] / "run_manifest.json").read_text())["outputs"]
            if n.startswith("anomalies_")
        )
        assert (outs[0] / flags_name).read_bytes() == (outs[1] / flags_name).read_bytes()

    def test_anomaly_flagged_from_injected_dataset(self, tmp_path):
        sigma = 0.02
        tensor = synthesize(
            SynthParams(
                num_slices=6, num_columns=8, rank=2, duration=400, noise=sigma,
                noise_period=100, noise_mod=0.6, noise_duty=0.2,
                anomalies=[__import__("p2stream.synth", fromlist=["AnomalyInjection"]).AnomalyInjection(None, 240, 260, 10 * sigma)],
            ),
            seed=2,
        )
        data_dir = tmp_path / "ds"
        save_dataset(tensor, data_dir)
        out = tmp_path / "out"
        code = run_cli(
            "replay", "--dataset", data_dir, "--rank", 2, "--iters", 5, "--seed", 0,
            "--cycle", 20, "--no-normalize", "--out", out,
        )
        assert code == 0
        flags_file = next(out.glob("anomalies_*.json"))
        flags = json.loads(flags_file.read_text())
        tensor_flags = [f for f in flags if f["level"] == "tensor"]
        # injection covers steps 240..259 -> update (240 - 80) / 20 + 1 = 9
        assert any(f["update_index"] == 9 for f in tensor_flags)
        top = max(tensor_flags, key=lambda f: f["score"])
        assert top["update_index"] == 9


class TestBench:
    def test_bench_outputs(self, tmp_path):
        out = tmp_path / "bench"
        code = run_cli(
            "bench", "--synth", "K=6,J=6,R=2,T=260,noise=0.05", "--rank", 2,
            "--iters", 2, "--seed", 0, "--cycles", "5,10,20", "--out", out,
        )
        assert code == 0
        summary = json.loads(next(out.glob("bench_summary_*.json")).read_text())
        assert summary["cycles"] == [5, 10, 20]
        assert np.isfinite(summary["slope"])
        assert next(out.glob("scaling_*.png")).is_file()
        with open(next(out.glob("bench_*.csv"))) as fh:
            rows = fh.read().splitlines()
        assert rows[0].startswith("cycle,")
        assert len(rows) == 4

    def test_cycles_need_two_values(self, tmp_path):
        with pytest.raises(SystemExit):
            run_cli("bench", "--synth", "K=2,J=4,R=2,T=40", "--cycles", "5",
                    "--out", tmp_path / "b")


class TestConfigPrecedence:
    def test_env_overrides_file_and_flags_override_env(self, dataset_dir, tmp_path, monkeypatch):
        config = tmp_path / "config.json"
        config.write_text(json.dumps({"rank": 2, "iters": 2, "seed": 1}))
        monkeypatch.setenv("P2STREAM_SEED", "5")
        out = tmp_path / "out"
        code = run_cli("init", "--dataset", dataset_dir, "--config", config,
                       "--seed", 9, "--out", out)
        assert code == 0
        manifest = json.loads((out / "run_manifest.json").read_text())
        assert manifest["config"]["seed"] == 9
        assert manifest["config"]["rank"] == 2

        out2 = tmp_path / "out2"
        run_cli("init", "--dataset", dataset_dir, "--config", config, "--out", out2)
        manifest2 = json.loads((out2 / "run_manifest.json").read_text())
        assert manifest2["config"]["seed"] == 5  # env beats the file

    def test_bad_synth_spec_is_an_error(self, tmp_path, capsys):
        code = run_cli("replay", "--synth", "K=banana", "--out", tmp_path / "o")
        assert code == 1
