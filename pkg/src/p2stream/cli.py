"""Command-line entry point: init, update, replay, and bench subcommands.

Configuration precedence: command-line flags override ``P2STREAM_*``
environment variables, which override values from ``--config`` (a JSON file
mapping option names to values), which override built-in defaults.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict
from pathlib import Path

from . import __version__
from .als import export_factors, relative_error
from .anomaly import detect, write_error_csv, write_flags_json
from .evaluate import (
    ExperimentConfig,
    config_hash,
    cycle_benchmark,
    run_experiment,
    summarize,
    write_report_csv,
)
from .stream import initialize, load_state, save_state
from .synth import SynthParams
from .tensor import (
    CAUSAL,
    GLOBAL,
    DatasetError,
    load_batch,
    load_dataset,
    normalize_batch,
    normalize_tensor,
)

ENV_PREFIX = "P2STREAM_"

# name -> (type, default); used for defaults, --config files, and env vars.
_OPTIONS = {
    "rank": (int, 10),
    "forgetting": (float, 0.7),
    "cycle": (int, 20),
    "init_fraction": (float, 0.2),
    "iters": (int, 10),
    "seed": (int, 0),
    "window": (int, 5),
    "passes": (int, 1),
    "stats_policy": (str, CAUSAL),
}


def _parse_synth_spec(spec: str) -> SynthParams:
    """Parse 'K=20,J=15,R=3,T=300,noise=0.01,stagger=0.2,drift=0.0'."""
    aliases = {
        "K": "num_slices",
        "J": "num_columns",
        "R": "rank",
        "T": "duration",
    }
    kwargs = {}
    for part in spec.split(","):
        part = part.strip()
        if not part:
            continue
        if "=" not in part:
            raise ValueError(f"bad synth entry {part!r}; expected key=value")
        key, value = part.split("=", 1)
        key = aliases.get(key.strip(), key.strip())
        field_types = {
            "num_slices": int,
            "num_columns": int,
            "rank": int,
            "duration": int,
            "noise": float,
            "stagger": float,
            "drift": float,
            "scale_min": float,
            "scale_max": float,
        }
        if key not in field_types:
            raise ValueError(f"unknown synth key {key!r}")
        kwargs[key] = field_types[key](value)
    return SynthParams(**kwargs)


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="JSON file with option defaults")
    parser.add_argument("--dataset", help="dataset directory (manifest.json + CSVs)")
    parser.add_argument("--synth", help="synthetic data spec, e.g. K=20,J=15,R=3,T=300")
    parser.add_argument("--rank", type=int, help="target rank (default 10)")
    parser.add_argument("--lambda", dest="forgetting", type=float,
                        help="forgetting factor in (0, 1] (default 0.7)")
    parser.add_argument("--cycle", type=int, help="time steps per update (default 20)")
    parser.add_argument("--init-fraction", dest="init_fraction", type=float,
                        help="fraction of the duration used for initialization (default 0.2)")
    parser.add_argument("--iters", type=int, help="ALS iteration cap (default 10)")
    parser.add_argument("--seed", type=int, help="seed for all randomness (default 0)")
    parser.add_argument("--window", type=int, help="anomaly threshold window (default 5)")
    parser.add_argument("--passes", type=int, help="refinement passes per batch (default 1)")
    parser.add_argument("--stats-policy", dest="stats_policy", choices=[CAUSAL, GLOBAL],
                        help="normalization statistics policy (default causal)")
    parser.add_argument("--normalize", dest="normalize", action="store_true", default=None,
                        help="force min-max normalization on")
    parser.add_argument("--no-normalize", dest="normalize", action="store_false",
                        help="force min-max normalization off")
    parser.add_argument("--deterministic", action="store_true",
                        help="force deterministic reductions (updates are computed "
                             "serially either way; recorded in the run manifest)")
    parser.add_argument("--baseline", action="store_true",
                        help="also time a full ALS refit per update")
    parser.add_argument("--out", required=True, help="output directory")


def _merge_options(args: argparse.Namespace) -> dict:
    merged = {name: default for name, (_, default) in _OPTIONS.items()}
    if args.config:
        try:
            file_values = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise SystemExit(f"error: cannot read config file: {exc}")
        for name, value in file_values.items():
            if name in _OPTIONS:
                merged[name] = _OPTIONS[name][0](value)
    for name, (typ, _) in _OPTIONS.items():
        env = os.environ.get(ENV_PREFIX + name.upper())
        if env is not None:
            merged[name] = typ(env)
    for name in _OPTIONS:
        value = getattr(args, name, None)
        if value is not None:
            merged[name] = value
    return merged


def _experiment_config(args: argparse.Namespace, opts: dict) -> ExperimentConfig:
    synth = _parse_synth_spec(args.synth) if args.synth else None
    return ExperimentConfig(
        dataset=args.dataset,
        synth=synth,
        rank=opts["rank"],
        forgetting=opts["forgetting"],
        update_cycle=opts["cycle"],
        init_fraction=opts["init_fraction"],
        iters=opts["iters"],
        seed=opts["seed"],
        window=opts["window"],
        baseline=args.baseline,
        normalize=args.normalize,
        stats_policy=opts["stats_policy"],
        passes=opts["passes"],
    )


def _write_manifest(out_dir: Path, command: str, config: dict, outputs: list[str]) -> None:
    manifest = {
        "tool": "p2stream",
        "version": __version__,
        "command": command,
        "config": config,
        "outputs": outputs,
    }
    (out_dir / "run_manifest.json").write_text(json.dumps(manifest, indent=2, default=str))


def _load_source_tensor(args: argparse.Namespace, opts: dict):
    if (args.dataset is None) == (args.synth is None):
        raise SystemExit("error: provide exactly one of --dataset or --synth")
    if args.dataset is not None:
        return load_dataset(args.dataset)
    from .synth import synthesize

    return synthesize(_parse_synth_spec(args.synth), opts["seed"])


def cmd_init(args: argparse.Namespace) -> int:
    """Fit factors on an input treated wholly as the initialization tensor."""
    opts = _merge_options(args)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    tensor = _load_source_tensor(args, opts)

    normalize = args.normalize if args.normalize is not None else args.dataset is not None
    stats = None
    if normalize:
        tensor, stats = normalize_tensor(tensor, None, opts["stats_policy"])

    state, info = initialize(
        tensor,
        opts["rank"],
        iters=opts["iters"],
        seed=opts["seed"],
        forgetting=opts["forgetting"],
        passes=opts["passes"],
    )
    rel = relative_error(tensor, state.factor_set())
    checkpoint = out_dir / f"checkpoint.{args.checkpoint_format}"
    save_state(state, checkpoint, column_stats=stats)
    export_factors(state.factor_set(), out_dir / "factors", losses=info.losses)
    outputs = [checkpoint.name, "factors"]
    _write_manifest(out_dir, "init", {**opts, "normalize": normalize}, outputs)
    print(f"initialization loss: {info.final_loss:.6e}")
    print(f"initialization relative error: {rel:.6e}")
    print(f"checkpoint written to {checkpoint}")
    return 0


def cmd_update(args: argparse.Namespace) -> int:
    """Apply one batch file to a checkpoint and write the new checkpoint."""
    opts = _merge_options(args)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    state, stats = load_state(args.checkpoint)
    batch = load_batch(args.batch)
    if stats is not None:
        batch, stats = normalize_batch(batch, stats, opts["stats_policy"])
    result = state.update(batch)

    from .evaluate import local_error

    batch_items = [(sid, rows) for sid, rows, _ in batch.items()]
    te, _ = local_error(batch_items, result.u_new, state)

    suffix = Path(args.checkpoint).suffix.lstrip(".")
    checkpoint = out_dir / f"checkpoint.{suffix}"
    save_state(state, checkpoint, column_stats=stats)
    report = {
        "update_index": result.update_index,
        "seconds": result.seconds,
        "rows_new": result.rows_new,
        "new_slices": len(result.new_slice_ids),
        "local_error": te,
        "global_error": None,  # needs retained history; see replay
    }
    (out_dir / "update_report.json").write_text(json.dumps(report, indent=2))
    _write_manifest(out_dir, "update", opts, [checkpoint.name, "update_report.json"])
    print(f"update {result.update_index}: local error {te:.6e}, {result.seconds:.4f}s")
    return 0


def cmd_replay(args: argparse.Namespace) -> int:
    """Full pipeline: initialize, consume every batch, detect anomalies."""
    opts = _merge_options(args)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    config = _experiment_config(args, opts)
    result = run_experiment(config)
    flags = detect(result.errors, opts["window"])

    tag = config_hash(config)
    report_csv = out_dir / f"report_{tag}.csv"
    summary_json = out_dir / f"summary_{tag}.json"
    flags_json = out_dir / f"anomalies_{tag}.json"
    te_csv = out_dir / f"anomaly_tensor_{tag}.csv"
    se_csv = out_dir / f"anomaly_slice_{tag}.csv"
    final_checkpoint = out_dir / "checkpoint_final.json"

    write_report_csv(result.reports, report_csv)
    summary = summarize(result)
    summary["config"] = asdict(config)
    summary["anomaly_flags"] = len(flags)
    summary_json.write_text(json.dumps(summary, indent=2, default=str))
    write_flags_json(flags, flags_json)
    write_error_csv(result.errors, opts["window"], te_csv, se_csv)
    save_state(result.state, final_checkpoint)

    from .figures import render_error_figure, render_timing_figure

    error_png = out_dir / f"errors_{tag}.png"
    timing_png = out_dir / f"timing_{tag}.png"
    render_error_figure(result.errors, opts["window"], flags, error_png)
    render_timing_figure(result.reports, timing_png)

    outputs = [
        report_csv.name,
        summary_json.name,
        flags_json.name,
        te_csv.name,
        se_csv.name,
        final_checkpoint.name,
        error_png.name,
        timing_png.name,
    ]
    _write_manifest(out_dir, "replay", asdict(config), outputs)
    print(
        f"{len(result.reports)} updates, mean local error "
        f"{summary['local_error']['mean']:.6e}, {len(flags)} anomaly flags"
    )
    return 0


def cmd_bench(args: argparse.Namespace) -> int:
    """Cycle sweep: fit the update-cost scaling exponent."""
    opts = _merge_options(args)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    cycles = [int(c) for c in args.cycles.split(",") if c.strip()]
    if len(cycles) < 2:
        raise SystemExit("error: --cycles needs at least two values")
    config = _experiment_config(args, opts)
    bench = cycle_benchmark(config, cycles)

    tag = config_hash(config)
    bench_csv = out_dir / f"bench_{tag}.csv"
    with open(bench_csv, "w", newline="") as fh:
        import csv as _csv

        writer = _csv.writer(fh)
        header = ["cycle", "updates", "median_rows_new", "median_seconds"]
        if config.baseline:
            header.append("median_refit_seconds")
        writer.writerow(header)
        for entry in bench.per_cycle:
            row = [
                entry["cycle"],
                entry["updates"],
                repr(entry["median_rows_new"]),
                repr(entry["median_seconds"]),
            ]
            if config.baseline:
                row.append(repr(entry["median_refit_seconds"]))
            writer.writerow(row)
    summary = {
        "cycles": bench.cycles,
        "median_rows": bench.median_rows,
        "median_seconds": bench.median_seconds,
        "slope": bench.slope,
        "config": asdict(config),
    }
    summary_json = out_dir / f"bench_summary_{tag}.json"
    summary_json.write_text(json.dumps(summary, indent=2, default=str))

    from .figures import render_scaling_figure

    scaling_png = out_dir / f"scaling_{tag}.png"
    render_scaling_figure(bench, scaling_png)

    _write_manifest(
        out_dir, "bench", asdict(config), [bench_csv.name, summary_json.name, scaling_png.name]
    )
    print(f"fitted scaling slope: {bench.slope:.3f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="p2stream",
        description="Streaming factorization of irregular tensors with "
                    "forgetting-factor updates and anomaly detection.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p_init = sub.add_parser("init", help="fit factors on an initialization tensor")
    _add_common(p_init)
    p_init.add_argument("--checkpoint-format", choices=["json", "npz"], default="json")
    p_init.set_defaults(func=cmd_init)

    p_update = sub.add_parser("update", help="apply one batch file to a checkpoint")
    _add_common(p_update)
    p_update.add_argument("--checkpoint", required=True, help="input checkpoint path")
    p_update.add_argument("--batch", required=True, help="batch JSON file")
    p_update.set_defaults(func=cmd_update)

    p_replay = sub.add_parser("replay", help="replay a dataset as a stream end to end")
    _add_common(p_replay)
    p_replay.set_defaults(func=cmd_replay)

    p_bench = sub.add_parser("bench", help="update-cycle scaling benchmark")
    _add_common(p_bench)
    p_bench.add_argument("--cycles", default="20,40,60,80,100",
                         help="comma-separated update cycles (default 20,40,60,80,100)")
    p_bench.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (DatasetError, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
