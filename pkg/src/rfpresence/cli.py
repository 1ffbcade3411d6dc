"""Single entry point wiring the toolkit into reproducible experiments.

Subcommands: simulate (synthetic labeled stream files), import (JSON-lines
to binary), train, eval, and detect. Every artifact gets the resolved run
configuration embedded or written alongside, so replaying a manifest with
the same seed reproduces it byte for byte.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import pipeline, streamio, synth
from .csi import CsiError
from .detector import DetectorConfig, DetectorError, run_detection
from .model import ModelFileError, load_model, save_model
from .pipeline import PipelineError, TrainConfig
from .preprocess import PipelineVariant
from .synth import SimConfig, SynthError

VARIANT_CHOICES = [v.value for v in PipelineVariant]


def _apply_thread_cap() -> None:
    val = os.environ.get("RFP_THREADS")
    if not val:
        return
    try:
        import threadpoolctl

        threadpoolctl.threadpool_limits(limits=int(val))
    except Exception as exc:  # missing module or bad value; not fatal
        print(f"warning: RFP_THREADS={val!r} not applied ({exc})", file=sys.stderr)


def _write_manifest(path: Path, run_config: dict) -> None:
    path.write_text(json.dumps(run_config, indent=2, sort_keys=True) + "\n")


def _run_config(args: argparse.Namespace, command: str) -> dict:
    skip = {"func"}
    return {
        "command": command,
        "args": {k: v for k, v in sorted(vars(args).items()) if k not in skip},
    }


def _collect_files(data_args: list[str]) -> list[Path]:
    files: list[Path] = []
    for entry in data_args:
        p = Path(entry)
        if p.is_dir():
            files.extend(sorted(p.glob("*.csi")))
        else:
            files.append(p)
    if not files:
        raise PipelineError(f"no stream files found in {data_args!r}")
    return files


# -- simulate ----------------------------------------------------------------


def cmd_simulate(args: argparse.Namespace) -> int:
    cfg = synth.parse_config(args.config) if args.config else SimConfig()
    for key in ("delay_ns_max", "speed_mps", "cfo_hz", "sto_ns_walk", "noise_std", "interval_ms"):
        val = getattr(args, key)
        if val is not None:
            setattr(cfg, key, val)
    if args.paths is not None:
        lo, _, hi = args.paths.partition("-")
        cfg.paths = (int(lo), int(hi) if hi else int(lo))
    cfg.seed = args.seed
    out_dir = Path(args.out)
    files = synth.gen_dataset(
        out_dir,
        scenes=args.scenes,
        windows_per_label=args.windows,
        config=cfg,
        seed=args.seed,
        windows_per_run=args.windows_per_run,
    )
    manifest = _run_config(args, "simulate")
    manifest["files"] = [f.name for f in files]
    _write_manifest(out_dir / "manifest.json", manifest)
    print(f"wrote {len(files)} stream files to {out_dir}")
    return 0


# -- import ------------------------------------------------------------------


def cmd_import(args: argparse.Namespace) -> int:
    streams = streamio.read_jsonl_stream(args.jsonl)
    out = Path(args.out)
    streamio.write_stream_file(out, streams)
    _write_manifest(out.with_suffix(out.suffix + ".manifest.json"), _run_config(args, "import"))
    n = sum(s.n_frames for s in streams)
    print(f"imported {len(streams)} segments / {n} frames to {out}")
    return 0


# -- train -------------------------------------------------------------------


def _split_days(dataset: pipeline.Dataset, args: argparse.Namespace) -> tuple[list, list, list]:
    days = dataset.days
    train_days = args.train_days.split(",") if args.train_days else []
    test_days = args.test_days.split(",") if args.test_days else []
    val_days = args.val_days.split(",") if args.val_days else []
    if not train_days and not test_days:
        # Default: hold out the last two days (or one if the set is tiny).
        n_test = 2 if len(days) > 2 else 1
        train_days, test_days = days[:-n_test], days[-n_test:]
    elif not train_days:
        train_days = [d for d in days if d not in set(test_days) | set(val_days)]
    elif not test_days:
        test_days = [d for d in days if d not in set(train_days) | set(val_days)]
    return train_days, test_days, val_days


def cmd_train(args: argparse.Namespace) -> int:
    files = _collect_files(args.data)
    variant = PipelineVariant(args.variant)
    dataset = pipeline.build_dataset(
        files, stride=args.stride, variant=variant, crop_rows=args.crop_rows
    )
    train_days, test_days, val_days = _split_days(dataset, args)
    dataset.assign_splits(train_days, test_days, val_days)
    cfg = TrainConfig(
        epochs=args.epochs, batch_size=args.batch, lr=args.lr, l2_lambda=args.l2
    )
    model, report = pipeline.train(dataset, config=cfg, seed=args.seed)
    out = Path(args.out)
    run_config = _run_config(args, "train")
    run_config["files"] = [str(f) for f in files]
    run_config["splits"] = {"train": train_days, "test": test_days, "val": val_days}
    save_model(out, model, run_config=run_config)
    out.with_suffix(out.suffix + ".report.txt").write_text(report.to_text() + "\n")
    with open(out.with_suffix(out.suffix + ".report.jsonl"), "w") as fh:
        for rec in report.to_records():
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    _write_manifest(out.with_suffix(out.suffix + ".manifest.json"), run_config)
    if args.dump_inputs:
        streamio.dump_tensors(args.dump_inputs, dataset.inputs)
    print(report.to_text())
    print(f"model written to {out}")
    return 0


# -- eval ----------------------------------------------------------------------


def cmd_eval(args: argparse.Namespace) -> int:
    model, _ = load_model(args.model)
    variant = PipelineVariant(model.spec.variant)
    if args.variant and args.variant != variant.value:
        raise DetectorError(
            f"variant mismatch: model is {variant.value!r}, requested {args.variant!r}"
        )
    files = _collect_files(args.data)
    crop_rows = model.spec.branches[0].in_shape[0]
    dataset = pipeline.build_dataset(
        files, stride=args.stride, variant=variant, crop_rows=crop_rows
    )
    days = args.days.split(",") if args.days else dataset.days
    dataset.splits = {"test": np.flatnonzero(np.isin(dataset.day_ids, days))}
    result = pipeline.evaluate(model, dataset, "test")
    lines = ["day         acc     fpr     fnr     tp    fp    tn    fn"]
    for day in sorted(result["days"]):
        m = result["days"][day]
        lines.append(
            f"{day:<10}  {m.accuracy:.4f}  {m.fpr:.4f}  {m.fnr:.4f}"
            f"  {m.tp:>4}  {m.fp:>4}  {m.tn:>4}  {m.fn:>4}"
        )
    o = result["overall"]
    lines.append(f"{'overall':<10}  {o.accuracy:.4f}  {o.fpr:.4f}  {o.fnr:.4f}"
                 f"  {o.tp:>4}  {o.fp:>4}  {o.tn:>4}  {o.fn:>4}")
    text = "\n".join(lines)
    print(text)
    if args.out:
        Path(args.out).write_text(text + "\n")
    if args.dump_inputs:
        streamio.dump_tensors(args.dump_inputs, dataset.inputs)
    return 0


# -- detect --------------------------------------------------------------------


def cmd_detect(args: argparse.Namespace) -> int:
    model, _ = load_model(args.model)
    cfg = DetectorConfig(
        stride=args.stride,
        positives_per_subinterval=args.positives,
        subinterval_votes=args.votes,
    )
    if args.stdin:
        source = streamio.iter_stream_chunks(sys.stdin.buffer, args.chunk_frames)
    else:
        fh = open(args.stream, "rb")
        source = streamio.iter_stream_chunks(fh, args.chunk_frames)
    timeline = run_detection(model, source, cfg)
    run_config = _run_config(args, "detect")
    header = "# rfpresence detect " + json.dumps(run_config, sort_keys=True)
    lines = [header] + timeline.to_lines()
    body = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(body)
    else:
        sys.stdout.write(body)
    positives = timeline.positive_seconds()
    print(
        f"{len(timeline.records)} seconds, {len(positives)} positive; "
        f"stats {timeline.stats}",
        file=sys.stderr,
    )
    return 0


# -- parser --------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rfpresence",
        description="WiFi-CSI presence detection toolkit (simulate / train / eval / detect)",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="synthesize labeled CSI stream files")
    p.add_argument("--out", required=True, help="output directory (must be creatable)")
    p.add_argument("--scenes", type=int, default=6, help="number of synthetic days")
    p.add_argument("--windows", type=int, default=400, help="windows per label per day")
    p.add_argument("--windows-per-run", type=int, default=50)
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--paths", help="static path count, e.g. 5 or 4-7")
    p.add_argument("--delay-ns-max", dest="delay_ns_max", type=float)
    p.add_argument("--speed-mps", dest="speed_mps", type=float)
    p.add_argument("--cfo-hz", dest="cfo_hz", type=float)
    p.add_argument("--sto-ns-walk", dest="sto_ns_walk", type=float)
    p.add_argument("--noise-std", dest="noise_std", type=float)
    p.add_argument("--interval-ms", dest="interval_ms", type=float)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("import", help="convert a JSON-lines stream to binary")
    p.add_argument("--jsonl", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_import)

    p = sub.add_parser("train", help="train a classifier on labeled stream files")
    p.add_argument("--data", nargs="+", required=True, help="stream files or directories")
    p.add_argument("--out", required=True, help="model file to write")
    p.add_argument("--variant", choices=VARIANT_CHOICES, default="with-dft")
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch", type=int, default=64)
    p.add_argument("--l2", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--stride", type=int, default=128, help="training window stride")
    p.add_argument("--crop-rows", dest="crop_rows", type=int, default=50)
    p.add_argument("--train-days", dest="train_days")
    p.add_argument("--test-days", dest="test_days")
    p.add_argument("--val-days", dest="val_days")
    p.add_argument("--dump-inputs", dest="dump_inputs", help="debug tensor dump path")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a model per collection day")
    p.add_argument("--model", required=True)
    p.add_argument("--data", nargs="+", required=True)
    p.add_argument("--days", help="comma-separated day ids (default: all)")
    p.add_argument("--variant", choices=VARIANT_CHOICES, help="must match the model")
    p.add_argument("--stride", type=int, default=128)
    p.add_argument("--out", help="write the table here as well")
    p.add_argument("--dump-inputs", dest="dump_inputs")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("detect", help="per-second presence timeline for a stream")
    p.add_argument("--model", required=True)
    p.add_argument("--stream", help="stream file (or use --stdin)")
    p.add_argument("--stdin", action="store_true", help="read canonical binary from stdin")
    p.add_argument("--out", help="timeline file (default: stdout)")
    p.add_argument("--stride", type=int, default=1)
    p.add_argument("--positives", type=int, default=10, help="labels per 200 ms bin")
    p.add_argument("--votes", type=int, default=3, help="positive bins per second")
    p.add_argument("--chunk-frames", dest="chunk_frames", type=int, default=8192)
    p.set_defaults(func=cmd_detect)
    return parser


def main(argv=None) -> int:
    _apply_thread_cap()
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "detect" and not args.stdin and not args.stream:
        parser.error("detect needs --stream or --stdin")
    try:
        return args.func(args)
    except (CsiError, PipelineError, DetectorError, SynthError, ModelFileError,
            streamio.ParseError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
