"""Command-line surface: fit, predict, eval, simulate, bench.

Exit codes: 0 success, 2 usage errors (bad arguments), 1 data errors
(unreadable or malformed inputs).  Outputs land only under --out.
"""

from __future__ import annotations

import argparse
import json
import statistics
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .core import PrototypeAccumulator, finalize, predict_map
from .errors import ValidationError
from .evaluation import (
    ConfusionMatrix,
    build_report,
    compare_reports,
    update_confusion,
)
from .shiftsim import load_sim_config, run_batch, run_experiment, run_sweep, sweep_csv
from .tensorio import (
    DatasetManifest,
    export_prototypes,
    import_prototypes,
    read_label_map,
    stream_dataset,
    write_label_map,
)

SCHEMA_VERSION = 1


def _write_json(path: Path, doc: dict) -> None:
    doc = {"schema_version": SCHEMA_VERSION} | doc
    path.write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")


def _fit_accumulator(
    manifest: DatasetManifest, threads: int
) -> tuple[PrototypeAccumulator, int]:
    """Single pass over the manifest; returns (accumulator, pixel count).

    threads > 1 shards entries across workers and merges shard accumulators
    in entry order, which matches sequential results to accumulation rounding.
    """
    C = manifest.label_space.num_classes
    pixels = 0

    def fit_shard(entries) -> tuple[PrototypeAccumulator, int]:
        shard = DatasetManifest(entries=tuple(entries), label_space=manifest.label_space)
        acc = PrototypeAccumulator.empty(C)
        count = 0
        for _, pmap, _ in stream_dataset(shard):
            acc.update(pmap)
            count += pmap.num_pixels
        return acc, count

    if threads <= 1 or len(manifest.entries) <= 1:
        return fit_shard(manifest.entries)

    shards = [manifest.entries[i::threads] for i in range(threads)]
    shards = [s for s in shards if s]
    with ThreadPoolExecutor(max_workers=len(shards)) as pool:
        results = list(pool.map(fit_shard, shards))
    acc = PrototypeAccumulator.empty(C)
    for shard_acc, count in results:
        acc = acc.merge(shard_acc)
        pixels += count
    return acc, pixels


def cmd_fit(args) -> int:
    manifest = DatasetManifest.load(args.manifest)
    start = time.perf_counter()
    acc, pixels = _fit_accumulator(manifest, args.threads)
    protos = finalize(acc, manifest.label_space)
    elapsed = time.perf_counter() - start

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    export_prototypes(protos, out / "prototypes.csv", "csv", manifest.label_space)
    export_prototypes(protos, out / "prototypes.json", "json", manifest.label_space)
    names = manifest.label_space.class_names
    _write_json(
        out / "fit_summary.json",
        {
            "entries": len(manifest.entries),
            "pixels": pixels,
            "weight_total_by_class": {
                names[c]: float(acc.weight_total[c]) for c in range(len(names))
            },
            "pixel_count_by_class": {
                names[c]: int(acc.pixel_count[c]) for c in range(len(names))
            },
            "fallback_classes": [
                names[c] for c in range(len(names)) if not protos.observed[c]
            ],
            "wall_time_seconds": elapsed,
        },
    )
    print(f"fit: {len(manifest.entries)} entries, {pixels} pixels -> {out}")
    return 0


def cmd_predict(args) -> int:
    manifest = DatasetManifest.load(args.manifest)
    protos = None
    if args.mode == "calibrated":
        protos = import_prototypes(args.protos)
        if protos.num_classes != manifest.label_space.num_classes:
            raise ValidationError(
                f"prototypes have {protos.num_classes} classes, manifest has "
                f"{manifest.label_space.num_classes}"
            )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    flips_by_entry: dict[str, int] = {}
    total_flips = 0
    entries = 0
    for eid, pmap, _ in stream_dataset(manifest):
        pred = predict_map(pmap, protos)
        write_label_map(pred.labels, out / f"{eid}.pclm", manifest.label_space)
        if protos is not None:
            flips = int((pred.labels != predict_map(pmap).labels).sum())
            flips_by_entry[eid] = flips
            total_flips += flips
        entries += 1
    _write_json(
        out / "predict_summary.json",
        {
            "mode": args.mode,
            "entries": entries,
            "flip_count": total_flips if protos is not None else None,
            "flips_by_entry": flips_by_entry if protos is not None else None,
        },
    )
    print(f"predict[{args.mode}]: {entries} entries -> {out}")
    return 0


def _evaluate_dir(
    manifest: DatasetManifest, pred_dir: Path, subsets: list[str] | None
):
    space = manifest.label_space
    cm = ConfusionMatrix.empty(space.num_classes)
    skipped: list[str] = []

    def note_skip(eid: str, exc: Exception) -> None:
        skipped.append(eid)
        print(f"warning: skipping entry {eid!r}: {exc}", file=sys.stderr)

    for eid, pmap, gt in stream_dataset(
        manifest, with_labels=True, on_error="skip", on_skip=note_skip
    ):
        try:
            pred = read_label_map(pred_dir / f"{eid}.pclm", space)
            if pred.shape != gt.shape:
                raise ValidationError(
                    f"prediction {pred.shape} does not match ground truth {gt.shape}"
                )
            if np.any(pred == space.ignore_index):
                raise ValidationError("prediction contains the ignore index")
        except (OSError, ValidationError) as exc:
            note_skip(eid, exc)
            continue
        update_confusion(cm, pred, gt, space.ignore_index)
    if cm.total_pixels == 0:
        raise ValidationError(f"no evaluable pixels found under {pred_dir}")
    report = build_report(cm, space, subsets)
    report.entries_skipped = len(skipped)
    report.skipped_ids = skipped
    return report


def cmd_eval(args) -> int:
    manifest = DatasetManifest.load(args.manifest)
    subsets = args.subsets.split(",") if args.subsets else None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    report = _evaluate_dir(manifest, Path(args.predictions), subsets)
    (out / "eval_report.json").write_text(report.to_json(), encoding="utf-8")
    (out / "eval_report.txt").write_text(report.to_text_table(), encoding="utf-8")
    print(report.to_text_table())

    if args.compare:
        other = _evaluate_dir(manifest, Path(args.compare), subsets)
        (out / "eval_report_compare.json").write_text(other.to_json(), encoding="utf-8")
        delta = compare_reports(report, other)
        (out / "eval_delta.csv").write_text(delta.to_csv(), encoding="utf-8")
        for name, d in delta.miou_delta_by_subset.items():
            print(f"delta[{name}]: {d:+.6f} (compare minus primary)")
    return 0


def cmd_simulate(args) -> int:
    config = load_sim_config(args.config)
    if args.seed is not None:
        config = replace(
            config,
            scene=replace(config.scene, seed=args.seed),
            shift=replace(config.shift, seed=args.seed),
        )
    if config.seeds is not None and config.sweep_sigmas is not None:
        raise ValidationError("config cannot set both 'seeds' and 'sweep_sigmas'")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    if config.sweep_sigmas is not None:
        reports = run_sweep(
            config.scene, config.shift, config.holdout_fraction, list(config.sweep_sigmas)
        )
        (out / "sweep.csv").write_text(sweep_csv(reports), encoding="utf-8")
        _write_json(out / "sweep.json", {"runs": [r.to_json_dict() for r in reports]})
        print(f"simulate: swept {len(reports)} noise scales -> {out}")
    elif config.seeds is not None:
        reports, aggregate = run_batch(
            config.scene, config.shift, config.holdout_fraction, list(config.seeds)
        )
        _write_json(
            out / "batch.json",
            {"aggregate": aggregate, "runs": [r.to_json_dict() for r in reports]},
        )
        print(
            f"simulate: {len(reports)} seeds, mean accuracy margin "
            f"{aggregate['mean_accuracy_margin']:+.6f} -> {out}"
        )
    else:
        report = run_experiment(config.scene, config.shift, config.holdout_fraction)
        _write_json(out / "experiment.json", report.to_json_dict())
        print(
            f"simulate: argmax {report.argmax_accuracy:.4f} vs calibrated "
            f"{report.calibrated_accuracy:.4f} -> {out}"
        )
    return 0


def cmd_bench(args) -> int:
    manifest = DatasetManifest.load(args.manifest)
    if args.protos:
        protos = import_prototypes(args.protos)
    else:
        acc, _ = _fit_accumulator(manifest, 1)
        protos = finalize(acc, manifest.label_space)

    total_pixels = 0
    for _, pmap, _ in stream_dataset(manifest):
        total_pixels += pmap.num_pixels

    def bench_fit() -> None:
        acc = PrototypeAccumulator.empty(manifest.label_space.num_classes)
        for _, pmap, _ in stream_dataset(manifest):
            acc.update(pmap)
        finalize(acc, manifest.label_space)

    def bench_predict_argmax() -> None:
        for _, pmap, _ in stream_dataset(manifest):
            predict_map(pmap)

    def bench_predict_calibrated() -> None:
        for _, pmap, _ in stream_dataset(manifest):
            predict_map(pmap, protos)

    phases = [
        ("fit", bench_fit),
        ("predict_argmax", bench_predict_argmax),
        ("predict_calibrated", bench_predict_calibrated),
    ]
    rows = []
    timings: dict[str, list[float]] = {}
    for name, fn in phases:
        samples = []
        for rep in range(args.reps):
            start = time.perf_counter()
            fn()
            seconds = time.perf_counter() - start
            samples.append(seconds)
            rows.append((name, rep, seconds, total_pixels, total_pixels / seconds))
        timings[name] = samples

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    csv_lines = ["phase,rep,seconds,pixels,pixels_per_second"]
    for name, rep, seconds, pixels, pps in rows:
        csv_lines.append(f"{name},{rep},{seconds:.9f},{pixels},{pps:.3f}")
    (out / "bench.csv").write_text("\n".join(csv_lines) + "\n", encoding="utf-8")

    summary = {
        "entries": len(manifest.entries),
        "pixels": total_pixels,
        "repetitions": args.reps,
        "phases": {
            name: {
                "median_seconds": statistics.median(samples),
                "min_seconds": min(samples),
                "median_pixels_per_second": total_pixels / statistics.median(samples),
            }
            for name, samples in timings.items()
        },
    }
    summary["calibrated_vs_argmax_throughput_ratio"] = (
        summary["phases"]["predict_calibrated"]["median_pixels_per_second"]
        / summary["phases"]["predict_argmax"]["median_pixels_per_second"]
    )
    _write_json(out / "bench_summary.json", summary)
    for name, samples in timings.items():
        print(f"bench[{name}]: median {statistics.median(samples):.4f}s over {args.reps} reps")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="labelcalib",
        description="Soft-label prototype calibration for segmentation probability maps",
    )
    parser.add_argument("--version", action="version", version=f"labelcalib {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p_fit = sub.add_parser("fit", help="one streaming pass: build prototypes from a manifest")
    p_fit.add_argument("--manifest", required=True)
    p_fit.add_argument("--out", required=True)
    p_fit.add_argument("--threads", type=int, default=1)
    p_fit.set_defaults(func=cmd_fit)

    p_pred = sub.add_parser("predict", help="write per-entry label maps")
    p_pred.add_argument("--manifest", required=True)
    p_pred.add_argument("--protos", help="prototype CSV/JSON (required for calibrated mode)")
    p_pred.add_argument("--out", required=True)
    p_pred.add_argument("--mode", choices=("argmax", "calibrated"), default="calibrated")
    p_pred.set_defaults(func=cmd_predict)

    p_eval = sub.add_parser("eval", help="score a prediction directory against ground truth")
    p_eval.add_argument("predictions", help="directory of <id>.pclm prediction files")
    p_eval.add_argument("--manifest", required=True)
    p_eval.add_argument("--subsets", help="comma-separated subset names (default: all)")
    p_eval.add_argument("--compare", help="second prediction directory; writes delta CSV")
    p_eval.add_argument("--out", required=True)
    p_eval.set_defaults(func=cmd_eval)

    p_sim = sub.add_parser("simulate", help="run the synthetic domain-shift experiment")
    p_sim.add_argument("--config", required=True)
    p_sim.add_argument("--seed", type=int, help="override scene and shift seeds")
    p_sim.add_argument("--out", required=True)
    p_sim.set_defaults(func=cmd_simulate)

    p_bench = sub.add_parser("bench", help="time fit and predict over a manifest")
    p_bench.add_argument("--manifest", required=True)
    p_bench.add_argument("--reps", type=int, default=3)
    p_bench.add_argument("--protos", help="prototype file (default: fit once first)")
    p_bench.add_argument("--out", required=True)
    p_bench.set_defaults(func=cmd_bench)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "predict" and args.mode == "calibrated" and not args.protos:
        parser.error("--protos is required when --mode calibrated")
    if args.command == "bench" and args.reps < 1:
        parser.error("--reps must be >= 1")
    try:
        return args.func(args)
    except (ValidationError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
