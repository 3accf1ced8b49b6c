"""Command-line entry point: ``sleepcnn <command> ...``.

Exit codes: 0 success, 1 usage error, 2 data or parse error, 3 training failure.
Failures print one line ``error: <Category>: <message>`` on stderr.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
import warnings
from collections import Counter
from importlib import resources
from pathlib import Path

import numpy as np

from sleepcnn import dataset as D
from sleepcnn import edf
from sleepcnn import evaluation as E
from sleepcnn import model as M
from sleepcnn import stats as S
from sleepcnn import training as T
from sleepcnn.config import RunConfig, load_config

log = logging.getLogger("sleepcnn")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_TRAINING = 0, 1, 2, 3

# Per-class segment counts listed in the reference dataset summary, in its printed column order.
REFERENCE_CLASS_COUNTS = {"W": 68675, "REM": 2662, "N1": 16791, "N2": 5501, "N3": 7296}


class UsageError(Exception):
    category = "UsageError"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: UsageError: {message}", file=sys.stderr)
        sys.exit(EXIT_USAGE)


def reference_results_path() -> Path:
    return Path(str(resources.files("sleepcnn") / "data" / "reference_results.csv"))


def load_reference_results() -> list[E.FoldResult]:
    return E.read_results_csv(reference_results_path())


# --------------------------------------------------------------------------
# commands


def cmd_inspect(args) -> int:
    data = Path(args.file).read_bytes()
    header, specs = edf.parse_header(data)
    print(f"version          {header.version}")
    print(f"patient          {header.patient_info}")
    print(f"recording        {header.recording_info}")
    print(f"start            {header.start_datetime.isoformat()}")
    print(f"reserved         {header.reserved}")
    print(f"data records     {header.n_data_records} x {header.record_duration} s")
    print(f"signals          {header.n_signals}")
    for s in specs:
        rate = s.samples_per_record / header.record_duration if header.record_duration else 0.0
        print(
            f"  {s.label:<18} {rate:8.2f} Hz  {s.physical_dimension:<4} "
            f"phys [{s.physical_min}, {s.physical_max}]  dig [{s.digital_min}, {s.digital_max}]"
        )
    events = edf.parse_annotations(data, header, specs)
    if events:
        print(f"annotations      {len(events)} events, {events[0].onset}s .. {events[-1].onset}s")
        for text, n in sorted(Counter(e.text for e in events).items()):
            total = sum(e.duration for e in events if e.text == text)
            print(f"  {text:<24} {n:6d} events  {total:10.0f} s")
    else:
        print("annotations      none")
    return EXIT_OK


def cmd_prepare(args) -> int:
    files = D.find_corpus(args.data_dir)
    patients = sorted({f.patient_id for f in files})
    print(f"found {len(files)} recordings from {len(patients)} patients")
    if args.expected_patients and len(patients) != args.expected_patients:
        print(f"note: expected {args.expected_patients} patients, found {len(patients)}")
    segments = D.prepare_dataset(args.data_dir)
    D.save_cache(segments, args.out)
    counts = segments.class_counts()
    print(f"wrote {len(segments)} segments to {args.out}")
    print(f"{'class':<6}{'count':>9}{'reference':>11}")
    for name, n in counts.items():
        ref = REFERENCE_CLASS_COUNTS[name]
        flag = "" if n == ref else "  (differs)"
        print(f"{name:<6}{n:9d}{ref:11d}{flag}")
    return EXIT_OK


def _run_config(args) -> RunConfig:
    overrides = {
        "cache": args.cache,
        "output_dir": args.out,
        "approaches": args.approach,
        "seed": args.seed,
        "max_epochs": args.max_epochs,
        "patience": args.patience,
        "batch_size": args.batch_size,
        "learning_rate": args.learning_rate,
        "standardize": args.standardize,
        "n_patients": args.n_patients,
        "workers": args.workers,
        "force": True if args.force else None,
    }
    return load_config(args.config, **overrides)


def cmd_train(args) -> int:
    cfg = _run_config(args)
    data = D.load_cache(cfg.cache)
    folds = [args.fold] if args.fold is not None else None
    for approach in cfg.approaches:
        tc = cfg.train_config(approach)
        results = T.run_loocv(data, tc, cfg.output_dir, folds=folds, force=cfg.force, workers=cfg.workers)
        for fold_id, trained, history in results:
            print(
                f"{approach} fold {fold_id:2d}: best epoch {history.best_epoch:3d} "
                f"({history.stop_reason}), {M.count_params(trained)} params"
            )
    return EXIT_OK


def _models_by_approach(models_dir: Path) -> dict[str, dict[int, Path]]:
    found = {}
    for approach in D.APPROACH_CHANNELS:
        paths = sorted((models_dir / approach).glob("fold_*.model"))
        if paths:
            found[approach] = {int(p.stem.split("_")[1]): p for p in paths}
    return found


def _test_indices(data: D.SegmentSet, trained: M.ModelParams) -> np.ndarray:
    patient = trained.metadata.get("test_patient")
    if patient is None:
        raise UsageError("model file has no test_patient metadata")
    idx = np.flatnonzero(data.patient_ids == int(patient))
    if len(idx) == 0:
        raise D.DatasetError(f"cache has no segments for patient {patient}")
    return idx


def _write_results(results: list[E.FoldResult], out_dir: Path, stem: str) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    E.write_results_csv(results, out_dir / f"{stem}.csv")
    E.write_confusion_json(results, out_dir / f"{stem}_confusion.json")
    summary = E.aggregate_report(results)
    E.write_summary_csv(summary, out_dir / f"{stem}_summary.csv")
    print(E.format_report(summary))


def cmd_evaluate(args) -> int:
    models_dir = Path(args.models)
    data = D.load_cache(args.cache)
    found = _models_by_approach(models_dir)
    if not found:
        raise UsageError(f"no fold models under {models_dir}")
    results = []
    for approach, paths in found.items():
        for fold_id, path in paths.items():
            trained = M.load_model(path)
            results.append(E.evaluate_fold([trained], data, _test_indices(data, trained), fold_id, approach))
    _write_results(results, Path(args.out or models_dir), "results")
    return EXIT_OK


def cmd_ensemble(args) -> int:
    models_dir = Path(args.models)
    data = D.load_cache(args.cache)
    found = _models_by_approach(models_dir)
    members = ("fpz_cz", "pz_oz", "dual")
    if any(a not in found for a in members):
        raise UsageError(f"ensemble needs models for all of {members}; found {sorted(found)}")
    shared = sorted(set.intersection(*(set(found[a]) for a in members)))
    results = []
    for fold_id in shared:
        trained = [M.load_model(found[a][fold_id]) for a in members]
        patients = {m.metadata.get("test_patient") for m in trained}
        if len(patients) != 1:
            raise D.DatasetError(f"fold {fold_id}: members were tested on different patients {patients}")
        res = E.evaluate_fold(trained, data, _test_indices(data, trained[0]), fold_id, "ensemble")
        results.append(res)
        print(f"fold {fold_id:2d}: coverage {res.coverage:.4f}, classified-only accuracy {res.classified_accuracy:.4f}")
    _write_results(results, Path(args.out or models_dir), "results_ensemble")
    return EXIT_OK


def _load_results(args) -> list[E.FoldResult]:
    if args.reference:
        return load_reference_results()
    if not args.results:
        raise UsageError("give --results PATH or --reference")
    path = Path(args.results)
    files = sorted(path.glob("results*.csv")) if path.is_dir() else [path]
    files = [f for f in files if not f.name.endswith("_summary.csv")]
    if not files:
        raise UsageError(f"no results CSV under {path}")
    return [r for f in files for r in E.read_results_csv(f)]


def cmd_stats(args) -> int:
    results = _load_results(args)
    by_approach: dict[str, list[E.FoldResult]] = {}
    for r in results:
        by_approach.setdefault(r.approach, []).append(r)
    rows = S.compare_approaches(by_approach, metric=args.metric, alpha=args.alpha, method=args.method)
    print(f"{'a':<9}{'b':<10}{'metric':<10}{'ks_p_a':>8}{'ks_p_b':>8}{'p':>9}{'p_exact':>9}{'p_asym':>9}  sig")
    for r in rows:
        print(
            f"{r.approach_a:<9}{r.approach_b:<10}{r.metric:<10}{r.ks_p_a:8.4f}{r.ks_p_b:8.4f}"
            f"{r.wilcoxon_p:9.4f}{r.p_exact:9.4f}{r.p_asymptotic:9.4f}  {r.significant}"
        )
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        S.write_comparisons_csv(rows, args.out)
    return EXIT_OK


def cmd_report(args) -> int:
    results = _load_results(args)
    summary = E.aggregate_report(results)
    print(E.format_report(summary, std=args.std))
    if args.out:
        E.write_summary_csv(summary, args.out)
    return EXIT_OK


def cmd_score(args) -> int:
    trained = M.load_model(args.model)
    data = Path(args.file).read_bytes()
    header, specs = edf.parse_header(data)
    channels = E._model_channels(trained)
    series = []
    for label in channels:
        spec = next((s for s in specs if s.label == label), None)
        if spec is None:
            raise edf.UnknownLabel(f"{args.file}: no channel {label!r}")
        rate = spec.samples_per_record / header.record_duration
        if rate != D.SAMPLING_RATE:
            raise D.RateMismatch(f"{label}: {rate} Hz, expected {D.SAMPLING_RATE} Hz")
        series.append(edf.read_signal(data, header, specs, label))
    signal = np.stack(series)
    n = signal.shape[1] // D.SEGMENT_SAMPLES
    windows = signal[:, : n * D.SEGMENT_SAMPLES].reshape(len(channels), n, D.SEGMENT_SAMPLES).transpose(1, 0, 2)
    if trained.metadata.get("standardize", "none") == "per_recording_zscore":
        mean = windows.mean(axis=(0, 2))
        std = windows.std(axis=(0, 2))
        if np.any(std == 0):
            raise D.ZeroVariance("constant channel in scored recording")
        windows = (windows - mean[None, :, None]) / std[None, :, None]
    labels, probs = M.predict(trained, windows) if n else (np.zeros(0, int), np.zeros((0, 5)))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["onset_s", "label", "confidence"])
        for i, (lab, p) in enumerate(zip(labels, probs)):
            w.writerow([i * D.EPOCH_SECONDS, D.CLASS_NAMES[lab], repr(float(p[lab]))])
    print(f"scored {n} segments -> {out}")
    return EXIT_OK


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="sleepcnn", description="Two-channel EEG sleep staging toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("inspect", help="print an EDF header and annotation summary")
    s.add_argument("file")
    s.set_defaults(func=cmd_inspect)

    s = sub.add_parser("prepare", help="build the segment cache from a Sleep-EDF directory")
    s.add_argument("--data-dir", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--expected-patients", type=int, default=20)
    s.set_defaults(func=cmd_prepare)

    s = sub.add_parser("train", help="leave-one-patient-out training (resumable)")
    s.add_argument("--config")
    s.add_argument("--fold", type=int)
    s.add_argument("--cache")
    s.add_argument("--out")
    s.add_argument("--approach", type=lambda v: [a.strip() for a in v.split(",")])
    s.add_argument("--seed", type=int)
    s.add_argument("--max-epochs", type=int)
    s.add_argument("--patience", type=int)
    s.add_argument("--batch-size", type=int)
    s.add_argument("--learning-rate", type=float)
    s.add_argument("--standardize", choices=["none", "per_recording_zscore"])
    s.add_argument("--n-patients", type=int)
    s.add_argument("--workers", type=int)
    s.add_argument("--force", action="store_true")
    s.set_defaults(func=cmd_train)

    for name, func, text in (
        ("evaluate", cmd_evaluate, "score every fold model on its held-out patient"),
        ("ensemble", cmd_ensemble, "majority-vote ensemble of the three approaches per fold"),
    ):
        s = sub.add_parser(name, help=text)
        s.add_argument("--models", required=True)
        s.add_argument("--cache", required=True)
        s.add_argument("--out")
        s.set_defaults(func=func)

    s = sub.add_parser("stats", help="pairwise KS + Wilcoxon comparison of approaches")
    s.add_argument("--results")
    s.add_argument("--reference", action="store_true", help="use the shipped reference per-patient results")
    s.add_argument("--metric", default="accuracy", choices=list(E.METRICS))
    s.add_argument("--alpha", type=float, default=0.05)
    s.add_argument("--method", default="auto", choices=["auto", "exact", "asymptotic"])
    s.add_argument("--out")
    s.set_defaults(func=cmd_stats)

    s = sub.add_parser("report", help="mean ± std summary table")
    s.add_argument("--results")
    s.add_argument("--reference", action="store_true")
    s.add_argument("--std", default="sample", choices=["sample", "population"])
    s.add_argument("--out")
    s.set_defaults(func=cmd_report)

    s = sub.add_parser("score", help="stage an EDF recording with a trained model")
    s.add_argument("--model", required=True)
    s.add_argument("file")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_score)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
    warnings.simplefilter("default")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: UsageError: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except T.TrainingError as exc:
        print(f"error: {exc.category}: {exc}", file=sys.stderr)
        return EXIT_TRAINING
    except (OSError, ValueError, KeyError) as exc:
        category = getattr(exc, "category", type(exc).__name__)
        print(f"error: {category}: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
