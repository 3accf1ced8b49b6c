"""End-to-end run on a small synthetic corpus: prepare, train, evaluate, ensemble, report."""

import argparse
import sys
from pathlib import Path

from sleepcnn.cli import main
from sleepcnn.synthetic import write_synthetic_corpus


def run(out: Path, patients: int, segments: int, epochs: int, seed: int) -> int:
    write_synthetic_corpus(out / "edf", n_patients=patients, segments_per_night=segments, seed=seed)
    cache, runs = str(out / "segments.cache"), str(out / "runs")
    steps = [
        ["prepare", "--data-dir", str(out / "edf"), "--out", cache, "--expected-patients", str(patients)],
        ["train", "--cache", cache, "--out", runs, "--n-patients", str(patients), "--max-epochs", str(epochs),
         "--patience", str(epochs), "--seed", str(seed)],
        ["evaluate", "--models", runs, "--cache", cache],
        ["ensemble", "--models", runs, "--cache", cache],
        ["report", "--results", runs],
    ]
    for argv in steps:
        code = main(argv)
        if code:
            return code
    return 0


if __name__ == "__main__":
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--out", type=Path, default=Path("smoke_run"))
    p.add_argument("--patients", type=int, default=2)
    p.add_argument("--segments", type=int, default=40)
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    a = p.parse_args()
    sys.exit(run(a.out, a.patients, a.segments, a.epochs, a.seed))
