"""Full 20-patient leave-one-patient-out campaign on the Sleep-EDF recordings.

Resumable: rerunning skips folds whose model file already exists.
"""

import argparse
import sys
from pathlib import Path

from sleepcnn.cli import main

if __name__ == "__main__":
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--data-dir", required=True)
    p.add_argument("--out", type=Path, default=Path("campaign"))
    p.add_argument("--config", help="optional key = value run configuration")
    p.add_argument("--workers", type=int, default=1)
    a = p.parse_args()
    cache, runs = str(a.out / "segments.cache"), str(a.out / "runs")
    train = ["train", "--cache", cache, "--out", runs, "--workers", str(a.workers)]
    if a.config:
        train += ["--config", a.config]
    steps = [
        ["prepare", "--data-dir", a.data_dir, "--out", cache],
        train,
        ["evaluate", "--models", runs, "--cache", cache],
        ["ensemble", "--models", runs, "--cache", cache],
        ["report", "--results", runs, "--out", str(a.out / "summary.csv")],
        ["stats", "--results", runs, "--out", str(a.out / "comparisons.csv")],
    ]
    for argv in steps:
        code = main(argv)
        if code:
            sys.exit(code)
