"""Summary table and significance tests on the shipped per-patient reference results."""

import sys

from sleepcnn.cli import main

if __name__ == "__main__":
    out = sys.argv[1] if len(sys.argv) > 1 else "reference_comparisons.csv"
    code = main(["report", "--reference"])
    sys.exit(code or main(["stats", "--reference", "--out", out]))
