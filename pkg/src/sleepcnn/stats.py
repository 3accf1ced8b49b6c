"""Normality screening and paired Wilcoxon signed-rank tests over per-patient metrics."""

from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import kolmogorov
from scipy.stats import rankdata

EXACT_MAX_N = 25


class StatsError(ValueError):
    category = "StatsError"


class DegenerateSample(StatsError):
    category = "DegenerateSample"


class AllZeroDifferences(StatsError):
    category = "AllZeroDifferences"


class LengthMismatch(StatsError):
    category = "LengthMismatch"


@dataclass
class TestResult:
    statistic: float
    p_value: float
    method: str
    n_effective: int
    note: str = ""

    __test__ = False  # keep pytest from collecting this


def normal_cdf(x: float) -> float:
    """Standard normal CDF through the C library ``erfc`` (about 1e-15 relative)."""
    return 0.5 * math.erfc(-x / math.sqrt(2.0))


def ks_normality(sample) -> TestResult:
    """One-sample KS distance to a normal with mean and std fitted to the sample.

    The p-value comes from the asymptotic Kolmogorov distribution. Since
    the parameters are estimated from the same data this is really a
    Lilliefors-style screen, and the plain Kolmogorov p-value is
    conservative.
    """
    x = np.sort(np.asarray(sample, dtype=np.float64))
    n = len(x)
    if n < 3:
        raise StatsError(f"KS normality needs at least 3 values, got {n}")
    mu, sigma = x.mean(), x.std(ddof=1)
    if sigma == 0.0:
        raise DegenerateSample("sample has zero variance")
    cdf = np.array([normal_cdf((v - mu) / sigma) for v in x])
    i = np.arange(1, n + 1)
    d = float(max(np.max(i / n - cdf), np.max(cdf - (i - 1) / n)))
    p = float(kolmogorov(math.sqrt(n) * d))
    return TestResult(d, min(max(p, np.finfo(float).tiny), 1.0), "asymptotic", n,
                      "normal parameters fitted from the sample (Lilliefors caveat)")


def _prepare_pairs(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise LengthMismatch(f"paired samples differ in shape: {a.shape} vs {b.shape}")
    d = a - b
    d = d[d != 0.0]
    if len(d) == 0:
        raise AllZeroDifferences("every paired difference is zero")
    return d, rankdata(np.abs(d))


def _exact_p(ranks: np.ndarray, w_plus: float) -> float:
    """Two-sided p by counting all 2**n sign assignments of the (mid)ranks.

    Ranks are doubled to integers; the 2**n subset sums are counted with a
    meet-in-the-middle split so memory stays at 2**(n/2).
    """
    r2 = np.rint(2 * ranks).astype(np.int64)
    total = int(r2.sum())
    w2 = int(round(2 * w_plus))
    lo = min(w2, total - w2)

    def subset_sums(rs):
        sums = np.zeros(1, dtype=np.int64)
        for r in rs:
            sums = np.concatenate([sums, sums + r])
        return sums

    half = len(r2) // 2
    left = subset_sums(r2[:half])
    right = np.sort(subset_sums(r2[half:]))
    # assignments whose positive-rank sum is <= lo
    tail = int(np.searchsorted(right, lo - left, side="right").sum())
    n_assign = 2 ** len(r2)
    return min(1.0, 2.0 * tail / n_assign)


def _asymptotic_p(ranks: np.ndarray, w_plus: float, correction: bool) -> float:
    n = len(ranks)
    mean = n * (n + 1) / 4.0
    _, ties = np.unique(ranks, return_counts=True)
    var = n * (n + 1) * (2 * n + 1) / 24.0 - float(np.sum(ties**3 - ties)) / 48.0
    if var <= 0:
        return 1.0
    dev = abs(w_plus - mean) - (0.5 if correction else 0.0)
    z = max(dev, 0.0) / math.sqrt(var)
    return min(1.0, math.erfc(z / math.sqrt(2.0)))


def wilcoxon_signed_rank(a, b, method: str = "auto", correction: bool = True) -> TestResult:
    """Paired two-sided Wilcoxon signed-rank test (zero differences discarded).

    Parameters
    ----------
    a, b : sequences of float
        Paired measurements, aligned by subject.
    method : {"auto", "exact", "asymptotic"}
        ``auto`` enumerates exactly up to 25 non-zero pairs and uses the
        tie-corrected normal approximation above that.
    correction : bool
        Continuity correction for the normal approximation.

    Returns
    -------
    TestResult
        ``statistic`` is ``min(W+, W-)``.
    """
    d, ranks = _prepare_pairs(a, b)
    n = len(d)
    w_plus = float(ranks[d > 0].sum())
    w_minus = float(ranks[d < 0].sum())
    if method == "auto":
        method = "exact" if n <= EXACT_MAX_N else "asymptotic"
    if method == "exact":
        p = _exact_p(ranks, w_plus)
    elif method == "asymptotic":
        p = _asymptotic_p(ranks, w_plus, correction)
    else:
        raise ValueError(f"unknown method {method!r}")
    return TestResult(min(w_plus, w_minus), p, method, n)


def wilcoxon_all(a, b) -> dict[str, TestResult]:
    """Exact, corrected-asymptotic and uncorrected-asymptotic results side by side."""
    return {
        "exact": wilcoxon_signed_rank(a, b, "exact"),
        "asymptotic": wilcoxon_signed_rank(a, b, "asymptotic", correction=True),
        "asymptotic_nocc": wilcoxon_signed_rank(a, b, "asymptotic", correction=False),
    }


# --------------------------------------------------------------------------
# approach comparison


@dataclass
class Comparison:
    approach_a: str
    approach_b: str
    metric: str
    ks_p_a: float
    ks_p_b: float
    wilcoxon_p: float
    method: str
    significant: str  # "yes" / "no" / "incomparable"
    p_exact: float = math.nan
    p_asymptotic: float = math.nan


def _aligned(results_a, results_b, metric: str) -> tuple[np.ndarray, np.ndarray]:
    by_a = {r.fold_id: getattr(r, metric) for r in results_a}
    by_b = {r.fold_id: getattr(r, metric) for r in results_b}
    if set(by_a) != set(by_b):
        raise LengthMismatch(f"fold ids differ: {sorted(set(by_a) ^ set(by_b))}")
    folds = sorted(by_a)
    return np.array([by_a[f] for f in folds]), np.array([by_b[f] for f in folds])


def compare_approaches(
    results_by_approach: dict[str, list],
    metric: str = "accuracy",
    alpha: float = 0.05,
    pairs: list[tuple[str, str]] | None = None,
    method: str = "auto",
) -> list[Comparison]:
    """KS screen plus paired Wilcoxon for each pair of approaches."""
    if pairs is None:
        pairs = list(itertools.combinations(results_by_approach, 2))
    rows = []
    for a_name, b_name in pairs:
        a, b = _aligned(results_by_approach[a_name], results_by_approach[b_name], metric)
        ks_a = ks_normality(a).p_value
        ks_b = ks_normality(b).p_value
        try:
            result = wilcoxon_signed_rank(a, b, method)
            exact = wilcoxon_signed_rank(a, b, "exact").p_value if result.n_effective <= EXACT_MAX_N else math.nan
            asym = wilcoxon_signed_rank(a, b, "asymptotic").p_value
        except AllZeroDifferences:
            rows.append(Comparison(a_name, b_name, metric, ks_a, ks_b, math.nan, "none", "incomparable"))
            continue
        rows.append(
            Comparison(
                a_name, b_name, metric, ks_a, ks_b, result.p_value, result.method,
                "yes" if result.p_value < alpha else "no", exact, asym,
            )
        )
    return rows


COMPARISON_FIELDS = ["approach_a", "approach_b", "metric", "ks_p_a", "ks_p_b", "wilcoxon_p", "method", "significant"]


def write_comparisons_csv(rows: list[Comparison], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(COMPARISON_FIELDS)
        for r in rows:
            w.writerow([
                r.approach_a, r.approach_b, r.metric, repr(r.ks_p_a), repr(r.ks_p_b),
                "" if math.isnan(r.wilcoxon_p) else repr(r.wilcoxon_p), r.method, r.significant,
            ])


def read_comparisons_csv(path: str | Path) -> list[Comparison]:
    with open(path, newline="") as fh:
        return [
            Comparison(
                row["approach_a"], row["approach_b"], row["metric"], float(row["ks_p_a"]),
                float(row["ks_p_b"]), float(row["wilcoxon_p"]) if row["wilcoxon_p"] else math.nan,
                row["method"], row["significant"],
            )
            for row in csv.DictReader(fh)
        ]
