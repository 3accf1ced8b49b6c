"""Confusion matrices, accuracy / F1 / Cohen's kappa, majority voting, fold reports."""

from __future__ import annotations

import csv
import json
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from sleepcnn import model as M
from sleepcnn.dataset import APPROACH_CHANNELS, CLASS_NAMES, SegmentSet, StageLabel, standardize

N_CLASSES = 5
# Column index used for ensemble ties ("unknown" / unclassified).
TIE = N_CLASSES
RESULTS_VERSION = 1
METRICS = ("accuracy", "kappa", "f1_macro")


class EvaluationError(ValueError):
    category = "EvaluationError"


class EmptyMatrix(EvaluationError):
    category = "EmptyMatrix"


class DegenerateAgreement(EvaluationError):
    category = "DegenerateAgreement"


class EmptyVoterList(EvaluationError):
    category = "EmptyVoterList"


class ChannelMismatch(EvaluationError):
    category = "ChannelMismatch"


@dataclass
class ConfusionMatrix:
    """Rows are the true class, columns the prediction; column 5 holds ensemble ties."""

    counts: np.ndarray = field(default_factory=lambda: np.zeros((N_CLASSES, N_CLASSES + 1), dtype=np.int64))

    def __post_init__(self):
        counts = np.asarray(self.counts, dtype=np.int64)
        if counts.shape == (N_CLASSES, N_CLASSES):
            counts = np.hstack([counts, np.zeros((N_CLASSES, 1), dtype=np.int64)])
        if counts.shape != (N_CLASSES, N_CLASSES + 1) or np.any(counts < 0):
            raise EvaluationError(f"confusion counts must be non-negative 5x5 or 5x6, got {counts.shape}")
        self.counts = counts

    @classmethod
    def from_labels(cls, truth, predicted) -> ConfusionMatrix:
        counts = np.zeros((N_CLASSES, N_CLASSES + 1), dtype=np.int64)
        np.add.at(counts, (np.asarray(truth, dtype=np.intp), np.asarray(predicted, dtype=np.intp)), 1)
        return cls(counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def classified(self) -> int:
        return int(self.counts[:, :N_CLASSES].sum())

    def __add__(self, other: ConfusionMatrix) -> ConfusionMatrix:
        return ConfusionMatrix(self.counts + other.counts)


def _require_counts(cm: ConfusionMatrix) -> None:
    if cm.total == 0:
        raise EmptyMatrix("confusion matrix is empty")


def accuracy(cm: ConfusionMatrix) -> float:
    """Fraction of all scored segments on the diagonal (ties count as errors)."""
    _require_counts(cm)
    return float(np.trace(cm.counts[:, :N_CLASSES]) / cm.total)


def f1_scores(cm: ConfusionMatrix) -> tuple[float, np.ndarray]:
    """Macro F1 and the per-class vector ``2TP / (2TP + FN + FP)``.

    Classes with no true and no predicted segments get NaN and are left
    out of the macro mean.
    """
    _require_counts(cm)
    c = cm.counts
    tp = np.diag(c[:, :N_CLASSES]).astype(np.float64)
    fn = c.sum(axis=1) - tp
    fp = c[:, :N_CLASSES].sum(axis=0) - tp
    denom = 2 * tp + fn + fp
    per_class = np.full(N_CLASSES, np.nan)
    present = denom > 0
    per_class[present] = 2 * tp[present] / denom[present]
    return float(per_class[present].mean()), per_class


def f1_macro(cm: ConfusionMatrix) -> float:
    return f1_scores(cm)[0]


def cohen_kappa(cm: ConfusionMatrix) -> float:
    _require_counts(cm)
    n = cm.total
    p_o = accuracy(cm)
    rows = cm.counts.sum(axis=1) / n
    cols = cm.counts[:, :N_CLASSES].sum(axis=0) / n
    p_e = float(np.dot(rows, cols))
    if p_e == 1.0:
        raise DegenerateAgreement("chance agreement is 1; kappa is undefined")
    return (p_o - p_e) / (1.0 - p_e)


def kappa_from_agreement(p_o: float, p_e: float) -> float:
    if p_e == 1.0:
        raise DegenerateAgreement("chance agreement is 1; kappa is undefined")
    return (p_o - p_e) / (1.0 - p_e)


# --------------------------------------------------------------------------
# majority vote


def majority_vote(labels) -> int:
    """Most frequent label among the voters, or :data:`TIE` when the top count is shared."""
    labels = list(labels)
    if not labels:
        raise EmptyVoterList("majority vote needs at least one voter")
    ranked = Counter(labels).most_common()
    if len(ranked) > 1 and ranked[0][1] == ranked[1][1]:
        return TIE
    return ranked[0][0]


def majority_vote_array(predictions: np.ndarray) -> np.ndarray:
    """Vectorized vote over ``predictions[voter, segment]``."""
    predictions = np.asarray(predictions, dtype=np.intp)
    if predictions.ndim != 2 or predictions.shape[0] == 0:
        raise EmptyVoterList("need a [voters x segments] prediction array with at least one voter")
    counts = np.zeros((predictions.shape[1], N_CLASSES), dtype=np.int64)
    for row in predictions:
        counts[np.arange(len(row)), row] += 1
    best = counts.max(axis=1)
    winners = (counts == best[:, None]).sum(axis=1)
    return np.where(winners > 1, TIE, counts.argmax(axis=1))


# --------------------------------------------------------------------------
# folds


@dataclass
class FoldResult:
    fold_id: int
    approach: str
    accuracy: float
    kappa: float
    f1_macro: float
    confusion: ConfusionMatrix | None = None
    coverage: float = 1.0
    classified_accuracy: float = math.nan
    test_patient: int | None = None

    @classmethod
    def from_confusion(cls, fold_id: int, approach: str, cm: ConfusionMatrix, test_patient=None) -> FoldResult:
        classified = cm.classified
        return cls(
            fold_id,
            approach,
            accuracy(cm),
            cohen_kappa(cm),
            f1_macro(cm),
            cm,
            classified / cm.total,
            float(np.trace(cm.counts[:, :N_CLASSES]) / classified) if classified else math.nan,
            test_patient,
        )


def _model_channels(model: M.ModelParams) -> tuple[str, ...]:
    approach = model.metadata.get("approach")
    if approach in APPROACH_CHANNELS:
        return APPROACH_CHANNELS[approach]
    return APPROACH_CHANNELS["dual" if model.spec.n_channels == 2 else "fpz_cz"]


def predict_segments(model: M.ModelParams, data: SegmentSet, idx) -> np.ndarray:
    channels = _model_channels(model)
    missing = [c for c in channels if c not in data.channels]
    if missing or len(channels) != model.spec.n_channels:
        raise ChannelMismatch(f"model needs channels {channels}, data has {data.channels}")
    labels, _ = M.predict(model, data.inputs(idx, channels))
    return labels


def evaluate_fold(
    models: list[M.ModelParams],
    data: SegmentSet,
    test_idx,
    fold_id: int,
    approach: str | None = None,
) -> FoldResult:
    """Score one held-out patient with a single model or a majority-vote ensemble."""
    if len(models) not in (1, 3):
        raise EvaluationError(f"evaluate with 1 model or a 3-model ensemble, got {len(models)}")
    test_idx = np.asarray(test_idx, dtype=np.intp)
    truth = np.asarray(data.labels[test_idx], dtype=np.intp)
    if np.any(truth == StageLabel.EXCLUDED):
        raise EvaluationError("excluded segments cannot be scored")
    # test sets hold whole recordings and scaling statistics are per recording
    subset = data.subset(test_idx)
    everything = np.arange(len(subset))
    preds = []
    for m in models:
        scaled = standardize(subset, m.metadata.get("standardize", "none"))
        preds.append(predict_segments(m, scaled, everything))
    predicted = preds[0] if len(models) == 1 else majority_vote_array(np.stack(preds))
    if approach is None:
        approach = models[0].metadata.get("approach", "model") if len(models) == 1 else "ensemble"
    patients = np.unique(data.patient_ids[test_idx])
    test_patient = int(patients[0]) if len(patients) == 1 else None
    return FoldResult.from_confusion(fold_id, approach, ConfusionMatrix.from_labels(truth, predicted), test_patient)


# --------------------------------------------------------------------------
# aggregation and I/O


@dataclass
class MetricSummary:
    mean: float
    std_population: float
    std_sample: float
    n: int


def aggregate_report(results: list[FoldResult]) -> dict[str, dict[str, MetricSummary]]:
    """Per approach and metric: mean, population std (ddof=0) and sample std (ddof=1)."""
    if not results:
        raise EvaluationError("no fold results to aggregate")
    out: dict[str, dict[str, MetricSummary]] = {}
    for approach in dict.fromkeys(r.approach for r in results):
        rows = [r for r in results if r.approach == approach]
        out[approach] = {}
        for metric in METRICS:
            values = np.array([getattr(r, metric) for r in rows], dtype=np.float64)
            out[approach][metric] = MetricSummary(
                float(values.mean()),
                float(values.std(ddof=0)),
                float(values.std(ddof=1)) if len(values) > 1 else 0.0,
                len(values),
            )
    return out


RESULT_FIELDS = ["fold_id", "approach", "accuracy", "kappa", "f1_macro", "coverage"]


def _fmt(x: float) -> str:
    return "" if x is None or (isinstance(x, float) and math.isnan(x)) else repr(float(x))


def write_results_csv(results: list[FoldResult], path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        fh.write(f"# sleepcnn fold results v{RESULTS_VERSION}\n")
        w = csv.writer(fh)
        w.writerow(RESULT_FIELDS)
        for r in results:
            w.writerow([r.fold_id, r.approach, _fmt(r.accuracy), _fmt(r.kappa), _fmt(r.f1_macro), _fmt(r.coverage)])


def read_results_csv(path: str | Path) -> list[FoldResult]:
    """Read a results CSV; ``#`` lines are comments. Empty coverage reads as NaN."""
    with open(path, newline="") as fh:
        lines = [line for line in fh if not line.startswith("#")]
    results = []
    for row in csv.DictReader(lines):
        cov = row.get("coverage", "")
        results.append(
            FoldResult(
                int(row["fold_id"]),
                row["approach"],
                float(row["accuracy"]),
                float(row["kappa"]),
                float(row["f1_macro"]),
                coverage=float(cov) if cov else math.nan,
            )
        )
    return results


def write_confusion_json(results: list[FoldResult], path: str | Path) -> None:
    payload = {
        "version": RESULTS_VERSION,
        "rows": "true class",
        "columns": list(CLASS_NAMES) + ["unclassified"],
        "folds": [
            {
                "fold_id": r.fold_id,
                "approach": r.approach,
                "test_patient": r.test_patient,
                "counts": r.confusion.counts.tolist(),
            }
            for r in results
            if r.confusion is not None
        ],
    }
    Path(path).write_text(json.dumps(payload, indent=1, sort_keys=True))


def read_confusion_json(path: str | Path) -> dict[tuple[str, int], ConfusionMatrix]:
    payload = json.loads(Path(path).read_text())
    return {(f["approach"], f["fold_id"]): ConfusionMatrix(np.array(f["counts"])) for f in payload["folds"]}


def format_report(summary: dict[str, dict[str, MetricSummary]], std: str = "sample") -> str:
    """Aligned text table of ``mean ± std`` per approach."""
    header = f"{'approach':<10}" + "".join(f"{m:>20}" for m in METRICS)
    lines = [header, "-" * len(header)]
    for approach, metrics in summary.items():
        cells = []
        for m in METRICS:
            s = metrics[m]
            spread = s.std_sample if std == "sample" else s.std_population
            cells.append(f"{s.mean:.4f} ± {spread:.4f}".rjust(20))
        lines.append(f"{approach:<10}" + "".join(cells))
    return "\n".join(lines)


def write_summary_csv(summary: dict[str, dict[str, MetricSummary]], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["approach", "metric", "mean", "std_sample", "std_population", "n"])
        for approach, metrics in summary.items():
            for m, s in metrics.items():
                w.writerow([approach, m, repr(s.mean), repr(s.std_sample), repr(s.std_population), s.n])
