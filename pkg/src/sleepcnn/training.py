"""Mini-batch Adam training with validation early stopping, and the LOOCV campaign."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from sleepcnn import model as M
from sleepcnn import nn
from sleepcnn.dataset import APPROACH_CHANNELS, FoldPlan, SegmentSet, build_folds, standardize

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    category = "TrainingError"


class EmptySplit(TrainingError):
    category = "EmptySplit"


class NonFiniteLoss(TrainingError):
    category = "NonFiniteLoss"


@dataclass
class TrainConfig:
    approach: str = "dual"
    learning_rate: float = 0.001
    batch_size: int = 20
    max_epochs: int = 100
    patience: int = 10
    validation_fraction: float = 0.10
    seed: int = 0
    standardize: str = "none"
    n_patients: int = 20

    def __post_init__(self):
        if self.approach not in APPROACH_CHANNELS:
            raise ValueError(f"unknown approach {self.approach!r}; choose from {sorted(APPROACH_CHANNELS)}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0.0 < self.validation_fraction < 1.0:
            raise ValueError("validation_fraction must be in (0, 1)")
        if not 1 <= self.patience <= self.max_epochs:
            raise ValueError("patience must be in [1, max_epochs]")

    @property
    def channels(self) -> tuple[str, ...]:
        return APPROACH_CHANNELS[self.approach]


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_acc: float


@dataclass
class TrainHistory:
    records: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    stop_reason: str = "max_epochs"

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "train_loss", "val_loss", "val_acc"])
            for r in self.records:
                w.writerow([r.epoch, repr(r.train_loss), repr(r.val_loss), repr(r.val_acc)])

    @classmethod
    def read_csv(cls, path: str | Path, stop_reason: str = "unknown") -> TrainHistory:
        with open(path, newline="") as fh:
            records = [
                EpochRecord(int(row["epoch"]), float(row["train_loss"]), float(row["val_loss"]), float(row["val_acc"]))
                for row in csv.DictReader(fh)
            ]
        best = min(records, key=lambda r: r.val_loss).epoch if records else 0
        return cls(records, best, stop_reason)


class EarlyStopping:
    """Tracks the best validation loss; any strict decrease counts as improvement."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = math.inf
        self.best_epoch = 0
        self.waited = 0

    def update(self, epoch: int, val_loss: float) -> bool:
        """Record one pass. Returns True when this pass improved on the best."""
        if val_loss < self.best:
            self.best, self.best_epoch, self.waited = val_loss, epoch, 0
            return True
        self.waited += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.waited >= self.patience


def evaluate_loss(model: M.ModelParams, x: np.ndarray, y: np.ndarray, batch_size: int = 256) -> tuple[float, float]:
    """Mean cross-entropy and accuracy in inference mode."""
    total, correct = 0.0, 0
    for i in range(0, len(x), batch_size):
        logits = M.logits(model, x[i : i + batch_size])
        losses, probs, _ = nn.softmax_cross_entropy(logits, y[i : i + batch_size])
        total += losses.sum()
        correct += int((probs.argmax(axis=1) == y[i : i + batch_size]).sum())
    return total / len(x), correct / len(x)


def fit(
    x_train: np.ndarray,
    y_train: np.ndarray,
    x_val: np.ndarray,
    y_val: np.ndarray,
    config: TrainConfig,
    seed: int,
) -> tuple[M.ModelParams, TrainHistory]:
    """Train from scratch on the given arrays and return the best-validation snapshot.

    Only training and validation data are ever passed in; test data cannot
    influence a gradient step or the stopping decision.
    """
    if len(x_train) == 0 or len(x_val) == 0:
        raise EmptySplit(f"train has {len(x_train)} segments, validation has {len(x_val)}")
    rng = nn.make_rng(seed)
    model = M.build_model(x_train.shape[1], seed)
    params = model.as_list()
    adam = nn.AdamState.for_params(params, lr=config.learning_rate)
    stopper = EarlyStopping(config.patience)
    history = TrainHistory()
    best = model.copy()

    for epoch in range(1, config.max_epochs + 1):
        order = rng.permutation(len(x_train))
        batch_losses = []
        for start in range(0, len(order), config.batch_size):
            idx = order[start : start + config.batch_size]
            loss, grads, _ = M.loss_and_grads(model, x_train[idx], y_train[idx], training=True, rng=rng)
            if not math.isfinite(loss):
                raise NonFiniteLoss(f"epoch {epoch}, batch at {start}: loss {loss}")
            nn.adam_step(params, [grads[n] for n in model.names], adam)
            batch_losses.append(loss * len(idx))
        train_loss = float(sum(batch_losses) / len(x_train))
        val_loss, val_acc = evaluate_loss(model, x_val, y_val)
        if not math.isfinite(val_loss):
            raise NonFiniteLoss(f"epoch {epoch}: validation loss {val_loss}")
        history.records.append(EpochRecord(epoch, train_loss, float(val_loss), float(val_acc)))
        if stopper.update(epoch, val_loss):
            best = model.copy()
        log.debug("epoch %d train %.4f val %.4f acc %.4f", epoch, train_loss, val_loss, val_acc)
        if stopper.should_stop:
            history.stop_reason = "early_stop"
            break
    history.best_epoch = stopper.best_epoch
    best.metadata.update({"seed": seed, "best_epoch": stopper.best_epoch, "stop_reason": history.stop_reason})
    return best, history


def train_fold(data: SegmentSet, plan: FoldPlan, config: TrainConfig) -> tuple[M.ModelParams, TrainHistory]:
    channels = config.channels
    # the test indices in ``plan`` are deliberately never read here
    x_train = data.inputs(plan.train, channels)
    x_val = data.inputs(plan.validation, channels)
    y_train = np.asarray(data.labels[plan.train], dtype=np.intp)
    y_val = np.asarray(data.labels[plan.validation], dtype=np.intp)
    model, history = fit(x_train, y_train, x_val, y_val, config, plan.seed)
    model.metadata.update(
        {
            "fold_id": plan.fold_id,
            "test_patient": plan.test_patient,
            "approach": config.approach,
            "standardize": config.standardize,
        }
    )
    return model, history


# --------------------------------------------------------------------------
# campaign


def fold_paths(out_dir: Path, approach: str, fold_id: int) -> tuple[Path, Path]:
    base = Path(out_dir) / approach
    return base / f"fold_{fold_id:02d}.model", base / f"fold_{fold_id:02d}_history.csv"


def dataset_checksum(data: SegmentSet) -> str:
    h = hashlib.sha256()
    for arr in (data.patient_ids, data.nights, data.indices, data.labels):
        h.update(np.ascontiguousarray(arr, dtype="<i8").tobytes())
    for i in range(0, len(data), 1024):
        h.update(np.ascontiguousarray(data.samples[i : i + 1024], dtype="<f8").tobytes())
    return h.hexdigest()


_WORKER_DATA: SegmentSet | None = None


def _run_one(args):
    plan, config, out_dir = args
    model, history = train_fold(_WORKER_DATA, plan, config)
    model_path, history_path = fold_paths(out_dir, config.approach, plan.fold_id)
    M.save_model(model, model_path)
    history.write_csv(history_path)
    return plan.fold_id, history.stop_reason, history.best_epoch


def run_loocv(
    data: SegmentSet,
    config: TrainConfig,
    out_dir: str | Path,
    folds: list[int] | None = None,
    force: bool = False,
    workers: int = 1,
) -> list[tuple[int, M.ModelParams, TrainHistory]]:
    """Train (or resume) one model per held-out patient for ``config.approach``.

    Folds whose model file already exists are loaded instead of retrained
    unless ``force``. Writes ``<out>/<approach>/fold_XX.model``, the
    matching history CSV, and ``manifest.json``.
    """
    global _WORKER_DATA
    out_dir = Path(out_dir)
    (out_dir / config.approach).mkdir(parents=True, exist_ok=True)
    data = standardize(data, config.standardize)
    plans = build_folds(data, config.seed, config.validation_fraction, config.n_patients)
    if folds is not None:
        wanted = set(folds)
        plans = [p for p in plans if p.fold_id in wanted]

    manifest_path = out_dir / config.approach / "manifest.json"
    manifest = {
        "config": asdict(config),
        "data_sha256": dataset_checksum(data),
        "folds": {
            str(p.fold_id): {"test_patient": p.test_patient, "seed": p.seed,
                             "n_train": len(p.train), "n_validation": len(p.validation), "n_test": len(p.test)}
            for p in plans
        },
    }
    if manifest_path.exists():
        old = json.loads(manifest_path.read_text())
        old.setdefault("folds", {}).update(manifest["folds"])
        manifest["folds"] = old["folds"]
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True))

    todo = []
    for plan in plans:
        model_path, _ = fold_paths(out_dir, config.approach, plan.fold_id)
        if model_path.exists() and not force:
            log.info("%s fold %d: already trained, skipping", config.approach, plan.fold_id)
            continue
        todo.append((plan, config, out_dir))

    _WORKER_DATA = data
    try:
        if workers > 1 and len(todo) > 1:
            with ProcessPoolExecutor(max_workers=workers) as pool:
                for fold_id, reason, best_epoch in pool.map(_run_one, todo):
                    log.info("%s fold %d done (%s, best epoch %d)", config.approach, fold_id, reason, best_epoch)
        else:
            for item in todo:
                fold_id, reason, best_epoch = _run_one(item)
                log.info("%s fold %d done (%s, best epoch %d)", config.approach, fold_id, reason, best_epoch)
    finally:
        _WORKER_DATA = None

    results = []
    for plan in plans:
        model_path, history_path = fold_paths(out_dir, config.approach, plan.fold_id)
        trained = M.load_model(model_path)
        history = TrainHistory.read_csv(history_path, trained.metadata.get("stop_reason", "unknown"))
        results.append((plan.fold_id, trained, history))
    return results
