"""Labelled 30 s segments, the on-disk segment cache, and patient folds."""

from __future__ import annotations

import enum
import json
import logging
import re
import struct
import warnings
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from sleepcnn import edf
from sleepcnn.nn import make_rng

log = logging.getLogger(__name__)

EPOCH_SECONDS = 30
SAMPLING_RATE = 100
SEGMENT_SAMPLES = EPOCH_SECONDS * SAMPLING_RATE
CHANNELS = ("EEG Fpz-Cz", "EEG Pz-Oz")
APPROACH_CHANNELS = {
    "fpz_cz": ("EEG Fpz-Cz",),
    "pz_oz": ("EEG Pz-Oz",),
    "dual": ("EEG Fpz-Cz", "EEG Pz-Oz"),
}


class StageLabel(enum.IntEnum):
    W = 0
    N1 = 1
    N2 = 2
    N3 = 3
    REM = 4
    EXCLUDED = -1


CLASSES = (StageLabel.W, StageLabel.N1, StageLabel.N2, StageLabel.N3, StageLabel.REM)
CLASS_NAMES = tuple(c.name for c in CLASSES)

_RK_TO_AASM = {
    "Sleep stage W": StageLabel.W,
    "Sleep stage 1": StageLabel.N1,
    "Sleep stage 2": StageLabel.N2,
    "Sleep stage 3": StageLabel.N3,
    "Sleep stage 4": StageLabel.N3,
    "Sleep stage R": StageLabel.REM,
    "Movement time": StageLabel.EXCLUDED,
    "Sleep stage ?": StageLabel.EXCLUDED,
}


class DatasetError(ValueError):
    category = "DatasetError"


class UnknownAnnotationText(DatasetError):
    category = "UnknownAnnotationText"


class RateMismatch(DatasetError):
    category = "RateMismatch"


class MisalignedEvent(DatasetError):
    category = "MisalignedEvent"


class WrongPatientCount(DatasetError):
    category = "WrongPatientCount"


class ZeroVariance(DatasetError):
    category = "ZeroVariance"


class CacheFormatError(DatasetError):
    category = "CacheFormatError"


class ShortSignalWarning(UserWarning):
    """Annotated windows running past the end of the signal were dropped."""

    def __init__(self, dropped: int, message: str):
        super().__init__(message)
        self.dropped = dropped


def remap_label(text: str) -> StageLabel:
    try:
        return _RK_TO_AASM[text]
    except KeyError:
        raise UnknownAnnotationText(f"unknown hypnogram annotation {text!r}") from None


@dataclass
class Recording:
    patient_id: int
    night: int
    channels: dict[str, np.ndarray]
    sampling_rates: dict[str, float]
    events: list[edf.AnnotationEvent] = field(default_factory=list)


@dataclass
class Segment:
    patient_id: int
    night: int
    index: int
    samples: np.ndarray  # n_channels x 3000
    label: StageLabel


def segment_recording(recording: Recording, channel_labels=CHANNELS) -> list[Segment]:
    """Cut every hypnogram event into consecutive 30 s windows.

    Excluded windows are returned too; callers filter them. Windows that
    would run past the end of the signal are dropped and reported through
    a :class:`ShortSignalWarning`.
    """
    for label in channel_labels:
        if label not in recording.channels:
            raise edf.UnknownLabel(f"recording has no channel {label!r}")
        rate = recording.sampling_rates[label]
        if rate != SAMPLING_RATE:
            raise RateMismatch(f"{label}: {rate} Hz, expected {SAMPLING_RATE} Hz")
    signal = np.stack([recording.channels[label] for label in channel_labels])
    n_available = signal.shape[1]

    segments = []
    dropped = 0
    for event in recording.events:
        label = remap_label(event.text)
        n_windows, rest = divmod(event.duration, EPOCH_SECONDS)
        if rest > 1e-9 or event.onset % EPOCH_SECONDS > 1e-9:
            raise MisalignedEvent(
                f"event {event.text!r} at {event.onset}s lasting {event.duration}s "
                f"is not aligned to {EPOCH_SECONDS}s windows"
            )
        first = int(round(event.onset / EPOCH_SECONDS))
        for k in range(int(n_windows)):
            index = first + k
            start = index * SEGMENT_SAMPLES
            if start + SEGMENT_SAMPLES > n_available:
                dropped += 1
                continue
            segments.append(
                Segment(
                    recording.patient_id,
                    recording.night,
                    index,
                    signal[:, start : start + SEGMENT_SAMPLES].copy(),
                    label,
                )
            )
    if dropped:
        warnings.warn(
            ShortSignalWarning(
                dropped,
                f"patient {recording.patient_id} night {recording.night}: "
                f"{dropped} annotated windows past the signal end were dropped",
            ),
            stacklevel=2,
        )
    return segments


# --------------------------------------------------------------------------
# bulk container


@dataclass
class SegmentSet:
    """Column-oriented segment storage: samples ``[N, C, 3000]`` plus per-segment metadata."""

    channels: tuple[str, ...]
    samples: np.ndarray
    labels: np.ndarray
    patient_ids: np.ndarray
    nights: np.ndarray
    indices: np.ndarray

    def __len__(self) -> int:
        return len(self.labels)

    @classmethod
    def from_segments(cls, segments: list[Segment], channels=CHANNELS) -> SegmentSet:
        n = len(segments)
        samples = np.empty((n, len(channels), SEGMENT_SAMPLES))
        for i, s in enumerate(segments):
            samples[i] = s.samples
        return cls(
            tuple(channels),
            samples,
            np.array([int(s.label) for s in segments], dtype=np.int64),
            np.array([s.patient_id for s in segments], dtype=np.int64),
            np.array([s.night for s in segments], dtype=np.int64),
            np.array([s.index for s in segments], dtype=np.int64),
        )

    def subset(self, idx) -> SegmentSet:
        idx = np.asarray(idx, dtype=np.intp)
        return SegmentSet(
            self.channels,
            self.samples[idx],
            self.labels[idx],
            self.patient_ids[idx],
            self.nights[idx],
            self.indices[idx],
        )

    def usable(self) -> SegmentSet:
        return self.subset(np.flatnonzero(self.labels != StageLabel.EXCLUDED))

    def channel_index(self, labels) -> list[int]:
        missing = [c for c in labels if c not in self.channels]
        if missing:
            raise edf.UnknownLabel(f"segment set lacks channels {missing}")
        return [self.channels.index(c) for c in labels]

    def inputs(self, idx, channel_labels) -> np.ndarray:
        ch = self.channel_index(channel_labels)
        idx = np.asarray(idx, dtype=np.intp)
        return np.ascontiguousarray(self.samples[idx][:, ch, :], dtype=np.float64)

    def class_counts(self) -> dict[str, int]:
        counts = Counter(int(v) for v in self.labels)
        return {c.name: counts.get(int(c), 0) for c in CLASSES}

    def segment(self, i: int) -> Segment:
        return Segment(
            int(self.patient_ids[i]),
            int(self.nights[i]),
            int(self.indices[i]),
            np.asarray(self.samples[i]),
            StageLabel(int(self.labels[i])),
        )


# Cache layout (all little-endian):
#   magic b"SLEEPSEG" | u16 version | u32 header_len | header JSON (utf-8, sorted keys)
#   | zero padding to a multiple of 8 bytes
#   | int64[N] patient_ids | int64[N] nights | int64[N] indices | int64[N] labels
#   | float64[N * C * 3000] samples, segment-major then channel-major
CACHE_MAGIC = b"SLEEPSEG"
CACHE_VERSION = 1


def save_cache(segments: SegmentSet, path: str | Path) -> None:
    n = len(segments)
    header = json.dumps(
        {
            "channels": list(segments.channels),
            "n_segments": n,
            "segment_samples": SEGMENT_SAMPLES,
            "sampling_rate": SAMPLING_RATE,
            "label_codes": {c.name: int(c) for c in StageLabel},
            "meta_columns": ["patient_id", "night", "index", "label"],
            "sample_dtype": "<f8",
        },
        sort_keys=True,
    ).encode()
    prefix = CACHE_MAGIC + struct.pack("<HI", CACHE_VERSION, len(header)) + header
    prefix += b"\x00" * (-len(prefix) % 8)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(prefix)
        for column in (segments.patient_ids, segments.nights, segments.indices, segments.labels):
            fh.write(np.ascontiguousarray(column, dtype="<i8").tobytes())
        fh.write(np.ascontiguousarray(segments.samples, dtype="<f8").tobytes())


def load_cache(path: str | Path, mmap: bool = True) -> SegmentSet:
    path = Path(path)
    with open(path, "rb") as fh:
        head = fh.read(len(CACHE_MAGIC) + 6)
        if head[: len(CACHE_MAGIC)] != CACHE_MAGIC or len(head) < len(CACHE_MAGIC) + 6:
            raise CacheFormatError(f"{path} is not a segment cache")
        version, header_len = struct.unpack_from("<HI", head, len(CACHE_MAGIC))
        if version != CACHE_VERSION:
            raise CacheFormatError(f"cache version {version}, expected {CACHE_VERSION}")
        header = json.loads(fh.read(header_len))
    offset = len(CACHE_MAGIC) + 6 + header_len
    offset += -offset % 8
    n = header["n_segments"]
    c = len(header["channels"])
    expected = offset + 4 * 8 * n + 8 * n * c * header["segment_samples"]
    if path.stat().st_size != expected:
        raise CacheFormatError(f"{path}: size {path.stat().st_size}, header implies {expected}")
    meta = np.fromfile(path, dtype="<i8", count=4 * n, offset=offset).reshape(4, n)
    shape = (n, c, header["segment_samples"])
    sample_offset = offset + 4 * 8 * n
    if mmap and n:
        samples = np.memmap(path, dtype="<f8", mode="r", offset=sample_offset, shape=shape)
    else:
        samples = np.fromfile(path, dtype="<f8", count=int(np.prod(shape)), offset=sample_offset).reshape(shape)
    return SegmentSet(
        tuple(header["channels"]),
        samples,
        meta[3].astype(np.int64),
        meta[0].astype(np.int64),
        meta[1].astype(np.int64),
        meta[2].astype(np.int64),
    )


# --------------------------------------------------------------------------
# standardization


def standardize(segments: SegmentSet, mode: str = "none") -> SegmentSet:
    """``none`` or ``per_recording_zscore`` (per patient, night and channel)."""
    if mode == "none":
        return segments
    if mode != "per_recording_zscore":
        raise ValueError(f"unknown standardization mode {mode!r}")
    out = np.array(segments.samples, dtype=np.float64, copy=True)
    keys = np.stack([segments.patient_ids, segments.nights], axis=1)
    for key in np.unique(keys, axis=0):
        rows = np.flatnonzero((keys == key).all(axis=1))
        block = out[rows]  # n, c, t
        mean = block.mean(axis=(0, 2))
        std = block.std(axis=(0, 2))
        if np.any(std == 0.0):
            raise ZeroVariance(f"patient {key[0]} night {key[1]}: constant channel")
        out[rows] = (block - mean[None, :, None]) / std[None, :, None]
    return SegmentSet(
        segments.channels, out, segments.labels, segments.patient_ids, segments.nights, segments.indices
    )


# --------------------------------------------------------------------------
# folds


@dataclass
class FoldPlan:
    fold_id: int
    test_patient: int
    train: np.ndarray
    validation: np.ndarray
    test: np.ndarray
    seed: int


def _round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


def stratified_validation(labels: np.ndarray, fraction: float, rng: np.random.Generator) -> np.ndarray:
    """Positions (into ``labels``) of a class-stratified random sample of size round(fraction * n).

    Per-class quotas use largest-remainder rounding so the total is exact.
    """
    n = len(labels)
    target = _round_half_up(fraction * n)
    classes, counts = np.unique(labels, return_counts=True)
    exact = fraction * counts
    quota = np.floor(exact).astype(int)
    remainder = target - quota.sum()
    order = np.lexsort((classes, -(exact - quota)))
    quota[order[:remainder]] += 1
    picked = []
    for cls, q in zip(classes, quota):
        pool = np.flatnonzero(labels == cls)
        picked.append(rng.choice(pool, size=q, replace=False))
    return np.sort(np.concatenate(picked)) if picked else np.zeros(0, dtype=np.intp)


def build_folds(
    segments: SegmentSet,
    seed: int,
    validation_fraction: float = 0.10,
    n_patients: int | None = 20,
) -> list[FoldPlan]:
    """One fold per patient: that patient's segments are the test set.

    Validation is a stratified 10% (by default) of the other patients'
    segments, drawn with the fold seed ``seed + fold_id``.
    """
    if np.any(segments.labels == StageLabel.EXCLUDED):
        raise DatasetError("excluded segments must be filtered before building folds")
    patients = np.unique(segments.patient_ids)
    if n_patients is not None and len(patients) != n_patients:
        raise WrongPatientCount(f"expected {n_patients} patients, found {len(patients)}")
    if len(patients) < 2:
        raise WrongPatientCount("need at least two patients for leave-one-patient-out")
    folds = []
    for fold_id, patient in enumerate(patients, start=1):
        test = np.flatnonzero(segments.patient_ids == patient)
        rest = np.flatnonzero(segments.patient_ids != patient)
        fold_seed = seed + fold_id
        val_pos = stratified_validation(segments.labels[rest], validation_fraction, make_rng(fold_seed))
        is_val = np.zeros(len(rest), dtype=bool)
        is_val[val_pos] = True
        folds.append(FoldPlan(fold_id, int(patient), rest[~is_val], rest[is_val], test, fold_seed))
    return folds


# --------------------------------------------------------------------------
# Sleep-EDF corpus discovery

# SC4ssN*: sleep-cassette subject ss, night N. ST7* files are the medicated cohort.
_SC_NAME = re.compile(r"^SC4(\d\d)(\d)")
_ST_NAME = re.compile(r"^ST7")


@dataclass
class CorpusFile:
    patient_id: int
    night: int
    psg: Path
    hypnogram: Path | None


def find_corpus(data_dir: str | Path) -> list[CorpusFile]:
    """Pair ``SC4ssN*-PSG.edf`` files with their ``*-Hypnogram.edf`` companions.

    Patient ids are 1-based (subject 00 -> patient 1).
    """
    data_dir = Path(data_dir)
    psgs, hyps = {}, {}
    skipped = 0
    for path in sorted(data_dir.rglob("*.edf")):
        if _ST_NAME.match(path.name):
            skipped += 1
            continue
        m = _SC_NAME.match(path.name)
        if not m:
            continue
        key = (int(m.group(1)) + 1, int(m.group(2)))
        if path.name.endswith("-Hypnogram.edf"):
            hyps[key] = path
        elif path.name.endswith("-PSG.edf"):
            psgs[key] = path
    if skipped:
        log.info("ignored %d medicated-cohort (ST7*) files", skipped)
    return [CorpusFile(k[0], k[1], psgs[k], hyps.get(k)) for k in sorted(psgs)]


def load_recording(
    psg_path: str | Path,
    hypnogram_path: str | Path | None,
    patient_id: int,
    night: int,
    channel_labels=CHANNELS,
) -> Recording:
    """Read the EEG channels and hypnogram of one night.

    Annotations are taken from the hypnogram file when given, otherwise
    from any ``EDF Annotations`` signal in the PSG file. Hypnogram onsets
    are shifted by the difference between the two files' start times.
    """
    raw = Path(psg_path).read_bytes()
    header, specs = edf.parse_header(raw)
    channels, rates = {}, {}
    for label in channel_labels:
        spec = next((s for s in specs if s.label == label), None)
        if spec is None:
            raise edf.UnknownLabel(f"{psg_path}: no channel {label!r}")
        channels[label] = edf.read_signal(raw, header, specs, label)
        rates[label] = spec.samples_per_record / header.record_duration
    events = edf.parse_annotations(raw, header, specs)
    if hypnogram_path is not None:
        hraw = Path(hypnogram_path).read_bytes()
        hheader, hspecs = edf.parse_header(hraw)
        shift = (hheader.start_datetime - header.start_datetime).total_seconds()
        events = [
            edf.AnnotationEvent(e.onset + shift, e.duration, e.text)
            for e in edf.parse_annotations(hraw, hheader, hspecs)
        ]
    return Recording(patient_id, night, channels, rates, events)


def prepare_dataset(data_dir: str | Path, channel_labels=CHANNELS) -> SegmentSet:
    """Segment every night found in ``data_dir``; excluded windows are dropped."""
    files = find_corpus(data_dir)
    if not files:
        raise DatasetError(f"no SC4*-PSG.edf recordings under {data_dir}")
    segments: list[Segment] = []
    for f in files:
        rec = load_recording(f.psg, f.hypnogram, f.patient_id, f.night, channel_labels)
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always", ShortSignalWarning)
            segs = segment_recording(rec, channel_labels)
        for w in caught:
            log.warning("%s", w.message)
        segments.extend(s for s in segs if s.label != StageLabel.EXCLUDED)
    return SegmentSet.from_segments(segments, channel_labels)
