"""Reader (and test-fixture writer) for EDF and EDF+ files.

Only the subset of the format needed for polysomnography recordings is
handled: 16-bit samples, continuous records and EDF+ time-stamped
annotation lists (TALs) carried by an ``EDF Annotations`` signal.
"""

from __future__ import annotations

import datetime as dt
import math
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

ANNOTATION_LABEL = "EDF Annotations"

_FIXED_HEADER = 256
_SIGNAL_FIELDS = (
    ("label", 16),
    ("transducer", 80),
    ("physical_dimension", 8),
    ("physical_min", 8),
    ("physical_max", 8),
    ("digital_min", 8),
    ("digital_max", 8),
    ("prefiltering", 80),
    ("samples_per_record", 8),
    ("reserved", 32),
)
_ONSET_RE = re.compile(rb"^[+-]\d+(\.\d*)?$")
_DURATION_RE = re.compile(rb"^\d+(\.\d*)?$")


class EdfError(ValueError):
    """Base class for every EDF parsing/writing failure."""

    category = "EdfError"


class TruncatedHeader(EdfError):
    category = "TruncatedHeader"


class NonNumericField(EdfError):
    category = "NonNumericField"


class InconsistentHeaderSize(EdfError):
    category = "InconsistentHeaderSize"


class UnknownLabel(EdfError):
    category = "UnknownLabel"


class TruncatedRecord(EdfError):
    category = "TruncatedRecord"


class MalformedTal(EdfError):
    category = "MalformedTal"


class NonNumericOnset(EdfError):
    category = "NonNumericOnset"


class RangeOverflow(EdfError):
    category = "RangeOverflow"


class FieldOverflow(EdfError):
    category = "FieldOverflow"


@dataclass
class EdfHeader:
    version: str = "0"
    patient_info: str = "X X X X"
    recording_info: str = "Startdate X X X X"
    start_datetime: dt.datetime = dt.datetime(1989, 4, 24, 16, 13)
    header_size_bytes: int = 256
    reserved: str = ""
    n_data_records: int = 0
    record_duration: float = 30.0
    n_signals: int = 0


@dataclass
class SignalSpec:
    label: str
    physical_min: float = -100.0
    physical_max: float = 100.0
    digital_min: int = -2048
    digital_max: int = 2047
    samples_per_record: int = 1
    transducer: str = ""
    physical_dimension: str = "uV"
    prefiltering: str = ""
    reserved: str = ""

    @property
    def is_annotation(self) -> bool:
        return self.label == ANNOTATION_LABEL

    @property
    def gain(self) -> float:
        return (self.physical_max - self.physical_min) / (self.digital_max - self.digital_min)

    def to_physical(self, digital: np.ndarray) -> np.ndarray:
        d = np.asarray(digital, dtype=np.float64)
        return self.physical_min + (d - self.digital_min) * self.gain

    def to_digital(self, physical: np.ndarray) -> np.ndarray:
        x = np.asarray(physical, dtype=np.float64)
        d = np.rint((x - self.physical_min) / self.gain + self.digital_min)
        if d.size and (d.min() < self.digital_min or d.max() > self.digital_max):
            raise RangeOverflow(
                f"signal {self.label!r}: physical values outside "
                f"[{self.physical_min}, {self.physical_max}]"
            )
        return d.astype(np.int16)


@dataclass(frozen=True)
class AnnotationEvent:
    onset: float
    duration: float
    text: str


@dataclass
class EdfFile:
    """A fully parsed file: header, signal specs, physical samples, annotations."""

    header: EdfHeader
    specs: list[SignalSpec]
    signals: dict[str, np.ndarray] = field(default_factory=dict)
    events: list[AnnotationEvent] = field(default_factory=list)

    def sampling_rate(self, label: str) -> float:
        spec = _find_spec(self.specs, label)
        return spec.samples_per_record / self.header.record_duration


# --------------------------------------------------------------------------
# header


def _text(raw: bytes) -> str:
    return raw.decode("ascii", errors="replace").rstrip(" \x00")


def _int(raw: bytes, name: str) -> int:
    s = raw.decode("ascii", errors="replace").strip()
    try:
        return int(s)
    except ValueError:
        raise NonNumericField(f"{name}: {s!r} is not an integer") from None


def _float(raw: bytes, name: str) -> float:
    s = raw.decode("ascii", errors="replace").strip()
    try:
        value = float(s)
    except ValueError:
        raise NonNumericField(f"{name}: {s!r} is not a number") from None
    if not math.isfinite(value):
        raise NonNumericField(f"{name}: {s!r} is not finite")
    return value


def _datetime(date_raw: bytes, time_raw: bytes) -> dt.datetime:
    date_s = date_raw.decode("ascii", errors="replace")
    time_s = time_raw.decode("ascii", errors="replace")
    try:
        day, month, year = (int(p) for p in date_s.split("."))
        hour, minute, second = (int(p) for p in time_s.split("."))
        # EDF clipping date: yy >= 85 is 19yy
        year += 1900 if year >= 85 else 2000
        return dt.datetime(year, month, day, hour, minute, second)
    except ValueError:
        raise NonNumericField(f"start date/time: {date_s!r} {time_s!r}") from None


def parse_header(data: bytes) -> tuple[EdfHeader, list[SignalSpec]]:
    """Parse the fixed header and the per-signal header block.

    Sample data is not touched.
    """
    if len(data) < _FIXED_HEADER:
        raise TruncatedHeader(f"need {_FIXED_HEADER} header bytes, got {len(data)}")
    n_signals = _int(data[252:256], "number of signals")
    if n_signals < 0:
        raise NonNumericField(f"number of signals is negative: {n_signals}")
    header = EdfHeader(
        version=_text(data[0:8]),
        patient_info=_text(data[8:88]),
        recording_info=_text(data[88:168]),
        start_datetime=_datetime(data[168:176], data[176:184]),
        header_size_bytes=_int(data[184:192], "header size"),
        reserved=_text(data[192:236]),
        n_data_records=_int(data[236:244], "number of data records"),
        record_duration=_float(data[244:252], "record duration"),
        n_signals=n_signals,
    )
    expected = _FIXED_HEADER * (1 + n_signals)
    if header.header_size_bytes != expected:
        raise InconsistentHeaderSize(
            f"header declares {header.header_size_bytes} bytes, "
            f"{n_signals} signals require {expected}"
        )
    if len(data) < expected:
        raise TruncatedHeader(f"header declares {expected} bytes, got {len(data)}")

    columns: dict[str, list[bytes]] = {}
    pos = _FIXED_HEADER
    for name, width in _SIGNAL_FIELDS:
        columns[name] = [data[pos + i * width : pos + (i + 1) * width] for i in range(n_signals)]
        pos += width * n_signals

    specs = []
    for i in range(n_signals):
        spec = SignalSpec(
            label=_text(columns["label"][i]),
            transducer=_text(columns["transducer"][i]),
            physical_dimension=_text(columns["physical_dimension"][i]),
            physical_min=_float(columns["physical_min"][i], "physical minimum"),
            physical_max=_float(columns["physical_max"][i], "physical maximum"),
            digital_min=_int(columns["digital_min"][i], "digital minimum"),
            digital_max=_int(columns["digital_max"][i], "digital maximum"),
            prefiltering=_text(columns["prefiltering"][i]),
            samples_per_record=_int(columns["samples_per_record"][i], "samples per record"),
            reserved=_text(columns["reserved"][i]),
        )
        if spec.samples_per_record < 1:
            raise NonNumericField(f"signal {spec.label!r}: samples per record must be >= 1")
        if not spec.is_annotation:
            if spec.digital_min >= spec.digital_max:
                raise NonNumericField(f"signal {spec.label!r}: digital_min >= digital_max")
            if spec.physical_min == spec.physical_max:
                raise NonNumericField(f"signal {spec.label!r}: physical_min == physical_max")
        specs.append(spec)
    return header, specs


# --------------------------------------------------------------------------
# data records


def _record_layout(data: bytes, header: EdfHeader, specs: list[SignalSpec]) -> tuple[int, int]:
    """Return ``(n_records, record_bytes)``, validating the file extent."""
    record_bytes = 2 * sum(s.samples_per_record for s in specs)
    available = len(data) - header.header_size_bytes
    if available < 0:
        raise TruncatedHeader("file shorter than its header")
    n_records = header.n_data_records
    if n_records == -1:
        if record_bytes == 0:
            return 0, 0
        n_records, rest = divmod(available, record_bytes)
        if rest:
            raise TruncatedRecord(
                f"{available} data bytes is not a whole number of {record_bytes}-byte records"
            )
    elif n_records < 0:
        raise NonNumericField(f"invalid number of data records: {n_records}")
    if n_records * record_bytes > available:
        raise TruncatedRecord(
            f"{n_records} records need {n_records * record_bytes} bytes, file has {available}"
        )
    return n_records, record_bytes


def _records(data: bytes, header: EdfHeader, specs: list[SignalSpec]) -> np.ndarray:
    n_records, record_bytes = _record_layout(data, header, specs)
    body = np.frombuffer(
        data, dtype=np.uint8, count=n_records * record_bytes, offset=header.header_size_bytes
    )
    return body.reshape(n_records, record_bytes)


def _find_spec(specs: list[SignalSpec], label: str) -> SignalSpec:
    for spec in specs:
        if spec.label == label:
            return spec
    raise UnknownLabel(f"no signal labeled {label!r}")


def _signal_bytes(records: np.ndarray, specs: list[SignalSpec], label: str) -> np.ndarray:
    _find_spec(specs, label)
    offset = 0
    for spec in specs:
        width = 2 * spec.samples_per_record
        if spec.label == label:
            return records[:, offset : offset + width]
        offset += width
    raise AssertionError("unreachable")


def read_signal(data: bytes, header: EdfHeader, specs: list[SignalSpec], label: str) -> np.ndarray:
    """Samples of one signal, converted to physical units (float64)."""
    spec = _find_spec(specs, label)
    raw = np.ascontiguousarray(_signal_bytes(_records(data, header, specs), specs, label))
    digital = raw.view("<i2").reshape(-1)
    return spec.to_physical(digital)


def _parse_tal_block(block: bytes) -> list[AnnotationEvent]:
    events = []
    for chunk in block.split(b"\x00"):
        if not chunk:
            continue
        if not chunk.endswith(b"\x14"):
            raise MalformedTal(f"TAL not terminated by 0x14: {chunk[:40]!r}")
        parts = chunk.split(b"\x14")
        stamp, texts = parts[0], parts[1:-1]
        onset_raw, _, duration_raw = stamp.partition(b"\x15")
        if not _ONSET_RE.match(onset_raw):
            raise NonNumericOnset(f"bad TAL onset {onset_raw!r}")
        onset = float(onset_raw)
        duration = 0.0
        if duration_raw:
            if not _DURATION_RE.match(duration_raw):
                raise NonNumericOnset(f"bad TAL duration {duration_raw!r}")
            duration = float(duration_raw)
        for text in texts:
            if text:
                events.append(AnnotationEvent(onset, duration, text.decode("utf-8", errors="replace")))
    return events


def parse_annotations(data: bytes, header: EdfHeader, specs: list[SignalSpec]) -> list[AnnotationEvent]:
    """Events from every ``EDF Annotations`` signal, sorted by onset."""
    annotation_specs = [s for s in specs if s.is_annotation]
    if not annotation_specs:
        return []
    records = _records(data, header, specs)
    events: list[AnnotationEvent] = []
    offset = 0
    for spec in specs:
        width = 2 * spec.samples_per_record
        if spec.is_annotation:
            for record in records[:, offset : offset + width]:
                events.extend(_parse_tal_block(record.tobytes()))
        offset += width
    events.sort(key=lambda e: e.onset)
    return events


def read_edf(data: bytes) -> EdfFile:
    header, specs = parse_header(data)
    _record_layout(data, header, specs)
    signals = {s.label: read_signal(data, header, specs, s.label) for s in specs if not s.is_annotation}
    return EdfFile(header, specs, signals, parse_annotations(data, header, specs))


def read_edf_file(path: str | Path) -> EdfFile:
    return read_edf(Path(path).read_bytes())


# --------------------------------------------------------------------------
# writer (test fixtures only)


def _field(value: str, width: int) -> bytes:
    raw = value.encode("ascii", errors="replace")
    if len(raw) > width:
        raise FieldOverflow(f"{value!r} does not fit in {width} bytes")
    return raw.ljust(width, b" ")


def _number(value: float) -> str:
    if float(value).is_integer():
        return str(int(value))
    return np.format_float_positional(float(value), trim="-")


def _seconds(value: float) -> str:
    text = _number(abs(value))
    return ("-" if value < 0 else "+") + text


def _tal(onset: float, duration: float | None, texts: list[str]) -> bytes:
    out = _seconds(onset).encode()
    if duration:
        out += b"\x15" + _number(duration).encode()
    out += b"\x14" + b"".join(t.encode("utf-8") + b"\x14" for t in texts)
    if not texts:
        out += b"\x14"
    return out + b"\x00"


def write_synthetic_edf(
    header: EdfHeader,
    specs: list[SignalSpec],
    data: list[np.ndarray] | dict[str, np.ndarray],
    events: list[AnnotationEvent] | None = None,
) -> bytes:
    """Serialize signals (physical units) and optional annotations to EDF bytes.

    Size fields of ``header`` (``header_size_bytes``, ``n_signals``,
    ``n_data_records``) are recomputed. When ``events`` is given an
    ``EDF Annotations`` signal is appended and the file is marked EDF+C.
    """
    specs = [s for s in specs if not s.is_annotation]
    if isinstance(data, dict):
        data = [data[s.label] for s in specs]
    if len(data) != len(specs):
        raise ValueError(f"{len(specs)} signal specs but {len(data)} data arrays")

    n_records = None
    for spec, series in zip(specs, data):
        n, rest = divmod(len(series), spec.samples_per_record)
        if rest:
            raise ValueError(f"signal {spec.label!r}: length is not a whole number of records")
        if n_records is not None and n != n_records:
            raise ValueError("signals disagree on the number of data records")
        n_records = n
    if n_records is None:
        n_records = 1 if events else 0
    digital = [spec.to_digital(series) for spec, series in zip(specs, data)]

    all_specs = list(specs)
    reserved = header.reserved
    annotation_blocks: list[bytes] = []
    if events is not None:
        if specs and n_records == 0:
            raise ValueError("annotations need at least one data record of signal samples")
        n_records = max(n_records, 1)
        per_record: list[list[AnnotationEvent]] = [[] for _ in range(n_records)]
        for ev in events:
            i = int(ev.onset // header.record_duration) if header.record_duration > 0 else 0
            per_record[min(max(i, 0), n_records - 1)].append(ev)
        for i, evs in enumerate(per_record):
            block = _tal(i * header.record_duration, None, [])
            block += b"".join(_tal(e.onset, e.duration, [e.text]) for e in evs)
            annotation_blocks.append(block)
        width = max(len(b) for b in annotation_blocks)
        spr = (width + 1) // 2
        all_specs.append(
            SignalSpec(
                label=ANNOTATION_LABEL,
                physical_min=-1,
                physical_max=1,
                digital_min=-32768,
                digital_max=32767,
                samples_per_record=spr,
                physical_dimension="",
            )
        )
        if not reserved.startswith("EDF+"):
            reserved = "EDF+C"

    n_signals = len(all_specs)
    start = header.start_datetime
    out = bytearray()
    out += _field(header.version, 8)
    out += _field(header.patient_info, 80)
    out += _field(header.recording_info, 80)
    out += _field(f"{start.day:02d}.{start.month:02d}.{start.year % 100:02d}", 8)
    out += _field(f"{start.hour:02d}.{start.minute:02d}.{start.second:02d}", 8)
    out += _field(str(_FIXED_HEADER * (1 + n_signals)), 8)
    out += _field(reserved, 44)
    out += _field(str(n_records), 8)
    out += _field(_number(header.record_duration), 8)
    out += _field(str(n_signals), 4)
    for name, width in _SIGNAL_FIELDS:
        for spec in all_specs:
            value = getattr(spec, name)
            if isinstance(value, (int, float)) and not isinstance(value, bool):
                value = _number(value)
            out += _field(value, width)

    for r in range(n_records):
        for spec, series in zip(specs, digital):
            spr = spec.samples_per_record
            out += series[r * spr : (r + 1) * spr].astype("<i2").tobytes()
        if annotation_blocks:
            out += annotation_blocks[r].ljust(2 * all_specs[-1].samples_per_record, b"\x00")
    return bytes(out)
