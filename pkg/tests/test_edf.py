import datetime as dt

import numpy as np
import pytest
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from sleepcnn import edf
from sleepcnn.edf import AnnotationEvent, EdfHeader, SignalSpec

ROUND_TRIP_CASES = 1000


def _tal_file(blocks: list[bytes]) -> bytes:
    """Hand-built EDF+ file whose single annotation signal holds ``blocks`` (one per record)."""
    width = max(len(b) for b in blocks)
    width += width % 2
    spr = width // 2
    header = bytearray()
    header += b"0".ljust(8) + b"X".ljust(80) + b"Startdate X".ljust(80)
    header += b"01.01.01" + b"00.00.00" + b"512".ljust(8) + b"EDF+C".ljust(44)
    header += str(len(blocks)).encode().ljust(8) + b"1".ljust(8) + b"1".ljust(4)
    header += b"EDF Annotations".ljust(16) + b"".ljust(80) + b"".ljust(8)
    header += b"-1".ljust(8) + b"1".ljust(8) + b"-32768".ljust(8) + b"32767".ljust(8)
    header += b"".ljust(80) + str(spr).encode().ljust(8) + b"".ljust(32)
    assert len(header) == 512
    return bytes(header) + b"".join(b.ljust(width, b"\x00") for b in blocks)


def _events(blocks):
    data = _tal_file(blocks)
    header, specs = edf.parse_header(data)
    return edf.parse_annotations(data, header, specs)


# -- TAL grammar -----------------------------------------------------------


def test_tal_onset_duration_text():
    events = _events([b"+0\x1530\x14Sleep stage W\x14\x00"])
    assert events == [AnnotationEvent(0.0, 30.0, "Sleep stage W")]


def test_tal_without_duration_defaults_to_zero():
    events = _events([b"+12.5\x14Lights off\x14\x00"])
    assert events == [AnnotationEvent(12.5, 0.0, "Lights off")]


def test_tal_several_texts_share_onset():
    events = _events([b"+60\x1530\x14a\x14b\x14\x00"])
    assert events == [AnnotationEvent(60.0, 30.0, "a"), AnnotationEvent(60.0, 30.0, "b")]


def test_tal_timekeeping_and_padding_are_skipped():
    block = b"+0\x14\x14\x00" + b"+30\x1530\x14Sleep stage 1\x14\x00" + b"\x00" * 9
    assert _events([block]) == [AnnotationEvent(30.0, 30.0, "Sleep stage 1")]


def test_tal_events_sorted_across_records():
    blocks = [b"+0\x14\x14\x00+90\x1530\x14late\x14\x00", b"+1\x14\x14\x00+5\x1510\x14early\x14\x00"]
    events = _events(blocks)
    assert [e.text for e in events] == ["early", "late"]
    assert all(e.text for e in events)


def test_tal_negative_onset():
    assert _events([b"-0.5\x14edge\x14\x00"]) == [AnnotationEvent(-0.5, 0.0, "edge")]


def test_tal_missing_terminator():
    with pytest.raises(edf.MalformedTal):
        _events([b"+0\x1530\x14Sleep stage W\x00"])


@pytest.mark.parametrize("stamp", [b"0", b"+abc", b"+1e3", b""])
def test_tal_bad_onset(stamp):
    with pytest.raises(edf.NonNumericOnset):
        _events([stamp + b"\x14text\x14\x00"])


def test_tal_bad_duration():
    with pytest.raises(edf.NonNumericOnset):
        _events([b"+0\x15x\x14text\x14\x00"])


def test_hypnogram_of_four_events_round_trips():
    events = [
        AnnotationEvent(0.0, 630.0, "Sleep stage W"),
        AnnotationEvent(630.0, 90.0, "Sleep stage 1"),
        AnnotationEvent(720.0, 1200.0, "Sleep stage 2"),
        AnnotationEvent(1920.0, 30.0, "Sleep stage ?"),
    ]
    data = edf.write_synthetic_edf(EdfHeader(record_duration=0), [], [], events)
    assert edf.read_edf(data).events == events


# -- header -----------------------------------------------------------------


def test_empty_file_is_bare_header():
    data = edf.write_synthetic_edf(EdfHeader(), [], [])
    assert len(data) == 256
    parsed = edf.read_edf(data)
    assert parsed.header.n_signals == 0
    assert parsed.header.header_size_bytes == 256
    assert parsed.specs == [] and parsed.events == []


def test_two_signal_header_round_trips():
    header = EdfHeader(patient_info="P 1", recording_info="Startdate 24-APR-1989 R")
    specs = [SignalSpec("EEG Fpz-Cz", samples_per_record=4), SignalSpec("EEG Pz-Oz", samples_per_record=2)]
    data = edf.write_synthetic_edf(header, specs, [np.zeros(8), np.zeros(4)])
    parsed_header, parsed_specs = edf.parse_header(data)
    assert parsed_specs == specs
    assert parsed_header.patient_info == header.patient_info
    assert parsed_header.n_signals == 2
    assert parsed_header.header_size_bytes == 768
    assert parsed_header.n_data_records == 2


def _corrupt(offset: int, value: bytes, n_signals: int = 2) -> bytes:
    specs = [SignalSpec(f"s{i}") for i in range(n_signals)]
    data = bytearray(edf.write_synthetic_edf(EdfHeader(), specs, [np.zeros(3)] * n_signals))
    data[offset : offset + len(value)] = value
    return bytes(data)


def test_inconsistent_header_size():
    data = _corrupt(184, b"512     ")
    with pytest.raises(edf.InconsistentHeaderSize):
        edf.parse_header(data[:256])
    with pytest.raises(edf.InconsistentHeaderSize):
        edf.parse_header(data)


def test_truncated_header():
    with pytest.raises(edf.TruncatedHeader):
        edf.parse_header(b"0" * 100)
    data = _corrupt(0, b"0")
    with pytest.raises(edf.TruncatedHeader):
        edf.parse_header(data[:700])


@pytest.mark.parametrize(
    "offset,value",
    [(236, b"abc     "), (252, b"2x  "), (244, b"??      "), (184, b"7.5e    ")],
)
def test_non_numeric_fields(offset, value):
    with pytest.raises(edf.NonNumericField):
        edf.parse_header(_corrupt(offset, value))


def test_non_numeric_signal_field():
    # physical_min block starts after label(16)+transducer(80)+physdim(8) per signal
    offset = 256 + 2 * (16 + 80 + 8)
    with pytest.raises(edf.NonNumericField):
        edf.parse_header(_corrupt(offset, b"minus1  "))


def test_truncated_record():
    data = _corrupt(0, b"0")
    with pytest.raises(edf.TruncatedRecord):
        edf.read_edf(data[:-1])


def test_unknown_record_count_resolved_from_length():
    data = _corrupt(236, b"-1      ")
    parsed = edf.read_edf(data)
    assert parsed.header.n_data_records == -1
    assert len(parsed.signals["s0"]) == 3
    with pytest.raises(edf.TruncatedRecord):
        edf.read_edf(data[:-2])


def test_unknown_label():
    data = _corrupt(0, b"0")
    header, specs = edf.parse_header(data)
    with pytest.raises(edf.UnknownLabel):
        edf.read_signal(data, header, specs, "EEG C3")


def test_non_ascii_text_is_replaced():
    data = _corrupt(8, b"\xff\xfe")
    header, _ = edf.parse_header(data)
    assert "�" in header.patient_info


def test_parse_does_not_read_past_extent():
    data = _corrupt(0, b"0")
    padded = data + b"\x7f" * 64
    assert np.array_equal(edf.read_edf(padded).signals["s0"], edf.read_edf(data).signals["s0"])


def test_clipping_year():
    header = EdfHeader(start_datetime=dt.datetime(1989, 4, 24, 16, 13, 5))
    assert edf.parse_header(edf.write_synthetic_edf(header, [], []))[0].start_datetime == header.start_datetime
    header = EdfHeader(start_datetime=dt.datetime(2019, 1, 2, 3, 4, 5))
    assert edf.parse_header(edf.write_synthetic_edf(header, [], []))[0].start_datetime == header.start_datetime


# -- samples ----------------------------------------------------------------


def test_linear_map_endpoints_and_midpoint():
    spec = SignalSpec("x", physical_min=-100, physical_max=100, digital_min=-2048, digital_max=2047)
    out = spec.to_physical(np.array([-2048, 2047, 0]))
    assert out[0] == -100.0
    assert out[1] == 100.0
    assert out[2] == pytest.approx(-100 + 2048 * 200 / 4095, abs=1e-12)


def test_samples_decode_through_file():
    spec = SignalSpec("x", physical_min=-100, physical_max=100, digital_min=-2048, digital_max=2047, samples_per_record=3)
    physical = spec.to_physical(np.array([-2048, 2047, 0]))
    parsed = edf.read_edf(edf.write_synthetic_edf(EdfHeader(), [spec], [physical]))
    assert parsed.signals["x"][0] == -100.0
    assert parsed.signals["x"][1] == 100.0
    assert parsed.signals["x"][2] == pytest.approx(-100 + 2048 * 200 / 4095, abs=1e-12)


def test_constant_signal():
    spec = SignalSpec("c", physical_min=-10, physical_max=10, digital_min=-10, digital_max=10, samples_per_record=5)
    parsed = edf.read_edf(edf.write_synthetic_edf(EdfHeader(), [spec], [np.full(5, 3.0)]))
    assert parsed.signals["c"].tolist() == [3.0] * 5


def test_range_overflow():
    spec = SignalSpec("x", physical_min=-1, physical_max=1, digital_min=-100, digital_max=100, samples_per_record=2)
    with pytest.raises(edf.RangeOverflow):
        edf.write_synthetic_edf(EdfHeader(), [spec], [np.array([0.0, 1.5])])


def test_field_overflow():
    with pytest.raises(edf.FieldOverflow):
        edf.write_synthetic_edf(EdfHeader(), [SignalSpec("a label that is far too long")], [np.zeros(1)])


def test_sampling_rate():
    spec = SignalSpec("x", samples_per_record=3000)
    parsed = edf.read_edf(edf.write_synthetic_edf(EdfHeader(record_duration=30), [spec], [np.zeros(3000)]))
    assert parsed.sampling_rate("x") == 100.0


# -- property: parse(write(x)) == x ----------------------------------------

_text = st.text(st.characters(min_codepoint=0x20, max_codepoint=0x7E), max_size=12).map(str.strip)
_label = st.text(st.characters(min_codepoint=0x21, max_codepoint=0x7E), min_size=1, max_size=16).filter(
    lambda s: s != edf.ANNOTATION_LABEL
)
_event_text = st.text(st.characters(min_codepoint=0x20, max_codepoint=0x7E), min_size=1, max_size=20)


@st.composite
def edf_inputs(draw):
    n_signals = draw(st.integers(0, 3))
    n_records = draw(st.integers(0, 4))
    duration = draw(st.sampled_from([1.0, 0.5, 2.0, 30.0]))
    header = EdfHeader(
        patient_info=draw(_text),
        recording_info=draw(_text),
        start_datetime=dt.datetime(
            draw(st.integers(1985, 2084)), draw(st.integers(1, 12)), draw(st.integers(1, 28)),
            draw(st.integers(0, 23)), draw(st.integers(0, 59)), draw(st.integers(0, 59)),
        ),
        record_duration=duration,
    )
    specs, digital = [], []
    labels = draw(st.lists(_label, min_size=n_signals, max_size=n_signals, unique=True))
    for label in labels:
        dmin = draw(st.integers(-32768, 32000))
        dmax = draw(st.integers(dmin + 1, 32767))
        pmin = draw(st.integers(-50000, 49999)) / 100
        pmax = draw(st.integers(-50000, 50000).filter(lambda v: v / 100 != pmin)) / 100
        spec = SignalSpec(
            label=label,
            physical_min=pmin,
            physical_max=pmax,
            digital_min=dmin,
            digital_max=dmax,
            samples_per_record=draw(st.integers(1, 6)),
            transducer=draw(_text),
            physical_dimension=draw(st.sampled_from(["uV", "mV", ""])),
            prefiltering=draw(_text),
        )
        specs.append(spec)
        digital.append(
            np.array(draw(st.lists(st.integers(dmin, dmax), min_size=spec.samples_per_record * n_records,
                                   max_size=spec.samples_per_record * n_records)), dtype=np.int64)
        )
    events = None
    if (n_records or not n_signals) and draw(st.booleans()):
        events = draw(
            st.lists(
                st.builds(
                    AnnotationEvent,
                    onset=st.integers(0, 4000).map(lambda v: v / 40),
                    duration=st.integers(0, 400).map(lambda v: v / 8),
                    text=_event_text,
                ),
                max_size=5,
            )
        )
    return header, specs, digital, events


@settings(max_examples=ROUND_TRIP_CASES, derandomize=True, deadline=None, suppress_health_check=list(HealthCheck))
@given(edf_inputs())
def test_round_trip_property(case):
    header, specs, digital, events = case
    physical = [spec.to_physical(d) for spec, d in zip(specs, digital)]
    data = edf.write_synthetic_edf(header, specs, physical, events)
    parsed = edf.read_edf(data)

    assert parsed.header.patient_info == header.patient_info
    assert parsed.header.recording_info == header.recording_info
    assert parsed.header.start_datetime == header.start_datetime
    assert parsed.header.record_duration == header.record_duration
    signal_specs = [s for s in parsed.specs if not s.is_annotation]
    assert signal_specs == specs
    for spec, expected in zip(specs, physical):
        assert np.array_equal(parsed.signals[spec.label], expected)
    if events is None:
        assert parsed.events == []
        assert parsed.header.n_signals == len(specs)
    else:
        assert parsed.events == sorted(events, key=lambda e: e.onset)
        assert parsed.header.reserved == "EDF+C"
