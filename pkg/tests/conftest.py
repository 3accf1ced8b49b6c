import os

import numpy as np
import pytest

from sleepcnn.dataset import CHANNELS, SEGMENT_SAMPLES, SegmentSet
from sleepcnn.synthetic import stage_signal


def make_segment_set(n_patients: int, per_patient: int, seed: int = 0, nights: int = 1) -> SegmentSet:
    """Random in-memory segments; labels cycle so every class is present."""
    rng = np.random.default_rng(seed)
    n = n_patients * per_patient
    patient_ids = np.repeat(np.arange(1, n_patients + 1), per_patient)
    nights_col = np.tile(np.arange(per_patient) % nights + 1, n_patients)
    indices = np.tile(np.arange(per_patient), n_patients)
    labels = rng.permutation(np.arange(n) % 5)
    samples = rng.normal(size=(n, len(CHANNELS), SEGMENT_SAMPLES))
    return SegmentSet(tuple(CHANNELS), samples, labels.astype(np.int64), patient_ids, nights_col, indices)


def separable_set(n_patients: int, per_patient: int, seed: int = 0) -> SegmentSet:
    """Segments whose class is readable from frequency and amplitude alone."""
    data = make_segment_set(n_patients, per_patient, seed)
    rng = np.random.default_rng(seed + 1)
    for i, label in enumerate(data.labels):
        for c in range(len(CHANNELS)):
            data.samples[i, c] = stage_signal(int(label), rng, c)
    return data


@pytest.fixture
def segment_set():
    return make_segment_set(20, 30)


# One line per acceptance criterion, collected by tests/test_acceptance.py.
ACCEPTANCE: dict[str, tuple[str, str]] = {}


def pytest_runtest_setup(item):
    if "corpus" in item.keywords and not os.environ.get("SLEEP_EDF_DIR"):
        pytest.skip("set SLEEP_EDF_DIR to the Sleep-EDF recordings to run this check")


def pytest_runtest_logreport(report):
    if report.when == "setup" and report.skipped and "test_acceptance.py::" in report.nodeid:
        ACCEPTANCE[report.nodeid.split("::")[-1]] = ("SKIP", "")
        return
    if report.when != "call" or "test_acceptance.py::" not in report.nodeid:
        return
    name = report.nodeid.split("::")[-1]
    status = "PASS" if report.passed else ("SKIP" if report.skipped else "FAIL")
    details = "  ".join(f"{k}={v}" for k, v in report.user_properties)
    ACCEPTANCE[name] = (status, details)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(ACCEPTANCE):
        status, details = ACCEPTANCE[name]
        terminalreporter.write_line(f"{status:4}  {name}  {details}".rstrip())
