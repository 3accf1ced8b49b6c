"""Synthetic Sleep-EDF-style recordings for tests and smoke runs.

Each stage gets its own sinusoid frequency and amplitude, so the task is
trivially separable. Files follow the corpus naming scheme
(``SC4ppN*-PSG.edf`` / ``SC4ppN*-Hypnogram.edf``).
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from sleepcnn import edf
from sleepcnn.dataset import CHANNELS, EPOCH_SECONDS, SAMPLING_RATE, SEGMENT_SAMPLES

STAGE_TEXT = ("Sleep stage W", "Sleep stage 1", "Sleep stage 2", "Sleep stage 3", "Sleep stage R")
STAGE_FREQ_HZ = (2.0, 5.0, 9.0, 15.0, 25.0)


def stage_signal(label: int, rng: np.random.Generator, channel: int = 0) -> np.ndarray:
    t = np.arange(SEGMENT_SAMPLES) / SAMPLING_RATE
    amp = (15.0 + 12.0 * label) * (1.0 if channel == 0 else 0.7)
    phase = rng.uniform(0, 2 * np.pi)
    return amp * np.sin(2 * np.pi * STAGE_FREQ_HZ[label] * t + phase) + rng.normal(0, 3.0, SEGMENT_SAMPLES)


def synthetic_night(
    labels, rng: np.random.Generator, trailing_unknown: int = 1
) -> tuple[bytes, bytes]:
    """PSG and hypnogram EDF bytes for one night with the given per-segment labels.

    Consecutive equal labels are merged into one hypnogram event. A final
    ``Sleep stage ?`` event of ``trailing_unknown`` windows runs past the
    end of the signal, like the real hypnograms do.
    """
    labels = [int(v) for v in labels]
    data = [
        np.concatenate([stage_signal(lab, rng, ch) for lab in labels]) if labels else np.zeros(0)
        for ch in range(len(CHANNELS))
    ]
    specs = [
        edf.SignalSpec(
            label=name,
            physical_min=-250,
            physical_max=250,
            digital_min=-32768,
            digital_max=32767,
            samples_per_record=SEGMENT_SAMPLES,
            transducer="Ag-AgCl electrodes",
        )
        for name in CHANNELS
    ]
    header = edf.EdfHeader(record_duration=EPOCH_SECONDS, reserved="")
    psg = edf.write_synthetic_edf(header, specs, data)

    events = []
    start = 0
    for i in range(1, len(labels) + 1):
        if i == len(labels) or labels[i] != labels[start]:
            events.append(
                edf.AnnotationEvent(start * EPOCH_SECONDS, (i - start) * EPOCH_SECONDS, STAGE_TEXT[labels[start]])
            )
            start = i
    if trailing_unknown:
        events.append(edf.AnnotationEvent(len(labels) * EPOCH_SECONDS, trailing_unknown * EPOCH_SECONDS, "Sleep stage ?"))
    hyp = edf.write_synthetic_edf(edf.EdfHeader(record_duration=0), [], [], events)
    return psg, hyp


def write_synthetic_corpus(
    out_dir: str | Path,
    n_patients: int,
    segments_per_night: int,
    seed: int = 0,
    nights: int = 1,
) -> list[np.ndarray]:
    """Write ``n_patients`` x ``nights`` synthetic recordings; returns the label arrays."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    all_labels = []
    for p in range(n_patients):
        for night in range(1, nights + 1):
            # runs of 1-3 windows per stage, cycling through every class
            labels = []
            while len(labels) < segments_per_night:
                labels.extend([int(rng.integers(5))] * int(rng.integers(1, 4)))
            labels = labels[:segments_per_night]
            psg, hyp = synthetic_night(labels, rng)
            (out_dir / f"SC4{p:02d}{night}E0-PSG.edf").write_bytes(psg)
            (out_dir / f"SC4{p:02d}{night}EC-Hypnogram.edf").write_bytes(hyp)
            all_labels.append(np.array(labels))
    return all_labels
