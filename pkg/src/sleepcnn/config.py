"""Flat ``key = value`` run configuration with ``#`` comments.

Every key defaults to the reference training protocol; command-line
flags override file values.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from sleepcnn.training import TrainConfig


@dataclass
class RunConfig:
    data_dir: str = "data"
    cache: str = "segments.cache"
    output_dir: str = "runs"
    approaches: list[str] = field(default_factory=lambda: ["fpz_cz", "pz_oz", "dual"])
    learning_rate: float = 0.001
    batch_size: int = 20
    max_epochs: int = 100
    patience: int = 10
    validation_fraction: float = 0.10
    seed: int = 0
    standardize: str = "none"
    n_patients: int = 20
    workers: int = 1
    force: bool = False

    def train_config(self, approach: str) -> TrainConfig:
        return TrainConfig(
            approach=approach,
            learning_rate=self.learning_rate,
            batch_size=self.batch_size,
            max_epochs=self.max_epochs,
            patience=self.patience,
            validation_fraction=self.validation_fraction,
            seed=self.seed,
            standardize=self.standardize,
            n_patients=self.n_patients,
        )


def _convert(name: str, raw: str):
    types = {f.name: f.type for f in dataclasses.fields(RunConfig)}
    if name not in types:
        raise KeyError(f"unknown config key {name!r}")
    kind = types[name]
    if kind == "bool":
        lowered = raw.strip().lower()
        if lowered not in ("1", "0", "true", "false", "yes", "no"):
            raise ValueError(f"{name}: expected a boolean, got {raw!r}")
        return lowered in ("1", "true", "yes")
    if kind == "int":
        return int(raw)
    if kind == "float":
        return float(raw)
    if kind.startswith("list"):
        return [part.strip() for part in raw.split(",") if part.strip()]
    return raw.strip()


def parse_config(text: str) -> dict:
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ValueError(f"line {lineno}: expected key = value, got {line!r}")
        key = key.strip()
        values[key] = _convert(key, value.strip())
    return values


def load_config(path: str | Path | None = None, **overrides) -> RunConfig:
    values = parse_config(Path(path).read_text()) if path else {}
    values.update({k: v for k, v in overrides.items() if v is not None})
    return RunConfig(**values)


def dump_config(cfg: RunConfig) -> str:
    lines = []
    for f in dataclasses.fields(RunConfig):
        value = getattr(cfg, f.name)
        if isinstance(value, list):
            value = ",".join(value)
        elif isinstance(value, bool):
            value = "true" if value else "false"
        lines.append(f"{f.name} = {value}")
    return "\n".join(lines) + "\n"
