"""Experiment configuration: JSON in, validated dataclasses out.

Unknown keys are errors, and every error names the offending key.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

STRATEGIES = ("fedsgd", "fedavg")
SHIFT_MODES = ("single", "multi", "indexed")
ESTIMATION_MODES = ("exact", "shots")
FORMATS = ("jsonl", "csv")


class ConfigError(ValueError):
    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


def _int(key, value, minimum=1):
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError(key, f"expected an integer, got {value!r}")
    if value < minimum:
        raise ConfigError(key, f"must be >= {minimum}, got {value}")
    return value


def _positive_float(key, value):
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(key, f"expected a number, got {value!r}")
    if not math.isfinite(value) or value <= 0:
        raise ConfigError(key, f"must be positive and finite, got {value}")
    return float(value)


def _choice(key, value, options):
    if value not in options:
        raise ConfigError(key, f"must be one of {', '.join(options)}; got {value!r}")
    return value


@dataclass
class AnsatzConfig:
    num_qubits: int = 2
    num_layers: int = 3

    def validate(self):
        _int("ansatz.num_qubits", self.num_qubits)
        _int("ansatz.num_layers", self.num_layers)


@dataclass
class ClientsConfig:
    count: int = 3
    examples_per_client: int = 4
    data_seed: int = 42

    def validate(self):
        _int("clients.count", self.count)
        _int("clients.examples_per_client", self.examples_per_client)
        _int("clients.data_seed", self.data_seed, minimum=0)


@dataclass
class TrainingConfig:
    rounds: int = 200
    learning_rate: float = 0.05
    strategy: str = "fedsgd"
    shift_mode: str = "single"
    shift_size: float = math.pi
    partial_fraction: float = 1.0

    def validate(self):
        _int("training.rounds", self.rounds, minimum=0)
        self.learning_rate = _positive_float("training.learning_rate", self.learning_rate)
        _choice("training.strategy", self.strategy, STRATEGIES)
        _choice("training.shift_mode", self.shift_mode, SHIFT_MODES)
        self.shift_size = _positive_float("training.shift_size", self.shift_size)
        if self.shift_size >= 2 * math.pi:
            raise ConfigError("training.shift_size", "must lie in (0, 2*pi)")
        self.partial_fraction = _positive_float("training.partial_fraction", self.partial_fraction)
        if self.partial_fraction > 1:
            raise ConfigError("training.partial_fraction", "must lie in (0, 1]")


@dataclass
class EstimationConfig:
    mode: str = "exact"
    shots: int = 10_000
    seed: int = 42
    retransmission_cap: int = 64

    def validate(self):
        _choice("estimation.mode", self.mode, ESTIMATION_MODES)
        _int("estimation.shots", self.shots)
        _int("estimation.seed", self.seed, minimum=0)
        _int("estimation.retransmission_cap", self.retransmission_cap)


@dataclass
class OutputConfig:
    directory: str = "runs/reference"
    formats: list = field(default_factory=lambda: ["jsonl"])

    def validate(self):
        if not isinstance(self.directory, str) or not self.directory:
            raise ConfigError("output.directory", "must be a nonempty string")
        if not isinstance(self.formats, list) or not self.formats:
            raise ConfigError("output.formats", "must be a nonempty list")
        for f in self.formats:
            _choice("output.formats", f, FORMATS)


_SECTIONS = {
    "ansatz": AnsatzConfig,
    "clients": ClientsConfig,
    "training": TrainingConfig,
    "estimation": EstimationConfig,
    "output": OutputConfig,
}


@dataclass
class ExperimentConfig:
    ansatz: AnsatzConfig = field(default_factory=AnsatzConfig)
    clients: ClientsConfig = field(default_factory=ClientsConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    estimation: EstimationConfig = field(default_factory=EstimationConfig)
    output: OutputConfig = field(default_factory=OutputConfig)

    def validate(self) -> "ExperimentConfig":
        for name in _SECTIONS:
            getattr(self, name).validate()
        m = self.ansatz.num_qubits * self.ansatz.num_layers
        selected = math.floor(self.training.partial_fraction * m + 1e-9)
        if selected < 1:
            raise ConfigError("training.partial_fraction", f"selects no parameter out of {m}")
        if self.training.shift_mode == "indexed" and selected < 2:
            raise ConfigError("training.shift_mode", "indexed mode needs at least two parameters per round")
        return self

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        if not isinstance(data, dict):
            raise ConfigError("<root>", "config must be a JSON object")
        sections = {}
        for name, value in data.items():
            if name not in _SECTIONS:
                raise ConfigError(name, "unknown key")
            if not isinstance(value, dict):
                raise ConfigError(name, "section must be an object")
            section_cls = _SECTIONS[name]
            known = {f.name for f in fields(section_cls)}
            for key in value:
                if key not in known:
                    raise ConfigError(f"{name}.{key}", "unknown key")
            sections[name] = section_cls(**value)
        return cls(**sections).validate()

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError("<root>", f"invalid JSON at line {exc.lineno}: {exc.msg}") from exc
        return cls.from_dict(data)

    def dump(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")


def reference_config() -> ExperimentConfig:
    """The toy realizable-target task used by the acceptance suite."""
    return ExperimentConfig().validate()
