"""Experiment configuration (TOML) and the compact architecture notation."""
from __future__ import annotations

import dataclasses
import re
from dataclasses import dataclass, field
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .data import SynthSpec
from .nn import LayerKind, LayerSpec, ModelArchitecture


class ConfigError(ValueError):
    pass


class ArchParseError(ConfigError):
    def __init__(self, message: str, position: int):
        self.position = position
        super().__init__(f"{message} (at character {position})")


_TOKENS = (
    (re.compile(r"(\d+)-(\d+)C"), lambda m: LayerSpec(LayerKind.CONV1D, int(m[1]), int(m[2]))),
    (re.compile(r"(\d+)M"), lambda m: LayerSpec(LayerKind.MAXPOOL1D, 0, int(m[1]))),
    (re.compile(r"(\d+)D"), lambda m: LayerSpec(LayerKind.DENSE, int(m[1]))),
)


def parse_layers(s: str) -> list[LayerSpec]:
    """``196-16C_4M_1024D`` -> [Conv1D(196, 16), MaxPool1D(4), Dense(1024)]."""
    if not s or not s.strip():
        raise ArchParseError("empty architecture string", 0)
    layers = []
    pos = 0
    for token in s.split("_"):
        for pattern, build in _TOKENS:
            m = pattern.fullmatch(token)
            if m:
                try:
                    layers.append(build(m))
                except ValueError as exc:
                    raise ArchParseError(f"bad token {token!r}: {exc}", pos) from None
                break
        else:
            raise ArchParseError(f"malformed token {token!r}", pos)
        pos += len(token) + 1
    return layers


def parse_arch(s: str, n_classes: int, input_shape=(128, 6)) -> ModelArchitecture:
    """Layers in token order plus a trailing softmax with ``n_classes`` units."""
    layers = parse_layers(s) + [LayerSpec(LayerKind.SOFTMAX, n_classes)]
    return ModelArchitecture(tuple(layers), tuple(input_shape))


@dataclass
class TrainSection:
    local_epochs: int = 5
    batch_size: int = 32
    learning_rate: float = 0.01
    dropout: float = 0.5


@dataclass
class StrategySection:
    name: str = "fedavg"
    params: dict = field(default_factory=dict)


@dataclass
class CsvSection:
    manifest: str = ""
    window: int = 128
    overlap: int = 64
    split: float = 0.8
    min_windows: int = 5
    sampling_rate_hz: float = 50.0
    classes: list | None = None


@dataclass
class DataSection:
    source: str = "synthetic"
    normalize: bool = True
    synthetic: SynthSpec = field(default_factory=SynthSpec)
    csv: CsvSection = field(default_factory=CsvSection)


@dataclass
class ExperimentConfig:
    name: str = "experiment"
    arch: str = "196-16C_4M_1024D"
    rounds: int = 200
    seed: int = 0
    output_dir: str = "runs/experiment"
    checkpoint_interval: int = 0  # 0: final round only
    parallel_clients: int = 1
    train: TrainSection = field(default_factory=TrainSection)
    strategy: StrategySection = field(default_factory=StrategySection)
    data: DataSection = field(default_factory=DataSection)
    base_dir: str = "."  # directory relative paths resolve against

    def validate(self) -> None:
        if self.rounds < 1:
            raise ConfigError("rounds must be >= 1")
        if self.checkpoint_interval < 0:
            raise ConfigError("checkpoint_interval must be >= 0")
        if self.parallel_clients < 1:
            raise ConfigError("parallel_clients must be >= 1")
        if self.data.source not in {"synthetic", "csv"}:
            raise ConfigError(f"unknown data source {self.data.source!r}")
        if self.data.source == "csv" and not self.data.csv.manifest:
            raise ConfigError("data.csv.manifest is required for csv data")
        parse_layers(self.arch)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _section(cls, table, where):
    if table is None:
        return cls()
    if not isinstance(table, dict):
        raise ConfigError(f"[{where}] must be a table")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(table) - names
    if unknown:
        raise ConfigError(f"unknown key(s) in [{where}]: {sorted(unknown)}")
    try:
        return cls(**table)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{where}]: {exc}") from None


def config_from_dict(doc: dict, base_dir=".") -> ExperimentConfig:
    doc = dict(doc)
    exp = dict(doc.pop("experiment", {}))
    train = _section(TrainSection, doc.pop("train", None), "train")
    strat = doc.pop("strategy", {}) or {}
    strategy = StrategySection(strat.get("name", "fedavg"), dict(strat.get("params", {})))
    extra = set(strat) - {"name", "params"}
    if extra:
        raise ConfigError(f"unknown key(s) in [strategy]: {sorted(extra)}")
    data_doc = dict(doc.pop("data", {}) or {})
    synthetic = _section(SynthSpec, data_doc.pop("synthetic", None), "data.synthetic")
    csv_sec = _section(CsvSection, data_doc.pop("csv", None), "data.csv")
    data = DataSection(synthetic=synthetic, csv=csv_sec)
    for key, value in data_doc.items():
        if key not in {"source", "normalize"}:
            raise ConfigError(f"unknown key in [data]: {key!r}")
        setattr(data, key, value)
    if doc:
        raise ConfigError(f"unknown top-level table(s): {sorted(doc)}")
    allowed = {f.name for f in dataclasses.fields(ExperimentConfig)} - {"train", "strategy", "data", "base_dir"}
    unknown = set(exp) - allowed
    if unknown:
        raise ConfigError(f"unknown key(s) in [experiment]: {sorted(unknown)}")
    cfg = ExperimentConfig(**exp, train=train, strategy=strategy, data=data, base_dir=str(base_dir))
    cfg.validate()
    return cfg


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        with path.open("rb") as fh:
            doc = tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return config_from_dict(doc, base_dir=path.parent)
