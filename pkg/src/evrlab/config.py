"""Run configuration: one JSON file, optionally overridden by ``key=value`` flags."""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    seed: int = 2018
    scenes: dict = field(default_factory=lambda: {"train": 45, "val": 5, "test": 9})
    per_object: int = 2
    easy_keep: float = 0.45
    horizon: int = 10
    hfov: float = 60.0
    width: int = 80
    height: int = 64
    border_pad: int = 8


@dataclass
class PerceptionConfig:
    channels: list = field(default_factory=lambda: [8, 16, 32, 32])
    fc: int = 128


@dataclass
class PolicyConfig:
    channels: list = field(default_factory=lambda: [16, 32, 32, 32])
    embed: int = 16
    hidden: int = 128


@dataclass
class PerceptionStage:
    optimizer: str = "adam"   # or "sgd" (momentum, weight decay)
    lr: float = 0.001
    momentum: float = 0.99
    weight_decay: float = 5e-4
    batch: int = 8
    max_epochs: int = 12
    patience: int = 10

    def __post_init__(self):
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"optimizer must be 'adam' or 'sgd', got {self.optimizer!r}")


@dataclass
class PolicyStage:
    lr: float = 4e-5
    eps: float = 5e-5
    batch: int = 8
    epochs: int = 3
    reward_cls: float = 0.1
    reward_box: float = 10.0
    reward_mask: float = 20.0


@dataclass
class EvalConfig:
    seed: int = 7
    random_runs: int = 5
    dump_predictions: bool = False
    workers: int = 1


@dataclass
class RunConfig:
    seed: int = 0
    dtype: str = "float32"
    data: DataConfig = field(default_factory=DataConfig)
    perception: PerceptionConfig = field(default_factory=PerceptionConfig)
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    stage1: PerceptionStage = field(default_factory=lambda: PerceptionStage(max_epochs=24))
    stage1_passive: PerceptionStage = field(default_factory=lambda: PerceptionStage(max_epochs=30))
    stage2: PolicyStage = field(default_factory=PolicyStage)
    stage3: PerceptionStage = field(default_factory=lambda: PerceptionStage(lr=0.0002, max_epochs=8))
    eval: EvalConfig = field(default_factory=EvalConfig)
    # locations do not enter the hash
    out: str = "run"
    dataset: str = ""

    PATH_FIELDS = ("out", "dataset")

    @property
    def dataset_dir(self) -> Path:
        return Path(self.dataset) if self.dataset else Path(self.out) / "dataset"

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def hash(self) -> str:
        d = {k: v for k, v in self.to_dict().items() if k not in self.PATH_FIELDS}
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        return _build(cls, d, "")

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read config {path}: {e}") from None

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    def override(self, assignments: list[str]) -> "RunConfig":
        """Apply ``dotted.key=json_value`` overrides (bare strings allowed)."""
        d = self.to_dict()
        for item in assignments:
            key, sep, raw = item.partition("=")
            if not sep:
                raise ConfigError(f"override {item!r} is not key=value")
            try:
                value = json.loads(raw)
            except json.JSONDecodeError:
                value = raw
            node = d
            parts = key.split(".")
            for p in parts[:-1]:
                if not isinstance(node.get(p), dict):
                    raise ConfigError(f"unknown config key {key!r}")
                node = node[p]
            if parts[-1] not in node:
                raise ConfigError(f"unknown config key {key!r}")
            node[parts[-1]] = value
        return RunConfig.from_dict(d)


def _build(cls, d: dict, where: str):
    if not isinstance(d, dict):
        raise ConfigError(f"{where or 'config'} must be an object")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(d) - set(fields)
    if unknown:
        raise ConfigError(f"unknown config key(s) {sorted(where + k for k in unknown)}")
    kwargs = {}
    for name, value in d.items():
        sub = _SECTIONS.get((cls.__name__, name))
        kwargs[name] = _build(sub, value, f"{where}{name}.") if sub else value
    return cls(**kwargs)


_SECTIONS = {
    ("RunConfig", "data"): DataConfig,
    ("RunConfig", "perception"): PerceptionConfig,
    ("RunConfig", "policy"): PolicyConfig,
    ("RunConfig", "stage1"): PerceptionStage,
    ("RunConfig", "stage1_passive"): PerceptionStage,
    ("RunConfig", "stage2"): PolicyStage,
    ("RunConfig", "stage3"): PerceptionStage,
    ("RunConfig", "eval"): EvalConfig,
}
