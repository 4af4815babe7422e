"""Run configuration: one JSON document with model / optim / data sections."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .losses import LossConfig
from .model import ModelConfig
from .tasks import ConfigError


def _from_section(cls, section: str, d):
    if d is None:
        return cls()
    if not isinstance(d, dict):
        raise ConfigError(f"{section}: expected a mapping")
    names = {f.name for f in fields(cls)}
    unknown = set(d) - names
    if unknown:
        raise ConfigError(f"{section}: unknown key(s) {sorted(unknown)}")
    try:
        return cls(**d)
    except TypeError as exc:
        raise ConfigError(f"{section}: {exc}") from exc


@dataclass
class OptimConfig:
    backbone_lr: float = 1e-4
    head_lr: float = 1e-3
    min_lr: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    epochs: int = 50
    batch_size: int = 8
    steps: int | None = None  # overrides epochs when set
    eval_every: int = 1  # epochs between validation events; 0 = only at the end
    augment: bool = True

    def validate(self) -> None:
        if self.backbone_lr <= 0 or self.head_lr <= 0:
            raise ConfigError("optim.backbone_lr / optim.head_lr: must be positive")
        if self.batch_size < 1:
            raise ConfigError("optim.batch_size: must be >= 1")
        if self.epochs < 1 and not self.steps:
            raise ConfigError("optim.epochs: must be >= 1")
        if self.steps is not None and self.steps < 1:
            raise ConfigError("optim.steps: must be >= 1")
        if self.eval_every < 0:
            raise ConfigError("optim.eval_every: must be >= 0")


@dataclass
class SynthConfig:
    count: int = 16
    val_count: int = 4
    orig_size: list[int] | None = None
    size_range: list[int] = field(default_factory=lambda: [300, 800])


@dataclass
class DataConfig:
    train_manifest: str | None = None
    val_manifest: str | None = None
    synth: SynthConfig | None = None

    def __post_init__(self):
        if isinstance(self.synth, dict):
            self.synth = _from_section(SynthConfig, "data.synth", self.synth)


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    data: DataConfig = field(default_factory=DataConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    seed: int | None = 0
    deterministic: bool = True
    output_dir: str = "runs/default"

    def validate(self) -> None:
        self.model.validate()
        self.optim.validate()
        if self.deterministic and self.seed is None:
            raise ConfigError("seed: required when deterministic is true")
        if not self.model.tasks:
            raise ConfigError("model.tasks: at least one task is required")

    @property
    def run_seed(self) -> int:
        return 0 if self.seed is None else int(self.seed)

    def to_dict(self) -> dict:
        return {
            "model": self.model.to_dict(),
            "optim": asdict(self.optim),
            "data": asdict(self.data),
            "loss": asdict(self.loss),
            "seed": self.seed,
            "deterministic": self.deterministic,
            "output_dir": self.output_dir,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        if not isinstance(d, dict):
            raise ConfigError("config: top level must be a mapping")
        unknown = set(d) - {"model", "optim", "data", "loss", "seed", "deterministic", "output_dir"}
        if unknown:
            raise ConfigError(f"config: unknown section(s) {sorted(unknown)}")
        model = d.get("model") or {}
        if not isinstance(model, dict):
            raise ConfigError("model: expected a mapping")
        cfg = cls(
            model=ModelConfig.from_dict(model),
            optim=_from_section(OptimConfig, "optim", d.get("optim")),
            data=_from_section(DataConfig, "data", d.get("data")),
            loss=_from_section(LossConfig, "loss", d.get("loss")),
            seed=d.get("seed", 0),
            deterministic=bool(d.get("deterministic", True)),
            output_dir=str(d.get("output_dir", "runs/default")),
        )
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            raw = json.loads(Path(path).read_text())
        except FileNotFoundError as exc:
            raise ConfigError(f"config: file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config: invalid JSON in {path} ({exc.msg} at line {exc.lineno})") from exc
        return cls.from_dict(raw)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
