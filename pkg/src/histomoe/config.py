"""Declarative experiment configuration: one YAML file drives every command."""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from .data import MAGNIFICATIONS
from .losses import LossWeights
from .training import ABLATIONS, TrainConfig


class ConfigError(ValueError):
    """Bad configuration file or override (a user error)."""


@dataclass
class DatasetSection:
    kind: str = "synthetic"  # synthetic | breakhis
    root: str | None = None
    n_per_class: int = 10
    magnifications: list[int] = field(default_factory=lambda: list(MAGNIFICATIONS))
    test_fraction: float = 0.2
    seed: int = 0
    patient_disjoint: bool = False


@dataclass
class ModelSection:
    backbones: list[str] = field(default_factory=lambda: ["tiny_test"])
    n_experts: int = 3
    n_prototypes: int = 3
    proto_margin: float = 0.5
    proto_push_weight: float = 1.0
    proto_init: str = "random_unit"
    dropout_rate: float = 0.3
    lambda_expert: float = 0.5
    lambda_proto: float = 0.5
    pretrained: bool = False
    tiny_dim: int = 32
    tiny_stem: int = 4
    route_by_magnification: bool = False


@dataclass
class LossSection:
    focal: float = 1.0
    supcon: float = 0.5
    proto: float = 0.5
    morph: float = 0.1
    spatial: float = 0.05
    bio: float = 0.1
    gamma: float = 2.0
    temperature: float = 0.07


@dataclass
class TrainSection:
    epochs: int = 12
    batch_size: int = 16
    learning_rate: float = 3e-3  # desk default; drop to ~1e-4 for pretrained full-scale runs
    weight_decay: float = 1e-4
    n_folds: int = 5
    ablation: str = "full"
    patience: int = 10


@dataclass
class EvalSection:
    protocol: str = "type3"  # type1 | type2 | type3
    mc_passes: int = 20
    triage_threshold: float = 0.8
    train_magnification: int = 100  # type2 only


@dataclass
class ExplainSection:
    # 32/16 are the full-scale occlusion defaults; the desk default uses a
    # coarser grid so a zero-argument run stays fast on CPU.
    patch_size: int = 56
    stride: int = 56
    n_per_cell: int = 10
    confidence_threshold: float = 0.7
    coverage_fraction: float = 0.2


@dataclass
class OutputSection:
    run_dir: str = "runs/desk"


_SECTIONS = {
    "dataset": DatasetSection,
    "model": ModelSection,
    "loss": LossSection,
    "train": TrainSection,
    "eval": EvalSection,
    "explain": ExplainSection,
    "output": OutputSection,
}


@dataclass
class ExperimentConfig:
    dataset: DatasetSection = field(default_factory=DatasetSection)
    model: ModelSection = field(default_factory=ModelSection)
    loss: LossSection = field(default_factory=LossSection)
    train: TrainSection = field(default_factory=TrainSection)
    eval: EvalSection = field(default_factory=EvalSection)
    explain: ExplainSection = field(default_factory=ExplainSection)
    output: OutputSection = field(default_factory=OutputSection)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, payload: dict) -> "ExperimentConfig":
        if not isinstance(payload, dict):
            raise ConfigError("configuration must be a mapping of sections")
        unknown = set(payload) - set(_SECTIONS)
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        kwargs = {}
        for name, section_cls in _SECTIONS.items():
            section_payload = payload.get(name, {})
            if not isinstance(section_payload, dict):
                raise ConfigError(f"section {name!r} must be a mapping")
            allowed = {f.name for f in fields(section_cls)}
            bad = set(section_payload) - allowed
            if bad:
                raise ConfigError(f"unknown keys in section {name!r}: {sorted(bad)}")
            kwargs[name] = section_cls(**section_payload)
        return cls(**kwargs)

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True)

    @classmethod
    def from_yaml(cls, text: str) -> "ExperimentConfig":
        try:
            payload = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            raise ConfigError(f"invalid YAML: {exc}") from exc
        return cls.from_dict(payload or {})

    def save(self, path) -> None:
        Path(path).write_text(self.to_yaml())

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}")
        return cls.from_yaml(p.read_text())

    def digest(self) -> str:
        """Digest of the experiment content; the output location is excluded
        so identical experiments in different run directories match."""
        payload = self.to_dict()
        payload.pop("output", None)
        return hashlib.sha256(yaml.safe_dump(payload, sort_keys=True).encode()).hexdigest()[:16]

    def apply_override(self, dotted: str) -> None:
        """Apply one `section.key=value` scalar override in place."""
        if "=" not in dotted:
            raise ConfigError(f"override must look like section.key=value, got {dotted!r}")
        path, raw_value = dotted.split("=", 1)
        parts = path.split(".")
        if len(parts) != 2:
            raise ConfigError(f"override key must be section.key, got {path!r}")
        section_name, key = parts
        if section_name not in _SECTIONS:
            raise ConfigError(f"unknown config section {section_name!r}")
        section = getattr(self, section_name)
        if not hasattr(section, key):
            raise ConfigError(f"unknown key {key!r} in section {section_name!r}")
        value = yaml.safe_load(raw_value)
        current = getattr(section, key)
        if isinstance(current, (int, float, bool, str)) and isinstance(value, list):
            raise ConfigError(f"{path} expects a scalar, got a list")
        setattr(section, key, value)

    def loss_weights(self) -> LossWeights:
        return LossWeights(
            focal=self.loss.focal,
            supcon=self.loss.supcon,
            proto=self.loss.proto,
            morph=self.loss.morph,
            spatial=self.loss.spatial,
            bio=self.loss.bio,
            gamma=self.loss.gamma,
            temperature=self.loss.temperature,
            lambda_expert=self.model.lambda_expert,
            lambda_proto=self.model.lambda_proto,
        )

    def train_config(self, n_classes: int = 8) -> TrainConfig:
        if self.train.ablation not in ABLATIONS:
            raise ConfigError(f"unknown ablation {self.train.ablation!r}")
        return TrainConfig(
            backbones=tuple(self.model.backbones),
            n_classes=n_classes,
            n_experts=self.model.n_experts,
            n_prototypes=self.model.n_prototypes,
            proto_margin=self.model.proto_margin,
            proto_push_weight=self.model.proto_push_weight,
            proto_init=self.model.proto_init,
            dropout_rate=self.model.dropout_rate,
            loss_weights=self.loss_weights(),
            epochs=self.train.epochs,
            batch_size=self.train.batch_size,
            learning_rate=self.train.learning_rate,
            weight_decay=self.train.weight_decay,
            n_folds=self.train.n_folds,
            seed=self.dataset.seed,
            ablation=self.train.ablation,
            patience=self.train.patience,
            pretrained=self.model.pretrained,
            tiny_dim=self.model.tiny_dim,
            tiny_stem=self.model.tiny_stem,
            route_by_magnification=self.model.route_by_magnification,
        )
