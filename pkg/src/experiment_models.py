"""
Experiment Data Models and Schemas
Defines structured data models for synthetic data, missingness protocols,
model/training configuration and the rows written by runs and audits.
"""

from dataclasses import dataclass, field, fields, asdict
from typing import List, Optional, Dict, Any, Union
from enum import Enum

from src.errors import ConfigurationError


class GateKind(Enum):
    """Gate mechanisms of the router ablation"""
    SOFTMAX = "softmax"
    SOFTMAX_LB = "softmax_lb"
    MEAN = "mean"
    GAUSSIAN = "gaussian"
    LAPLACIAN = "laplacian"
    CONFNET = "confnet"


class Variant(Enum):
    """Token-level (ConfSMoE-T) or expert-level (ConfSMoE-E) confidence fusion"""
    TOKEN = "token"
    EXPERT = "expert"


class ImputeMode(Enum):
    """Which imputation stages run for missing modalities"""
    OFF = "off"
    PRE_ONLY = "pre_only"
    FULL = "full"


class ProtocolKind(Enum):
    """Missingness protocols applied on top of a generated dataset"""
    NATURAL_FIXED = "natural_fixed"
    RANDOM_DROPOUT = "random_dropout"
    ASYMMETRIC = "asymmetric"


class Split(Enum):
    """Dataset split a metrics row was computed on"""
    TRAIN = "train"
    TEST = "test"


def _parse_enum(enum_cls, value: Any, key: str):
    if isinstance(value, enum_cls):
        return value
    try:
        return enum_cls(value)
    except ValueError:
        allowed = ", ".join(member.value for member in enum_cls)
        raise ConfigurationError(f"Invalid value for '{key}': {value!r} (expected one of: {allowed})")


def _check_keys(cls, data: Dict[str, Any], section: str):
    if not isinstance(data, dict):
        raise ConfigurationError(f"Section '{section}' must be a mapping, got {type(data).__name__}")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigurationError(f"Unknown keys in '{section}': {', '.join(unknown)}")


@dataclass
class SynthSpec:
    """Shape and structure of a synthetic multimodal classification dataset"""
    num_instances: int = 2000  # train split
    num_test_instances: int = 500
    num_modalities: int = 3
    seq_len: int = 8
    dim: int = 32
    num_classes: int = 3
    shared_signal_strength: float = 0.5
    noise_std: float = 1.0
    seed: int = 2023
    latent_dim: int = 8
    offset_scale: float = 2.0
    class_balanced: bool = True
    modality_names: Optional[List[str]] = None

    def names(self) -> List[str]:
        if self.modality_names:
            return list(self.modality_names)
        return [f"m{i}" for i in range(self.num_modalities)]

    def validate(self):
        if self.num_classes < 2:
            raise ConfigurationError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.num_modalities < 2:
            raise ConfigurationError(f"num_modalities must be >= 2, got {self.num_modalities}")
        for key in ("num_instances", "seq_len", "dim", "latent_dim"):
            if getattr(self, key) < 1:
                raise ConfigurationError(f"{key} must be positive, got {getattr(self, key)}")
        if self.num_test_instances < 0:
            raise ConfigurationError("num_test_instances must be >= 0")
        if not 0.0 <= self.shared_signal_strength <= 1.0:
            raise ConfigurationError(
                f"shared_signal_strength must lie in [0, 1], got {self.shared_signal_strength}")
        if self.noise_std < 0 or self.offset_scale < 0:
            raise ConfigurationError("noise_std and offset_scale must be non-negative")
        if self.modality_names is not None and len(self.modality_names) != self.num_modalities:
            raise ConfigurationError("modality_names must name every modality exactly once")

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'SynthSpec':
        _check_keys(cls, data, "synth")
        spec = cls(**data)
        spec.validate()
        return spec


@dataclass
class Protocol:
    """Missingness protocol applied on top of a generated dataset"""
    kind: ProtocolKind = ProtocolKind.RANDOM_DROPOUT
    rate: float = 0.0  # random_dropout
    missing_probs: Optional[List[float]] = None  # natural_fixed, one entry per modality
    train_rate: float = 0.0  # asymmetric
    test_present_set: Optional[List[Union[int, str]]] = None  # asymmetric

    def validate(self, num_modalities: int):
        if self.kind == ProtocolKind.RANDOM_DROPOUT:
            if not 0.0 <= self.rate < 1.0:
                raise ConfigurationError(f"Dropout rate must lie in [0, 1), got {self.rate}")
        elif self.kind == ProtocolKind.NATURAL_FIXED:
            if self.missing_probs is None or len(self.missing_probs) != num_modalities:
                raise ConfigurationError("natural_fixed needs one missing probability per modality")
            if any(not 0.0 <= p < 1.0 for p in self.missing_probs):
                raise ConfigurationError("Missing probabilities must lie in [0, 1)")
        elif self.kind == ProtocolKind.ASYMMETRIC:
            if not 0.0 <= self.train_rate < 1.0:
                raise ConfigurationError(f"train_rate must lie in [0, 1), got {self.train_rate}")
            if not self.test_present_set:
                raise ConfigurationError("asymmetric protocol needs a non-empty test_present_set")

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["kind"] = self.kind.value
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'Protocol':
        _check_keys(cls, data, "protocol")
        data = dict(data)
        data["kind"] = _parse_enum(ProtocolKind, data.get("kind", ProtocolKind.RANDOM_DROPOUT), "protocol.kind")
        return cls(**data)


@dataclass
class ModelConfig:
    """Model and optimization hyperparameters"""
    gate: GateKind = GateKind.CONFNET
    variant: Variant = Variant.TOKEN
    num_experts: int = 8
    top_k: int = 2
    hidden_dim: int = 32
    sparsity_b: int = 4
    pre_impute_samples: int = 10
    impute: ImputeMode = ImputeMode.FULL
    conf_loss_weight: float = 1.0
    lb_loss_weight: float = 0.01
    learning_rate: float = 3e-4
    epochs: int = 50
    dropout_rate: float = 0.1
    seed: int = 2023
    batch_size: int = 64
    temperature: float = 1.0
    layer_norm_eps: float = 1e-5

    def validate(self):
        if not 1 <= self.top_k <= self.num_experts:
            raise ConfigurationError(
                f"top_k must satisfy 1 <= K <= N, got K={self.top_k}, N={self.num_experts}")
        if self.temperature <= 0:
            raise ConfigurationError(f"temperature must be positive, got {self.temperature}")
        if self.sparsity_b < 1 or self.pre_impute_samples < 1:
            raise ConfigurationError("sparsity_b and pre_impute_samples must be >= 1")
        if self.epochs < 0 or self.batch_size < 1 or self.hidden_dim < 1:
            raise ConfigurationError("epochs >= 0, batch_size >= 1 and hidden_dim >= 1 are required")
        if self.learning_rate <= 0:
            raise ConfigurationError(f"learning_rate must be positive, got {self.learning_rate}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigurationError(f"dropout_rate must lie in [0, 1), got {self.dropout_rate}")
        if self.conf_loss_weight < 0 or self.lb_loss_weight < 0:
            raise ConfigurationError("Loss weights must be non-negative")

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["gate"] = self.gate.value
        data["variant"] = self.variant.value
        data["impute"] = self.impute.value
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'ModelConfig':
        _check_keys(cls, data, "model")
        data = dict(data)
        if "gate" in data:
            data["gate"] = _parse_enum(GateKind, data["gate"], "model.gate")
        if "variant" in data:
            data["variant"] = _parse_enum(Variant, data["variant"], "model.variant")
        if "impute" in data:
            data["impute"] = _parse_enum(ImputeMode, data["impute"], "model.impute")
        config = cls(**data)
        config.validate()
        return config


@dataclass
class ExperimentConfig:
    """Full declarative description of one run"""
    synth: SynthSpec = field(default_factory=SynthSpec)
    protocol: Protocol = field(default_factory=Protocol)
    model: ModelConfig = field(default_factory=ModelConfig)
    output_dir: str = "runs/default"
    dataset_dir: Optional[str] = None

    def validate(self):
        self.synth.validate()
        self.protocol.validate(self.synth.num_modalities)
        self.model.validate()

    def to_dict(self) -> Dict[str, Any]:
        return {
            "synth": self.synth.to_dict(),
            "protocol": self.protocol.to_dict(),
            "model": self.model.to_dict(),
            "output_dir": self.output_dir,
            "dataset_dir": self.dataset_dir
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'ExperimentConfig':
        _check_keys(cls, data, "<root>")
        config = cls(
            synth=SynthSpec.from_dict(data.get("synth", {})),
            protocol=Protocol.from_dict(data.get("protocol", {})),
            model=ModelConfig.from_dict(data.get("model", {})),
            output_dir=str(data.get("output_dir", "runs/default")),
            dataset_dir=data.get("dataset_dir")
        )
        config.validate()
        return config


@dataclass
class MetricsRow:
    """One line of metrics.csv"""
    epoch: int
    split: str
    loss_task: float
    loss_conf: float
    loss_lb: float
    f1_macro: float
    auc: float

    COLUMNS = ("epoch", "split", "loss_task", "loss_conf", "loss_lb", "f1_macro", "auc")

    def __post_init__(self):
        self.split = _parse_enum(Split, self.split, "split").value

    def to_dict(self) -> Dict[str, Any]:
        return {column: getattr(self, column) for column in self.COLUMNS}


@dataclass
class ConflictReport:
    """Gradient conflict between the dominant-expert direction and the load-loss descent"""
    step: int
    g_max: float
    conflict_score: Optional[float]  # None when either gradient is degenerate
    h_entropy: float

    def to_dict(self) -> Dict[str, Any]:
        return {
            "step": self.step,
            "g_max": self.g_max,
            "conflict_score": self.conflict_score,
            "entropy": self.h_entropy
        }
