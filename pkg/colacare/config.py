"""
Run configuration for the ColaCare pipeline.

One JSON file (``--config``) maps onto RunConfig; nested sections map onto the
per-module configuration dataclasses. Unknown keys are rejected.
"""

import json
import logging
import os
from dataclasses import asdict, dataclass, field, fields
from typing import Any, Dict, List, Mapping, Optional, Tuple

from .consultation import ConsultationConfig, ConsultationError
from .ehr_data import SyntheticConfig
from .evaluation import EvaluationConfig
from .expert_models import ExpertConfig
from .fusion import FusionConfig
from .llm_gateway import ProviderConfig

logger = logging.getLogger(__name__)


class ConfigError(ValueError):
    """Raised for invalid or inconsistent run configuration."""


def _default_experts() -> List[ExpertConfig]:
    return [
        ExpertConfig(architecture="gru_last", seed=0),
        ExpertConfig(architecture="attn_pool", seed=1),
        ExpertConfig(architecture="recalib_gate", seed=2),
    ]


@dataclass
class RunConfig:
    run_dir: str = "runs/default"
    seed: int = 42
    dataset: Optional[str] = None
    corpus: Optional[str] = None
    split_ratios: Tuple[float, float, float] = (0.8, 0.15, 0.05)
    chunk_size: int = 400
    overlap: int = 100
    embedding_dim: int = 128
    informative_rate: float = 0.9
    synthetic: SyntheticConfig = field(default_factory=SyntheticConfig)
    experts: List[ExpertConfig] = field(default_factory=_default_experts)
    consultation: ConsultationConfig = field(default_factory=ConsultationConfig)
    provider: ProviderConfig = field(default_factory=ProviderConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    evaluation: EvaluationConfig = field(default_factory=EvaluationConfig)

    def validate(self) -> "RunConfig":
        if not 1 <= len(self.experts) <= 3:
            raise ConfigError(f"Between 1 and 3 expert configs expected, got {len(self.experts)}")
        names = [e.name for e in self.experts]
        if len(set(names)) != len(names):
            raise ConfigError(f"Expert names must be unique, got {names}")
        if self.consultation.n_doctors != len(self.experts):
            raise ConfigError(
                f"consultation.n_doctors={self.consultation.n_doctors} but {len(self.experts)} expert configs"
            )
        if len(self.split_ratios) != 3:
            raise ConfigError(f"split_ratios needs three values, got {self.split_ratios}")
        if self.chunk_size <= self.overlap or self.overlap < 0:
            raise ConfigError(f"Need chunk_size > overlap >= 0, got {self.chunk_size}/{self.overlap}")
        if self.dataset and not os.path.exists(self.dataset):
            raise ConfigError(f"Dataset file not found: {self.dataset}")
        if self.corpus and not os.path.exists(self.corpus):
            raise ConfigError(f"Corpus file not found: {self.corpus}")
        return self

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"Unknown config keys: {unknown}")
        sections = {
            "synthetic": SyntheticConfig,
            "consultation": ConsultationConfig,
            "provider": ProviderConfig,
            "fusion": FusionConfig,
            "evaluation": EvaluationConfig,
        }
        kwargs: Dict[str, Any] = {}
        try:
            for key, value in data.items():
                if key in sections:
                    kwargs[key] = sections[key](**value)
                elif key == "experts":
                    kwargs[key] = [ExpertConfig(**e) for e in value]
                elif key == "split_ratios":
                    kwargs[key] = tuple(value)
                else:
                    kwargs[key] = value
            config = cls(**kwargs)
        except (TypeError, ValueError, ConsultationError) as e:
            raise ConfigError(f"Invalid configuration: {e}") from e
        if "consultation" not in data:
            config.consultation.n_doctors = len(config.experts)
        return config

    @classmethod
    def from_file(cls, path: str) -> "RunConfig":
        if not os.path.exists(path):
            raise ConfigError(f"Config file not found: {path}")
        try:
            with open(path, "r") as f:
                data = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e})") from e
        logger.info(f"Loaded run configuration from {path}")
        return cls.from_dict(data)
