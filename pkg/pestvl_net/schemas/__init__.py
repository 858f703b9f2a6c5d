"""Pydantic schemas for configuration, captions, datasets, metrics and CLI output."""

from .config import (
    ModelConfig,
    SaliencyConfig,
    PartitionConfig,
    RwkvConfig,
    FusionConfig,
    OptimizerConfig,
    DataConfig,
    AblationConfig,
    EvaluationConfig,
)
from .caption import Attribute, ExpertKnowledgeEntry, CotTemplate, CaptionRecord
from .dataset import Sample, DatasetManifest
from .metrics import MetricsReport, EpochRecord
from .cli import CliSummary, SuiteResult, SelfTestReport

__all__ = [
    # Config schemas
    "ModelConfig",
    "SaliencyConfig",
    "PartitionConfig",
    "RwkvConfig",
    "FusionConfig",
    "OptimizerConfig",
    "DataConfig",
    "AblationConfig",
    "EvaluationConfig",
    # Caption schemas
    "Attribute",
    "ExpertKnowledgeEntry",
    "CotTemplate",
    "CaptionRecord",
    # Dataset schemas
    "Sample",
    "DatasetManifest",
    # Metrics schemas
    "MetricsReport",
    "EpochRecord",
    # CLI schemas
    "CliSummary",
    "SuiteResult",
    "SelfTestReport",
]
