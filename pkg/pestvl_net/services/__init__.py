"""Pipelines and artifact services for PestVL-Net."""

from .caption_service import CaptionService, MllmClient
from .text_encoder import EmbeddingStore, MockTextEncoder, RemoteTextEncoder
from .training_service import TrainingService, train, evaluate, run_ablation_study

__all__ = [
    "CaptionService",
    "MllmClient",
    "EmbeddingStore",
    "MockTextEncoder",
    "RemoteTextEncoder",
    "TrainingService",
    "train",
    "evaluate",
    "run_ablation_study",
]
