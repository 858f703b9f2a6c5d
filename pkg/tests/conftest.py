"""
Shared fixtures: small model configs and synthetic datasets written to tmp dirs.
"""

import logging
from logging.handlers import RotatingFileHandler
from pathlib import Path

import numpy as np
import pytest
import torch
from PIL import Image

from pestvl_net.config import get_settings, load_model_config
from pestvl_net.schemas.config import DataConfig, FusionConfig, ModelConfig, OptimizerConfig
from pestvl_net.services.dataset_service import make_toy_dataset

REPO_ROOT = Path(__file__).resolve().parents[1]
FIXTURES = Path(__file__).resolve().parent / "fixtures"


@pytest.fixture(autouse=True)
def reset_logging():
    """Undo setup_logging() so caplog sees package records in every test."""
    root = logging.getLogger()
    root_level = root.level
    yield
    for handler in list(root.handlers):
        if type(handler) in (logging.StreamHandler, RotatingFileHandler):
            root.removeHandler(handler)
            handler.close()
    root.setLevel(root_level)
    for name in ("pestvl_net", "httpx", "matplotlib", "PIL"):
        logger = logging.getLogger(name)
        logger.handlers.clear()
        logger.propagate = True
        logger.setLevel(logging.NOTSET)


@pytest.fixture(autouse=True)
def fresh_settings(monkeypatch):
    for var in ("MLLM_API_URL", "MLLM_API_KEY", "TEXT_ENCODER_API_URL"):
        monkeypatch.delenv(var, raising=False)
    get_settings.cache_clear()
    yield
    get_settings.cache_clear()


@pytest.fixture
def tiny_config() -> ModelConfig:
    """16x16 images, 8x8 stage features, two RWKV stages and one fusion block."""
    return ModelConfig(
        image_size=16,
        stem_channels=8,
        stem_stride=2,
        stage_count=2,
        fusion_count=1,
        class_count=2,
        embedding_dim=8,
        fusion=FusionConfig(prompt_tokens=2, ffn_ratio=2),
        optimizer=OptimizerConfig(lr=0.05, momentum=0.9, epochs=1, batch_size=4, seed=0),
        data=DataConfig(split_ratio=(1, 0, 0)),
    )


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """2 classes x 4 images at 16x16, everything in the train split."""
    return make_toy_dataset(
        tmp_path_factory.mktemp("tiny"),
        classes=2,
        per_class=4,
        size=16,
        seed=0,
        embedding_dim=8,
        ratio=(1, 0, 0),
    )


@pytest.fixture(scope="session")
def toy_config() -> ModelConfig:
    return load_model_config(REPO_ROOT / "config" / "toy.toml")


@pytest.fixture(scope="session")
def toy_dataset(tmp_path_factory, toy_config):
    """8 classes x 8 images at 32x32 with per-class mock caption embeddings."""
    return make_toy_dataset(
        tmp_path_factory.mktemp("toy"),
        classes=8,
        per_class=8,
        size=toy_config.image_size,
        seed=0,
        embedding_dim=toy_config.embedding_dim,
    )


@pytest.fixture
def image_file(tmp_path) -> Path:
    """A 32x32 RGB PNG with a bright square on a dark background."""
    array = np.full((32, 32, 3), 20, dtype=np.uint8)
    array[4:10, 20:26] = (230, 200, 40)
    path = tmp_path / "pest.png"
    Image.fromarray(array).save(path)
    return path


def write_class_tree(root: Path, per_class: dict[str, int], size: int = 8) -> Path:
    """Write ``count`` random PNGs under ``root/<class>/`` for every class."""
    rng = np.random.default_rng(0)
    for name, count in per_class.items():
        directory = root / name
        directory.mkdir(parents=True, exist_ok=True)
        for i in range(count):
            pixels = rng.integers(0, 256, (size, size, 3), dtype=np.uint8)
            Image.fromarray(pixels).save(directory / f"{i:03d}.png")
    return root


def random_tensor(*shape: int, seed: int = 0, dtype=torch.float64) -> torch.Tensor:
    generator = torch.Generator().manual_seed(seed)
    return torch.randn(*shape, generator=generator, dtype=dtype)
