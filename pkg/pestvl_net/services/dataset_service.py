"""
Dataset service: manifests, stratified splits, image loading and the toy dataset.
"""

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import matplotlib
import numpy as np
import torch
from PIL import Image, UnidentifiedImageError
from pydantic import ValidationError as PydanticValidationError
from torch.utils.data import Dataset

from ..schemas.caption import CaptionRecord
from ..schemas.dataset import SPLIT_NAMES, DatasetManifest, Sample
from ..utils.exceptions import DataError, DatasetError, ValidationError
from .caption_service import prompt_hash, write_caption_store
from .text_encoder import EmbeddingStore, MockTextEncoder, build_embedding_store, caption_hash

logger = logging.getLogger(__name__)

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg"}


def split_counts(total: int, ratio: Sequence[int]) -> Tuple[int, ...]:
    """
    Largest-remainder apportionment of ``total`` items over ``ratio``.

    Ties in the fractional remainder go to the earlier split.
    """
    if total < 0 or not ratio or any(r < 0 for r in ratio) or sum(ratio) == 0:
        raise ValidationError(f"Invalid split ratio {tuple(ratio)} for {total} items")
    weight = sum(ratio)
    quotas = [total * r / weight for r in ratio]
    counts = [math.floor(q) for q in quotas]
    remaining = total - sum(counts)
    by_remainder = sorted(range(len(ratio)), key=lambda i: (-(quotas[i] - counts[i]), i))
    for i in by_remainder[:remaining]:
        counts[i] += 1
    return tuple(counts)


def _class_images(directory: Path) -> List[Path]:
    return sorted(
        p for p in directory.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES
    )


def build_manifest(
    root: str | Path,
    ratio: Sequence[int] = (7, 1, 2),
    seed: int = 0,
    caption_hashes: Optional[Dict[str, str]] = None,
) -> DatasetManifest:
    """
    Build a stratified manifest from a ``root/<class>/<image>`` tree.

    Classes are the sorted sub-directory names. Each class is shuffled with a
    seeded permutation and split by :func:`split_counts`.

    Raises:
        DatasetError: No class directories, or a class without images
    """
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"Dataset root {root} is not a directory")
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir() and not p.name.startswith("."))
    if not class_dirs:
        raise DatasetError(f"Dataset root {root} has no class directories")

    rng = np.random.default_rng(seed)
    samples: List[Sample] = []
    splits: Dict[str, List[int]] = {name: [] for name in SPLIT_NAMES}
    hashes = caption_hashes or {}

    for class_id, directory in enumerate(class_dirs):
        images = _class_images(directory)
        if not images:
            raise DatasetError(f"Class directory '{directory.name}' has no images", class_name=directory.name)
        first = len(samples)
        for path in images:
            relative = path.relative_to(root).as_posix()
            samples.append(
                Sample(image_path=relative, class_id=class_id, caption_hash=hashes.get(relative))
            )
        order = rng.permutation(len(images)) + first
        start = 0
        for name, count in zip(SPLIT_NAMES, split_counts(len(images), ratio)):
            splits[name].extend(int(i) for i in order[start : start + count])
            start += count

    manifest = DatasetManifest(
        root=str(root),
        class_names=[d.name for d in class_dirs],
        samples=samples,
        splits={name: sorted(indices) for name, indices in splits.items()},
        seed=seed,
        ratio=list(ratio),
    )
    logger.info(
        f"Built manifest for {len(samples)} images in {len(class_dirs)} classes",
        extra={name: len(indices) for name, indices in manifest.splits.items()},
    )
    return manifest


def attach_captions(manifest: DatasetManifest, records: Sequence[CaptionRecord]) -> DatasetManifest:
    """Set each sample's caption hash from caption records keyed by image path."""
    by_image = {record.image_id: caption_hash(record.caption) for record in records}
    samples = [
        s.model_copy(update={"caption_hash": by_image.get(s.image_path, s.caption_hash)})
        for s in manifest.samples
    ]
    return manifest.model_copy(update={"samples": samples})


def save_manifest(manifest: DatasetManifest, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(manifest.model_dump_json(indent=2) + "\n", encoding="utf-8")


def load_manifest(path: str | Path) -> DatasetManifest:
    try:
        return DatasetManifest.model_validate_json(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise DataError(f"Manifest {path} not found")
    except PydanticValidationError as e:
        raise DataError(f"Manifest {path} is invalid: {e.errors()[0]['msg']}")


def load_image(path: str | Path, size: Optional[int] = None) -> torch.Tensor:
    """Read an image as a float ``(3, H, W)`` tensor in [0, 1], resized to ``size``."""
    try:
        with Image.open(path) as img:
            img = img.convert("RGB")
            if size is not None and img.size != (size, size):
                img = img.resize((size, size), Image.Resampling.BILINEAR)
            array = np.asarray(img, dtype=np.float32) / 255.0
    except FileNotFoundError:
        raise DataError(f"Image {path} not found")
    except (UnidentifiedImageError, OSError) as e:
        raise DataError(f"Cannot decode image {path}: {e}")
    return torch.from_numpy(array.copy()).permute(2, 0, 1).contiguous()


class PestImageDataset(Dataset):
    """
    One manifest split as ``(image, caption embedding, label)`` triples.

    Without a store the embedding is a zero vector (fusion disabled).
    """

    def __init__(
        self,
        manifest: DatasetManifest,
        split: str,
        image_size: int,
        store: Optional[EmbeddingStore] = None,
        embedding_dim: Optional[int] = None,
        cache: bool = True,
    ):
        if split not in manifest.splits:
            raise ValidationError(f"Unknown split '{split}'")
        self.manifest = manifest
        self.samples = manifest.split_samples(split)
        self.root = Path(manifest.root)
        self.image_size = image_size
        self.store = store
        self.embedding_dim = store.dimension if store is not None else (embedding_dim or 1)
        if embedding_dim is not None and store is not None and store.dimension != embedding_dim:
            raise ValidationError(
                f"Embedding store dimension {store.dimension} does not match model dimension {embedding_dim}"
            )
        self._cache: Dict[int, torch.Tensor] = {}
        self._use_cache = cache

    def __len__(self) -> int:
        return len(self.samples)

    def _embedding(self, sample: Sample) -> torch.Tensor:
        if self.store is None:
            return torch.zeros(self.embedding_dim)
        if sample.caption_hash is None:
            raise DatasetError(f"Sample {sample.image_path} has no caption")
        return torch.from_numpy(self.store.get_by_hash(sample.caption_hash).copy())

    def __getitem__(self, index: int) -> Tuple[torch.Tensor, torch.Tensor, int]:
        sample = self.samples[index]
        image = self._cache.get(index)
        if image is None:
            image = load_image(self.root / sample.image_path, self.image_size)
            if self._use_cache:
                self._cache[index] = image
        return image, self._embedding(sample), sample.class_id


# Synthetic toy dataset

_TEXTURES = ("horizontal stripes", "vertical stripes", "diagonal stripes", "checkerboard")


@dataclass
class ToyDataset:
    root: Path
    images_root: Path
    manifest_path: Path
    captions_path: Path
    embeddings_path: Path
    manifest: DatasetManifest


def _toy_texture(class_id: int, size: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / size
    frequency = 2 + 2 * (class_id // len(_TEXTURES))
    phase = rng.uniform(0, 2 * np.pi)
    kind = class_id % len(_TEXTURES)
    if kind == 0:
        pattern = np.sin(2 * np.pi * frequency * yy + phase)
    elif kind == 1:
        pattern = np.sin(2 * np.pi * frequency * xx + phase)
    elif kind == 2:
        pattern = np.sin(2 * np.pi * frequency * (xx + yy) + phase)
    else:
        pattern = np.sign(np.sin(2 * np.pi * frequency * xx + phase)) * np.sign(
            np.sin(2 * np.pi * frequency * yy + phase)
        )
    value = 0.5 + 0.5 * pattern
    color = np.asarray(matplotlib.colormaps["tab10"](class_id % 10)[:3])
    rgb = value[..., None] * color + (1 - value[..., None]) * (1 - color) * 0.3
    rgb = rgb + rng.normal(0.0, 0.03, rgb.shape)
    return (np.clip(rgb, 0.0, 1.0) * 255).round().astype(np.uint8)


def toy_caption(class_name: str, class_id: int) -> str:
    texture = _TEXTURES[class_id % len(_TEXTURES)]
    density = "fine" if class_id // len(_TEXTURES) else "coarse"
    return f"A {class_name} pest whose body shows {density} {texture}."


def make_toy_dataset(
    root: str | Path,
    classes: int = 8,
    per_class: int = 8,
    size: int = 32,
    seed: int = 0,
    embedding_dim: int = 64,
    ratio: Sequence[int] = (7, 1, 2),
) -> ToyDataset:
    """
    Write a procedurally textured dataset with per-class captions.

    Layout under ``root``: ``images/<class>/<n>.png``, ``captions.jsonl``,
    ``embeddings.pvle`` (mock encoder) and ``manifest.json``.
    """
    if classes < 1 or per_class < 1 or size < 4:
        raise ValidationError("Toy dataset needs at least one class, one image and size >= 4")
    root = Path(root)
    images_root = root / "images"
    rng = np.random.default_rng(seed)
    records: List[CaptionRecord] = []

    for class_id in range(classes):
        name = f"class_{class_id:02d}"
        directory = images_root / name
        directory.mkdir(parents=True, exist_ok=True)
        caption = toy_caption(name, class_id)
        for index in range(per_class):
            path = directory / f"{index:03d}.png"
            Image.fromarray(_toy_texture(class_id, size, rng)).save(path)
            records.append(
                CaptionRecord(
                    image_id=path.relative_to(images_root).as_posix(),
                    species_label=name,
                    caption=caption,
                    prompt_hash=prompt_hash(f"toy:{name}"),
                    model_id="toy",
                    timestamp=0,
                )
            )

    captions_path = root / "captions.jsonl"
    write_caption_store(captions_path, records)
    store = build_embedding_store(
        (r.caption for r in records), MockTextEncoder(embedding_dim, seed=seed)
    )
    embeddings_path = root / "embeddings.pvle"
    store.save(embeddings_path)

    manifest = attach_captions(build_manifest(images_root, ratio, seed), records)
    manifest_path = root / "manifest.json"
    save_manifest(manifest, manifest_path)
    logger.info(f"Wrote toy dataset with {classes} classes x {per_class} images to {root}")
    return ToyDataset(
        root=root,
        images_root=images_root,
        manifest_path=manifest_path,
        captions_path=captions_path,
        embeddings_path=embeddings_path,
        manifest=manifest,
    )
