"""
Text encoders and the binary caption-embedding store.

Embedding store layout (little-endian): magic ``PVLE``, version u16,
count u32, dimension u32, then ``count`` records of a 32-byte sha256 caption
hash followed by ``dimension`` float32 values. Records are written in hash order.
"""

import hashlib
import logging
import struct
from abc import ABC, abstractmethod
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, Iterator, Optional, Tuple

import httpx
import numpy as np

from ..config import Settings, get_settings
from ..utils.exceptions import (
    ConfigError,
    EmbeddingLookupError,
    EmbeddingStoreError,
    ExternalServiceError,
    ValidationError,
)

logger = logging.getLogger(__name__)

STORE_MAGIC = b"PVLE"
STORE_VERSION = 1
_HEADER = struct.Struct("<4sHII")
HASH_BYTES = 32


def caption_digest(caption: str) -> bytes:
    """sha256 of the UTF-8 caption text."""
    return hashlib.sha256(caption.encode("utf-8")).digest()


def caption_hash(caption: str) -> str:
    return caption_digest(caption).hex()


@dataclass(frozen=True)
class TextEmbedding:
    """A D-dimensional caption embedding."""

    vector: np.ndarray
    encoder_id: str

    @property
    def dimension(self) -> int:
        return int(self.vector.shape[0])


class TextEncoder(ABC):
    """Maps a caption to a fixed-dimension embedding."""

    encoder_id: str
    dimension: int

    @abstractmethod
    def encode(self, caption: str) -> TextEmbedding:
        """Encode one caption."""


class MockTextEncoder(TextEncoder):
    """Deterministic unit vectors seeded from the caption hash."""

    def __init__(self, dimension: int = 512, seed: int = 0):
        if dimension < 1:
            raise ValidationError(f"Embedding dimension must be positive, got {dimension}")
        self.dimension = dimension
        self.seed = seed
        self.encoder_id = f"mock-sha256-{seed}"

    def encode(self, caption: str) -> TextEmbedding:
        digest = hashlib.sha256(f"{self.seed}:{caption}".encode("utf-8")).digest()
        rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
        vector = rng.standard_normal(self.dimension)
        vector /= np.linalg.norm(vector)
        return TextEmbedding(vector=vector.astype(np.float32), encoder_id=self.encoder_id)


class EmbeddingStore:
    """Caption-hash keyed embeddings of one dimension."""

    def __init__(self, dimension: int):
        if dimension < 1:
            raise EmbeddingStoreError(f"Embedding dimension must be positive, got {dimension}")
        self.dimension = dimension
        self._vectors: Dict[bytes, np.ndarray] = {}

    def __len__(self) -> int:
        return len(self._vectors)

    def __contains__(self, caption: str) -> bool:
        return caption_digest(caption) in self._vectors

    def items(self) -> Iterator[Tuple[bytes, np.ndarray]]:
        for digest in sorted(self._vectors):
            yield digest, self._vectors[digest]

    def put(self, digest: bytes, vector: np.ndarray) -> None:
        vector = np.asarray(vector, dtype=np.float32)
        if len(digest) != HASH_BYTES:
            raise EmbeddingStoreError(f"Caption hash must be {HASH_BYTES} bytes")
        if vector.shape != (self.dimension,):
            raise EmbeddingStoreError(
                f"Vector has shape {vector.shape}, store dimension is {self.dimension}"
            )
        if not np.isfinite(vector).all():
            raise EmbeddingStoreError("Embedding vector contains non-finite values")
        self._vectors[digest] = vector

    def add(self, caption: str, vector: np.ndarray) -> None:
        self.put(caption_digest(caption), vector)

    def get_by_hash(self, hex_digest: str) -> np.ndarray:
        try:
            return self._vectors[bytes.fromhex(hex_digest)]
        except (KeyError, ValueError):
            raise EmbeddingLookupError(hex_digest)

    def get(self, caption: str) -> np.ndarray:
        return self.get_by_hash(caption_hash(caption))

    def to_bytes(self) -> bytes:
        parts = [_HEADER.pack(STORE_MAGIC, STORE_VERSION, len(self._vectors), self.dimension)]
        for digest, vector in self.items():
            parts.append(digest)
            parts.append(vector.astype("<f4").tobytes())
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, data: bytes) -> "EmbeddingStore":
        if len(data) < _HEADER.size:
            raise EmbeddingStoreError("Embedding store is truncated (header)")
        magic, version, count, dimension = _HEADER.unpack_from(data, 0)
        if magic != STORE_MAGIC:
            raise EmbeddingStoreError(f"Bad embedding store magic {magic!r}")
        if version != STORE_VERSION:
            raise EmbeddingStoreError(f"Unsupported embedding store version {version}")
        record = HASH_BYTES + 4 * dimension
        if len(data) != _HEADER.size + count * record:
            raise EmbeddingStoreError(
                f"Embedding store size {len(data)} does not match {count} records of dimension {dimension}"
            )
        store = cls(dimension)
        offset = _HEADER.size
        for _ in range(count):
            digest = data[offset : offset + HASH_BYTES]
            vector = np.frombuffer(data, dtype="<f4", count=dimension, offset=offset + HASH_BYTES)
            store.put(digest, vector.astype(np.float32))
            offset += record
        return store

    def save(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path: str | Path) -> "EmbeddingStore":
        try:
            return cls.from_bytes(Path(path).read_bytes())
        except FileNotFoundError:
            raise EmbeddingStoreError(f"Embedding store {path} not found")


class FileBackedTextEncoder(TextEncoder):
    """Looks captions up in a precomputed embedding store."""

    def __init__(self, store: EmbeddingStore, encoder_id: str = "file-backed"):
        self.store = store
        self.dimension = store.dimension
        self.encoder_id = encoder_id

    def encode(self, caption: str) -> TextEmbedding:
        return TextEmbedding(vector=self.store.get(caption), encoder_id=self.encoder_id)


class RemoteTextEncoder(TextEncoder):
    """
    Encoder behind an HTTP endpoint.

    POSTs ``{"input": caption}`` and expects ``{"embedding": [...]}``.
    """

    def __init__(
        self,
        dimension: int,
        settings: Optional[Settings] = None,
        transport: Optional[httpx.BaseTransport] = None,
    ):
        self.settings = settings or get_settings()
        if not self.settings.text_encoder_api_url:
            raise ConfigError("TEXT_ENCODER_API_URL must be set for the remote encoder")
        self.dimension = dimension
        self.encoder_id = f"remote:{self.settings.text_encoder_api_url}"
        self._client = httpx.Client(
            timeout=self.settings.text_encoder_timeout_seconds, transport=transport
        )

    def close(self) -> None:
        self._client.close()

    def encode(self, caption: str) -> TextEmbedding:
        try:
            response = self._client.post(
                str(self.settings.text_encoder_api_url), json={"input": caption}
            )
            response.raise_for_status()
            vector = np.asarray(response.json()["embedding"], dtype=np.float32)
        except httpx.HTTPStatusError as e:
            raise ExternalServiceError(
                "text-encoder", f"HTTP {e.response.status_code}", status_code=e.response.status_code
            )
        except httpx.HTTPError as e:
            raise ExternalServiceError("text-encoder", f"request failed: {e}")
        except (ValueError, KeyError, TypeError) as e:
            raise ExternalServiceError("text-encoder", f"malformed response: {e}")
        return TextEmbedding(vector=vector, encoder_id=self.encoder_id)


def encode_text(caption: str, encoder: TextEncoder) -> TextEmbedding:
    """Encode a caption and check the result's dimension and finiteness."""
    embedding = encoder.encode(caption)
    if embedding.vector.shape != (encoder.dimension,):
        raise ValidationError(
            f"Encoder {encoder.encoder_id} returned dimension {embedding.vector.shape}, "
            f"expected {encoder.dimension}"
        )
    if not np.isfinite(embedding.vector).all():
        raise ValidationError(f"Encoder {encoder.encoder_id} returned non-finite values")
    return embedding


def build_embedding_store(captions: Iterable[str], encoder: TextEncoder) -> EmbeddingStore:
    """Encode every distinct caption into a new store."""
    store = EmbeddingStore(encoder.dimension)
    for caption in captions:
        if caption not in store:
            store.add(caption, encode_text(caption, encoder).vector)
    logger.info(f"Encoded {len(store)} distinct captions with {encoder.encoder_id}")
    return store
