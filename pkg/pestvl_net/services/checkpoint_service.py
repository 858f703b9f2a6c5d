"""
Checkpoint serialization.

File layout (little-endian):

    magic "PVLC" | version u16 | epoch u32 | config length u32 | config JSON
    model section | optimizer section | rng section

Each section is a tensor count u32 followed by, per tensor, the name length
u32, the UTF-8 name, the rank u32, the dims as u32 and float32 data. Tensors
are written in the order given; integer states (RNG bytes, step counters) are
stored as exact float32 values.
"""

import logging
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from io import BytesIO
from pathlib import Path
from typing import Dict

import numpy as np
import torch
from pydantic import ValidationError as PydanticValidationError

from ..schemas.config import ModelConfig
from ..utils.exceptions import CheckpointFormatError

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"PVLC"
CHECKPOINT_VERSION = 1
_HEADER = struct.Struct("<4sHI")
_U32 = struct.Struct("<I")
_MAX_EXACT_INT = 2**24

TensorMap = Dict[str, torch.Tensor]


@dataclass
class Checkpoint:
    """Config snapshot, parameters, optimizer state and RNG state at an epoch boundary."""

    config: ModelConfig
    epoch: int
    model_state: TensorMap = field(default_factory=OrderedDict)
    optimizer_state: TensorMap = field(default_factory=OrderedDict)
    rng_state: TensorMap = field(default_factory=OrderedDict)


def _write_section(buffer: BytesIO, tensors: TensorMap) -> None:
    buffer.write(_U32.pack(len(tensors)))
    for name, tensor in tensors.items():
        encoded = name.encode("utf-8")
        tensor = tensor.detach().cpu()
        if not tensor.is_floating_point() and tensor.numel():
            if tensor.to(torch.int64).abs().max() >= _MAX_EXACT_INT:
                raise CheckpointFormatError(f"Integer tensor {name} cannot be stored exactly as float32")
        array = tensor.to(torch.float32).numpy()
        buffer.write(_U32.pack(len(encoded)))
        buffer.write(encoded)
        buffer.write(_U32.pack(array.ndim))
        for dim in array.shape:
            buffer.write(_U32.pack(dim))
        buffer.write(array.astype("<f4").tobytes())


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.offset = 0

    def take(self, size: int) -> bytes:
        if self.offset + size > len(self.data):
            raise CheckpointFormatError(f"Checkpoint truncated at byte {self.offset}")
        chunk = self.data[self.offset : self.offset + size]
        self.offset += size
        return chunk

    def u32(self) -> int:
        return _U32.unpack(self.take(4))[0]

    def section(self) -> TensorMap:
        tensors: TensorMap = OrderedDict()
        for _ in range(self.u32()):
            try:
                name = self.take(self.u32()).decode("utf-8")
            except UnicodeDecodeError:
                raise CheckpointFormatError(f"Tensor name at byte {self.offset} is not UTF-8")
            shape = tuple(self.u32() for _ in range(self.u32()))
            count = int(np.prod(shape, dtype=np.int64))
            array = np.frombuffer(self.take(4 * count), dtype="<f4").reshape(shape)
            if name in tensors:
                raise CheckpointFormatError(f"Duplicate tensor name {name}")
            tensors[name] = torch.from_numpy(array.astype(np.float32))
        return tensors


def checkpoint_to_bytes(checkpoint: Checkpoint) -> bytes:
    buffer = BytesIO()
    config = checkpoint.config.canonical_json().encode("utf-8")
    buffer.write(_HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, checkpoint.epoch))
    buffer.write(_U32.pack(len(config)))
    buffer.write(config)
    _write_section(buffer, checkpoint.model_state)
    _write_section(buffer, checkpoint.optimizer_state)
    _write_section(buffer, checkpoint.rng_state)
    return buffer.getvalue()


def checkpoint_from_bytes(data: bytes) -> Checkpoint:
    """
    Parse a checkpoint.

    Raises:
        CheckpointFormatError: Bad magic or version, truncation, trailing bytes or invalid config
    """
    reader = _Reader(data)
    magic, version, epoch = _HEADER.unpack(reader.take(_HEADER.size))
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointFormatError(f"Bad checkpoint magic {magic!r}")
    if version != CHECKPOINT_VERSION:
        raise CheckpointFormatError(f"Unsupported checkpoint version {version}")
    try:
        config = ModelConfig.model_validate_json(reader.take(reader.u32()))
    except PydanticValidationError as e:
        raise CheckpointFormatError(f"Checkpoint config is invalid: {e.errors()[0]['msg']}")
    checkpoint = Checkpoint(
        config=config,
        epoch=epoch,
        model_state=reader.section(),
        optimizer_state=reader.section(),
        rng_state=reader.section(),
    )
    if reader.offset != len(data):
        raise CheckpointFormatError(f"{len(data) - reader.offset} trailing bytes after checkpoint")
    return checkpoint


def save_checkpoint(checkpoint: Checkpoint, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(checkpoint_to_bytes(checkpoint))
    logger.info(f"Saved checkpoint for epoch {checkpoint.epoch} to {path}")
    return path


def load_checkpoint(path: str | Path) -> Checkpoint:
    try:
        data = Path(path).read_bytes()
    except FileNotFoundError:
        raise CheckpointFormatError(f"Checkpoint {path} not found")
    return checkpoint_from_bytes(data)


def generator_state(generator: torch.Generator) -> torch.Tensor:
    return generator.get_state().to(torch.float32)


def restore_generator(generator: torch.Generator, state: torch.Tensor) -> None:
    generator.set_state(state.round().to(torch.uint8))


def tensors_to_bytes(tensors: TensorMap) -> bytes:
    """A lone tensor section, used for raw float dumps."""
    buffer = BytesIO()
    _write_section(buffer, tensors)
    return buffer.getvalue()


def tensors_from_bytes(data: bytes) -> TensorMap:
    reader = _Reader(data)
    tensors = reader.section()
    if reader.offset != len(data):
        raise CheckpointFormatError(f"{len(data) - reader.offset} trailing bytes after tensor section")
    return tensors
