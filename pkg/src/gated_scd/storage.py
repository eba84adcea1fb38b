"""Checkpoint storage for model parameters.

Binary layout (all integers little-endian u32, see docs/checkpoint-format.md)::

    b"SCD1" | version | tensor count
    per tensor: name length | UTF-8 name | 4 dims | n·c·h·w little-endian f64

The decoder configuration that produced the parameters is stored next to the
checkpoint as JSON, so a checkpoint directory is self-contained.
"""

import json
import logging
import struct
from pathlib import Path

import numpy as np

from gated_scd.errors import FormatError, ShapeError
from gated_scd.models import DecoderConfig

logger = logging.getLogger(__name__)

MAGIC = b"SCD1"
VERSION = 1
CHECKPOINT_NAME = "checkpoint.scd"
CONFIG_NAME = "decoder_config.json"

_U32 = struct.Struct("<I")
_DIMS = struct.Struct("<4I")


# =============================================================================
# Tensors
# =============================================================================


def save_checkpoint(params: dict[str, np.ndarray], path: Path) -> Path:
    """Write every tensor in insertion order; returns the path written."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    chunks = [MAGIC, _U32.pack(VERSION), _U32.pack(len(params))]
    for name, tensor in params.items():
        if tensor.ndim != 4:
            raise ShapeError(f"{name}: checkpoint tensors must be rank 4, got {tensor.shape}")
        encoded = name.encode("utf-8")
        chunks += [
            _U32.pack(len(encoded)),
            encoded,
            _DIMS.pack(*tensor.shape),
            np.ascontiguousarray(tensor, dtype="<f8").tobytes(),
        ]
    path.write_bytes(b"".join(chunks))
    logger.info("saved %d tensors to %s", len(params), path)
    return path


def load_checkpoint(path: Path) -> dict[str, np.ndarray]:
    path = Path(path)
    if not path.exists():
        raise FormatError(f"{path}: checkpoint not found")
    raw = path.read_bytes()
    if raw[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}")
    pos = 4

    def take(size: int) -> bytes:
        nonlocal pos
        if pos + size > len(raw):
            raise FormatError(f"{path}: truncated at byte {pos}")
        chunk = raw[pos : pos + size]
        pos += size
        return chunk

    (version,) = _U32.unpack(take(4))
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    (count,) = _U32.unpack(take(4))
    params = {}
    for _ in range(count):
        (name_len,) = _U32.unpack(take(4))
        try:
            name = take(name_len).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError(f"{path}: tensor name is not UTF-8") from exc
        dims = _DIMS.unpack(take(_DIMS.size))
        payload = take(8 * int(np.prod(dims)))
        params[name] = np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(dims)
    if pos != len(raw):
        raise FormatError(f"{path}: {len(raw) - pos} trailing bytes")
    return params


# =============================================================================
# Checkpoint directories
# =============================================================================


def save_model(params: dict[str, np.ndarray], config: DecoderConfig, directory: Path) -> Path:
    directory = Path(directory)
    path = save_checkpoint(params, directory / CHECKPOINT_NAME)
    (directory / CONFIG_NAME).write_text(config.model_dump_json(indent=2))
    return path


def load_model(location: Path) -> tuple[dict[str, np.ndarray], DecoderConfig]:
    """Accepts the checkpoint directory or the checkpoint file inside it."""
    location = Path(location)
    directory = location if location.is_dir() else location.parent
    checkpoint = directory / CHECKPOINT_NAME if location.is_dir() else location
    config_path = directory / CONFIG_NAME
    if not config_path.exists():
        raise FormatError(f"{config_path}: decoder config missing next to checkpoint")
    try:
        config = DecoderConfig.model_validate(json.loads(config_path.read_text()))
    except json.JSONDecodeError as exc:
        raise FormatError(f"{config_path}: {exc}") from exc
    return load_checkpoint(checkpoint), config
