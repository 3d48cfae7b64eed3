"""Versioned binary checkpoint format.

Layout: magic ``PGLB``, little-endian u16 format version, u32 header length,
a UTF-8 JSON header with sorted keys, then every array listed in the header
as little-endian float64 in row-major order. Equal checkpoints serialize to
identical bytes.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
from pydantic import BaseModel, ValidationError

from pathguide_lab.adapters.rewards import RewardStats
from pathguide_lab.core.models import FloatArray
from pathguide_lab.errors import CheckpointFormatError

MAGIC = b"PGLB"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<4sHI")
_FLOAT = np.dtype("<f8")


class ArraySpec(BaseModel):
    name: str
    shape: list[int]


class CheckpointHeader(BaseModel):
    """JSON header preceding the array payload."""

    config_hash: str
    epoch: int
    feature_hash: str
    temperature: float
    reward_stats: RewardStats
    rng_state: dict[str, Any]
    arrays: list[ArraySpec]
    metadata: dict[str, float]


@dataclass(eq=False)
class Checkpoint:
    """Everything needed to resume training bit-exactly."""

    config_hash: str
    epoch: int
    feature_hash: str
    temperature: float
    policy_weights: FloatArray
    prior_weights: FloatArray
    reward_stats: RewardStats
    rng_state: dict[str, Any]
    critic: dict[str, FloatArray] | None = None
    metadata: dict[str, float] = field(default_factory=dict)
    version: int = FORMAT_VERSION

    def arrays(self) -> list[tuple[str, FloatArray]]:
        named = [("policy", self.policy_weights), ("prior", self.prior_weights)]
        if self.critic is not None:
            named.extend((f"critic.{name}", value) for name, value in sorted(self.critic.items()))
        return named


def save_checkpoint(checkpoint: Checkpoint) -> bytes:
    arrays = checkpoint.arrays()
    header = CheckpointHeader(
        config_hash=checkpoint.config_hash,
        epoch=checkpoint.epoch,
        feature_hash=checkpoint.feature_hash,
        temperature=checkpoint.temperature,
        reward_stats=checkpoint.reward_stats,
        rng_state=checkpoint.rng_state,
        arrays=[ArraySpec(name=name, shape=list(np.shape(value))) for name, value in arrays],
        metadata=checkpoint.metadata,
    )
    header_bytes = json.dumps(header.model_dump(mode="json"), sort_keys=True, separators=(",", ":")).encode("utf-8")
    chunks = [_PREFIX.pack(MAGIC, FORMAT_VERSION, len(header_bytes)), header_bytes]
    chunks.extend(np.ascontiguousarray(value, dtype=_FLOAT).tobytes(order="C") for _, value in arrays)
    return b"".join(chunks)


def load_checkpoint(data: bytes) -> Checkpoint:
    """Parse bytes written by ``save_checkpoint``.

    Raises:
        CheckpointFormatError: On a bad magic, unknown version or truncated payload.
    """
    if len(data) < _PREFIX.size:
        raise CheckpointFormatError("Checkpoint is shorter than its fixed prefix")
    magic, version, header_length = _PREFIX.unpack_from(data)
    if magic != MAGIC:
        raise CheckpointFormatError(f"Bad checkpoint magic {magic!r}")
    if version != FORMAT_VERSION:
        raise CheckpointFormatError(f"Unsupported checkpoint version {version}")
    offset = _PREFIX.size
    try:
        header = CheckpointHeader.model_validate_json(data[offset:offset + header_length])
    except ValidationError as exc:
        raise CheckpointFormatError(f"Malformed checkpoint header: {exc}") from exc
    offset += header_length

    arrays: dict[str, FloatArray] = {}
    for spec in header.arrays:
        count = int(np.prod(spec.shape)) if spec.shape else 1
        size = count * _FLOAT.itemsize
        if offset + size > len(data):
            raise CheckpointFormatError(f"Checkpoint truncated inside array {spec.name!r}")
        values = np.frombuffer(data, dtype=_FLOAT, count=count, offset=offset)
        arrays[spec.name] = values.reshape(spec.shape).astype(np.float64)
        offset += size
    if offset != len(data):
        raise CheckpointFormatError("Trailing bytes after checkpoint payload")
    for required in ("policy", "prior"):
        if required not in arrays:
            raise CheckpointFormatError(f"Checkpoint is missing array {required!r}")

    critic = {name.split(".", 1)[1]: value for name, value in arrays.items() if name.startswith("critic.")}
    return Checkpoint(
        config_hash=header.config_hash,
        epoch=header.epoch,
        feature_hash=header.feature_hash,
        temperature=header.temperature,
        policy_weights=arrays["policy"],
        prior_weights=arrays["prior"],
        reward_stats=header.reward_stats,
        rng_state=header.rng_state,
        critic=critic or None,
        metadata=header.metadata,
        version=version,
    )


def write_checkpoint(checkpoint: Checkpoint, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(save_checkpoint(checkpoint))


def read_checkpoint(path: Path) -> Checkpoint:
    try:
        return load_checkpoint(path.read_bytes())
    except OSError as exc:
        raise CheckpointFormatError(f"Cannot read checkpoint {path}: {exc}") from exc
