import json
import struct
import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from src.core.config import ModelConfig
from src.core.errors import (
    CheckpointError,
    CheckpointMagicError,
    CheckpointShapeError,
    CheckpointTruncatedError,
    CheckpointVersionError,
    ConfigError,
)
from src.core.model import Seq2SeqModel
from src.utils.fs_utils import atomic_write_bytes

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"RCAT"
CHECKPOINT_VERSION = 1
OPTIMIZER_PREFIX = "optim."
_PREAMBLE = struct.Struct("<4sIQ")


@dataclass
class Checkpoint:
    model: Seq2SeqModel
    train_state: dict = field(default_factory=dict)
    optimizer_tensors: dict = field(default_factory=dict)

    @property
    def step(self) -> int:
        return int(self.train_state.get("step", 0))


def encode_checkpoint(model: Seq2SeqModel, train_state: Optional[dict] = None,
                      optimizer_tensors: Optional[dict] = None) -> bytes:
    """Magic, u32 version, u64 header length, JSON header with the tensor table, raw float64 data."""
    tensors = dict(model.state_dict())
    for name, data in (optimizer_tensors or {}).items():
        tensors[OPTIMIZER_PREFIX + name] = data

    table, blobs, offset = {}, [], 0
    for name, data in tensors.items():
        blob = np.ascontiguousarray(data, dtype="<f8").tobytes()
        table[name] = {"shape": list(np.shape(data)), "dtype": "f64", "offset": offset}
        blobs.append(blob)
        offset += len(blob)

    header = {
        "model_config": model.config.to_dict(),
        "tensors": table,
        "train_state": train_state or {},
        "symbol_durations": model.default_durations,
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return _PREAMBLE.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(header_bytes)) + header_bytes + b"".join(blobs)


def save_checkpoint(model: Seq2SeqModel, path: str, train_state: Optional[dict] = None,
                    optimizer_tensors: Optional[dict] = None):
    atomic_write_bytes(path, encode_checkpoint(model, train_state, optimizer_tensors))
    logger.info(f"Saved checkpoint: {path}")


def decode_checkpoint(data: bytes, path: str = "<bytes>",
                      model_config: Optional[ModelConfig] = None) -> Checkpoint:
    """
    Rebuilds the model from the embedded config, or from `model_config` when given;
    in the latter case a tensor whose shape disagrees raises CheckpointShapeError.
    """
    if len(data) < _PREAMBLE.size:
        raise CheckpointTruncatedError(f"{path}: {len(data)} bytes is too short for a checkpoint")
    magic, version, header_len = _PREAMBLE.unpack_from(data)
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointMagicError(f"{path}: bad magic {magic!r}, expected {CHECKPOINT_MAGIC!r}")
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(f"{path}: checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    body_start = _PREAMBLE.size + header_len
    if body_start > len(data):
        raise CheckpointTruncatedError(f"{path}: header runs past end of file")
    try:
        header = json.loads(data[_PREAMBLE.size:body_start].decode("utf-8"))
        table = header["tensors"]
    except (ValueError, KeyError, TypeError) as e:
        raise CheckpointError(f"{path}: malformed checkpoint header: {e}")

    tensors = {}
    try:
        entries = [(name, entry["dtype"], tuple(int(d) for d in entry["shape"]), int(entry["offset"]))
                   for name, entry in table.items()]
    except (KeyError, TypeError, ValueError, AttributeError) as e:
        raise CheckpointError(f"{path}: malformed tensor table: {e!r}")
    for name, dtype, shape, offset in entries:
        if dtype != "f64":
            raise CheckpointError(f"{path}: tensor '{name}' has unsupported dtype {dtype}")
        if offset < 0 or any(d < 0 for d in shape):
            raise CheckpointError(f"{path}: tensor '{name}' has a negative offset or dimension")
        start = body_start + offset
        end = start + 8 * int(np.prod(shape, dtype=np.int64))
        if end > len(data):
            raise CheckpointTruncatedError(f"{path}: tensor '{name}' runs past end of file")
        tensors[name] = np.frombuffer(data[start:end], dtype="<f8").reshape(shape).astype(np.float64)

    try:
        config = model_config or ModelConfig.from_dict(header["model_config"])
    except (KeyError, TypeError, ConfigError) as e:
        raise CheckpointError(f"{path}: embedded model config is invalid: {e}")
    model = Seq2SeqModel(config)
    params = {n: t for n, t in tensors.items() if not n.startswith(OPTIMIZER_PREFIX)}
    for name in params:
        if name not in model.store:
            raise CheckpointShapeError(name, found=params[name].shape)
    model.load_state_dict(params)
    model.default_durations = header.get("symbol_durations")

    optimizer = {n[len(OPTIMIZER_PREFIX):]: t for n, t in tensors.items() if n.startswith(OPTIMIZER_PREFIX)}
    return Checkpoint(model, header.get("train_state") or {}, optimizer)


def load_checkpoint(path: str, model_config: Optional[ModelConfig] = None) -> Checkpoint:
    try:
        with open(path, 'rb') as f:
            data = f.read()
    except OSError as e:
        raise CheckpointError(f"Cannot read checkpoint {path}: {e}")
    checkpoint = decode_checkpoint(data, path, model_config)
    logger.info(f"Loaded {checkpoint.model.config.mechanism} checkpoint from {path} (step {checkpoint.step})")
    return checkpoint
