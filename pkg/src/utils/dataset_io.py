import json
import struct
import hashlib
import logging

import numpy as np

from src.core.config import CorpusConfig
from src.core.errors import ConfigError, DataError
from src.utils.corpus import Corpus, SymbolTable, Utterance
from src.utils.fs_utils import atomic_write_bytes

logger = logging.getLogger(__name__)

DATASET_MAGIC = b"RCDS"
DATASET_VERSION = 1
_PREAMBLE = struct.Struct("<4sIQ")
_RECORD_HEAD = struct.Struct("<III")
_FRAMES_HEAD = struct.Struct("<II")


def _encode_record(u: Utterance) -> bytes:
    return b"".join([
        _RECORD_HEAD.pack(u.n_symbols, u.n_frames, u.style_class),
        np.asarray(u.symbol_ids, dtype="<u4").tobytes(),
        np.asarray(u.durations, dtype="<u4").tobytes(),
        np.asarray(u.frames, dtype="<f8").tobytes(),
    ])


def _table_bytes(table: SymbolTable) -> bytes:
    return (np.asarray(table.prototypes, dtype="<f8").tobytes()
            + np.asarray(table.base_durations, dtype="<f8").tobytes())


def content_hash(corpus: Corpus) -> str:
    digest = hashlib.sha256()
    for u in corpus.utterances:
        digest.update(_encode_record(u))
    digest.update(_table_bytes(corpus.table))
    return digest.hexdigest()


def encode_dataset(corpus: Corpus) -> bytes:
    """
    Little-endian: magic, u32 version, u64 header length, JSON header, then per utterance
    u32 N, u32 T, u32 style, N x u32 symbol ids, N x u32 durations, T x F float64 frames.
    """
    records = b"".join(_encode_record(u) for u in corpus.utterances)
    header = {
        "format_version": DATASET_VERSION,
        "corpus_config": corpus.config.to_dict(),
        "feature_dim": corpus.table.feature_dim,
        "symbol_table": {
            "prototypes": corpus.table.prototypes.tolist(),
            "base_durations": corpus.table.base_durations.tolist(),
        },
        "n_records": len(corpus.utterances),
        "split": {"validation": list(corpus.validation_indices)},
        "content_hash": content_hash(corpus),
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return _PREAMBLE.pack(DATASET_MAGIC, DATASET_VERSION, len(header_bytes)) + header_bytes + records


def write_dataset(corpus: Corpus, path: str) -> str:
    """Writes the corpus and returns its content hash."""
    payload = encode_dataset(corpus)
    atomic_write_bytes(path, payload)
    digest = content_hash(corpus)
    logger.info(f"Wrote {len(corpus)} utterances to {path} (sha256 {digest[:16]}...)")
    return digest


class _Reader:
    def __init__(self, data: bytes, path: str):
        self.data = data
        self.path = path
        self.offset = 0

    def take(self, n: int, what: str) -> bytes:
        if self.offset + n > len(self.data):
            raise DataError(f"{self.path}: truncated while reading {what} "
                            f"(need {n} bytes at offset {self.offset}, file has {len(self.data)})")
        chunk = self.data[self.offset:self.offset + n]
        self.offset += n
        return chunk


def decode_dataset(data: bytes, path: str = "<bytes>") -> Corpus:
    reader = _Reader(data, path)
    magic, version, header_len = _PREAMBLE.unpack(reader.take(_PREAMBLE.size, "preamble"))
    if magic != DATASET_MAGIC:
        raise DataError(f"{path}: not a dataset file (magic {magic!r})")
    if version != DATASET_VERSION:
        raise DataError(f"{path}: unsupported dataset version {version}, expected {DATASET_VERSION}")
    try:
        header = json.loads(reader.take(header_len, "header").decode("utf-8"))
        config = CorpusConfig.from_dict(header["corpus_config"])
        table = SymbolTable(np.array(header["symbol_table"]["prototypes"], dtype=np.float64),
                            np.array(header["symbol_table"]["base_durations"], dtype=np.float64))
        feature_dim = int(header["feature_dim"])
        n_records = int(header["n_records"])
    except (ValueError, KeyError, TypeError, ConfigError) as e:
        raise DataError(f"{path}: malformed dataset header: {e}")

    utterances = []
    for index in range(n_records):
        what = f"record {index}"
        n, t, style = _RECORD_HEAD.unpack(reader.take(_RECORD_HEAD.size, what))
        ids = np.frombuffer(reader.take(4 * n, what), dtype="<u4").astype(np.int64)
        durations = np.frombuffer(reader.take(4 * n, what), dtype="<u4").astype(np.int64)
        frames = np.frombuffer(reader.take(8 * t * feature_dim, what), dtype="<f8").reshape(t, feature_dim)
        if int(durations.sum()) != t:
            raise DataError(f"{path}: record {index} durations sum to {int(durations.sum())}, frame count is {t}")
        utterances.append(Utterance(ids, durations, int(style), frames.astype(np.float64)))
    if reader.offset != len(data):
        raise DataError(f"{path}: {len(data) - reader.offset} trailing bytes after {n_records} records")

    corpus = Corpus(config, table, utterances, tuple(header.get("split", {}).get("validation", [])))
    digest = content_hash(corpus)
    if digest != header.get("content_hash"):
        raise DataError(f"{path}: content hash mismatch (header {header.get('content_hash')}, data {digest})")
    return corpus


def read_dataset(path: str) -> Corpus:
    try:
        with open(path, 'rb') as f:
            data = f.read()
    except OSError as e:
        raise DataError(f"Cannot read dataset {path}: {e}")
    corpus = decode_dataset(data, path)
    logger.info(f"Loaded {len(corpus)} utterances from {path}")
    return corpus


def write_frames(path: str, frames: np.ndarray):
    frames = np.asarray(frames, dtype="<f8")
    atomic_write_bytes(path, _FRAMES_HEAD.pack(frames.shape[0], frames.shape[1]) + frames.tobytes())


def read_frames(path: str) -> np.ndarray:
    try:
        with open(path, 'rb') as f:
            data = f.read()
    except OSError as e:
        raise DataError(f"Cannot read frames {path}: {e}")
    reader = _Reader(data, path)
    t, f_dim = _FRAMES_HEAD.unpack(reader.take(_FRAMES_HEAD.size, "frame header"))
    return np.frombuffer(reader.take(8 * t * f_dim, "frames"), dtype="<f8").reshape(t, f_dim).copy()
