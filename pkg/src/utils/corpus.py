import hashlib
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.spatial.distance import pdist, squareform

from src.core.config import CorpusConfig
from src.core.errors import ConfigError, SymbolIndexError, UsageError

logger = logging.getLogger(__name__)

SYMBOL_TABLE_STREAM = 2 ** 64 - 1
OOD_STREAM_BASE = 2 ** 63
MIN_PROTOTYPE_DISTANCE = 0.5
MAX_RESAMPLES = 1000
MIN_DURATION = 2
BASE_DURATION_RANGE = (3.0, 20.0)
ENVELOPE_RANGE = (0.8, 1.2)


def stream_rng(seed: int, stream: int) -> np.random.Generator:
    """Independent generator for one (seed, stream) pair; both must fit in 64 bits."""
    if not (0 <= seed < 2 ** 64 and 0 <= stream < 2 ** 64):
        raise ConfigError(f"PRNG key out of range: seed={seed}, stream={stream}")
    return np.random.Generator(np.random.Philox(key=np.array([seed, stream], dtype=np.uint64)))


def parse_symbols(text: str, vocab_size: int) -> list[int]:
    """Parses space-separated tokens like 's3 s17 s3' (bare integers are accepted too)."""
    ids = []
    for token in text.split():
        raw = token[1:] if token.lower().startswith("s") else token
        try:
            symbol_id = int(raw)
        except ValueError:
            raise UsageError(f"Unrecognized symbol token '{token}'")
        if not 0 <= symbol_id < vocab_size:
            raise SymbolIndexError(f"Symbol '{token}' is outside the vocabulary of {vocab_size}")
        ids.append(symbol_id)
    if not ids:
        raise UsageError("No symbols given")
    return ids


@dataclass
class SymbolTable:
    prototypes: np.ndarray        # [V, feature_dim]
    base_durations: np.ndarray    # [V], mean frames per symbol

    @property
    def vocab_size(self) -> int:
        return self.prototypes.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.prototypes.shape[1]

    def min_distance(self) -> float:
        return float(pdist(self.prototypes).min()) if self.vocab_size > 1 else float("inf")


@dataclass
class Utterance:
    symbol_ids: np.ndarray     # [N] int
    durations: np.ndarray      # [N] int, frames per symbol
    style_class: int
    frames: np.ndarray         # [T, feature_dim]

    @property
    def n_symbols(self) -> int:
        return len(self.symbol_ids)

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def gt_alignment(self) -> np.ndarray:
        """Frame -> 1-based symbol index."""
        return np.repeat(np.arange(1, self.n_symbols + 1), self.durations)

    @property
    def stop_targets(self) -> np.ndarray:
        targets = np.zeros(self.n_frames)
        targets[-1] = 1.0
        return targets


@dataclass
class Corpus:
    config: CorpusConfig
    table: SymbolTable
    utterances: list[Utterance]
    validation_indices: tuple = field(default_factory=tuple)

    @property
    def train(self) -> list[Utterance]:
        held_out = set(self.validation_indices)
        return [u for i, u in enumerate(self.utterances) if i not in held_out]

    @property
    def validation(self) -> list[Utterance]:
        return [self.utterances[i] for i in self.validation_indices]

    def __len__(self) -> int:
        return len(self.utterances)


def gen_symbol_table(vocab_size: int, feature_dim: int, seed: int) -> SymbolTable:
    if vocab_size < 2:
        raise ConfigError(f"corpus.vocab_size: must be >= 2, got {vocab_size}")
    if feature_dim < 1:
        raise ConfigError(f"corpus.feature_dim: must be >= 1, got {feature_dim}")

    rng = stream_rng(seed, SYMBOL_TABLE_STREAM)
    prototypes = rng.uniform(-1.0, 1.0, size=(vocab_size, feature_dim))

    for attempt in range(MAX_RESAMPLES + 1):
        distances = squareform(pdist(prototypes))
        rows, cols = np.triu_indices(vocab_size, k=1)
        crowded = np.unique(cols[distances[rows, cols] <= MIN_PROTOTYPE_DISTANCE])
        if crowded.size == 0:
            break
        if attempt == MAX_RESAMPLES:
            raise ConfigError(
                f"corpus.feature_dim: {vocab_size} prototypes do not fit {MIN_PROTOTYPE_DISTANCE} apart "
                f"in {feature_dim} dimensions after {MAX_RESAMPLES} resamples")
        prototypes[crowded] = rng.uniform(-1.0, 1.0, size=(crowded.size, feature_dim))
    if attempt:
        logger.debug(f"Prototype repulsion settled after {attempt} resample rounds")

    base_durations = rng.uniform(*BASE_DURATION_RANGE, size=vocab_size)
    return SymbolTable(prototypes, base_durations)


def segment_frames(prototype: np.ndarray, duration: int, amplitude: float) -> np.ndarray:
    """Prototype scaled by a linear 0.8 -> 1.2 envelope across the segment."""
    envelope = np.linspace(*ENVELOPE_RANGE, num=duration)
    return envelope[:, None] * prototype[None, :] * amplitude


def gen_utterance(table: SymbolTable, config: CorpusConfig, stream: int,
                  style_class: Optional[int] = None, length: Optional[int] = None,
                  seed: Optional[int] = None, length_range: Optional[tuple] = None) -> Utterance:
    """
    Draws length, symbols, jittered durations and noisy frames, in that order, from stream
    `stream`. The length comes from `length_range` (default [min_len, max_len]) unless fixed
    by `length`; the style class defaults to `stream % n_style_classes`.
    """
    rng = stream_rng(config.seed if seed is None else seed, stream)
    n_classes = config.n_style_classes
    style = stream % n_classes if style_class is None else int(style_class)
    if not 0 <= style < n_classes:
        raise ConfigError(f"Style class {style} out of range [0, {n_classes})")

    lo, hi = length_range or (config.min_len, config.max_len)
    n = int(rng.integers(lo, hi + 1)) if length is None else int(length)
    if n < 1:
        raise UsageError(f"Utterance length must be >= 1, got {n}")
    ids = rng.integers(0, table.vocab_size, size=n)
    jitter = rng.lognormal(0.0, config.duration_jitter, size=n)
    raw = table.base_durations[ids] * config.style_tempo[style] * jitter
    durations = np.maximum(MIN_DURATION, np.floor(raw + 0.5)).astype(np.int64)

    amplitude = config.style_amplitude[style]
    clean = np.concatenate([segment_frames(table.prototypes[s], int(d), amplitude)
                            for s, d in zip(ids, durations)])
    frames = clean + rng.normal(0.0, config.noise_std, size=clean.shape)
    return Utterance(ids.astype(np.int64), durations, style, frames)


def validation_split(n: int, fraction: float, seed: int) -> tuple:
    """floor(n * fraction) indices, picked by ranking a SHA-256 of (seed, index)."""
    n_val = int(np.floor(n * fraction))
    ranked = sorted(range(n), key=lambda i: hashlib.sha256(f"{seed}:{i}".encode()).hexdigest())
    return tuple(sorted(ranked[:n_val]))


def gen_corpus(config: CorpusConfig, threads: int = 1) -> Corpus:
    config.validate()
    table = gen_symbol_table(config.vocab_size, config.feature_dim, config.seed)

    indices = range(config.n_utterances)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            utterances = list(pool.map(lambda i: gen_utterance(table, config, i), indices))
    else:
        utterances = [gen_utterance(table, config, i) for i in indices]

    split = validation_split(config.n_utterances, config.validation_fraction, config.seed)
    logger.info(f"Generated {len(utterances)} utterances "
                f"({len(utterances) - len(split)} train / {len(split)} validation)")
    return Corpus(config, table, utterances, split)


def gen_ood_sentences(table: SymbolTable, config: CorpusConfig, n_sentences: int,
                      long_factor: float, seed: int) -> list[Utterance]:
    """
    Held-out test sentences drawn from streams disjoint from training, with lengths
    sampled from [min_len, max_len] stretched by `long_factor`.
    """
    lo = max(1, int(np.floor(config.min_len * long_factor + 0.5)))
    hi = max(lo, int(np.floor(config.max_len * long_factor + 0.5)))
    sentences = []
    for i in range(n_sentences):
        sentences.append(gen_utterance(table, config, OOD_STREAM_BASE + i, style_class=i % config.n_style_classes,
                                       seed=seed, length_range=(lo, hi)))
    return sentences


def mean_symbol_durations(utterances: Sequence[Utterance], table: SymbolTable) -> list[float]:
    """Per-symbol mean duration over the utterances; unseen symbols fall back to the table mean."""
    totals = np.zeros(table.vocab_size)
    counts = np.zeros(table.vocab_size)
    for u in utterances:
        np.add.at(totals, u.symbol_ids, u.durations)
        np.add.at(counts, u.symbol_ids, 1)
    means = np.where(counts > 0, totals / np.maximum(counts, 1), table.base_durations)
    return [float(m) for m in means]
