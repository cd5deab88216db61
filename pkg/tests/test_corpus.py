#!/usr/bin/env python3
"""
Tests for the synthetic corpus generator and the binary dataset container.
"""

import os
import sys
import struct
import shutil
import tempfile
from dataclasses import replace

import numpy as np
import pytest

# Add src to path
sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..'))

from src.core.config import CorpusConfig
from src.core.errors import ConfigError, DataError, SymbolIndexError, UsageError
from src.utils.corpus import (
    MIN_PROTOTYPE_DISTANCE,
    OOD_STREAM_BASE,
    gen_corpus,
    gen_ood_sentences,
    gen_symbol_table,
    gen_utterance,
    mean_symbol_durations,
    parse_symbols,
    stream_rng,
    validation_split,
)
from src.utils.dataset_io import (
    content_hash,
    decode_dataset,
    encode_dataset,
    read_dataset,
    read_frames,
    write_dataset,
    write_frames,
)


def small_config(**overrides) -> CorpusConfig:
    values = dict(n_utterances=60, vocab_size=10, feature_dim=16, min_len=3, max_len=6, seed=5)
    values.update(overrides)
    return CorpusConfig(**values)


def test_symbol_table():
    print("\n=== Testing symbol table ===\n")
    a = gen_symbol_table(12, 8, seed=3)
    b = gen_symbol_table(12, 8, seed=3)
    assert np.array_equal(a.prototypes, b.prototypes)
    assert np.array_equal(a.base_durations, b.base_durations)
    assert not np.array_equal(a.prototypes, gen_symbol_table(12, 8, seed=4).prototypes)
    print("✓ deterministic per seed")

    assert a.min_distance() > MIN_PROTOTYPE_DISTANCE
    assert np.all(np.abs(a.prototypes) <= 1.0)
    assert np.all((a.base_durations >= 3.0) & (a.base_durations <= 20.0))
    print("✓ prototypes separated, durations in [3, 20]")

    with pytest.raises(ConfigError):
        gen_symbol_table(40, 2, seed=1)
    print("✓ 40 prototypes cannot fit in 2 dimensions")


def test_noiseless_utterance():
    print("\n=== Testing noiseless utterance ===\n")
    config = small_config(noise_std=0.0, duration_jitter=0.0, style_tempo=[1.0], style_amplitude=[1.0])
    table = gen_symbol_table(config.vocab_size, config.feature_dim, config.seed)
    u = gen_utterance(table, config, stream=0, length=1)

    symbol = int(u.symbol_ids[0])
    expected_duration = max(2, int(np.floor(table.base_durations[symbol] + 0.5)))
    assert list(u.durations) == [expected_duration]
    envelope = np.linspace(0.8, 1.2, expected_duration)
    assert np.allclose(u.frames, envelope[:, None] * table.prototypes[symbol][None, :], atol=1e-12)
    print(f"✓ one symbol, {expected_duration} frames, linear envelope")

    assert list(u.gt_alignment) == [1] * expected_duration
    assert u.stop_targets[-1] == 1.0 and u.stop_targets[:-1].sum() == 0.0
    print("✓ ground-truth alignment and stop targets")


def test_durations_match_frames():
    print("\n=== Testing duration bookkeeping ===\n")
    corpus = gen_corpus(small_config(n_utterances=1000, feature_dim=4, vocab_size=8))
    for u in corpus.utterances:
        assert int(u.durations.sum()) == u.n_frames
        assert np.all(u.durations >= 2)
        assert 3 <= u.n_symbols <= 6
        assert len(u.gt_alignment) == u.n_frames
    print("✓ durations sum to the frame count over 1000 utterances")


def test_style_tempo():
    print("\n=== Testing style tempo ===\n")
    config = small_config(n_utterances=400, feature_dim=4, vocab_size=8,
                          style_tempo=[1.0, 2.0], style_amplitude=[1.0, 1.0])
    corpus = gen_corpus(config)
    frames = {0: 0.0, 1: 0.0}
    base = {0: 0.0, 1: 0.0}
    for u in corpus.utterances:
        frames[u.style_class] += u.durations.sum()
        base[u.style_class] += corpus.table.base_durations[u.symbol_ids].sum()
    ratio = (frames[1] / base[1]) / (frames[0] / base[0])
    assert abs(ratio - 2.0) <= 0.2, f"tempo ratio {ratio:.3f}"
    print(f"✓ doubling the tempo doubles durations (ratio {ratio:.3f})")

    counts = np.bincount([u.style_class for u in corpus.utterances])
    assert counts.max() - counts.min() <= 1
    print("✓ style classes balanced")


def test_validation_split():
    print("\n=== Testing validation split ===\n")
    split = validation_split(10, 0.25, seed=1)
    assert len(split) == 2
    assert split == validation_split(10, 0.25, seed=1)
    assert validation_split(10, 0.0, seed=1) == ()
    assert len(validation_split(7, 0.5, seed=1)) == 3
    print("✓ floor(n * fraction), deterministic")

    corpus = gen_corpus(small_config(n_utterances=20, validation_fraction=0.25))
    assert len(corpus.validation) == 5 and len(corpus.train) == 15
    train_ids = {id(u) for u in corpus.train}
    assert not any(id(u) in train_ids for u in corpus.validation)
    print("✓ train and validation are disjoint")


def test_prototype_recovery():
    print("\n=== Testing prototype recovery ===\n")
    corpus = gen_corpus(small_config(n_utterances=50))
    prototypes = corpus.table.prototypes / np.linalg.norm(corpus.table.prototypes, axis=1, keepdims=True)
    hits = total = 0
    for u in corpus.utterances:
        start = 0
        for symbol, duration in zip(u.symbol_ids, u.durations):
            segment = u.frames[start:start + duration].mean(axis=0)
            start += duration
            nearest = int(np.argmax(prototypes @ (segment / np.linalg.norm(segment))))
            hits += nearest == symbol
            total += 1
    assert hits / total >= 0.99, f"{hits}/{total}"
    print(f"✓ {hits}/{total} segments closest (cosine) to their own prototype")


def test_threads_do_not_change_output():
    print("\n=== Testing threaded generation ===\n")
    config = small_config(n_utterances=30)
    assert content_hash(gen_corpus(config, threads=1)) == content_hash(gen_corpus(config, threads=4))
    print("✓ identical hash with 1 and 4 workers")

    with pytest.raises(ConfigError):
        gen_corpus(small_config(min_len=7, max_len=6))
    print("✓ min_len > max_len rejected")


def test_ood_sentences():
    print("\n=== Testing held-out sentences ===\n")
    config = small_config()
    table = gen_symbol_table(config.vocab_size, config.feature_dim, config.seed)
    sentences = gen_ood_sentences(table, config, n_sentences=12, long_factor=3.0, seed=99)
    assert len(sentences) == 12
    assert all(9 <= s.n_symbols <= 18 for s in sentences)
    assert [s.style_class for s in sentences[:4]] == [0, 1, 2, 0]
    again = gen_ood_sentences(table, config, n_sentences=12, long_factor=3.0, seed=99)
    assert all(np.array_equal(a.frames, b.frames) for a, b in zip(sentences, again))
    print("✓ stretched lengths, rotating styles, deterministic")

    for i, sentence in enumerate(sentences):
        rng = stream_rng(99, OOD_STREAM_BASE + i)
        n = int(rng.integers(9, 19))
        assert sentence.n_symbols == n
        assert np.array_equal(sentence.symbol_ids, rng.integers(0, config.vocab_size, size=n))
    print("✓ length and symbols are successive draws of one stream")

    means = mean_symbol_durations(sentences, table)
    assert len(means) == config.vocab_size and all(m > 0 for m in means)
    print("✓ per-symbol mean durations")


def test_parse_symbols():
    print("\n=== Testing symbol parsing ===\n")
    assert parse_symbols("s3 s17 3", 20) == [3, 17, 3]
    with pytest.raises(SymbolIndexError):
        parse_symbols("s3 s20", 20)
    with pytest.raises(UsageError):
        parse_symbols("s3 x", 20)
    with pytest.raises(UsageError):
        parse_symbols("   ", 20)
    print("✓ tokens, range and junk")


def test_dataset_round_trip():
    print("\n=== Testing dataset container ===\n")
    test_dir = tempfile.mkdtemp(prefix="rc_align_dataset_")
    try:
        corpus = gen_corpus(small_config(n_utterances=25, validation_fraction=0.2))
        path = os.path.join(test_dir, "corpus.rcds")
        digest = write_dataset(corpus, path)
        loaded = read_dataset(path)
        assert content_hash(loaded) == digest
        assert loaded.validation_indices == corpus.validation_indices
        assert loaded.config == corpus.config
        with open(path, 'rb') as f:
            assert encode_dataset(loaded) == f.read()
        print("✓ re-encoding a loaded dataset is byte-identical")

        frames = np.random.default_rng(0).normal(size=(7, 3))
        write_frames(os.path.join(test_dir, "frames.bin"), frames)
        assert np.array_equal(read_frames(os.path.join(test_dir, "frames.bin")), frames)
        print("✓ frames file")
    finally:
        shutil.rmtree(test_dir)


def test_dataset_corruption():
    print("\n=== Testing corrupted datasets ===\n")
    corpus = gen_corpus(small_config(n_utterances=5))
    data = encode_dataset(corpus)

    flipped = bytearray(data)
    flipped[-3] ^= 0xFF
    with pytest.raises(DataError) as exc:
        decode_dataset(bytes(flipped))
    assert "hash" in str(exc.value)
    print("✓ flipped frame byte fails the hash check")

    with pytest.raises(DataError):
        decode_dataset(data[:-10])
    with pytest.raises(DataError):
        decode_dataset(b"XXXX" + data[4:])
    with pytest.raises(DataError):
        decode_dataset(data + b"\x00")
    with pytest.raises(DataError):
        read_dataset("/nonexistent/corpus.rcds")
    versioned = bytearray(data)
    versioned[4:8] = struct.pack("<I", 2)
    with pytest.raises(DataError) as exc:
        decode_dataset(bytes(versioned))
    assert "version 2" in str(exc.value)
    print("✓ truncation, magic, version, trailing bytes, missing file")

    bad = replace(corpus.utterances[0], durations=corpus.utterances[0].durations + 1)
    broken = replace(corpus, utterances=[bad] + corpus.utterances[1:])
    with pytest.raises(DataError) as exc:
        decode_dataset(encode_dataset(broken))
    assert "record 0" in str(exc.value)
    print("✓ durations not matching frames rejected")


if __name__ == "__main__":
    test_symbol_table()
    test_noiseless_utterance()
    test_durations_match_frames()
    test_style_tempo()
    test_validation_split()
    test_prototype_recovery()
    test_threads_do_not_change_output()
    test_ood_sentences()
    test_parse_symbols()
    test_dataset_round_trip()
    test_dataset_corruption()
    print("\n✓ All corpus tests passed!")
