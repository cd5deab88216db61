#!/usr/bin/env python3
"""
End-to-end tests of the command line: gen-data, train, synth, eval and viz on a tiny
configuration, including the exit-code contract.
"""

import os
import sys
import json
import shutil
import tempfile

import numpy as np
import pytest

# Add src to path
sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..'))

from src.main import main
from src.core.config import ModelConfig
from src.core.errors import EXIT_DATA, EXIT_OK, EXIT_USAGE
from src.core.model import Seq2SeqModel
from src.utils.checkpoint_io import load_checkpoint, save_checkpoint
from src.utils.dataset_io import read_dataset, read_frames
from src.utils.image_export import decode_pnm, read_matrix_csv

TINY_CONFIG = {
    "corpus": {"n_utterances": 6, "vocab_size": 6, "feature_dim": 3, "min_len": 1, "max_len": 2,
               "validation_fraction": 0.0, "seed": 4},
    "model": {"vocab_size": 6, "d_embed": 4, "d_enc": 6, "d_a": 5, "d_dur": 3, "d_style": 3,
              "n_style_tokens": 3, "d_prenet": 4, "d_dec": 6, "feature_dim": 3, "max_decoder_steps": 150,
              "location_n_filters": 2, "location_kernel_size": 3, "gmm_mixtures": 2, "seed": 3},
    "train": {"steps": 2, "batch_size": 1, "checkpoint_every": 1, "log_every": 1, "progress": False},
    "eval": {"n_sentences": 2, "long_factor": 1.5, "scale_factors": [0.5, 1.0]},
}


def run(*argv) -> int:
    return main(["--log-level", "WARNING", *argv])


def write_config(test_dir: str, **sections) -> str:
    config = {name: dict(values) for name, values in TINY_CONFIG.items()}
    for name, values in sections.items():
        config[name].update(values)
    path = os.path.join(test_dir, "config.json")
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(config, f)
    return path


def write_text(path: str, text: str) -> str:
    with open(path, 'w', encoding='utf-8') as f:
        f.write(text)
    return path


def test_gen_data():
    print("\n=== Testing gen-data ===\n")
    test_dir = tempfile.mkdtemp(prefix="rc_align_cli_")
    try:
        config = write_config(test_dir)
        first, second = os.path.join(test_dir, "a.rcds"), os.path.join(test_dir, "b.rcds")
        assert run("gen-data", "--config", config, "--out", first) == EXIT_OK
        assert run("gen-data", "--config", config, "--out", second) == EXIT_OK
        with open(first, 'rb') as fa, open(second, 'rb') as fb:
            assert fa.read() == fb.read()
        with open(first + ".manifest.json", 'r', encoding='utf-8') as f:
            manifest = json.load(f)
        assert manifest["command"] == "gen-data" and manifest["status"] == "ok"
        assert len(manifest["corpus_hash"]) == 64
        assert os.path.exists(second + ".manifest.json")
        print("✓ rerun with the same config is byte-identical; each dataset gets its own manifest")

        config = write_config(test_dir, corpus={"n_utterances": 100})
        path = os.path.join(test_dir, "hundred.rcds")
        assert run("gen-data", "--config", config, "--out", path) == EXIT_OK
        assert len(read_dataset(path)) == 100
        print("✓ 100 records")

        config = write_config(test_dir, corpus={"min_len": 4, "max_len": 3})
        assert run("gen-data", "--config", config, "--out", path) == EXIT_USAGE
        print("✓ min_len > max_len exits 2")

        binary = os.path.join(test_dir, "binary.json")
        with open(binary, 'wb') as f:
            f.write(b"\xff\xfe{}")
        assert run("gen-data", "--config", binary, "--out", path) == EXIT_USAGE
        print("✓ non-UTF-8 config exits 2")
    finally:
        shutil.rmtree(test_dir)


def test_train_and_synth():
    print("\n=== Testing train and synth ===\n")
    test_dir = tempfile.mkdtemp(prefix="rc_align_cli_")
    try:
        config = write_config(test_dir)
        data = os.path.join(test_dir, "corpus.rcds")
        assert run("gen-data", "--config", config, "--out", data) == EXIT_OK

        with pytest.raises(SystemExit) as exc:
            run("train", "--config", config, "--data", data, "--mechanism", "monotonic", "--out", test_dir)
        assert exc.value.code == 2
        print("✓ unknown mechanism exits 2")

        runs = os.path.join(test_dir, "rc")
        assert run("train", "--config", config, "--data", data, "--resume",
                   "--mechanism", "rc", "--out", runs) == EXIT_DATA
        assert run("train", "--config", config, "--data", data, "--mechanism", "rc", "--out", runs) == EXIT_OK
        ckpt = os.path.join(runs, "latest.rcat")
        assert load_checkpoint(ckpt).step == 2
        with open(os.path.join(runs, "losses.csv"), 'r', encoding='utf-8') as f:
            assert f.read().splitlines()[0] == "step,loss"
        print("✓ train writes checkpoints and the loss curve; resume without a checkpoint exits 3")

        assert run("train", "--config", config, "--data", data, "--mechanism", "rc", "--out", runs,
                   "--steps", "3", "--resume") == EXIT_OK
        assert load_checkpoint(ckpt).step == 3
        print("✓ resume continues to the new step count")

        out = os.path.join(test_dir, "synth")
        assert run("synth", "--ckpt", ckpt, "--text", "s1 s4 s2", "--out", out) == EXIT_OK
        frames = read_frames(os.path.join(out, "frames.bin"))
        alignment = read_matrix_csv(os.path.join(out, "alignment.csv"))
        omegas = read_matrix_csv(os.path.join(out, "omegas.csv"))
        assert frames.shape[1] == 3 and alignment.shape == (frames.shape[0], 3) and omegas.shape == alignment.shape
        with open(os.path.join(out, "alignment.pgm"), 'rb') as f:
            pixels = decode_pnm(f.read()).astype(int)
        assert pixels.shape == alignment.shape
        assert np.all(np.abs(pixels.sum(axis=1) - 255) <= 3)
        print("✓ synth writes frames, alignment CSV/PGM and gate values")

        assert run("viz", "--alignment", os.path.join(out, "alignment.csv"),
                   "--out", os.path.join(out, "alignment.ppm")) == EXIT_OK
        with open(os.path.join(out, "manifest.json"), 'r', encoding='utf-8') as f:
            assert json.load(f)["command"] == "synth"
        with open(os.path.join(out, "alignment.ppm.manifest.json"), 'r', encoding='utf-8') as f:
            assert json.load(f)["command"] == "viz"
        print("✓ viz into a synth directory leaves the synth manifest in place")

        reference_out = os.path.join(test_dir, "synth_reference")
        assert run("synth", "--ckpt", ckpt, "--text", "s2", "--durations", "4",
                   "--style-reference", os.path.join(out, "frames.bin"), "--out", reference_out) == EXIT_OK
        assert os.path.exists(os.path.join(reference_out, "alignment.csv"))
        print("✓ style taken from a reference frames file")

        assert run("synth", "--ckpt", ckpt, "--text", "s1 s4", "--durations", "3,4,5", "--out", out) == EXIT_USAGE
        assert run("synth", "--ckpt", ckpt, "--text", "s1 s9", "--out", out) == EXIT_USAGE
        print("✓ duration count mismatch and unknown symbol exit 2")

        gmm_ckpt = os.path.join(test_dir, "gmm.rcat")
        model_config = ModelConfig.from_dict({**TINY_CONFIG["model"], "mechanism": "gmm"})
        save_checkpoint(Seq2SeqModel(model_config), gmm_ckpt, {"step": 0})
        assert run("synth", "--ckpt", gmm_ckpt, "--text", "s1 s2", "--durations", "3,3",
                   "--duration-scale", "2", "--out", out) == EXIT_USAGE
        assert run("synth", "--ckpt", gmm_ckpt, "--text", "s1 s2", "--out", out) == EXIT_USAGE
        assert run("synth", "--ckpt", gmm_ckpt, "--text", "s1 s2", "--durations", "3,3", "--out", out) == EXIT_OK
        print("✓ rescaling durations needs a rhythm-controllable mechanism")

        eval_dir = os.path.join(test_dir, "eval")
        assert run("eval", "--ckpt", ckpt, gmm_ckpt, "--data", data, "--config", config, "--out", eval_dir) == EXIT_OK
        with open(os.path.join(eval_dir, "comparison.txt"), 'r', encoding='utf-8') as f:
            lines = f.read().splitlines()
        assert len(lines) == 3 and " rc " in lines[1] and " gmm " in lines[2]
        with open(os.path.join(eval_dir, "rhythm_01_gmm.json"), 'r', encoding='utf-8') as f:
            assert json.load(f)["supported"] is False
        with open(os.path.join(eval_dir, "robustness_00_rc.json"), 'r', encoding='utf-8') as f:
            report = json.load(f)
        assert report["long_factor"] == 1.5 and report["aggregate"]["utterances"] == 2
        print("✓ eval writes per-checkpoint reports and the comparison table")
    finally:
        shutil.rmtree(test_dir)


def test_viz():
    print("\n=== Testing viz ===\n")
    test_dir = tempfile.mkdtemp(prefix="rc_align_cli_")
    try:
        identity = write_text(os.path.join(test_dir, "identity.csv"),
                              "1,0,0,0\n0,1,0,0\n0,0,1,0\n0,0,0,1\n")
        out = os.path.join(test_dir, "identity.pgm")
        assert run("viz", "--alignment", identity, "--out", out) == EXIT_OK
        with open(out, 'rb') as f:
            data = f.read()
        assert data.startswith(b"P5\n4 4\n255\n")
        assert np.array_equal(decode_pnm(data), np.eye(4, dtype=np.uint8) * 255)
        print("✓ identity renders as a white diagonal")

        uniform = write_text(os.path.join(test_dir, "uniform.csv"), "0.333333,0.333333,0.333333\n" * 2)
        assert run("viz", "--alignment", uniform, "--out", out) == EXIT_OK
        with open(out, 'rb') as f:
            assert np.all(decode_pnm(f.read()) == round(255 / 3))
        print("✓ uniform rows render as round(255/N)")

        spots = write_text(os.path.join(test_dir, "spots.csv"), "0.5,0.25\n0.1,0.9\n")
        ppm = os.path.join(test_dir, "spots.ppm")
        assert run("viz", "--alignment", spots, "--out", ppm) == EXIT_OK
        with open(ppm, 'rb') as f:
            rgb = decode_pnm(f.read())
        assert rgb.shape == (2, 2, 3)
        assert tuple(rgb[0, 0]) == (128, 0, 127)
        assert tuple(rgb[1, 1]) == (230, 0, 25)
        print("✓ .ppm output is a blue-to-red heat map")

        ragged = write_text(os.path.join(test_dir, "ragged.csv"), "1,0\n0,1,0\n")
        assert run("viz", "--alignment", ragged, "--out", out) == EXIT_USAGE
        assert run("viz", "--alignment", os.path.join(test_dir, "missing.csv"), "--out", out) == EXIT_DATA
        binary = os.path.join(test_dir, "binary.csv")
        with open(binary, 'wb') as f:
            f.write(b"\xff\xfe1,0\n")
        assert run("viz", "--alignment", binary, "--out", out) == EXIT_DATA
        print("✓ ragged CSV exits 2, missing or non-UTF-8 file exits 3")
    finally:
        shutil.rmtree(test_dir)


if __name__ == "__main__":
    test_gen_data()
    test_train_and_synth()
    test_viz()
    print("\n✓ All CLI tests passed!")
