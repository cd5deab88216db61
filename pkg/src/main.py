import os
import sys
import logging
import argparse
from dataclasses import replace

import numpy as np

from src.core.config import MECHANISMS, load_experiment_config, load_settings
from src.core.errors import EXIT_OK, CapabilityError, RCAlignError, UsageError
from src.core.evaluator import (
    comparison_table,
    robustness_report,
    rhythm_response,
    scale_durations,
    synthesize_many,
)
from src.core.trainer import LATEST_CHECKPOINT, train
from src.utils.checkpoint_io import load_checkpoint
from src.utils.corpus import gen_corpus, gen_ood_sentences, parse_symbols
from src.utils.dataset_io import content_hash, read_dataset, read_frames, write_dataset, write_frames
from src.utils.fs_utils import (
    RunManifest,
    atomic_write_text,
    ensure_dir,
    manifest_path_for,
    write_json,
    write_manifest,
)
from src.utils.image_export import read_matrix_csv, write_image, write_matrix_csv, write_rows_csv

logger = logging.getLogger("main")


def setup_logging(level_str: str):
    level = getattr(logging, level_str.upper(), logging.INFO)
    logging.basicConfig(
        level=level,
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        handlers=[logging.StreamHandler()]
    )


def _arguments(args) -> dict:
    return {k: v for k, v in vars(args).items() if k != "handler"}


def cmd_gen_data(args, settings) -> int:
    config = load_experiment_config(args.config)
    manifest = RunManifest("gen-data", config.to_dict(), seed=config.corpus.seed,
                           arguments=_arguments(args), outputs=[args.out])

    corpus = gen_corpus(config.corpus, threads=settings.threads)
    manifest.corpus_hash = write_dataset(corpus, args.out)
    print(manifest.corpus_hash)
    write_manifest(manifest, os.path.dirname(os.path.abspath(args.out)), path=manifest_path_for(args.out))
    return EXIT_OK


def cmd_train(args, settings) -> int:
    config = load_experiment_config(args.config)
    model_config = replace(config.model, mechanism=args.mechanism)
    model_config.validate()
    train_config = config.train
    if args.steps is not None:
        train_config = replace(train_config, steps=args.steps)
        train_config.validate()

    corpus = read_dataset(args.data)
    ensure_dir(args.out)
    manifest = RunManifest("train", {**config.to_dict(), "model": model_config.to_dict(),
                                     "train": train_config.to_dict()},
                           seed=train_config.seed, corpus_hash=content_hash(corpus), arguments=_arguments(args))

    resume = None
    if args.resume:
        resume_path = os.path.join(args.out, LATEST_CHECKPOINT)
        resume = load_checkpoint(resume_path)
        if resume.model.config.mechanism != model_config.mechanism:
            raise UsageError(f"{resume_path} holds a {resume.model.config.mechanism} model, "
                             f"not {model_config.mechanism}")
        model_config = resume.model.config

    try:
        result = train(model_config, corpus, train_config, out_dir=args.out, resume=resume)
    except RCAlignError:
        write_manifest(manifest, args.out, status="failed")
        raise

    loss_path = os.path.join(args.out, "losses.csv")
    write_rows_csv(loss_path, ["step", "loss"], [[i + 1, repr(v)] for i, v in enumerate(result.losses)])
    manifest.checkpoints = sorted(set(result.checkpoints))
    manifest.outputs = [loss_path]
    write_manifest(manifest, args.out)
    return EXIT_OK


def _synth_durations(args, model, symbol_ids) -> list[int]:
    if args.durations:
        try:
            durations = [int(d) for d in args.durations.replace(" ", "").split(",") if d]
        except ValueError:
            raise UsageError(f"--durations must be comma-separated integers, got '{args.durations}'")
        if len(durations) != len(symbol_ids):
            raise UsageError(f"--durations has {len(durations)} entries for {len(symbol_ids)} symbols")
        return durations
    if not model.default_durations:
        raise UsageError("Checkpoint has no per-symbol mean durations; pass --durations")
    return [max(1, int(np.floor(model.default_durations[s] + 0.5))) for s in symbol_ids]


def cmd_synth(args, settings) -> int:
    checkpoint = load_checkpoint(args.ckpt)
    model = checkpoint.model
    symbol_ids = parse_symbols(args.text, model.config.vocab_size)
    durations = _synth_durations(args, model, symbol_ids)
    if args.duration_scale <= 0:
        raise UsageError(f"--duration-scale must be > 0, got {args.duration_scale}")

    attention = model.attention
    if args.duration_scale != 1.0 and not attention.supports_rhythm_control:
        raise CapabilityError(f"The {model.config.mechanism} mechanism cannot rescale durations")
    if attention.uses_durations:
        durations = scale_durations(durations, args.duration_scale)
    elif attention.supports_rhythm_control and args.duration_scale != 1.0:
        u = len(symbol_ids) / float(sum(durations)) / args.duration_scale
        attention.set_transition_override(float(np.clip(u, 0.01, 0.99)))

    style = read_frames(args.style_reference) if args.style_reference else args.style
    output = model.synthesize(symbol_ids, durations, style, mode="free_run")
    logger.info(f"Synthesized {output.n_frames} frames for {len(symbol_ids)} symbols "
                f"(scale {args.duration_scale}{', truncated' if output.truncated else ''})")

    ensure_dir(args.out)
    outputs = {
        "frames": os.path.join(args.out, "frames.bin"),
        "alignment_csv": os.path.join(args.out, "alignment.csv"),
        "alignment_pgm": os.path.join(args.out, "alignment.pgm"),
    }
    write_frames(outputs["frames"], output.frames.data)
    write_matrix_csv(output.alignment, outputs["alignment_csv"])
    write_image(output.alignment, outputs["alignment_pgm"])
    if output.omegas is not None:
        outputs["omegas_csv"] = os.path.join(args.out, "omegas.csv")
        write_matrix_csv(output.omegas, outputs["omegas_csv"])

    manifest = RunManifest("synth", {"model": model.config.to_dict()}, seed=model.config.seed,
                           checkpoints=[args.ckpt], arguments=_arguments(args), outputs=list(outputs.values()))
    write_manifest(manifest, args.out, status="truncated" if output.truncated else "ok")
    return EXIT_OK


def cmd_eval(args, settings) -> int:
    config = load_experiment_config(args.config)
    eval_config = config.eval
    if args.long_factor is not None:
        eval_config = replace(eval_config, long_factor=args.long_factor)
        eval_config.validate()

    corpus = read_dataset(args.data)
    sentences = gen_ood_sentences(corpus.table, corpus.config, eval_config.n_sentences,
                                  eval_config.long_factor, eval_config.seed)
    rhythm_set = corpus.validation or corpus.train[:eval_config.n_sentences]
    ensure_dir(args.out)
    manifest = RunManifest("eval", {**config.to_dict(), "eval": eval_config.to_dict()}, seed=eval_config.seed,
                           corpus_hash=content_hash(corpus), checkpoints=list(args.ckpt), arguments=_arguments(args))

    rows = []
    for index, ckpt_path in enumerate(args.ckpt):
        model = load_checkpoint(ckpt_path).model
        mechanism = model.config.mechanism
        outputs = synthesize_many(model, sentences, threads=settings.threads)
        robustness = robustness_report(outputs, sentences, eval_config.collapse_min_rows,
                                       eval_config.collapse_entropy_ratio).to_dict()
        robustness["long_factor"] = eval_config.long_factor
        truncations = robustness["aggregate"]["truncations"]
        if truncations:
            logger.warning(f"{ckpt_path}: {truncations} of {len(sentences)} free runs hit max_decoder_steps")

        try:
            rhythm = rhythm_response(model, rhythm_set, eval_config.scale_factors, settings.threads).to_dict()
            rhythm["supported"] = True
        except CapabilityError as e:
            logger.info(f"{ckpt_path}: {e}")
            rhythm = {"mechanism": mechanism, "supported": False}

        stem = f"{index:02d}_{mechanism}"
        write_json(os.path.join(args.out, f"robustness_{stem}.json"), robustness)
        write_json(os.path.join(args.out, f"rhythm_{stem}.json"), rhythm)
        manifest.outputs += [f"robustness_{stem}.json", f"rhythm_{stem}.json"]
        rows.append({"checkpoint": ckpt_path, "mechanism": mechanism, "robustness": robustness})
        logger.info(f"{ckpt_path} ({mechanism}): defect rate "
                    f"{100.0 * robustness['aggregate']['defect_rate']:.2f}%")

    table = comparison_table(rows)
    atomic_write_text(os.path.join(args.out, "comparison.txt"), table)
    write_json(os.path.join(args.out, "comparison.json"),
               {"rows": [{"checkpoint": r["checkpoint"], "mechanism": r["mechanism"],
                          **r["robustness"]["aggregate"]} for r in rows]})
    manifest.outputs += ["comparison.txt", "comparison.json"]
    print(table, end="")
    write_manifest(manifest, args.out)
    return EXIT_OK


def cmd_viz(args, settings) -> int:
    matrix = read_matrix_csv(args.alignment)
    heat_map = args.heat_map or args.out.lower().endswith(".ppm")
    write_image(matrix, args.out, heat_map=heat_map)
    manifest = RunManifest("viz", {}, arguments=_arguments(args), outputs=[args.out])
    write_manifest(manifest, os.path.dirname(os.path.abspath(args.out)), path=manifest_path_for(args.out))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="python -m src.main",
                                     description="Rhythm-controllable attention toy synthesis experiments")
    parser.add_argument("--log-level", default=None, help="Overrides LOG_LEVEL from the environment")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="Generate a synthetic corpus")
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_gen_data)

    p = sub.add_parser("train", help="Train one attention mechanism")
    p.add_argument("--config", default=None)
    p.add_argument("--data", required=True)
    p.add_argument("--mechanism", required=True, choices=MECHANISMS)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=None, help="Overrides train.steps")
    p.add_argument("--resume", action="store_true", help=f"Continue from <out>/{LATEST_CHECKPOINT}")
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("synth", help="Free-run synthesis from a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--text", required=True, help="Space-separated symbols, e.g. 's3 s17 s5'")
    p.add_argument("--durations", default=None, help="Comma-separated frames per symbol")
    p.add_argument("--duration-scale", type=float, default=1.0)
    p.add_argument("--style", type=int, default=0)
    p.add_argument("--style-reference", default=None, help="frames.bin whose style to imitate (overrides --style)")
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_synth)

    p = sub.add_parser("eval", help="Robustness and rhythm reports for one or more checkpoints")
    p.add_argument("--ckpt", required=True, nargs="+")
    p.add_argument("--data", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--long-factor", type=float, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser("viz", help="Render an alignment CSV as PGM (or PPM heat map)")
    p.add_argument("--alignment", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--heat-map", action="store_true")
    p.set_defaults(handler=cmd_viz)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        settings = load_settings()
    except RCAlignError as e:
        setup_logging(args.log_level or "INFO")
        logger.error(str(e))
        return e.exit_code
    setup_logging(args.log_level or settings.log_level)

    logger.info(f"Running {args.command}")
    try:
        code = args.handler(args, settings)
    except RCAlignError as e:
        logger.error(f"{args.command} failed: {e}")
        return e.exit_code
    logger.info(f"{args.command} done")
    return code


if __name__ == "__main__":
    sys.exit(main())
