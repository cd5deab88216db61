import os
import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from tqdm import tqdm

from src.core import tensor as T
from src.core.config import ModelConfig, TrainConfig
from src.core.errors import ConfigError, NumericAbortError, UsageError
from src.core.model import Seq2SeqModel, SynthesisOutput
from src.core.tensor import Tape, Tensor
from src.utils.checkpoint_io import Checkpoint, save_checkpoint
from src.utils.corpus import Corpus, Utterance, mean_symbol_durations, stream_rng

logger = logging.getLogger(__name__)

LATEST_CHECKPOINT = "latest.rcat"


def checkpoint_name(step: int) -> str:
    return f"ckpt_{step:06d}.rcat"


def loss(output: SynthesisOutput, target_frames, target_stops) -> Tensor:
    """Frame MSE + stop-token BCE on logits, each weighted 1.0."""
    targets = np.asarray(target_frames, dtype=np.float64)
    stops = np.asarray(target_stops, dtype=np.float64)
    if output.frames.shape != targets.shape:
        raise UsageError(f"Output frames {list(output.frames.shape)} do not match targets {list(targets.shape)}")
    if output.stop_logits.shape != stops.shape:
        raise UsageError(f"Stop logits {list(output.stop_logits.shape)} do not match targets {list(stops.shape)}")
    mse = T.mean(T.square(T.sub(output.frames, Tensor(targets))))
    bce = T.binary_cross_entropy_with_logits(output.stop_logits, stops)
    return T.add(mse, bce)


class Adam:
    def __init__(self, config: TrainConfig, state: Optional[dict] = None, t: int = 0):
        self.lr = config.learning_rate
        self.beta1 = config.adam_beta1
        self.beta2 = config.adam_beta2
        self.eps = config.adam_eps
        self.t = t
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        for name, data in (state or {}).items():
            kind, _, param_name = name.partition(".")
            if kind == "m":
                self.m[param_name] = np.array(data)
            elif kind == "v":
                self.v[param_name] = np.array(data)

    def step(self, params: dict[str, Tensor], grads: dict[str, np.ndarray]):
        self.t += 1
        correction1 = 1.0 - self.beta1 ** self.t
        correction2 = 1.0 - self.beta2 ** self.t
        for name, param in params.items():
            g = grads[name]
            m = self.m.get(name, np.zeros_like(g))
            v = self.v.get(name, np.zeros_like(g))
            m = self.beta1 * m + (1.0 - self.beta1) * g
            v = self.beta2 * v + (1.0 - self.beta2) * g * g
            self.m[name], self.v[name] = m, v
            param.data = param.data - self.lr * (m / correction1) / (np.sqrt(v / correction2) + self.eps)

    def state_tensors(self) -> dict[str, np.ndarray]:
        tensors = {f"m.{name}": m for name, m in self.m.items()}
        tensors.update({f"v.{name}": v for name, v in self.v.items()})
        return tensors


def clip_by_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Rescales `grads` in place when their joint L2 norm exceeds max_norm; returns the norm."""
    norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
    if norm > max_norm:
        factor = max_norm / norm
        for name in grads:
            grads[name] = grads[name] * factor
    return norm


def _first_non_finite(model: Seq2SeqModel, output: Optional[SynthesisOutput]) -> str:
    for name, param in model.named_parameters().items():
        if not np.all(np.isfinite(param.data)):
            return name
    if output is not None:
        for name in ("alignment", "omegas", "frames", "stop_logits"):
            value = getattr(output, name)
            if value is not None and not np.all(np.isfinite(value.data)):
                return f"output.{name}"
    return "loss"


def style_input(model: Seq2SeqModel, utterance: Utterance):
    if model.config.style_source == "reference":
        return utterance.frames
    return utterance.style_class


def utterance_loss(model: Seq2SeqModel, utterance: Utterance, rng: Optional[np.random.Generator] = None,
                   step: int = 0) -> float:
    """Runs one teacher-forced forward/backward pass; gradients accumulate on the parameters."""
    output = None
    with Tape() as tape:
        output = model.synthesize(utterance.symbol_ids, utterance.durations, style_input(model, utterance),
                                  mode="teacher_forced", targets=utterance.frames, rng=rng)
        value = loss(output, utterance.frames, utterance.stop_targets)
    if not np.isfinite(value.item()):
        raise NumericAbortError(step, _first_non_finite(model, output))
    tape.backward(value)
    return value.item()


@dataclass
class TrainResult:
    model: Seq2SeqModel
    losses: list = field(default_factory=list)
    checkpoints: list = field(default_factory=list)


def _check_compatible(config: ModelConfig, corpus: Corpus):
    if corpus.table.vocab_size > config.vocab_size:
        raise ConfigError(f"model.vocab_size: {config.vocab_size} is smaller than the corpus vocabulary "
                          f"({corpus.table.vocab_size})")
    if corpus.table.feature_dim != config.feature_dim:
        raise ConfigError(f"model.feature_dim: {config.feature_dim} does not match corpus frames "
                          f"({corpus.table.feature_dim})")
    if corpus.config.n_style_classes > config.n_style_classes:
        raise ConfigError(f"model.n_style_classes: {config.n_style_classes} is smaller than the corpus "
                          f"style classes ({corpus.config.n_style_classes})")
    longest = max(u.n_frames for u in corpus.utterances)
    if longest > config.max_decoder_steps:
        raise ConfigError(f"model.max_decoder_steps: {config.max_decoder_steps} is shorter than the longest "
                          f"utterance ({longest} frames)")


def train(model_config: ModelConfig, corpus: Corpus, train_config: TrainConfig,
          out_dir: Optional[str] = None, resume: Optional[Checkpoint] = None) -> TrainResult:
    """
    Trains for `train_config.steps` total steps. With `resume`, training picks up at the
    checkpoint's step using its parameters, Adam moments and loss history. Batches and
    dropout for step s draw from (train.seed, s), so a resumed run matches an uninterrupted one.
    """
    train_set = corpus.train
    if not train_set:
        raise UsageError("Training corpus has no training utterances")
    _check_compatible(model_config, corpus)

    if resume is not None:
        model = resume.model
        start = resume.step
        losses = list(resume.train_state.get("losses", []))
        optimizer = Adam(train_config, resume.optimizer_tensors, t=int(resume.train_state.get("adam_t", start)))
        logger.info(f"Resuming {model_config.mechanism} training at step {start}")
    else:
        model = Seq2SeqModel(model_config)
        start, losses = 0, []
        optimizer = Adam(train_config)
    model.default_durations = mean_symbol_durations(train_set, corpus.table)
    params = model.named_parameters()

    result = TrainResult(model, losses)
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)

    def write_checkpoint(step: int):
        state = {"step": step, "losses": losses, "adam_t": optimizer.t, "train_config": train_config.to_dict()}
        for name in (checkpoint_name(step), LATEST_CHECKPOINT):
            path = os.path.join(out_dir, name)
            save_checkpoint(model, path, state, optimizer.state_tensors())
            result.checkpoints.append(path)

    steps = tqdm(range(start, train_config.steps), desc=f"train[{model_config.mechanism}]",
                 initial=start, total=train_config.steps, disable=not train_config.progress)
    for step in steps:
        rng = stream_rng(train_config.seed, step)
        batch = rng.integers(0, len(train_set), size=train_config.batch_size)

        model.store.zero_grad()
        batch_loss = 0.0
        for index in batch:
            batch_loss += utterance_loss(model, train_set[int(index)], rng, step)
        batch_loss /= len(batch)

        grads = {}
        for name, param in params.items():
            g = np.zeros_like(param.data) if param.grad is None else param.grad / len(batch)
            if not np.all(np.isfinite(g)):
                raise NumericAbortError(step, f"grad.{name}")
            grads[name] = g
        grad_norm = clip_by_global_norm(grads, train_config.grad_clip_norm)
        optimizer.step(params, grads)
        losses.append(batch_loss)

        if (step + 1) % train_config.log_every == 0:
            logger.info(f"step {step + 1}/{train_config.steps} loss={batch_loss:.6f} grad_norm={grad_norm:.4f}")
            steps.set_postfix(loss=f"{batch_loss:.4f}")
        if out_dir and ((step + 1) % train_config.checkpoint_every == 0 or step + 1 == train_config.steps):
            write_checkpoint(step + 1)

    model.store.zero_grad()
    if losses:
        logger.info(f"Finished {model_config.mechanism} training: loss {losses[0]:.6f} -> {losses[-1]:.6f}")
    return result
