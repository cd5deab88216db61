import logging
from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np

from src.core import tensor as T
from src.core.attention import (
    AttentionState,
    DurationEmbeddingSeq,
    EncoderMemory,
    build_mechanism,
)
from src.core.config import ModelConfig
from src.core.errors import DurationValueError, SymbolIndexError, UsageError
from src.core.layers import Embedding, Linear, LSTMCell, ParameterStore, Prenet
from src.core.tensor import Tensor

logger = logging.getLogger(__name__)

StyleInput = Union[int, np.ndarray, Tensor]


def quantize_duration(frames: int, n_buckets: int = 5) -> int:
    """
    Buckets with upper bounds 4, 8, 16, 32, ... frames; the last bucket is open-ended.
    With 5 buckets: [1..4], [5..8], [9..16], [17..32], [33..).
    """
    if int(frames) < 1:
        raise DurationValueError(f"Duration must be >= 1 frame, got {frames}")
    return min(max(0, (int(frames) - 1).bit_length() - 2), n_buckets - 1)


@dataclass
class DecoderState:
    attention_rnn: tuple[Tensor, Tensor]
    decoder_rnn: tuple[Tensor, Tensor]
    attention_state: AttentionState
    prev_frame: Tensor
    prev_context: Tensor
    step_index: int = 0
    last_omegas: Optional[Tensor] = None


@dataclass
class SynthesisOutput:
    frames: Tensor          # [T, feature_dim]
    stop_logits: Tensor     # [T]
    alignment: Tensor       # [T, N]
    omegas: Optional[Tensor] = None
    truncated: bool = False

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]


class Seq2SeqModel:
    def __init__(self, config: ModelConfig):
        config.validate()
        self.config = config
        self.store = ParameterStore(config.seed)
        self.default_durations: Optional[list[float]] = None
        c, store = config, self.store

        self.symbol_embedding = Embedding(store, "encoder.embedding", c.vocab_size, c.d_embed)
        self.encoder_forward = LSTMCell(store, "encoder.forward", c.d_embed, c.d_enc // 2)
        self.encoder_backward = LSTMCell(store, "encoder.backward", c.d_embed, c.d_enc // 2)

        self.duration_embedding = Embedding(store, "duration.embedding", c.n_dur_buckets, c.d_dur)

        self.style_embedding = Embedding(store, "style.class_embedding", c.n_style_classes, c.d_style)
        self.style_tokens = store.create("style.tokens", (c.n_style_tokens, c.d_style), fan_in=c.d_style)
        self.style_query = Linear(store, "style.query", c.feature_dim, c.d_style)

        self.prenet = Prenet(store, "decoder.prenet", c.feature_dim, c.d_prenet, c.prenet_dropout)
        self.style_projection = (Linear(store, "decoder.style_projection", c.d_style, c.d_prenet, bias=False)
                                 if c.d_style != c.d_prenet else None)
        self.attention_rnn = LSTMCell(store, "decoder.attention_rnn", c.d_prenet + c.d_enc, c.d_dec)
        self.query_projection = Linear(store, "decoder.query_projection", c.d_dec, c.d_a, bias=False)
        self.attention = build_mechanism(store, c)
        self.decoder_rnn = LSTMCell(store, "decoder.decoder_rnn", c.d_dec + c.d_enc, c.d_dec)
        self.frame_head = Linear(store, "decoder.frame_head", c.d_dec + c.d_enc, c.feature_dim)
        self.stop_head = Linear(store, "decoder.stop_head", c.d_dec + c.d_enc, 1)

        logger.debug(f"Built {c.mechanism} model with {len(self.store)} parameter tensors")

    # --- encoders ---------------------------------------------------------

    def text_encode(self, symbol_ids: Sequence[int]) -> EncoderMemory:
        ids = [int(i) for i in symbol_ids]
        if not ids:
            raise UsageError("Cannot encode an empty symbol sequence")
        embedded = self.symbol_embedding(ids)

        h, c = self.encoder_forward.zero_state()
        forward_states = []
        for j in range(len(ids)):
            h, c = self.encoder_forward(T.getitem(embedded, j), h, c)
            forward_states.append(h)

        h, c = self.encoder_backward.zero_state()
        backward_states = []
        for j in reversed(range(len(ids))):
            h, c = self.encoder_backward(T.getitem(embedded, j), h, c)
            backward_states.append(h)
        backward_states.reverse()

        hidden = T.concat(T.stack(forward_states), T.stack(backward_states), axis=1)
        return self.attention.prepare_memory(hidden)

    def duration_encode(self, durations_frames: Sequence[int], n: Optional[int] = None) -> DurationEmbeddingSeq:
        if n is not None and len(durations_frames) != n:
            raise UsageError(f"Got {len(durations_frames)} durations for {n} symbols")
        buckets = tuple(quantize_duration(d, self.config.n_dur_buckets) for d in durations_frames)
        return DurationEmbeddingSeq(self.duration_embedding(buckets), buckets)

    def style_token_weights(self, reference_frames) -> Tensor:
        frames = T.constant(reference_frames)
        if frames.ndim != 2 or frames.shape[0] == 0:
            raise UsageError(f"Reference frames must be a nonempty [T, feature_dim] matrix, got {list(frames.shape)}")
        query = self.style_query(T.mean(frames, axis=0))
        scores = T.scale(T.matmul(self.style_tokens, query), 1.0 / np.sqrt(self.config.d_style))
        return T.softmax(scores)

    def style_encode(self, style: StyleInput) -> Tensor:
        if isinstance(style, (int, np.integer)):
            if not 0 <= int(style) < self.config.n_style_classes:
                raise SymbolIndexError(f"Style class {int(style)} out of range [0, {self.config.n_style_classes})")
            return T.getitem(self.style_embedding([int(style)]), 0)
        return T.matmul(self.style_token_weights(style), self.style_tokens)

    # --- decoder ----------------------------------------------------------

    def initial_decoder_state(self, memory: EncoderMemory) -> DecoderState:
        c = self.config
        return DecoderState(
            attention_rnn=self.attention_rnn.zero_state(),
            decoder_rnn=self.decoder_rnn.zero_state(),
            attention_state=self.attention.init_state(memory.length),
            prev_frame=Tensor(np.zeros(c.feature_dim)),
            prev_context=Tensor(np.zeros(c.d_enc)),
        )

    def decoder_step(self, state: DecoderState, memory: EncoderMemory,
                     durations: Optional[DurationEmbeddingSeq], style: Tensor,
                     teacher_frame: Optional[Tensor] = None,
                     rng: Optional[np.random.Generator] = None) -> tuple[Tensor, Tensor, DecoderState]:
        if state.step_index >= self.config.max_decoder_steps:
            raise UsageError(f"Decoder already ran {state.step_index} steps (max {self.config.max_decoder_steps})")

        processed = self.prenet(state.prev_frame, rng)
        style_term = self.style_projection(style) if self.style_projection else style
        att_input = T.concat(T.add(processed, style_term), state.prev_context)
        h_att, c_att = self.attention_rnn(att_input, *state.attention_rnn)

        query = self.query_projection(h_att)
        attended = self.attention.step(state.attention_state, query, memory, durations, state.prev_frame)

        h_dec, c_dec = self.decoder_rnn(T.concat(h_att, attended.context), *state.decoder_rnn)
        projection_input = T.concat(h_dec, attended.context)
        frame = self.frame_head(projection_input)
        stop_logit = T.reshape(self.stop_head(projection_input), ())

        new_state = DecoderState(
            attention_rnn=(h_att, c_att),
            decoder_rnn=(h_dec, c_dec),
            attention_state=attended.state,
            prev_frame=teacher_frame if teacher_frame is not None else frame,
            prev_context=attended.context,
            step_index=state.step_index + 1,
            last_omegas=attended.omegas,
        )
        return frame, stop_logit, new_state

    def synthesize(self, symbol_ids: Sequence[int], durations: Optional[Sequence[int]], style: StyleInput,
                   mode: str = "free_run", targets: Optional[np.ndarray] = None,
                   rng: Optional[np.random.Generator] = None) -> SynthesisOutput:
        memory = self.text_encode(symbol_ids)
        duration_seq = None
        if durations is not None:
            duration_seq = self.duration_encode(durations, memory.length)
        elif self.attention.uses_durations:
            raise UsageError(f"The {self.config.mechanism} mechanism needs per-symbol durations")
        style_vec = self.style_encode(style)

        if mode == "teacher_forced":
            if targets is None or len(targets) == 0:
                raise UsageError("Teacher-forced synthesis needs a nonempty target frame matrix")
            n_steps = len(targets)
            if n_steps > self.config.max_decoder_steps:
                raise UsageError(f"{n_steps} target frames exceed max_decoder_steps={self.config.max_decoder_steps}")
        elif mode == "free_run":
            n_steps = self.config.max_decoder_steps
        else:
            raise UsageError(f"Unknown synthesis mode '{mode}'")

        state = self.initial_decoder_state(memory)
        frames, stops, rows, omegas = [], [], [], []
        truncated = mode == "free_run"
        for i in range(n_steps):
            teacher = Tensor(targets[i]) if mode == "teacher_forced" else None
            frame, stop_logit, state = self.decoder_step(state, memory, duration_seq, style_vec, teacher, rng)
            frames.append(frame)
            stops.append(stop_logit)
            rows.append(state.attention_state.prev_alignment)
            if state.last_omegas is not None:
                omegas.append(state.last_omegas)
            if mode == "free_run" and stop_logit.item() > 0.0:
                truncated = False
                break

        if truncated:
            logger.debug(f"Free run hit max_decoder_steps={self.config.max_decoder_steps} without a stop token")
        return SynthesisOutput(
            frames=T.stack(frames),
            stop_logits=T.stack(stops),
            alignment=T.stack(rows),
            omegas=T.stack(omegas) if omegas else None,
            truncated=truncated,
        )

    # --- parameters -------------------------------------------------------

    def named_parameters(self) -> dict[str, Tensor]:
        return self.store.named()

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.store.named().items()}

    def load_state_dict(self, tensors: dict[str, np.ndarray]):
        self.store.load(tensors)
