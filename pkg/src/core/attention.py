import logging
from dataclasses import dataclass, replace
from typing import Optional, Union

import numpy as np

from src.core import tensor as T
from src.core.config import ModelConfig
from src.core.errors import ConfigError, DimensionError, StateCorruptionError, UsageError
from src.core.layers import Conv1d, Linear, ParameterStore
from src.core.tensor import Tensor

logger = logging.getLogger(__name__)

NORMALIZATION_TOLERANCE = 1e-6


@dataclass(frozen=True)
class EncoderMemory:
    hidden_states: Tensor    # [N, d_h]
    projected_keys: Tensor   # [N, d_a], V.h_j

    @property
    def length(self) -> int:
        return self.hidden_states.shape[0]


@dataclass(frozen=True)
class DurationEmbeddingSeq:
    embeddings: Tensor       # [N, d_dur]
    buckets: tuple

    @property
    def length(self) -> int:
        return self.embeddings.shape[0]


@dataclass(frozen=True)
class AttentionState:
    prev_alignment: Tensor
    cumulative_alignment: Optional[Tensor] = None
    gmm_means: Optional[Tensor] = None
    gmm_stds: Optional[Tensor] = None
    gmm_weights: Optional[Tensor] = None
    transition_prob: Optional[Tensor] = None


@dataclass(frozen=True)
class AttentionStep:
    alignment: Tensor
    context: Tensor
    state: AttentionState
    omegas: Optional[Tensor] = None
    energies: Optional[Tensor] = None


def check_alignment(weights: Tensor, what: str = "alignment"):
    total = float(weights.data.sum())
    if abs(total - 1.0) > NORMALIZATION_TOLERANCE or (weights.data < 0).any():
        raise StateCorruptionError(f"{what} is not a distribution (sum={total:.9f})")


def one_hot_start(n: int) -> Tensor:
    data = np.zeros(n)
    data[0] = 1.0
    return Tensor(data)


def init_state(mechanism: str, n: int, n_mixtures: int = 5) -> AttentionState:
    if n < 1:
        raise ConfigError(f"Cannot initialize attention over {n} encoder states")
    state = AttentionState(prev_alignment=one_hot_start(n))
    if mechanism == "location_sensitive":
        return replace(state, cumulative_alignment=Tensor(np.zeros(n)))
    if mechanism == "gmm":
        if n_mixtures < 1:
            raise ConfigError(f"GMM attention needs at least one mixture, got {n_mixtures}")
        return replace(state, gmm_means=Tensor(np.zeros(n_mixtures)))
    if mechanism == "forward":
        return replace(state, transition_prob=Tensor(0.5))
    if mechanism == "rc":
        return state
    raise ConfigError(f"Unknown attention mechanism: {mechanism}")


def additive_energy(query: Tensor, memory: EncoderMemory, v: Tensor,
                    location: Optional[Tensor] = None) -> tuple[Tensor, Tensor]:
    """Returns (tanh(q + V.h_j [+ loc_j]) per position, v . that vector per position)."""
    d_a = memory.projected_keys.shape[1]
    if query.shape != (d_a,):
        raise DimensionError(f"additive_energy: query {list(query.shape)} vs keys {list(memory.projected_keys.shape)}")
    pre = T.add(memory.projected_keys, T.reshape(query, (1, d_a)))
    if location is not None:
        pre = T.add(pre, location)
    vectors = T.tanh(pre)
    return vectors, T.matmul(vectors, v)


def rc_transition_gates(energy_vectors: Tensor, durations: DurationEmbeddingSeq,
                        weight: Tensor, bias: Tensor) -> Tensor:
    """omega_j = sigmoid(w . [e_j ; L_j] + b), one scalar per encoder position."""
    if energy_vectors.shape[0] != durations.length:
        raise DimensionError(f"rc_transition_gates: {energy_vectors.shape[0]} energy rows "
                             f"vs {durations.length} duration embeddings")
    features = T.concat(energy_vectors, durations.embeddings, axis=1)
    return T.sigmoid(T.add(T.matmul(features, weight), bias))


def rc_recursion(prev: Tensor, gates: Tensor) -> Tensor:
    """
    a_j = (1 - w_{j-1}) a'_{j-1} + w_j a'_j with a'_0 = 0.
    The gate at the last position is fixed to 1 so no mass leaves the sequence.
    """
    n = prev.shape[0]
    if gates.shape != (n,):
        raise DimensionError(f"rc_recursion: gates {list(gates.shape)} vs alignment {list(prev.shape)}")
    check_alignment(prev, "previous alignment")

    stay_weight = T.concat(T.getitem(gates, slice(0, n - 1)), Tensor(np.ones(1)))
    stay = T.mul(stay_weight, prev)
    move = T.mul(T.sub(1.0, stay_weight), prev)
    shifted = T.concat(Tensor(np.zeros(1)), T.getitem(move, slice(0, n - 1)))
    return T.add(stay, shifted)


def forward_recursion(prev: Tensor, u: Union[Tensor, float], y: Tensor) -> Tensor:
    """
    a_j ~ ((1 - u) a'_j + u a'_{j-1}) y_j, renormalized.
    Mass at the last position stays there, matching rc_recursion.
    """
    n = prev.shape[0]
    if y.shape != (n,):
        raise DimensionError(f"forward_recursion: weights {list(y.shape)} vs alignment {list(prev.shape)}")
    u = T.constant(u)
    stay_weight = T.concat(T.mul(Tensor(np.ones(n - 1)), T.sub(1.0, u)), Tensor(np.ones(1)))
    stay = T.mul(stay_weight, prev)
    moved = T.mul(T.getitem(prev, slice(0, n - 1)), u)
    proposal = T.mul(T.add(stay, T.concat(Tensor(np.zeros(1)), moved)), y)
    return T.div(proposal, T.reduce_sum(proposal))


def attend(alignment: Tensor, memory: EncoderMemory) -> Tensor:
    return T.matmul(alignment, memory.hidden_states)


def rc_attention_step(state: AttentionState, query: Tensor, memory: EncoderMemory,
                      durations: DurationEmbeddingSeq, v: Tensor, gate_weight: Tensor,
                      gate_bias: Tensor, composition: str = "recursion") -> AttentionStep:
    energy_vectors, energies = additive_energy(query, memory, v)
    omegas = rc_transition_gates(energy_vectors, durations, gate_weight, gate_bias)
    alignment = rc_recursion(state.prev_alignment, omegas)
    if composition == "product":
        weighted = T.mul(alignment, T.softmax(energies))
        alignment = T.div(weighted, T.reduce_sum(weighted))
    context = attend(alignment, memory)
    return AttentionStep(alignment, context, replace(state, prev_alignment=alignment), omegas, energies)


class AttentionMechanism:
    name = ""
    uses_durations = False
    supports_rhythm_control = False

    def __init__(self, store: ParameterStore, config: ModelConfig):
        self.config = config
        self.memory_layer = Linear(store, "attention.memory", config.d_enc, config.d_a, bias=False)

    def prepare_memory(self, hidden_states: Tensor) -> EncoderMemory:
        if hidden_states.ndim != 2 or hidden_states.shape[0] < 1:
            raise DimensionError(f"Encoder memory must be [N>=1, d], got {list(hidden_states.shape)}")
        return EncoderMemory(hidden_states, self.memory_layer(hidden_states))

    def init_state(self, n: int) -> AttentionState:
        return init_state(self.name, n, self.config.gmm_mixtures)

    def step(self, state: AttentionState, query: Tensor, memory: EncoderMemory,
             durations: Optional[DurationEmbeddingSeq] = None,
             prev_frame: Optional[Tensor] = None) -> AttentionStep:
        raise NotImplementedError


class LocationSensitiveAttention(AttentionMechanism):
    name = "location_sensitive"

    def __init__(self, store: ParameterStore, config: ModelConfig):
        super().__init__(store, config)
        self.v = store.create("attention.v", (config.d_a,))
        self.location_conv = Conv1d(store, "attention.location_conv", config.location_kernel_size,
                                    1, config.location_n_filters)
        self.location_dense = Linear(store, "attention.location_dense", config.location_n_filters,
                                     config.d_a, bias=False)

    def step(self, state, query, memory, durations=None, prev_frame=None):
        n = memory.length
        features = self.location_conv(T.reshape(state.cumulative_alignment, (n, 1)))
        _, energies = additive_energy(query, memory, self.v, self.location_dense(features))
        alignment = T.softmax(energies)
        new_state = replace(state, prev_alignment=alignment,
                            cumulative_alignment=T.add(state.cumulative_alignment, alignment))
        return AttentionStep(alignment, attend(alignment, memory), new_state, energies=energies)


class GMMAttention(AttentionMechanism):
    """GMMv2b: softplus mean increments and widths, softmax mixture weights."""
    name = "gmm"

    def __init__(self, store: ParameterStore, config: ModelConfig):
        if config.gmm_mixtures < 1:
            raise ConfigError(f"GMM attention needs at least one mixture, got {config.gmm_mixtures}")
        super().__init__(store, config)
        self.k = config.gmm_mixtures
        self.delta_bias = config.gmm_delta_bias
        self.sigma_bias = config.gmm_sigma_bias
        self.head = Linear(store, "attention.gmm_head", config.d_a, 3 * self.k)

    def mixture_parameters(self, head_out: Tensor, prev_means: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        """Returns (means, stds, log mixture weights)."""
        k = self.k
        w_hat = T.getitem(head_out, slice(0, k))
        delta_hat = T.getitem(head_out, slice(k, 2 * k))
        sigma_hat = T.getitem(head_out, slice(2 * k, 3 * k))
        means = T.add(prev_means, T.softplus(T.add(delta_hat, self.delta_bias)))
        stds = T.softplus(T.add(sigma_hat, self.sigma_bias))
        log_weights = T.sub(w_hat, T.logsumexp(w_hat, axis=0))
        return means, stds, log_weights

    def step(self, state, query, memory, durations=None, prev_frame=None):
        n, k = memory.length, self.k
        means, stds, log_weights = self.mixture_parameters(self.head(query), state.gmm_means)

        # Normalized over positions in log space: softmax_j(logsumexp_k(log w_k - (j - mu_k)^2 / 2 s_k^2)).
        positions = Tensor(np.arange(1, n + 1, dtype=np.float64).reshape(1, n))
        offsets = T.sub(positions, T.reshape(means, (k, 1)))
        spread = T.scale(T.square(T.reshape(stds, (k, 1))), 2.0)
        log_terms = T.sub(T.reshape(log_weights, (k, 1)), T.div(T.square(offsets), spread))
        alignment = T.softmax(T.logsumexp(log_terms, axis=0))

        new_state = replace(state, prev_alignment=alignment, gmm_means=means, gmm_stds=stds, gmm_weights=T.exp(log_weights))
        return AttentionStep(alignment, attend(alignment, memory), new_state)


class ForwardAttention(AttentionMechanism):
    name = "forward"
    supports_rhythm_control = True

    def __init__(self, store: ParameterStore, config: ModelConfig):
        super().__init__(store, config)
        self.v = store.create("attention.v", (config.d_a,))
        self.agent = Linear(store, "attention.transition_agent", config.d_enc + config.d_a + config.feature_dim, 1)
        self.transition_override: Optional[float] = None
        if config.transition_override is not None:
            self.set_transition_override(config.transition_override)

    def set_transition_override(self, value: Optional[float]):
        if value is not None and not 0.0 < value < 1.0:
            raise ConfigError(f"Transition override must lie in (0, 1), got {value}")
        self.transition_override = value

    def step(self, state, query, memory, durations=None, prev_frame=None):
        u = state.transition_prob if self.transition_override is None else Tensor(self.transition_override)
        _, energies = additive_energy(query, memory, self.v)
        alignment = forward_recursion(state.prev_alignment, u, T.softmax(energies))
        context = attend(alignment, memory)

        if prev_frame is None:
            prev_frame = Tensor(np.zeros(self.config.feature_dim))
        agent_out = self.agent(T.concat(context, query, prev_frame))
        u_next = T.reshape(T.sigmoid(agent_out), ())
        new_state = replace(state, prev_alignment=alignment, transition_prob=u_next)
        return AttentionStep(alignment, context, new_state, energies=energies)


class RCAttention(AttentionMechanism):
    name = "rc"
    uses_durations = True
    supports_rhythm_control = True

    def __init__(self, store: ParameterStore, config: ModelConfig):
        super().__init__(store, config)
        self.v = store.create("attention.v", (config.d_a,))
        self.gate_weight = store.create("attention.gate.weight", (config.d_a + config.d_dur,))
        self.gate_bias = store.create("attention.gate.bias", (1,), fill=0.0)
        self.composition = config.rc_composition

    def step(self, state, query, memory, durations=None, prev_frame=None):
        if durations is None:
            raise UsageError("RC attention needs duration embeddings for every step")
        return rc_attention_step(state, query, memory, durations, self.v, self.gate_weight,
                                 self.gate_bias, self.composition)


_MECHANISMS = {cls.name: cls for cls in (LocationSensitiveAttention, GMMAttention, ForwardAttention, RCAttention)}


def build_mechanism(store: ParameterStore, config: ModelConfig) -> AttentionMechanism:
    if config.mechanism not in _MECHANISMS:
        raise ConfigError(f"Unknown attention mechanism '{config.mechanism}', "
                          f"expected one of {', '.join(_MECHANISMS)}")
    return _MECHANISMS[config.mechanism](store, config)
