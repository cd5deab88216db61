import os
import json
import logging
from dataclasses import dataclass, field, fields, asdict
from typing import Optional

from dotenv import load_dotenv

from src.core.errors import ConfigError

logger = logging.getLogger(__name__)

MECHANISMS = ("location_sensitive", "gmm", "forward", "rc")


@dataclass
class Settings:
    log_level: str
    threads: int


def load_settings() -> Settings:
    load_dotenv()

    threads = os.getenv("RC_ALIGN_THREADS", "")
    try:
        n_threads = int(threads) if threads else (os.cpu_count() or 1)
    except ValueError:
        raise ConfigError(f"RC_ALIGN_THREADS: expected an integer, got '{threads}'")

    return Settings(
        log_level=os.getenv("LOG_LEVEL", "INFO"),
        threads=max(1, n_threads),
    )


class _Section:
    """from_dict/to_dict shared by the JSON-backed config sections."""
    section = ""

    @classmethod
    def from_dict(cls, data: Optional[dict]):
        data = dict(data or {})
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"{cls.section}: unknown field(s) {', '.join(unknown)}")
        cfg = cls(**data)
        cfg.validate()
        return cfg

    def to_dict(self) -> dict:
        return asdict(self)

    def _require(self, condition: bool, message: str):
        if not condition:
            raise ConfigError(f"{self.section}.{message}")


@dataclass
class CorpusConfig(_Section):
    section = "corpus"

    n_utterances: int = 500
    vocab_size: int = 40
    feature_dim: int = 16
    min_len: int = 3
    max_len: int = 8
    noise_std: float = 0.05
    style_tempo: list = field(default_factory=lambda: [1.0, 0.8, 1.25])
    style_amplitude: list = field(default_factory=lambda: [1.0, 1.15, 0.9])
    duration_jitter: float = 0.25
    validation_fraction: float = 0.1
    seed: int = 1234

    @property
    def n_style_classes(self) -> int:
        return len(self.style_tempo)

    def validate(self):
        self._require(self.n_utterances >= 1, "n_utterances: must be >= 1")
        self._require(self.vocab_size >= 2, "vocab_size: must be >= 2")
        self._require(self.feature_dim >= 1, "feature_dim: must be >= 1")
        self._require(self.min_len >= 1, "min_len: must be >= 1")
        self._require(self.min_len <= self.max_len,
                      f"min_len > corpus.max_len ({self.min_len} > {self.max_len})")
        self._require(self.noise_std >= 0, "noise_std: must be >= 0")
        self._require(len(self.style_tempo) >= 1, "style_tempo: needs at least one class")
        self._require(all(m > 0 for m in self.style_tempo), "style_tempo: multipliers must be > 0")
        self._require(len(self.style_amplitude) == len(self.style_tempo),
                      "style_amplitude: must have one entry per style class")
        self._require(all(m > 0 for m in self.style_amplitude), "style_amplitude: multipliers must be > 0")
        self._require(0.0 <= self.validation_fraction < 1.0, "validation_fraction: must be in [0, 1)")
        self._require(self.duration_jitter >= 0, "duration_jitter: must be >= 0")


@dataclass
class ModelConfig(_Section):
    section = "model"

    vocab_size: int = 40
    d_embed: int = 32
    d_enc: int = 64
    d_a: int = 64
    d_dur: int = 16
    n_dur_buckets: int = 5
    d_style: int = 16
    n_style_classes: int = 3
    n_style_tokens: int = 5
    style_source: str = "class"
    d_prenet: int = 32
    prenet_dropout: float = 0.5
    d_dec: int = 128
    feature_dim: int = 16
    max_decoder_steps: int = 2000
    mechanism: str = "rc"
    location_n_filters: int = 8
    location_kernel_size: int = 7
    gmm_mixtures: int = 5
    gmm_delta_bias: float = 0.2
    gmm_sigma_bias: float = 2.0
    rc_composition: str = "recursion"
    transition_override: Optional[float] = None
    seed: int = 7

    def validate(self):
        for name in ("vocab_size", "d_embed", "d_enc", "d_a", "d_dur", "n_dur_buckets", "d_style",
                     "n_style_classes", "n_style_tokens", "d_prenet", "d_dec", "feature_dim",
                     "max_decoder_steps", "location_n_filters", "location_kernel_size"):
            self._require(getattr(self, name) >= 1, f"{name}: must be >= 1")
        self._require(self.d_enc % 2 == 0, "d_enc: must be even (split across both encoder directions)")
        self._require(self.mechanism in MECHANISMS,
                      f"mechanism: unknown '{self.mechanism}', expected one of {', '.join(MECHANISMS)}")
        self._require(self.style_source in ("class", "reference"),
                      f"style_source: expected 'class' or 'reference', got '{self.style_source}'")
        self._require(self.location_kernel_size % 2 == 1, "location_kernel_size: must be odd")
        self._require(self.gmm_mixtures >= 1, "gmm_mixtures: must be >= 1")
        self._require(self.rc_composition in ("recursion", "product"),
                      f"rc_composition: expected 'recursion' or 'product', got '{self.rc_composition}'")
        self._require(0.0 <= self.prenet_dropout < 1.0, "prenet_dropout: must be in [0, 1)")
        if self.transition_override is not None:
            self._require(0.0 < self.transition_override < 1.0, "transition_override: must be in (0, 1)")


@dataclass
class TrainConfig(_Section):
    section = "train"

    steps: int = 3000
    batch_size: int = 8
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    grad_clip_norm: float = 1.0
    teacher_forcing: bool = True
    seed: int = 42
    checkpoint_every: int = 500
    log_every: int = 50
    progress: bool = True

    def validate(self):
        self._require(self.steps >= 1, "steps: must be >= 1")
        self._require(self.batch_size >= 1, "batch_size: must be >= 1")
        self._require(self.learning_rate >= 0, "learning_rate: must be >= 0")
        self._require(0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1, "adam betas: must be in [0, 1)")
        self._require(self.adam_eps > 0, "adam_eps: must be > 0")
        self._require(self.grad_clip_norm > 0, "grad_clip_norm: must be > 0")
        self._require(self.teacher_forcing, "teacher_forcing: only teacher-forced training is supported")
        self._require(self.checkpoint_every >= 1, "checkpoint_every: must be >= 1")
        self._require(self.log_every >= 1, "log_every: must be >= 1")


@dataclass
class EvalConfig(_Section):
    section = "eval"

    n_sentences: int = 40
    long_factor: float = 10.0
    scale_factors: list = field(default_factory=lambda: [0.5, 1.0, 2.0])
    collapse_min_rows: int = 5
    collapse_entropy_ratio: float = 0.8
    seed: int = 99

    def validate(self):
        self._require(self.n_sentences >= 1, "n_sentences: must be >= 1")
        self._require(self.long_factor > 0, "long_factor: must be > 0")
        self._require(len(self.scale_factors) >= 1 and all(k > 0 for k in self.scale_factors),
                      "scale_factors: need at least one positive factor")
        self._require(self.collapse_min_rows >= 1, "collapse_min_rows: must be >= 1")
        self._require(0 < self.collapse_entropy_ratio <= 1, "collapse_entropy_ratio: must be in (0, 1]")


@dataclass
class ExperimentConfig:
    corpus: CorpusConfig
    model: ModelConfig
    train: TrainConfig
    eval: EvalConfig

    def to_dict(self) -> dict:
        return {"corpus": self.corpus.to_dict(), "model": self.model.to_dict(),
                "train": self.train.to_dict(), "eval": self.eval.to_dict()}


def load_experiment_config(path: Optional[str]) -> ExperimentConfig:
    """Reads a JSON config with optional corpus/model/train/eval sections."""
    raw = {}
    if path:
        try:
            with open(path, 'r', encoding='utf-8') as f:
                raw = json.load(f)
        except FileNotFoundError:
            raise ConfigError(f"Config file not found: {path}")
        except json.JSONDecodeError as e:
            raise ConfigError(f"Config file {path} is not valid JSON: {e}")
        except UnicodeDecodeError as e:
            raise ConfigError(f"Config file {path} is not UTF-8 text: {e}")
        except OSError as e:
            raise ConfigError(f"Cannot read config file {path}: {e}")
        if not isinstance(raw, dict):
            raise ConfigError(f"Config file {path} must hold a JSON object")

    unknown = sorted(set(raw) - {"corpus", "model", "train", "eval"})
    if unknown:
        raise ConfigError(f"Unknown config section(s): {', '.join(unknown)}")

    try:
        return ExperimentConfig(
            corpus=CorpusConfig.from_dict(raw.get("corpus")),
            model=ModelConfig.from_dict(raw.get("model")),
            train=TrainConfig.from_dict(raw.get("train")),
            eval=EvalConfig.from_dict(raw.get("eval")),
        )
    except TypeError as e:
        raise ConfigError(f"Invalid config value: {e}")
