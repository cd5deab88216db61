import math
import logging
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.stats import spearmanr

from src.core.errors import CapabilityError, UsageError
from src.core.model import Seq2SeqModel, SynthesisOutput
from src.utils.corpus import Utterance

logger = logging.getLogger(__name__)

FORWARD_U_RANGE = (0.01, 0.99)


def _matrix(alignment) -> np.ndarray:
    return np.asarray(getattr(alignment, "data", alignment), dtype=np.float64)


def alignment_path(alignment) -> list[int]:
    """Per-row argmax as 1-based encoder positions; ties go to the lower index."""
    matrix = _matrix(alignment)
    if matrix.ndim != 2:
        raise UsageError(f"Alignment must be a [T, N] matrix, got shape {list(matrix.shape)}")
    return [int(i) + 1 for i in np.argmax(matrix, axis=1)]


def row_entropies(alignment) -> np.ndarray:
    matrix = _matrix(alignment)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(matrix > 0, matrix * np.log(matrix), 0.0)
    return -terms.sum(axis=1)


def count_collapses(alignment, min_rows: int = 5, entropy_ratio: float = 0.8) -> int:
    """Runs of at least `min_rows` consecutive rows with entropy above entropy_ratio * ln N."""
    matrix = _matrix(alignment)
    threshold = entropy_ratio * math.log(matrix.shape[1])
    runs, length = 0, 0
    for blurred in row_entropies(matrix) > threshold:
        length = length + 1 if blurred else 0
        if length == min_rows:
            runs += 1
    return runs


@dataclass
class UtteranceDefects:
    n_symbols: int
    n_frames: int
    style_class: int
    skips: int
    repeats: int
    collapses: int
    truncated: bool

    @property
    def total(self) -> int:
        return self.skips + self.repeats + self.collapses + int(self.truncated)


def detect_defects(output: SynthesisOutput, n_symbols: int, style_class: int = 0,
                   min_rows: int = 5, entropy_ratio: float = 0.8) -> UtteranceDefects:
    path = alignment_path(output.alignment)
    increments = np.diff(path)
    return UtteranceDefects(
        n_symbols=n_symbols,
        n_frames=len(path),
        style_class=int(style_class),
        skips=n_symbols - len(set(path)),
        repeats=int(np.sum(increments < 0)),
        collapses=count_collapses(output.alignment, min_rows, entropy_ratio),
        truncated=bool(output.truncated),
    )


def _tally(items: Sequence[UtteranceDefects]) -> dict:
    symbols = sum(d.n_symbols for d in items)
    counts = {
        "utterances": len(items),
        "symbols": symbols,
        "skips": sum(d.skips for d in items),
        "repeats": sum(d.repeats for d in items),
        "collapses": sum(d.collapses for d in items),
        "truncations": sum(int(d.truncated) for d in items),
    }
    defects = counts["skips"] + counts["repeats"] + counts["collapses"] + counts["truncations"]
    counts["defect_rate"] = min(1.0, defects / symbols) if symbols else 0.0
    return counts


@dataclass
class RobustnessReport:
    utterances: list
    aggregate: dict
    per_style: dict
    thresholds: dict

    @property
    def defect_rate(self) -> float:
        return self.aggregate["defect_rate"]

    def to_dict(self) -> dict:
        return {
            "aggregate": self.aggregate,
            "per_style": {str(k): v for k, v in sorted(self.per_style.items())},
            "thresholds": self.thresholds,
            "utterances": [asdict(u) for u in self.utterances],
        }


def robustness_report(outputs: Sequence[SynthesisOutput], inputs: Sequence[Utterance],
                      min_rows: int = 5, entropy_ratio: float = 0.8) -> RobustnessReport:
    if len(outputs) != len(inputs):
        raise UsageError(f"{len(outputs)} outputs for {len(inputs)} inputs")
    defects = [detect_defects(o, u.n_symbols, u.style_class, min_rows, entropy_ratio)
               for o, u in zip(outputs, inputs)]
    styles = sorted({d.style_class for d in defects})
    return RobustnessReport(
        utterances=defects,
        aggregate=_tally(defects),
        per_style={s: _tally([d for d in defects if d.style_class == s]) for s in styles},
        thresholds={"collapse_min_rows": min_rows, "collapse_entropy_ratio": entropy_ratio,
                    "entropy_log_base": "e", "normalizer": "symbols"},
    )


def realized_durations(alignment, n_symbols: int) -> list[int]:
    """Frames whose argmax lands on each symbol."""
    path = np.asarray(alignment_path(alignment)) - 1
    return np.bincount(path, minlength=n_symbols).tolist()


def scale_durations(durations: Sequence[int], factor: float) -> list[int]:
    return [max(1, math.ceil(factor * int(d) - 1e-9)) for d in durations]


def style_for(model: Seq2SeqModel, utterance: Utterance):
    return utterance.frames if model.config.style_source == "reference" else utterance.style_class


def synthesize_many(model: Seq2SeqModel, utterances: Sequence[Utterance], threads: int = 1,
                    durations_fn: Optional[Callable[[Utterance], Sequence[int]]] = None) -> list[SynthesisOutput]:
    """Free-run synthesis over utterances; results come back in input order."""
    durations_fn = durations_fn or (lambda u: u.durations)

    def run(u: Utterance) -> SynthesisOutput:
        output = model.synthesize(u.symbol_ids, durations_fn(u), style_for(model, u), mode="free_run")
        logger.debug(f"Synthesized {output.n_frames} frames for {u.n_symbols} symbols"
                     f"{' (truncated)' if output.truncated else ''}")
        return output

    if threads > 1 and len(utterances) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(run, utterances))
    return [run(u) for u in utterances]


@dataclass
class RhythmReport:
    mechanism: str
    scale_factors: list
    supplied: list = field(default_factory=list)       # per utterance, durations at scale 1
    realized: dict = field(default_factory=dict)       # scale -> per-utterance realized durations
    total_lengths: dict = field(default_factory=dict)  # scale -> per-utterance decoded frames
    spearman: Optional[float] = None
    correlation_defined: bool = False
    fraction_longer: Optional[float] = None
    monotone_fraction: Optional[float] = None

    def to_dict(self) -> dict:
        return {
            "mechanism": self.mechanism,
            "scale_factors": self.scale_factors,
            "spearman": self.spearman,
            "correlation_defined": self.correlation_defined,
            "fraction_longer_at_max_scale": self.fraction_longer,
            "monotone_fraction": self.monotone_fraction,
            "supplied": self.supplied,
            "realized": {str(k): v for k, v in self.realized.items()},
            "total_lengths": {str(k): v for k, v in self.total_lengths.items()},
        }


def rank_correlation(supplied: Sequence[float], realized: Sequence[float]) -> Optional[float]:
    """Spearman correlation, or None when either side is constant."""
    if len(supplied) < 2 or len(set(supplied)) < 2 or len(set(realized)) < 2:
        return None
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        rho, _ = spearmanr(supplied, realized)
    return None if not np.isfinite(rho) else float(rho)


def rhythm_response(model: Seq2SeqModel, utterances: Sequence[Utterance],
                    scale_factors: Sequence[float] = (0.5, 1.0, 2.0), threads: int = 1) -> RhythmReport:
    """
    RC models get durations ceil(k * d). Forward-attention models have no per-symbol
    pathway, so each scale fixes the transition agent at u = (N / sum d) / k instead.
    """
    attention = model.attention
    if not attention.supports_rhythm_control:
        raise CapabilityError(f"The {model.config.mechanism} mechanism has no duration control pathway")
    if not utterances:
        raise UsageError("Rhythm response needs at least one utterance")

    factors = sorted(float(k) for k in scale_factors)
    report = RhythmReport(model.config.mechanism, factors,
                          supplied=[[int(d) for d in u.durations] for u in utterances])

    for k in factors:
        if attention.uses_durations:
            outputs = synthesize_many(model, utterances, threads, lambda u: scale_durations(u.durations, k))
        else:
            outputs = []
            previous = attention.transition_override
            try:
                for u in utterances:
                    u_ref = u.n_symbols / float(np.sum(u.durations))
                    attention.set_transition_override(float(np.clip(u_ref / k, *FORWARD_U_RANGE)))
                    outputs.extend(synthesize_many(model, [u]))
            finally:
                attention.set_transition_override(previous)
        report.realized[k] = [realized_durations(o.alignment, u.n_symbols) for o, u in zip(outputs, utterances)]
        report.total_lengths[k] = [o.n_frames for o in outputs]
        logger.info(f"scale {k}: mean decoded length {np.mean(report.total_lengths[k]):.1f} frames")

    reference = 1.0 if 1.0 in report.realized else factors[len(factors) // 2]
    supplied = [d for durations in report.supplied for d in scale_durations(durations, reference)]
    realized = [d for durations in report.realized[reference] for d in durations]
    report.spearman = rank_correlation(supplied, realized)
    report.correlation_defined = report.spearman is not None
    if not report.correlation_defined:
        logger.warning("Rank correlation undefined (constant supplied or realized durations)")

    if len(factors) > 1:
        lo, hi = report.total_lengths[factors[0]], report.total_lengths[factors[-1]]
        report.fraction_longer = float(np.mean([b > a for a, b in zip(lo, hi)]))
        lengths = np.array([report.total_lengths[k] for k in factors])
        report.monotone_fraction = float(np.mean(np.all(np.diff(lengths, axis=0) >= 0, axis=0)))
    return report


COMPARISON_COLUMNS = ("mechanism", "skips", "repeats", "collapses", "truncations", "symbols", "defect_rate")


def comparison_table(rows: Sequence[dict]) -> str:
    """Fixed-width text table, one row per checkpoint, in input order."""
    header = ["checkpoint", *COMPARISON_COLUMNS]
    body = []
    for row in rows:
        agg = row["robustness"]["aggregate"]
        body.append([row["checkpoint"], row["mechanism"], str(agg["skips"]), str(agg["repeats"]),
                     str(agg["collapses"]), str(agg["truncations"]), str(agg["symbols"]),
                     f"{100.0 * agg['defect_rate']:.1f}%"])
    widths = [max(len(r[i]) for r in [header, *body]) for i in range(len(header))]
    lines = ["  ".join(cell.ljust(w) for cell, w in zip(r, widths)).rstrip() for r in [header, *body]]
    return "\n".join(lines) + "\n"
