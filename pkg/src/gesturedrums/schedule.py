"""Masking schedules: training span masks, the cosine unmasking curve,
per-iteration confirmation counts, confidence ranking, and the
classifier-free-guidance combination.

Everything is pure; all randomness comes from caller-supplied generators.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError

SPAN_MIN_FRAC = 0.5
SPAN_MAX_FRAC = 0.75

DEFAULT_SCHEDULE = (8, 8, 8, 8, 8, 4, 4, 4, 4)
DEFAULT_CFG_WEIGHT = 2.0
DEFAULT_TEMPERATURE = 10.0
DEFAULT_CAUSAL_BIAS = 1.0


@dataclass
class MaskPlan:
    """One training mask: a codebook, a frame span, and the masked frames."""

    codebook: int
    span: tuple  # [start, end) in frames
    masked_frames: np.ndarray

    def __post_init__(self):
        self.masked_frames = np.asarray(sorted(int(f) for f in self.masked_frames), dtype=np.int64)
        start, end = self.span
        if not all(start <= f < end for f in self.masked_frames):
            raise ConfigError("masked frames fall outside the span")

    @property
    def span_len(self) -> int:
        return self.span[1] - self.span[0]

    @property
    def n_masked(self) -> int:
        return int(self.masked_frames.size)


@dataclass
class GenerationConfig:
    """Inference knobs; defaults reproduce the reference decoding settings."""

    iters_per_codebook: tuple = DEFAULT_SCHEDULE
    cfg_weight: float = DEFAULT_CFG_WEIGHT
    temperature: float = DEFAULT_TEMPERATURE
    causal_bias: float = DEFAULT_CAUSAL_BIAS
    seed: int = 0
    top_k: int | None = None  # optional truncation hook, off by default
    include_prefix: bool = False

    def __post_init__(self):
        self.iters_per_codebook = tuple(int(i) for i in self.iters_per_codebook)
        if any(i < 1 for i in self.iters_per_codebook):
            raise ConfigError(f"iteration counts must be >= 1, got {self.iters_per_codebook}")
        if self.temperature < 0 or self.causal_bias < 0:
            raise ConfigError("temperature and causal bias must be nonnegative")

    @property
    def total_iterations(self) -> int:
        return sum(self.iters_per_codebook)


def cosine_ratio(r: float) -> float:
    """Fraction of tokens still masked at progress r in [0, 1]: cos(pi*r/2)."""
    if not 0.0 <= r <= 1.0:
        raise ConfigError(f"progress must lie in [0, 1], got {r}")
    return math.cos(math.pi * r / 2.0)


def span_length_bounds(n_frames: int) -> tuple:
    """Valid training span lengths: [ceil(0.5 T), floor(0.75 T)]."""
    lo = math.ceil(SPAN_MIN_FRAC * n_frames)
    hi = math.floor(SPAN_MAX_FRAC * n_frames)
    return lo, max(lo, hi)


def sample_training_mask(
    n_frames: int,
    n_codebooks: int,
    rng: np.random.Generator,
    codebook: int | None = None,
) -> MaskPlan:
    """Draw one training mask: uniform codebook (unless pinned), uniform span
    covering 50-75% of the buffer, and ceil(cos(pi*r/2) * span_len) frames
    masked uniformly without replacement inside the span.
    """
    if n_frames < 2:
        raise ConfigError(f"need at least 2 frames to mask, got {n_frames}")
    if codebook is None:
        codebook = int(rng.integers(n_codebooks))
    lo, hi = span_length_bounds(n_frames)
    span_len = int(rng.integers(lo, hi + 1))
    start = int(rng.integers(0, n_frames - span_len + 1))
    r = float(rng.random())
    n_mask = math.ceil(cosine_ratio(r) * span_len)  # >= 1 since r < 1
    frames = start + rng.choice(span_len, size=n_mask, replace=False)
    return MaskPlan(codebook=codebook, span=(start, start + span_len), masked_frames=frames)


def _round_half_up(x: float) -> int:
    return math.floor(x + 0.5)


def remaining_after(n_masked: int, iters: int, i: int) -> int:
    """Tokens still masked after iteration i (0-based) of `iters`."""
    if i >= iters - 1:
        return 0
    return _round_half_up(cosine_ratio((i + 1) / iters) * n_masked)


def confirm_counts(n_masked: int, iters: int):
    """Per-iteration confirmation quota; nonnegative, sums to n_masked.

    The final iteration always clears whatever is left, so decoding
    terminates regardless of rounding.
    """
    if n_masked < 0 or iters < 1:
        raise ConfigError(f"invalid schedule request: n_masked={n_masked}, iters={iters}")
    counts = []
    prev = n_masked
    for i in range(iters):
        rem = remaining_after(n_masked, iters, i)
        counts.append(prev - rem)
        prev = rem
    return counts


def gumbel(rng: np.random.Generator, size) -> np.ndarray:
    u = rng.random(size)
    return -np.log(-np.log(np.clip(u, 1e-12, 1.0 - 1e-12)))


def rank_confidence(
    probs: np.ndarray,
    frame_idx: np.ndarray,
    n_frames: int,
    temperature: float,
    causal_bias: float,
    step_progress: float,
    rng: np.random.Generator,
) -> np.ndarray:
    """Order candidate cells for confirmation, most confident first.

    score = log p + temperature*(1-r)*Gumbel + bias*(1 - idx/T). The Gumbel
    term implements nondeterministic unmasking and is annealed to zero as the
    codebook's iterations progress; the bias term favors earlier frames. Ties
    resolve by ascending frame position (stable sort).
    """
    probs = np.asarray(probs, dtype=np.float64)
    frame_idx = np.asarray(frame_idx, dtype=np.float64)
    score = np.log(np.clip(probs, 1e-300, None))
    noise = gumbel(rng, probs.shape)  # drawn even at temp 0 to keep the stream fixed
    score = score + temperature * (1.0 - step_progress) * noise
    score = score + causal_bias * (1.0 - frame_idx / n_frames)
    return np.argsort(-score, kind="stable")


def cfg_combine(cond_logits: np.ndarray, uncond_logits: np.ndarray, weight: float) -> np.ndarray:
    """Classifier-free guidance: uncond + w * (cond - uncond).

    w=1 and w=0 return the conditional/unconditional logits exactly rather
    than through the interpolation arithmetic.
    """
    cond_logits = np.asarray(cond_logits)
    uncond_logits = np.asarray(uncond_logits)
    if cond_logits.shape != uncond_logits.shape:
        raise ConfigError(
            f"logit shape mismatch: {cond_logits.shape} vs {uncond_logits.shape}"
        )
    if weight == 1.0:
        return cond_logits
    if weight == 0.0:
        return uncond_logits
    return uncond_logits + weight * (cond_logits - uncond_logits)
