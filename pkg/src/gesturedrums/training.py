"""Self-supervised training: the same excerpt supplies both the token targets
(clean audio) and the rhythm conditioning (augmented audio), with span
masking, masked-position cross-entropy, and CFG conditioning dropout.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, asdict, field

import numpy as np
import torch
import torch.nn.functional as F

from . import dsp, rhythm, schedule
from .codec import TokenGrid
from .dsp import AudioClip, AugmentFlags
from .errors import ConfigError, TrainingDivergedError
from .model import MaskedDrumTransformer
from .schedule import MaskPlan


@dataclass
class TrainConfig:
    steps: int = 2000
    batch_size: int = 8
    excerpt_seconds: float = 2.0
    lr: float = 3e-4
    cfg_dropout_p: float = 0.2
    aug_p: float = 0.25
    seed: int = 0
    warmup_steps: int = 100
    lr_schedule: str = "cosine"  # "cosine" decay to lr_floor, or "constant"
    lr_floor: float = 0.1
    grad_clip: float = 1.0
    weight_decay: float = 0.01
    betas: tuple = (0.9, 0.95)
    n_bands: int = 2
    adaptive_split: bool = True
    log_compress: bool = True
    checkpoint_every: int = 500

    def __post_init__(self):
        if not (0.0 <= self.cfg_dropout_p <= 1.0 and 0.0 <= self.aug_p <= 1.0):
            raise ConfigError("probabilities must lie in [0, 1]")
        if self.lr_schedule not in ("cosine", "constant"):
            raise ConfigError(f"unknown lr schedule {self.lr_schedule!r}")
        self.betas = tuple(self.betas)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


@dataclass
class TrainStepRecord:
    step: int
    loss: float
    masked_cells: int
    codebook: int

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainExample:
    grid: TokenGrid  # masked per plan
    rhythm: np.ndarray  # (bands, T)
    plan: MaskPlan
    targets: np.ndarray  # ground-truth tokens at the masked cells
    rhythm_dropped: bool


def excerpt_frames(cfg: TrainConfig, hop: int, sample_rate: int = dsp.PIPELINE_RATE) -> int:
    return max(2, round(cfg.excerpt_seconds * sample_rate / hop))


def draw_cfg_dropout(rng: np.random.Generator, p: float) -> bool:
    """The conditioning-dropout coin; factored out so its statistics can be
    checked without assembling full examples."""
    return bool(rng.random() < p)


def make_example(
    clip: AudioClip,
    codec,
    cfg: TrainConfig,
    rng: np.random.Generator,
    full_grid: TokenGrid | None = None,
    codebook: int | None = None,
) -> TrainExample:
    """Build one training example from a clip.

    A hop-aligned random excerpt is chosen; its tokens are the corresponding
    columns of the clean full-clip encoding (pass `full_grid` to reuse a
    cached encode), while rhythm features come from the augmented excerpt
    waveform. Draw order from `rng`: excerpt start, augmentation flags and
    parameters, mask plan, CFG-dropout coin.
    """
    hop = codec.hop
    t_ex = excerpt_frames(cfg, hop, clip.sample_rate)
    t_full = len(clip) // hop  # complete frames only, no padded tail
    if t_full < t_ex:
        raise ConfigError(
            f"clip with {t_full} complete frames is too short for a {t_ex}-frame excerpt"
        )
    if full_grid is None:
        full_grid = codec.encode(clip)
    start = int(rng.integers(0, t_full - t_ex + 1))
    excerpt = AudioClip(clip.samples[start * hop : (start + t_ex) * hop], clip.sample_rate)

    flags = AugmentFlags.roll(rng, cfg.aug_p)
    rhythm_source = dsp.augment(excerpt, flags, rng)
    feats = rhythm.extract(
        rhythm_source,
        n_bands=cfg.n_bands,
        adaptive=cfg.adaptive_split,
        log_compress=cfg.log_compress,
        hop=hop,
    )

    tokens = full_grid.tokens[:, start : start + t_ex].copy()
    plan = schedule.sample_training_mask(t_ex, full_grid.n_codebooks, rng, codebook=codebook)
    masked = np.zeros_like(tokens, dtype=bool)
    masked[plan.codebook, plan.masked_frames] = True
    targets = tokens[plan.codebook, plan.masked_frames].copy()
    dropped = draw_cfg_dropout(rng, cfg.cfg_dropout_p)
    grid = TokenGrid(tokens, masked, hop, full_grid.n_tokens)
    return TrainExample(grid=grid, rhythm=feats.values, plan=plan, targets=targets,
                        rhythm_dropped=dropped)


def masked_loss(logits: torch.Tensor, plan: MaskPlan, targets) -> torch.Tensor:
    """Mean cross-entropy over the masked cells of one example.

    logits: (T, K) for the plan's codebook. Logits at unmasked frames do not
    contribute.
    """
    if plan.n_masked == 0:
        raise ConfigError("mask plan has no masked cells")
    frames = torch.as_tensor(plan.masked_frames, dtype=torch.long)
    tgt = torch.as_tensor(np.asarray(targets), dtype=torch.long)
    if frames.numel() != tgt.numel():
        raise ConfigError("targets do not match the masked cells")
    return F.cross_entropy(logits[frames], tgt)


def _batch_tensors(examples, dtype):
    tokens = torch.from_numpy(np.stack([ex.grid.tokens for ex in examples]))
    masked = torch.from_numpy(np.stack([ex.grid.masked for ex in examples]))
    feats = torch.from_numpy(np.stack([ex.rhythm for ex in examples])).to(dtype)
    dropped = torch.tensor([ex.rhythm_dropped for ex in examples])
    return tokens, masked, feats, dropped


def train_loop(
    corpus,
    model: MaskedDrumTransformer,
    codec,
    cfg: TrainConfig,
    run_dir=None,
    token_cache=None,
    progress=None,
):
    """AdamW training with linear warmup and gradient clipping.

    One codebook is sampled per step and shared across the batch (spans and
    masked subsets stay per-example), so exactly one prediction head receives
    gradient each step. Deterministic given the seed and a fixed thread
    count. Returns the list of TrainStepRecords.

    `token_cache` maps corpus index -> TokenGrid of the full clip; it is
    filled here when absent so each clip is encoded once.
    """
    if not corpus:
        raise ConfigError("empty training corpus")
    if model.config.n_codebooks != codec.config.n_codebooks:
        raise ConfigError(
            f"model expects {model.config.n_codebooks} codebooks, codec has "
            f"{codec.config.n_codebooks}"
        )
    if cfg.steps == 0:
        return []
    dtype = model.mask_embedding.dtype
    if token_cache is None:
        token_cache = {}
    for i, clip in enumerate(corpus):
        if i not in token_cache:
            token_cache[i] = codec.encode(clip)

    opt = torch.optim.AdamW(
        model.parameters(), lr=cfg.lr, betas=cfg.betas, weight_decay=cfg.weight_decay
    )
    sched = torch.optim.lr_scheduler.LambdaLR(
        opt, lambda step: min(1.0, (step + 1) / max(1, cfg.warmup_steps))
    )
    records = []
    model.train()
    for step in range(cfg.steps):
        rng_step = np.random.default_rng([cfg.seed, step])
        c_step = int(rng_step.integers(model.config.n_codebooks))
        clip_idx = rng_step.integers(0, len(corpus), size=cfg.batch_size)
        examples = []
        for i in range(cfg.batch_size):
            rng_ex = np.random.default_rng([cfg.seed, step, i])
            idx = int(clip_idx[i])
            examples.append(
                make_example(corpus[idx], codec, cfg, rng_ex,
                             full_grid=token_cache[idx], codebook=c_step)
            )
        tokens, masked, feats, dropped = _batch_tensors(examples, dtype)
        logits = model.forward_tensors(tokens, masked, feats, dropped, c_step)
        loss = torch.stack(
            [masked_loss(logits[i], ex.plan, ex.targets) for i, ex in enumerate(examples)]
        ).mean()
        if not torch.isfinite(loss):
            model.eval()
            raise TrainingDivergedError(step, [r.loss for r in records])
        opt.zero_grad()
        loss.backward()
        torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
        opt.step()
        sched.step()
        records.append(
            TrainStepRecord(
                step=step,
                loss=float(loss.item()),
                masked_cells=int(sum(ex.plan.n_masked for ex in examples)),
                codebook=c_step,
            )
        )
        if run_dir is not None and cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
            model.save(f"{run_dir}/model_step{step + 1:06d}.gdm")
        if progress is not None:
            progress(step, records[-1])
    model.eval()
    return records


def masked_topk_accuracy(
    model: MaskedDrumTransformer,
    codec,
    clips,
    cfg: TrainConfig,
    n_examples: int = 64,
    seed: int = 12345,
) -> float:
    """Top-1 accuracy of the model at masked cells on held-out clips."""
    hits = 0
    total = 0
    model.eval()
    dtype = model.mask_embedding.dtype
    for j in range(n_examples):
        rng = np.random.default_rng([seed, j])
        clip = clips[j % len(clips)]
        ex = make_example(clip, codec, cfg, rng)
        tokens, masked, feats, dropped = _batch_tensors([ex], dtype)
        with torch.no_grad():
            logits = model.forward_tensors(tokens, masked, feats, dropped, ex.plan.codebook)
        pred = logits[0, ex.plan.masked_frames].argmax(dim=-1).numpy()
        hits += int((pred == ex.targets).sum())
        total += ex.targets.size
    return hits / max(total, 1)
