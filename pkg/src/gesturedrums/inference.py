"""Prompted generation: tokenized timbre prompt as an unmasked prefix, a
fully-masked suffix the length of the rhythm prompt, then coarse-to-fine
iterative unmasking with classifier-free guidance.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np
import torch

from . import dsp, rhythm, schedule
from .codec import TokenGrid
from .dsp import AudioClip
from .errors import ConfigError, TraceError
from .model import MaskedDrumTransformer
from .schedule import GenerationConfig

TRACE_FORMAT = "GDT1"
TRACE_VERSION = 1


@dataclass
class GenerationRequest:
    timbre_prompt: AudioClip
    rhythm_prompt: AudioClip
    gen: GenerationConfig = field(default_factory=GenerationConfig)
    n_bands: int = 2
    adaptive: bool = True

    def content_hash(self) -> str:
        h = hashlib.sha256()
        h.update(self.timbre_prompt.samples.tobytes())
        h.update(self.rhythm_prompt.samples.tobytes())
        h.update(
            json.dumps(
                {
                    "iters": list(self.gen.iters_per_codebook),
                    "cfg_weight": self.gen.cfg_weight,
                    "temperature": self.gen.temperature,
                    "causal_bias": self.gen.causal_bias,
                    "seed": self.gen.seed,
                    "n_bands": self.n_bands,
                    "adaptive": self.adaptive,
                },
                sort_keys=True,
            ).encode()
        )
        return h.hexdigest()


@dataclass
class IterationRecord:
    codebook: int
    confirmed_frames: list
    mean_confidence: float

    def to_dict(self) -> dict:
        return {
            "codebook": self.codebook,
            "confirmed_frames": [int(f) for f in self.confirmed_frames],
            "mean_confidence": self.mean_confidence,
        }


@dataclass
class GenerationTrace:
    """Everything needed to audit or re-decode one generation run."""

    request_hash: str
    seed: int
    model_hash: str
    codec_hash: str
    settings: dict
    prefix_frames: int
    suffix_frames: int
    hop: int
    sample_rate: int
    iterations: list
    final_grid: TokenGrid | None = None

    def to_dict(self) -> dict:
        if self.final_grid is None or self.final_grid.masked.any():
            raise TraceError("cannot serialize an incomplete trace")
        return {
            "format": TRACE_FORMAT,
            "version": TRACE_VERSION,
            "request_hash": self.request_hash,
            "seed": self.seed,
            "model_hash": self.model_hash,
            "codec_hash": self.codec_hash,
            "settings": self.settings,
            "prefix_frames": self.prefix_frames,
            "suffix_frames": self.suffix_frames,
            "hop": self.hop,
            "sample_rate": self.sample_rate,
            "iterations": [it.to_dict() for it in self.iterations],
            "n_tokens": self.final_grid.n_tokens,
            "final_tokens": self.final_grid.tokens.tolist(),
        }

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def load(cls, path) -> "GenerationTrace":
        with open(path) as fh:
            d = json.load(fh)
        if d.get("format") != TRACE_FORMAT:
            raise TraceError(f"not a generation trace: format={d.get('format')!r}")
        if d.get("version") != TRACE_VERSION:
            raise TraceError(f"unsupported trace version {d.get('version')}")
        required = ("request_hash", "model_hash", "codec_hash", "final_tokens",
                    "prefix_frames", "suffix_frames", "hop", "sample_rate", "n_tokens")
        missing = [k for k in required if k not in d]
        if missing:
            raise TraceError(f"trace is missing fields: {missing}")
        tokens = np.asarray(d["final_tokens"], dtype=np.int64)
        grid = TokenGrid(tokens, np.zeros_like(tokens, dtype=bool), d["hop"], d["n_tokens"])
        if grid.n_frames != d["prefix_frames"] + d["suffix_frames"]:
            raise TraceError("trace grid does not cover prefix + suffix")
        return cls(
            request_hash=d["request_hash"],
            seed=d["seed"],
            model_hash=d["model_hash"],
            codec_hash=d["codec_hash"],
            settings=d.get("settings", {}),
            prefix_frames=d["prefix_frames"],
            suffix_frames=d["suffix_frames"],
            hop=d["hop"],
            sample_rate=d["sample_rate"],
            iterations=[
                IterationRecord(it["codebook"], it["confirmed_frames"], it["mean_confidence"])
                for it in d.get("iterations", [])
            ],
            final_grid=grid,
        )


def build_buffer(req: GenerationRequest, codec):
    """Encode the timbre prompt as an unmasked prefix and append a fully
    masked suffix sized to the rhythm prompt's frame count.

    Rhythm features cover the suffix only; prefix frames carry zeros, which
    the model never reads there because no prefix cell is masked.

    Returns (grid, rhythm_values (bands, T_total), prefix_frames).
    """
    hop = codec.hop
    if len(req.timbre_prompt) < hop or len(req.rhythm_prompt) < hop:
        raise ConfigError("prompts must cover at least one codec frame")
    prefix = codec.encode(req.timbre_prompt)
    t_suffix = dsp.frame_count(len(req.rhythm_prompt), hop)
    feats = rhythm.extract(req.rhythm_prompt, n_bands=req.n_bands, adaptive=req.adaptive, hop=hop)
    assert feats.n_frames == t_suffix
    n_c = prefix.n_codebooks
    tokens = np.concatenate(
        [prefix.tokens, np.zeros((n_c, t_suffix), dtype=np.int64)], axis=1
    )
    masked = np.concatenate(
        [prefix.masked, np.ones((n_c, t_suffix), dtype=bool)], axis=1
    )
    grid = TokenGrid(tokens, masked, hop, prefix.n_tokens)
    rhythm_values = np.concatenate(
        [np.zeros((feats.n_bands, prefix.n_frames), dtype=np.float32), feats.values], axis=1
    )
    return grid, rhythm_values, prefix.n_frames


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits.astype(np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _sample_rows(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    cum = np.cumsum(probs, axis=1)
    u = rng.random((probs.shape[0], 1)) * cum[:, -1:]
    return (u > cum).sum(axis=1)


def _forward_pair(model, tokens_t, masked_t, rhythm_t, codebook, cfg_weight):
    """Conditional + (when needed) unconditional pass, combined with CFG."""
    with torch.no_grad():
        cond = model.forward_tensors(
            tokens_t, masked_t, rhythm_t, torch.tensor([False]), codebook
        )[0].cpu().numpy()
        uncond = model.forward_tensors(
            tokens_t, masked_t, rhythm_t, torch.tensor([True]), codebook
        )[0].cpu().numpy()
    return schedule.cfg_combine(cond, uncond, cfg_weight)


def generate(req: GenerationRequest, model: MaskedDrumTransformer, codec):
    """Run the full coarse-to-fine decoding loop.

    Returns (audio, trace). The audio covers the suffix only (set
    `req.gen.include_prefix` to keep the re-decoded prefix). Deterministic
    given the request and seed.
    """
    gen = req.gen
    n_c = model.config.n_codebooks
    if codec.config.n_codebooks != n_c:
        raise ConfigError(
            f"model has {n_c} codebooks but codec has {codec.config.n_codebooks}"
        )
    if len(gen.iters_per_codebook) != n_c:
        raise ConfigError(
            f"schedule length {len(gen.iters_per_codebook)} does not match {n_c} codebooks"
        )
    if model.config.n_bands != req.n_bands:
        raise ConfigError(
            f"request uses {req.n_bands} rhythm bands but model expects {model.config.n_bands}"
        )
    grid, rhythm_values, prefix_frames = build_buffer(req, codec)
    t_total = grid.n_frames
    t_suffix = t_total - prefix_frames
    rng = np.random.default_rng(gen.seed)
    dtype = model.mask_embedding.dtype
    rhythm_t = torch.from_numpy(rhythm_values).unsqueeze(0).to(dtype)
    iterations = []
    model.eval()

    for c in range(n_c):
        counts = schedule.confirm_counts(t_suffix, gen.iters_per_codebook[c])
        iters_c = gen.iters_per_codebook[c]
        for i, quota in enumerate(counts):
            still_masked = np.flatnonzero(grid.masked[c])  # absolute frame indices
            assert still_masked.size >= quota
            tokens_t = torch.from_numpy(grid.tokens).unsqueeze(0)
            masked_t = torch.from_numpy(grid.masked).unsqueeze(0)
            logits = _forward_pair(model, tokens_t, masked_t, rhythm_t, c, gen.cfg_weight)
            cell_logits = logits[still_masked]
            if gen.top_k is not None:
                kth = np.partition(cell_logits, -gen.top_k, axis=1)[:, -gen.top_k][:, None]
                cell_logits = np.where(cell_logits < kth, -np.inf, cell_logits)
            probs = _softmax(cell_logits)
            sampled = _sample_rows(probs, rng)
            sampled_p = probs[np.arange(sampled.size), sampled]
            progress = i / (iters_c - 1) if iters_c > 1 else 1.0
            order = schedule.rank_confidence(
                sampled_p, still_masked, t_total,
                gen.temperature, gen.causal_bias, progress, rng,
            )
            chosen = order[:quota]
            frames = still_masked[chosen]
            grid.tokens[c, frames] = sampled[chosen]
            grid.masked[c, frames] = False
            iterations.append(
                IterationRecord(
                    codebook=c,
                    confirmed_frames=[int(f) for f in frames],
                    mean_confidence=float(sampled_p[chosen].mean()) if quota else 0.0,
                )
            )
        assert not grid.masked[c].any()

    trace = GenerationTrace(
        request_hash=req.content_hash(),
        seed=gen.seed,
        model_hash=model.content_hash(),
        codec_hash=codec.content_hash(),
        settings={
            "schedule": list(gen.iters_per_codebook),
            "cfg_weight": gen.cfg_weight,
            "temperature": gen.temperature,
            "causal_bias": gen.causal_bias,
            "n_bands": req.n_bands,
            "adaptive": req.adaptive,
        },
        prefix_frames=prefix_frames,
        suffix_frames=t_suffix,
        hop=grid.hop,
        sample_rate=req.rhythm_prompt.sample_rate,
        iterations=iterations,
        final_grid=grid,
    )
    audio = _decode_trace_grid(trace, codec, include_prefix=gen.include_prefix)
    return audio, trace


def _decode_trace_grid(trace: GenerationTrace, codec, include_prefix: bool = False) -> AudioClip:
    # Decode the whole buffer, then drop the prefix samples: the decoder sees
    # full context at the prefix/suffix boundary that way.
    full = codec.decode(trace.final_grid)
    if include_prefix:
        return full
    start = trace.prefix_frames * trace.hop
    return AudioClip(full.samples[start:], full.sample_rate)


def resume_trace(trace: GenerationTrace, model, codec, include_prefix: bool = False) -> AudioClip:
    """Re-decode a completed trace; bit-identical to the original output.

    The stored model/codec hashes must match the artifacts passed in.
    """
    if trace.final_grid is None:
        raise TraceError("trace has no final grid")
    if trace.final_grid.masked.any():
        raise TraceError("trace grid still has masked cells")
    if model is not None and trace.model_hash != model.content_hash():
        raise TraceError("trace was produced by a different model checkpoint")
    if trace.codec_hash != codec.content_hash():
        raise TraceError("trace was produced by a different codec checkpoint")
    return _decode_trace_grid(trace, codec, include_prefix=include_prefix)
