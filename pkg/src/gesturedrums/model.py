"""Masked token transformer over the codec's C x T grid.

Embedding scheme: per-codebook token tables, one shared mask embedding, and
residual zeroing (every codebook above the lowest masked level contributes
nothing, since those tokens only correct a residual that is now unknown).
Rhythm features are projected to the hidden size and zeroed at frames with no
masked cells, so they can only steer prediction, never leak into readable
context.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import tensorio
from .codec import TokenGrid
from .errors import ConfigError

MAGIC = b"GDM1"


@dataclass
class ModelConfig:
    n_layers: int = 4
    hidden: int = 128
    n_heads: int = 4
    n_codebooks: int = 9
    n_tokens: int = 256
    n_bands: int = 2
    max_frames: int = 2048
    ffn_mult: int = 4
    rope_theta: float = 10000.0

    def __post_init__(self):
        if self.hidden % self.n_heads != 0:
            raise ConfigError(f"hidden {self.hidden} not divisible by heads {self.n_heads}")
        if (self.hidden // self.n_heads) % 2 != 0:
            raise ConfigError("head dimension must be even for rotary embedding")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def desk_model_config(**overrides) -> ModelConfig:
    """Small configuration trainable in minutes on CPU."""
    return ModelConfig(**overrides)


def paper_model_config(**overrides) -> ModelConfig:
    """Reference configuration: 12 x 512 x 8 heads over 9 codebooks of 1024."""
    base = dict(n_layers=12, hidden=512, n_heads=8, n_codebooks=9, n_tokens=1024, n_bands=2)
    base.update(overrides)
    return ModelConfig(**base)


@dataclass
class ModelInput:
    """One example: a partially masked grid, aligned rhythm features, the
    codebook to predict, and the CFG-dropout flag."""

    grid: TokenGrid
    rhythm: np.ndarray  # (B_bands, T)
    target_codebook: int
    rhythm_dropped: bool = False

    def __post_init__(self):
        self.rhythm = np.asarray(self.rhythm, dtype=np.float32)
        if self.rhythm.ndim != 2 or self.rhythm.shape[1] != self.grid.n_frames:
            raise ConfigError(
                f"rhythm frames {self.rhythm.shape} do not match grid frames {self.grid.n_frames}"
            )
        if not 0 <= self.target_codebook < self.grid.n_codebooks:
            raise ConfigError(f"target codebook {self.target_codebook} out of range")


class _Rotary(nn.Module):
    """Rotary positional encoding applied to q/k, pairwise even/odd rotation."""

    def __init__(self, head_dim: int, theta: float):
        super().__init__()
        inv_freq = 1.0 / (theta ** (torch.arange(0, head_dim, 2).float() / head_dim))
        self.register_buffer("inv_freq", inv_freq, persistent=False)

    def forward(self, x):
        # x: (B, heads, T, head_dim)
        t = torch.arange(x.shape[2], dtype=x.dtype, device=x.device)
        ang = t[:, None] * self.inv_freq.to(x.dtype)[None, :]  # (T, head_dim/2)
        cos, sin = torch.cos(ang), torch.sin(ang)
        x_even, x_odd = x[..., ::2], x[..., 1::2]
        out = torch.empty_like(x)
        out[..., ::2] = x_even * cos - x_odd * sin
        out[..., 1::2] = x_even * sin + x_odd * cos
        return out


class _Block(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        h = cfg.hidden
        self.n_heads = cfg.n_heads
        self.head_dim = h // cfg.n_heads
        self.norm1 = nn.LayerNorm(h)
        self.qkv = nn.Linear(h, 3 * h, bias=False)
        self.proj = nn.Linear(h, h, bias=False)
        self.norm2 = nn.LayerNorm(h)
        self.ff1 = nn.Linear(h, cfg.ffn_mult * h)
        self.ff2 = nn.Linear(cfg.ffn_mult * h, h)
        self.rotary = _Rotary(self.head_dim, cfg.rope_theta)

    def forward(self, x):
        b, t, h = x.shape
        y = self.norm1(x)
        q, k, v = self.qkv(y).chunk(3, dim=-1)
        q = q.view(b, t, self.n_heads, self.head_dim).transpose(1, 2)
        k = k.view(b, t, self.n_heads, self.head_dim).transpose(1, 2)
        v = v.view(b, t, self.n_heads, self.head_dim).transpose(1, 2)
        q, k = self.rotary(q), self.rotary(k)
        att = F.scaled_dot_product_attention(q, k, v)
        att = att.transpose(1, 2).reshape(b, t, h)
        x = x + self.proj(att)
        x = x + self.ff2(F.gelu(self.ff1(self.norm2(x))))
        return x


class MaskedDrumTransformer(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        c, k, h = config.n_codebooks, config.n_tokens, config.hidden
        self.token_embeddings = nn.ModuleList([nn.Embedding(k, h) for _ in range(c)])
        self.mask_embedding = nn.Parameter(torch.zeros(h))
        self.rhythm_proj = nn.Linear(config.n_bands, h)
        self.blocks = nn.ModuleList([_Block(config) for _ in range(config.n_layers)])
        self.final_norm = nn.LayerNorm(h)
        self.heads = nn.ModuleList([nn.Linear(h, k) for _ in range(c)])

    # -- embedding ----------------------------------------------------------

    def embed(self, tokens, masked, rhythm, rhythm_dropped):
        """Sum per-codebook embeddings into an (B, T, h) sequence.

        tokens/masked: (B, C, T); rhythm: (B, bands, T); rhythm_dropped: (B,).
        Masked cells contribute the shared mask embedding; every codebook
        above the lowest masked one is zeroed; rhythm is zeroed at frames with
        no masked cells and replaced by zero features when dropped.
        """
        bsz, n_c, t = tokens.shape
        any_masked = masked.any(dim=1)  # (B, T)
        first_masked = torch.where(
            any_masked,
            masked.to(torch.int8).argmax(dim=1),
            torch.full_like(tokens[:, 0], n_c),
        )  # (B, T)
        acc = tokens.new_zeros((bsz, t, self.config.hidden), dtype=self.mask_embedding.dtype)
        for c in range(n_c):
            tok_emb = self.token_embeddings[c](tokens[:, c].clamp(0, self.config.n_tokens - 1))
            cell = torch.where(masked[:, c].unsqueeze(-1), self.mask_embedding, tok_emb)
            keep = (c <= first_masked).to(cell.dtype).unsqueeze(-1)
            acc = acc + cell * keep
        feats = torch.where(
            rhythm_dropped.view(-1, 1, 1), torch.zeros_like(rhythm), rhythm
        )
        proj = self.rhythm_proj(feats.transpose(1, 2))  # (B, T, h)
        proj = proj * any_masked.to(proj.dtype).unsqueeze(-1)
        return acc + proj

    def forward_tensors(self, tokens, masked, rhythm, rhythm_dropped, target_codebook: int):
        x = self.embed(tokens, masked, rhythm, rhythm_dropped)
        for block in self.blocks:
            x = block(x)
        x = self.final_norm(x)
        return self.heads[target_codebook](x)  # (B, T, K)

    def forward(self, inp: ModelInput) -> np.ndarray:
        """Single-example convenience wrapper; returns (T, K) logits."""
        tokens = torch.from_numpy(inp.grid.tokens).unsqueeze(0)
        masked = torch.from_numpy(inp.grid.masked).unsqueeze(0)
        dtype = self.mask_embedding.dtype
        rhythm = torch.from_numpy(inp.rhythm).unsqueeze(0).to(dtype)
        dropped = torch.tensor([inp.rhythm_dropped])
        with torch.no_grad():
            logits = self.forward_tensors(tokens, masked, rhythm, dropped, inp.target_codebook)
        return logits[0].cpu().numpy()

    # -- persistence ---------------------------------------------------------

    def _container_payload(self):
        config = {"model": self.config.to_dict()}
        tensors = {name: t.detach().cpu().numpy() for name, t in self.state_dict().items()}
        return config, tensors

    def save(self, path) -> None:
        config, tensors = self._container_payload()
        tensorio.write_container(path, MAGIC, config, tensors)

    @classmethod
    def load(cls, path) -> "MaskedDrumTransformer":
        config, tensors = tensorio.read_container(path, MAGIC)
        model = cls(ModelConfig.from_dict(config["model"]))
        model.load_state_dict({name: torch.from_numpy(a) for name, a in tensors.items()})
        model.eval()
        return model

    def content_hash(self) -> str:
        config, tensors = self._container_payload()
        return tensorio.content_hash(MAGIC, config, tensors)


def init_model(config: ModelConfig, seed: int = 0, dtype=torch.float32) -> MaskedDrumTransformer:
    """Deterministically initialized model: normal(0, 0.02) weights drawn in
    parameter-name order, zero biases, unit layer-norm gains."""
    model = MaskedDrumTransformer(config).to(dtype)
    gen = torch.Generator().manual_seed(seed)
    for name, p in sorted(model.named_parameters(), key=lambda kv: kv[0]):
        with torch.no_grad():
            if p.ndim >= 2 or name.endswith("mask_embedding"):
                p.copy_(torch.empty_like(p).normal_(0.0, 0.02, generator=gen))
            elif "norm" in name and name.endswith("weight"):
                p.fill_(1.0)
            else:
                p.zero_()
    model.eval()
    return model


def parameter_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad)
