"""Small residual-VQ waveform codec: strided-conv encoder, C-stage residual
quantizer with EMA codebooks, transposed-conv decoder.

It stands in for a production neural codec at desk scale; the codebook count
C=9 is kept so the coarse-to-fine inference schedule is exercised faithfully.
A deterministic SyntheticCodec is also provided so model/scheduler tests do
not depend on codec training.
"""

from __future__ import annotations

import copy
import hashlib
import math
from dataclasses import dataclass, asdict

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import dsp, tensorio
from .dsp import AudioClip
from .errors import ConfigError, MaskedCellError, NotTrainedError, TrainingDivergedError

MAGIC = b"GDC1"


@dataclass
class CodecConfig:
    n_codebooks: int = 9
    n_tokens: int = 256
    latent_dim: int = 64
    strides: tuple = (8, 8, 8)
    channels: tuple = (16, 32, 48)
    sample_rate: int = dsp.PIPELINE_RATE
    ema_decay: float = 0.99
    commitment_weight: float = 0.25
    # The log-mel term is kept light: weighting it near the waveform term
    # floods quiet bands with gradient and ruins time-domain fidelity.
    spectral_weight: float = 0.05
    spectral_floor: float = 1e-2

    def __post_init__(self):
        self.strides = tuple(int(s) for s in self.strides)
        self.channels = tuple(int(c) for c in self.channels)
        if self.n_codebooks < 1:
            raise ConfigError(f"need at least one codebook, got {self.n_codebooks}")
        if self.n_tokens < 2:
            raise ConfigError(f"codebook size must be >= 2, got {self.n_tokens}")
        if len(self.strides) != len(self.channels):
            raise ConfigError("strides and channels must have matching lengths")
        hop = self.hop
        if hop & (hop - 1) != 0:
            raise ConfigError(f"hop must be a power of two, got {hop}")

    @property
    def hop(self) -> int:
        return int(np.prod(self.strides))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "CodecConfig":
        d = dict(d)
        d["strides"] = tuple(d.get("strides", (8, 8, 8)))
        d["channels"] = tuple(d.get("channels", (16, 32, 48)))
        return cls(**d)


@dataclass
class TokenGrid:
    """C codebooks x T frames of token ids plus a parallel mask-flag grid.

    A masked cell carries no readable token; consumers must check the flag.
    """

    tokens: np.ndarray
    masked: np.ndarray
    hop: int
    n_tokens: int

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.int64)
        self.masked = np.asarray(self.masked, dtype=bool)
        if self.tokens.ndim != 2 or self.tokens.shape != self.masked.shape:
            raise ConfigError(
                f"token/mask shapes disagree: {self.tokens.shape} vs {self.masked.shape}"
            )
        readable = self.tokens[~self.masked]
        if readable.size and (readable.min() < 0 or readable.max() >= self.n_tokens):
            raise ConfigError(f"token ids out of range [0, {self.n_tokens})")

    @property
    def n_codebooks(self) -> int:
        return self.tokens.shape[0]

    @property
    def n_frames(self) -> int:
        return self.tokens.shape[1]

    def copy(self) -> "TokenGrid":
        return TokenGrid(self.tokens.copy(), self.masked.copy(), self.hop, self.n_tokens)


def _pad_to_hop(samples: np.ndarray, hop: int) -> np.ndarray:
    n = samples.size
    padded_len = dsp.frame_count(n, hop) * hop
    if padded_len == n:
        return samples
    return np.pad(samples, (0, padded_len - n))


class _Encoder(nn.Module):
    def __init__(self, cfg: CodecConfig):
        super().__init__()
        layers = [nn.Conv1d(1, cfg.channels[0], 9, padding=4), nn.ELU()]
        ch = cfg.channels[0]
        for stride, out_ch in zip(cfg.strides, list(cfg.channels[1:]) + [cfg.channels[-1]]):
            # kernel 2*stride with pad stride//2 keeps T exactly N/stride
            layers += [nn.Conv1d(ch, out_ch, 2 * stride, stride=stride, padding=stride // 2), nn.ELU()]
            ch = out_ch
        layers += [nn.Conv1d(ch, cfg.latent_dim, 3, padding=1)]
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        return self.net(x)


class _Decoder(nn.Module):
    def __init__(self, cfg: CodecConfig):
        super().__init__()
        chans = [cfg.channels[-1]] + list(reversed(cfg.channels[1:])) + [cfg.channels[0]]
        layers = [nn.Conv1d(cfg.latent_dim, chans[0], 3, padding=1), nn.ELU()]
        ch = chans[0]
        for stride, out_ch in zip(reversed(cfg.strides), chans[1:]):
            layers += [
                nn.ConvTranspose1d(ch, out_ch, 2 * stride, stride=stride, padding=stride // 2),
                nn.ELU(),
            ]
            ch = out_ch
        layers += [nn.Conv1d(ch, 1, 9, padding=4)]
        self.net = nn.Sequential(*layers)

    def forward(self, z):
        return torch.tanh(self.net(z))


class ResidualVQCodec(nn.Module):
    """audio -> C x T tokens -> audio. Each quantizer stage encodes the
    residual left by the stages before it; the quantized latent is exactly
    the sum of the selected codewords."""

    def __init__(self, config: CodecConfig):
        super().__init__()
        self.config = config
        self.encoder = _Encoder(config)
        self.decoder = _Decoder(config)
        c, k, d = config.n_codebooks, config.n_tokens, config.latent_dim
        self.register_buffer("codebooks", torch.zeros(c, k, d))
        self.register_buffer("cluster_size", torch.zeros(c, k))
        self.register_buffer("embed_avg", torch.zeros(c, k, d))
        self.register_buffer("stages_ready", torch.zeros(c))
        self.trained = False

    # -- quantization ------------------------------------------------------

    def _init_stage(self, stage: int, residual: torch.Tensor, gen: torch.Generator) -> None:
        k = self.config.n_tokens
        flat = residual.detach().reshape(-1, residual.shape[-1])
        n = flat.shape[0]
        idx = torch.randint(0, n, (k,), generator=gen) if n < k else torch.randperm(n, generator=gen)[:k]
        seed_vecs = flat[idx] + 1e-4 * torch.randn(k, flat.shape[1], generator=gen)
        self.codebooks[stage] = seed_vecs
        self.embed_avg[stage] = seed_vecs.clone()
        self.cluster_size[stage].fill_(1.0)
        self.stages_ready[stage] = 1.0

    def quantize(self, latents: torch.Tensor, gen: torch.Generator | None = None):
        """Residual quantization of (B, D, T) latents.

        Returns (tokens (B,C,T), straight-through latents, commitment loss,
        per-stage residual norms for diagnostics).
        """
        b, d, t = latents.shape
        z = latents.permute(0, 2, 1).reshape(-1, d)  # (B*T, D)
        residual = z
        quantized = torch.zeros_like(z)
        tokens = []
        commit = latents.new_zeros(())
        res_norms = []
        for c in range(self.config.n_codebooks):
            if self.training and self.stages_ready[c] == 0:
                if gen is None:
                    raise ConfigError("training-time quantization needs a generator for init")
                self._init_stage(c, residual, gen)
            dist = torch.cdist(residual.detach().unsqueeze(0), self.codebooks[c].unsqueeze(0)).squeeze(0)
            idx = dist.argmin(dim=1)
            codes = self.codebooks[c][idx]
            if self.training:
                self._ema_update(c, residual.detach(), idx)
            commit = commit + F.mse_loss(residual, codes.detach())
            residual = residual - codes
            quantized = quantized + codes
            tokens.append(idx)
            res_norms.append(residual.detach().norm(dim=1))
        commit = commit / self.config.n_codebooks
        tokens = torch.stack(tokens, dim=0).reshape(self.config.n_codebooks, b, t).permute(1, 0, 2)
        if self.training:
            zq = z + (quantized - z).detach()  # straight-through estimator
        else:
            zq = quantized  # exact codeword sum, no float residue
        zq = zq.reshape(b, t, d).permute(0, 2, 1)
        return tokens, zq, commit, torch.stack(res_norms)

    def _ema_update(self, stage: int, residual: torch.Tensor, idx: torch.Tensor) -> None:
        decay = self.config.ema_decay
        k = self.config.n_tokens
        onehot = F.one_hot(idx, k).to(residual.dtype)
        counts = onehot.sum(dim=0)
        sums = onehot.t() @ residual
        self.cluster_size[stage].mul_(decay).add_(counts, alpha=1 - decay)
        self.embed_avg[stage].mul_(decay).add_(sums, alpha=1 - decay)
        n = self.cluster_size[stage].sum()
        smoothed = (self.cluster_size[stage] + 1e-5) / (n + k * 1e-5) * n
        self.codebooks[stage] = self.embed_avg[stage] / smoothed.unsqueeze(1)

    # -- public audio interface --------------------------------------------

    @property
    def hop(self) -> int:
        return self.config.hop

    def _require_trained(self):
        if not self.trained:
            raise NotTrainedError("codec has not been trained or loaded from a checkpoint")

    @torch.no_grad()
    def encode(self, clip: AudioClip) -> TokenGrid:
        """Tokenize a clip into ceil(len/hop) frames; all cells unmasked."""
        self._require_trained()
        if len(clip) < 1:
            raise ConfigError("cannot encode an empty clip")
        was_training = self.training
        self.eval()
        try:
            samples = _pad_to_hop(clip.samples.astype(np.float32), self.hop)
            x = torch.from_numpy(samples).reshape(1, 1, -1)
            latents = self.encoder(x)
            tokens, _, _, _ = self.quantize(latents)
        finally:
            self.train(was_training)
        grid = tokens[0].cpu().numpy().astype(np.int64)
        return TokenGrid(
            tokens=grid,
            masked=np.zeros_like(grid, dtype=bool),
            hop=self.hop,
            n_tokens=self.config.n_tokens,
        )

    @torch.no_grad()
    def decode(self, grid: TokenGrid) -> AudioClip:
        """Sum codewords per frame and run the decoder; length is T*hop."""
        self._require_trained()
        if grid.masked.any():
            n_bad = int(grid.masked.sum())
            raise MaskedCellError(f"cannot decode a grid with {n_bad} masked cells")
        if grid.n_codebooks != self.config.n_codebooks:
            raise ConfigError(
                f"grid has {grid.n_codebooks} codebooks, codec expects {self.config.n_codebooks}"
            )
        if grid.n_tokens != self.config.n_tokens:
            raise ConfigError(
                f"grid token range {grid.n_tokens} does not match codec codebook size "
                f"{self.config.n_tokens}"
            )
        tokens = torch.from_numpy(grid.tokens)
        latent = torch.zeros(grid.n_frames, self.config.latent_dim)
        for c in range(self.config.n_codebooks):
            latent += self.codebooks[c][tokens[c]]
        z = latent.t().unsqueeze(0)  # (1, D, T)
        wave = self.decoder(z)[0, 0].cpu().numpy()
        return AudioClip(wave.astype(np.float32), self.config.sample_rate)

    # -- persistence --------------------------------------------------------

    def _container_payload(self):
        config = {"codec": self.config.to_dict(), "trained": self.trained}
        tensors = {name: t.detach().cpu().numpy() for name, t in self.state_dict().items()}
        return config, tensors

    def save(self, path) -> None:
        config, tensors = self._container_payload()
        tensorio.write_container(path, MAGIC, config, tensors)

    @classmethod
    def load(cls, path) -> "ResidualVQCodec":
        config, tensors = tensorio.read_container(path, MAGIC)
        codec = cls(CodecConfig.from_dict(config["codec"]))
        state = {name: torch.from_numpy(arr) for name, arr in tensors.items()}
        codec.load_state_dict(state)
        codec.trained = bool(config.get("trained", False))
        return codec

    def content_hash(self) -> str:
        config, tensors = self._container_payload()
        return tensorio.content_hash(MAGIC, config, tensors)


def _mel_loss_banks(sample_rate: int):
    banks = []
    for n_fft, hop in ((1024, 256), (2048, 512)):
        fb = dsp.mel_filterbank(sample_rate, n_fft, 64).astype(np.float32)
        banks.append((n_fft, hop, torch.from_numpy(fb)))
    return banks


def _spectral_loss(pred: torch.Tensor, target: torch.Tensor, banks, floor: float) -> torch.Tensor:
    loss = pred.new_zeros(())
    for n_fft, hop, fb in banks:
        window = torch.hann_window(n_fft)
        sp = torch.stft(pred.squeeze(1), n_fft, hop, window=window, return_complex=True).abs()
        st = torch.stft(target.squeeze(1), n_fft, hop, window=window, return_complex=True).abs()
        mp = torch.log(fb @ sp + floor)
        mt = torch.log(fb @ st + floor)
        loss = loss + (mp - mt).abs().mean()
    return loss / len(banks)


def train_codec(
    corpus,
    config: CodecConfig,
    steps: int,
    rng: np.random.Generator,
    batch_size: int = 4,
    excerpt_len: int = 16384,
    lr: float = 3e-4,
    snapshot_every: int = 100,
    log_every: int = 50,
):
    """Train a ResidualVQCodec on a list of AudioClips.

    Reconstruction is L1 waveform plus a 2-scale log-mel loss; codebooks are
    EMA-updated with a straight-through estimator for the encoder gradient.
    A non-finite loss aborts after rolling back to the last good snapshot.

    Returns (codec, records) where records is a list of {"step", "loss"}.
    """
    if not corpus:
        raise ConfigError("empty training corpus")
    torch_gen = torch.Generator().manual_seed(int(rng.integers(2**63 - 1)))
    torch.manual_seed(int(rng.integers(2**63 - 1)))
    codec = ResidualVQCodec(config)
    banks = _mel_loss_banks(config.sample_rate)
    opt = torch.optim.Adam(
        list(codec.encoder.parameters()) + list(codec.decoder.parameters()), lr=lr
    )
    records = []
    snapshot = copy.deepcopy(codec.state_dict())
    codec.train()
    for step in range(steps):
        batch = np.zeros((batch_size, excerpt_len), dtype=np.float32)
        for i in range(batch_size):
            clip = corpus[int(rng.integers(len(corpus)))]
            x = clip.samples
            if x.size <= excerpt_len:
                batch[i, : x.size] = x
            else:
                off = int(rng.integers(0, x.size - excerpt_len + 1))
                batch[i] = x[off : off + excerpt_len]
        x = torch.from_numpy(batch).unsqueeze(1)
        latents = codec.encoder(x)
        _, zq, commit, _ = codec.quantize(latents, gen=torch_gen)
        recon = codec.decoder(zq)
        loss = (
            (recon - x).abs().mean()
            + config.spectral_weight * _spectral_loss(recon, x, banks, config.spectral_floor)
            + config.commitment_weight * commit
        )
        if not torch.isfinite(loss):
            codec.load_state_dict(snapshot)
            codec.eval()
            codec.trained = True
            err = TrainingDivergedError(step, [r["loss"] for r in records])
            err.artifact = codec  # last good checkpoint, usable by the caller
            raise err
        opt.zero_grad()
        loss.backward()
        opt.step()
        if step % log_every == 0 or step == steps - 1:
            records.append({"step": step, "loss": float(loss.item())})
        if step % snapshot_every == 0:
            snapshot = copy.deepcopy(codec.state_dict())
    codec.eval()
    codec.trained = True
    return codec, records


class SyntheticCodec:
    """Deterministic stand-in codec for tests: hash-based tokenizer plus a
    bandlimited-click synthesizer. No training involved."""

    def __init__(self, n_codebooks: int = 9, n_tokens: int = 256, hop: int = 512,
                 sample_rate: int = dsp.PIPELINE_RATE):
        self.config = CodecConfig(
            n_codebooks=n_codebooks, n_tokens=n_tokens, latent_dim=1,
            strides=(hop,), channels=(1,), sample_rate=sample_rate,
        )
        self.trained = True

    @property
    def hop(self) -> int:
        return self.config.hop

    def encode(self, clip: AudioClip) -> TokenGrid:
        hop = self.hop
        samples = _pad_to_hop(clip.samples.astype(np.float64), hop)
        frames = samples.reshape(-1, hop)
        amp = np.floor(np.abs(frames).mean(axis=1) * 1e4).astype(np.int64)
        zc = (np.diff(np.signbit(frames).astype(np.int8), axis=1) != 0).sum(axis=1).astype(np.int64)
        c = np.arange(self.config.n_codebooks, dtype=np.int64)[:, None]
        mixed = amp[None, :] * (2 * c + 3) * 2654435761 + zc[None, :] * (c + 1) * 40503 + 7 * c
        tokens = np.abs(mixed) % self.config.n_tokens
        return TokenGrid(tokens, np.zeros_like(tokens, dtype=bool), hop, self.config.n_tokens)

    def decode(self, grid: TokenGrid) -> AudioClip:
        if grid.masked.any():
            raise MaskedCellError("cannot decode a grid with masked cells")
        hop = self.hop
        sr = self.config.sample_rate
        t = np.arange(hop) / sr
        window = 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(hop) / hop)
        out = np.zeros(grid.n_frames * hop)
        for c in range(grid.n_codebooks):
            frac = grid.tokens[c] / self.config.n_tokens  # (T,)
            freq = 60.0 * (c + 1) * (1.0 + frac)
            amp = frac * 0.5 / 2**c
            burst = np.sin(2 * np.pi * freq[:, None] * t[None, :]) * window[None, :]
            out += (amp[:, None] * burst).reshape(-1)
        return AudioClip(np.clip(out, -1, 1).astype(np.float32), sr)

    def content_hash(self) -> str:
        key = f"synthetic-codec:{self.config.n_codebooks}:{self.config.n_tokens}:{self.hop}"
        return hashlib.sha256(key.encode()).hexdigest()
