"""Band-reduced rhythm features: adaptive/fixed mel band split, per-band
standardization, sigmoid squashing, and 33-step quantization.

The quantized output is the conditioning signal for the masked model; it is
deliberately too coarse to carry timbre.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import dsp
from .dsp import AudioClip, MelSpectrogram
from .errors import ConfigError, ContainerError

QUANT_STEPS = 33  # grid {0, 1/32, ..., 1}
MAX_BANDS = 4
_EPS = 1e-10


@dataclass
class BandSplit:
    """B-1 mel-bin split indices; bin k in a split means bins [0..k] fall in
    the lower band."""

    split_bins: list
    adaptive: bool
    n_mels: int = dsp.DEFAULT_N_MELS

    def __post_init__(self):
        self.split_bins = [int(b) for b in self.split_bins]
        if any(b2 <= b1 for b1, b2 in zip(self.split_bins, self.split_bins[1:])):
            raise ConfigError(f"split bins must be strictly increasing, got {self.split_bins}")
        if self.split_bins and not (0 <= self.split_bins[0] and self.split_bins[-1] <= self.n_mels - 2):
            raise ConfigError(f"split bins {self.split_bins} out of range for {self.n_mels} mel bins")

    @property
    def n_bands(self) -> int:
        return len(self.split_bins) + 1

    def band_ranges(self):
        """Inclusive (lo, hi) mel-bin ranges covering [0, n_mels-1] w/o gaps."""
        edges = [-1] + self.split_bins + [self.n_mels - 1]
        return [(edges[i] + 1, edges[i + 1]) for i in range(len(edges) - 1)]


@dataclass
class RhythmFeatureMatrix:
    """B bands x T frames of rhythm features on the 33-step grid."""

    values: np.ndarray
    split: BandSplit
    hop: int = dsp.DEFAULT_HOP
    quantized: bool = True

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)
        if self.values.ndim != 2:
            raise ConfigError(f"rhythm features must be 2-D, got shape {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise ConfigError("non-finite rhythm feature values")

    @property
    def n_bands(self) -> int:
        return self.values.shape[0]

    @property
    def n_frames(self) -> int:
        return self.values.shape[1]


def _uniform_split_bins(n_mels: int, n_bands: int) -> list:
    return [n_mels * q // n_bands - 1 for q in range(1, n_bands)]


def fixed_split(n_mels: int, n_bands: int) -> BandSplit:
    """Equal-width partition of the mel axis (the non-adaptive variant)."""
    _check_bands(n_bands)
    return BandSplit(_uniform_split_bins(n_mels, n_bands), adaptive=False, n_mels=n_mels)


def adaptive_split(mel: MelSpectrogram, n_bands: int) -> BandSplit:
    """Split bins so cumulative time-summed energy first reaches q/B of the
    total at split q; the boundary bin joins the lower band.

    An all-zero spectrogram falls back to the uniform partition. Splits are
    nudged upward when energy is so concentrated that several quantiles land
    in one bin, keeping every band nonempty.
    """
    _check_bands(n_bands)
    n_mels = mel.n_mels
    if n_bands == 1:
        return BandSplit([], adaptive=True, n_mels=n_mels)
    energy = mel.values.sum(axis=1)
    total = float(energy.sum())
    if total <= 0.0:
        return BandSplit(_uniform_split_bins(n_mels, n_bands), adaptive=True, n_mels=n_mels)
    cum = np.cumsum(energy)
    bins = []
    prev = -1
    for q in range(1, n_bands):
        target = total * q / n_bands
        k = int(np.searchsorted(cum, target, side="left"))
        k = max(k, prev + 1)
        k = min(k, n_mels - 1 - (n_bands - q))
        bins.append(k)
        prev = k
    return BandSplit(bins, adaptive=True, n_mels=n_mels)


def band_energies(mel: MelSpectrogram, split: BandSplit) -> np.ndarray:
    """Sum mel power within each band, shape (B, T)."""
    return np.stack([mel.values[lo : hi + 1].sum(axis=0) for lo, hi in split.band_ranges()])


def quantize_unit(values: np.ndarray) -> np.ndarray:
    """Round [0,1] values to the nearest of the 33 grid points, half up."""
    steps = np.floor(np.clip(values, 0.0, 1.0) * (QUANT_STEPS - 1) + 0.5)
    return steps / (QUANT_STEPS - 1)


def features_from_energies(energies: np.ndarray, log_compress: bool = True) -> np.ndarray:
    """Standardize each band, squash with a sigmoid, quantize to the grid.

    The log floor is relative to the loudest cell so that scaling the input
    shifts every log value by the same constant, which standardization then
    removes: gain invariance is exact, not approximate. A zero-variance band
    standardizes to all zeros (features sit at the uninformative midpoint).
    """
    e = np.asarray(energies, dtype=np.float64)
    floor = max(float(e.max()) * _EPS, 1e-300)
    c = np.log(e + floor) if log_compress else e
    mean = c.mean(axis=1, keepdims=True)
    std = c.std(axis=1, keepdims=True)
    z = np.where(std > 1e-12, (c - mean) / np.where(std > 1e-12, std, 1.0), 0.0)
    sig = 1.0 / (1.0 + np.exp(-z))
    return quantize_unit(sig)


def extract(
    clip: AudioClip,
    n_bands: int = 2,
    adaptive: bool = True,
    log_compress: bool = True,
    n_fft: int = dsp.DEFAULT_N_FFT,
    hop: int = dsp.DEFAULT_HOP,
) -> RhythmFeatureMatrix:
    """Full rhythm-feature pipeline for one clip.

    Frames align one-to-one with codec token frames when `hop` matches the
    codec hop. Per-band standardization is per excerpt, which makes the
    features invariant to overall input gain.
    """
    mel = dsp.mel_spectrogram(clip, n_fft=n_fft, hop=hop)
    split = adaptive_split(mel, n_bands) if adaptive else fixed_split(mel.n_mels, n_bands)
    values = features_from_energies(band_energies(mel, split), log_compress=log_compress)
    return RhythmFeatureMatrix(values, split=split, hop=hop, quantized=True)


def _check_bands(n_bands: int) -> None:
    if not 1 <= n_bands <= MAX_BANDS:
        raise ConfigError(f"band count must be in [1, {MAX_BANDS}], got {n_bands}")


def split_frequencies_hz(split: BandSplit, sample_rate: int) -> list:
    """Approximate Hz boundary for each split: the mel-scale midpoint between
    the centers of the last lower-band bin and the first upper-band bin."""
    out = []
    for k in split.split_bins:
        lo = dsp.hz_to_mel(dsp.mel_band_center_hz(sample_rate, split.n_mels, k))
        hi = dsp.hz_to_mel(dsp.mel_band_center_hz(sample_rate, split.n_mels, k + 1))
        out.append(float(dsp.mel_to_hz((lo + hi) / 2.0)))
    return out


# ---------------------------------------------------------------------------
# Feature dump format ("GDF1"): small binary container for bit-exact golden
# files, with an optional text export in the CLI.

_MAGIC = b"GDF1"
_VERSION = 1


def write_feature_dump(path, feats: RhythmFeatureMatrix, sample_rate: int = dsp.PIPELINE_RATE) -> None:
    split = feats.split
    header = struct.pack(
        "<4sIHHIIIBBH",
        _MAGIC,
        _VERSION,
        feats.n_bands,
        0,
        feats.n_frames,
        feats.hop,
        sample_rate,
        1 if feats.quantized else 0,
        1 if split.adaptive else 0,
        len(split.split_bins),
    )
    with open(path, "wb") as fh:
        fh.write(header)
        for b in split.split_bins:
            fh.write(struct.pack("<H", b))
        fh.write(feats.values.astype("<f4").tobytes(order="C"))


def read_feature_dump(path) -> RhythmFeatureMatrix:
    with open(path, "rb") as fh:
        raw = fh.read()
    head_size = struct.calcsize("<4sIHHIIIBBH")
    if len(raw) < head_size:
        raise ContainerError(f"{path}: truncated feature dump")
    magic, version, bands, _, frames, hop, _sr, quantized, adaptive, n_splits = struct.unpack(
        "<4sIHHIIIBBH", raw[:head_size]
    )
    if magic != _MAGIC:
        raise ContainerError(f"{path}: bad magic {magic!r}, expected {_MAGIC!r}")
    if version != _VERSION:
        raise ContainerError(f"{path}: unsupported feature dump version {version}")
    off = head_size
    split_bins = []
    for _ in range(n_splits):
        (b,) = struct.unpack_from("<H", raw, off)
        split_bins.append(b)
        off += 2
    want = bands * frames * 4
    body = raw[off : off + want]
    if len(body) != want:
        raise ContainerError(f"{path}: feature payload truncated ({len(body)} of {want} bytes)")
    values = np.frombuffer(body, dtype="<f4").reshape(bands, frames)
    split = BandSplit(split_bins, adaptive=bool(adaptive))
    return RhythmFeatureMatrix(values.copy(), split=split, hop=hop, quantized=bool(quantized))
