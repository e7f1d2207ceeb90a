"""Audio I/O, spectral transforms, and waveform augmentations.

Everything here is pure numpy/scipy; the neural parts of the pipeline live in
`codec` and `model`. All audio is mono float32 at the pipeline rate (44.1 kHz);
no resampler is provided, inputs must already be at that rate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.fft
import scipy.io.wavfile
import scipy.signal

from .errors import AudioFormatError, SampleRateMismatchError

PIPELINE_RATE = 44100

# STFT defaults: hop equals the codec hop so rhythm features align one-to-one
# with token frames without interpolation.
DEFAULT_N_FFT = 2048
DEFAULT_HOP = 512
DEFAULT_N_MELS = 80

_LOG_FLOOR = 1e-10


@dataclass
class AudioClip:
    """Mono sample buffer plus its sample rate."""

    samples: np.ndarray
    sample_rate: int = PIPELINE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float32)
        if self.samples.ndim != 1:
            raise AudioFormatError(f"expected mono 1-D samples, got shape {self.samples.shape}")
        if self.samples.size < 1:
            raise AudioFormatError("empty audio clip")
        if not np.all(np.isfinite(self.samples)):
            raise AudioFormatError("non-finite samples in audio clip")

    def __len__(self):
        return self.samples.size

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass
class MelSpectrogram:
    """Nonnegative mel-band power, shape (n_mels, frames)."""

    values: np.ndarray
    hop: int
    n_fft: int
    sample_rate: int

    @property
    def n_mels(self) -> int:
        return self.values.shape[0]

    @property
    def n_frames(self) -> int:
        return self.values.shape[1]


def load_wav(path, expected_rate: int | None = PIPELINE_RATE) -> AudioClip:
    """Read a PCM WAV file (16-bit int or 32-bit float, 1 or 2 channels).

    Stereo is downmixed by channel averaging. No resampling: a rate other
    than `expected_rate` raises SampleRateMismatchError (pass None to skip
    the check).
    """
    try:
        rate, data = scipy.io.wavfile.read(path)
    except Exception as exc:  # scipy raises bare ValueError on bad RIFF data
        raise AudioFormatError(f"cannot read WAV file {path}: {exc}") from exc
    if data.dtype == np.int16:
        samples = data.astype(np.float32) / 32768.0
    elif data.dtype == np.float32:
        samples = data.astype(np.float32)
    else:
        raise AudioFormatError(
            f"unsupported WAV encoding {data.dtype} in {path}; need 16-bit PCM or float32"
        )
    if samples.ndim == 2:
        if samples.shape[1] > 2:
            raise AudioFormatError(f"{path} has {samples.shape[1]} channels; need 1 or 2")
        samples = samples.mean(axis=1)
    if expected_rate is not None and rate != expected_rate:
        raise SampleRateMismatchError(rate, expected_rate, path)
    if samples.size == 0:
        raise AudioFormatError(f"{path} contains no samples")
    return AudioClip(samples, int(rate))


def save_wav(path, clip: AudioClip, encoding: str = "float32") -> None:
    """Write a clip as little-endian RIFF WAV ('float32' or 'pcm16')."""
    if encoding == "float32":
        scipy.io.wavfile.write(path, clip.sample_rate, clip.samples.astype(np.float32))
    elif encoding == "pcm16":
        q = np.clip(np.round(clip.samples * 32767.0), -32768, 32767).astype(np.int16)
        scipy.io.wavfile.write(path, clip.sample_rate, q)
    else:
        raise AudioFormatError(f"unknown WAV encoding {encoding!r}")


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(sample_rate: int, n_fft: int, n_mels: int) -> np.ndarray:
    """Triangular mel filterbank spanning 0 Hz to Nyquist, shape (n_mels, n_fft//2+1).

    Filters are unnormalized (unit peak) so band sums stay interpretable as
    grouped spectral power.
    """
    nyquist = sample_rate / 2.0
    mel_pts = np.linspace(hz_to_mel(0.0), hz_to_mel(nyquist), n_mels + 2)
    hz_pts = mel_to_hz(mel_pts)
    fft_freqs = np.linspace(0.0, nyquist, n_fft // 2 + 1)
    fb = np.zeros((n_mels, fft_freqs.size), dtype=np.float64)
    for m in range(n_mels):
        lo, ctr, hi = hz_pts[m], hz_pts[m + 1], hz_pts[m + 2]
        rising = (fft_freqs - lo) / max(ctr - lo, 1e-12)
        falling = (hi - fft_freqs) / max(hi - ctr, 1e-12)
        fb[m] = np.clip(np.minimum(rising, falling), 0.0, 1.0)
    return fb


def mel_band_center_hz(sample_rate: int, n_mels: int, band: int) -> float:
    """Center frequency of a mel band (peak of its triangle)."""
    nyquist = sample_rate / 2.0
    mel_pts = np.linspace(hz_to_mel(0.0), hz_to_mel(nyquist), n_mels + 2)
    return float(mel_to_hz(mel_pts[band + 1]))


def frame_count(n_samples: int, hop: int) -> int:
    return -(-int(n_samples) // int(hop))


def _stft_power(samples: np.ndarray, n_fft: int, hop: int) -> np.ndarray:
    """Magnitude-squared STFT with a periodic Hann window, left-aligned frames.

    Frame t covers samples [t*hop, t*hop + n_fft); the tail is zero padded so
    the frame count is exactly ceil(len/hop).
    """
    n = samples.size
    n_frames = frame_count(n, hop)
    padded = np.zeros((n_frames - 1) * hop + n_fft, dtype=np.float64)
    padded[:n] = samples
    idx = np.arange(n_fft)[None, :] + hop * np.arange(n_frames)[:, None]
    frames = padded[idx]
    window = scipy.signal.windows.hann(n_fft, sym=False)
    spec = np.fft.rfft(frames * window, axis=1)
    return (spec.real**2 + spec.imag**2).T  # (n_fft//2+1, n_frames)


def mel_spectrogram(
    clip: AudioClip,
    n_fft: int = DEFAULT_N_FFT,
    hop: int = DEFAULT_HOP,
    n_mels: int = DEFAULT_N_MELS,
) -> MelSpectrogram:
    """80-bin (by default) mel power spectrogram aligned to codec token frames."""
    if n_fft < hop:
        raise AudioFormatError(f"n_fft ({n_fft}) must be >= hop ({hop})")
    power = _stft_power(clip.samples.astype(np.float64), n_fft, hop)
    fb = mel_filterbank(clip.sample_rate, n_fft, n_mels)
    return MelSpectrogram(fb @ power, hop=hop, n_fft=n_fft, sample_rate=clip.sample_rate)


def mfcc_frames(clip: AudioClip, n_fft: int = DEFAULT_N_FFT, hop: int = DEFAULT_HOP) -> np.ndarray:
    """Per-frame MFCCs: DCT-II (ortho) of log mel power, all 80 coefficients kept.

    Returns an (80, frames) array.
    """
    mel = mel_spectrogram(clip, n_fft=n_fft, hop=hop)
    logmel = np.log(mel.values + _LOG_FLOOR)
    return scipy.fft.dct(logmel, type=2, axis=0, norm="ortho")


def mfcc_timeavg(clip: AudioClip) -> np.ndarray:
    """Time-averaged 80-dimensional MFCC vector."""
    return mfcc_frames(clip).mean(axis=1)


@dataclass
class AugmentFlags:
    """Which of the five waveform augmentations to apply (fixed order below)."""

    noise: bool = False
    band_pass: bool = False
    pitch_shift: bool = False
    phase_shift: bool = False
    eq: bool = False

    @classmethod
    def roll(cls, rng: np.random.Generator, p: float = 0.25) -> "AugmentFlags":
        """Draw each flag independently with probability p, in field order."""
        return cls(*(bool(rng.random() < p) for _ in range(5)))

    def any(self) -> bool:
        return self.noise or self.band_pass or self.pitch_shift or self.phase_shift or self.eq


# Parameter ranges for the augmentations. The prompt-robustness story only
# needs plausible distortions, not production-grade effects.
NOISE_SNR_DB = (5.0, 30.0)
BAND_LOW_HZ = (40.0, 400.0)
BAND_HIGH_HZ = (2000.0, 16000.0)
PITCH_SEMITONES = (-3.0, 3.0)
EQ_GAIN_DB = (-9.0, 9.0)
EQ_CENTERS_HZ = (200.0, 1000.0, 5000.0)


def add_noise(x: np.ndarray, snr_db: float, rng: np.random.Generator) -> np.ndarray:
    """Add white noise at the given SNR relative to the signal RMS."""
    sig_rms = float(np.sqrt(np.mean(x**2)))
    noise_rms = sig_rms / (10.0 ** (snr_db / 20.0))
    return x + rng.standard_normal(x.size) * noise_rms


def band_pass(x: np.ndarray, low_hz: float, high_hz: float, sr: int) -> np.ndarray:
    """2nd-order Butterworth band-pass."""
    high_hz = min(high_hz, 0.49 * sr)
    b, a = scipy.signal.butter(2, [low_hz, high_hz], btype="bandpass", fs=sr)
    return scipy.signal.lfilter(b, a, x)


def pitch_shift(x: np.ndarray, semitones: float) -> np.ndarray:
    """Crude pitch shift by resample-then-trim/pad; length is preserved.

    Fidelity is irrelevant here, this only has to distort rhythm prompts.
    """
    factor = 2.0 ** (semitones / 12.0)
    if factor == 1.0:
        return x
    pos = np.arange(x.size, dtype=np.float64) * factor
    return np.interp(pos, np.arange(x.size, dtype=np.float64), x, left=0.0, right=0.0)


def phase_shift(x: np.ndarray, rng: np.random.Generator, sr: int) -> np.ndarray:
    """Rotate every STFT bin by a random phase (same rotation in all frames)."""
    n_fft = 2048 if x.size >= 2048 else max(64, 1 << max(x.size - 1, 1).bit_length() - 1)
    noverlap = n_fft * 3 // 4
    f, _, z = scipy.signal.stft(x, fs=sr, nperseg=n_fft, noverlap=noverlap)
    phase = rng.uniform(0.0, 2.0 * np.pi, size=f.size)
    z = z * np.exp(1j * phase)[:, None]
    _, y = scipy.signal.istft(z, fs=sr, nperseg=n_fft, noverlap=noverlap)
    if y.size < x.size:
        y = np.pad(y, (0, x.size - y.size))
    return y[: x.size]


def _rbj_shelf(sr, f0, gain_db, kind):
    a_lin = 10.0 ** (gain_db / 40.0)
    w0 = 2.0 * np.pi * f0 / sr
    cw, sw = np.cos(w0), np.sin(w0)
    alpha = sw / 2.0 * np.sqrt(2.0)
    two_sqrt_a_alpha = 2.0 * np.sqrt(a_lin) * alpha
    if kind == "low":
        b0 = a_lin * ((a_lin + 1) - (a_lin - 1) * cw + two_sqrt_a_alpha)
        b1 = 2 * a_lin * ((a_lin - 1) - (a_lin + 1) * cw)
        b2 = a_lin * ((a_lin + 1) - (a_lin - 1) * cw - two_sqrt_a_alpha)
        a0 = (a_lin + 1) + (a_lin - 1) * cw + two_sqrt_a_alpha
        a1 = -2 * ((a_lin - 1) + (a_lin + 1) * cw)
        a2 = (a_lin + 1) + (a_lin - 1) * cw - two_sqrt_a_alpha
    else:
        b0 = a_lin * ((a_lin + 1) + (a_lin - 1) * cw + two_sqrt_a_alpha)
        b1 = -2 * a_lin * ((a_lin - 1) + (a_lin + 1) * cw)
        b2 = a_lin * ((a_lin + 1) + (a_lin - 1) * cw - two_sqrt_a_alpha)
        a0 = (a_lin + 1) - (a_lin - 1) * cw + two_sqrt_a_alpha
        a1 = 2 * ((a_lin - 1) - (a_lin + 1) * cw)
        a2 = (a_lin + 1) - (a_lin - 1) * cw - two_sqrt_a_alpha
    return np.array([b0, b1, b2]) / a0, np.array([a0, a1, a2]) / a0


def _rbj_peak(sr, f0, gain_db, q=0.707):
    a_lin = 10.0 ** (gain_db / 40.0)
    w0 = 2.0 * np.pi * f0 / sr
    cw, sw = np.cos(w0), np.sin(w0)
    alpha = sw / (2.0 * q)
    b = np.array([1 + alpha * a_lin, -2 * cw, 1 - alpha * a_lin])
    a = np.array([1 + alpha / a_lin, -2 * cw, 1 - alpha / a_lin])
    return b / a[0], a / a[0]


def equalize(x: np.ndarray, gains_db, sr: int) -> np.ndarray:
    """3-band EQ: low shelf at 200 Hz, peak at 1 kHz, high shelf at 5 kHz."""
    y = x
    b, a = _rbj_shelf(sr, EQ_CENTERS_HZ[0], gains_db[0], "low")
    y = scipy.signal.lfilter(b, a, y)
    b, a = _rbj_peak(sr, EQ_CENTERS_HZ[1], gains_db[1])
    y = scipy.signal.lfilter(b, a, y)
    b, a = _rbj_shelf(sr, EQ_CENTERS_HZ[2], gains_db[2], "high")
    y = scipy.signal.lfilter(b, a, y)
    return y


def augment(clip: AudioClip, flags: AugmentFlags, rng: np.random.Generator) -> AudioClip:
    """Apply the enabled augmentations in the fixed order
    [noise, band-pass, pitch shift, phase shift, EQ].

    Output has the input's length and is clipped to [-1, 1]. Parameters are
    drawn from `rng` only for enabled augmentations, in order.
    """
    if not flags.any():
        return clip
    x = clip.samples.astype(np.float64)
    n = x.size
    if flags.noise:
        x = add_noise(x, rng.uniform(*NOISE_SNR_DB), rng)
    if flags.band_pass:
        lo = rng.uniform(*BAND_LOW_HZ)
        hi = rng.uniform(*BAND_HIGH_HZ)
        x = band_pass(x, lo, hi, clip.sample_rate)
    if flags.pitch_shift:
        x = pitch_shift(x, rng.uniform(*PITCH_SEMITONES))
    if flags.phase_shift:
        x = phase_shift(x, rng, clip.sample_rate)
    if flags.eq:
        x = equalize(x, [rng.uniform(*EQ_GAIN_DB) for _ in range(3)], clip.sample_rate)
    assert x.size == n
    return AudioClip(np.clip(x, -1.0, 1.0).astype(np.float32), clip.sample_rate)
