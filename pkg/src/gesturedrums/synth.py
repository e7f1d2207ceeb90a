"""Deterministic synthetic drum corpus: kick/snare/hat patterns at random
tempi in two parametric timbre classes, with exact onset-time sidecars.

The two classes are spectrally far apart on purpose ("deep" vs "bright") so
timbre-adherence metrics have signal to work with at desk scale.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import dsp
from .dsp import AudioClip

TIMBRE_CLASSES = ("deep", "bright")


@dataclass
class ClipSpec:
    tempo_bpm: float
    timbre_class: str
    params: dict
    kick: list
    snare: list
    hat: list

    def to_dict(self) -> dict:
        return {
            "tempo_bpm": self.tempo_bpm,
            "timbre_class": self.timbre_class,
            "params": self.params,
            "onsets": {"kick": self.kick, "snare": self.snare, "hat": self.hat},
        }


def _decay_env(n, sr, decay_s):
    return np.exp(-np.arange(n) / (decay_s * sr))


def _kick(sr, f0, decay_s, sweep):
    n = int(decay_s * 6 * sr)
    t = np.arange(n) / sr
    # descending pitch sweep keeps the attack audible without high partials
    phase = 2 * np.pi * (f0 * t + sweep * decay_s * (1 - np.exp(-t / decay_s)))
    return np.sin(phase) * _decay_env(n, sr, decay_s)


def _snare(sr, tone_hz, noise_lo, noise_hi, decay_s, noise_mix, rng):
    n = int(decay_s * 6 * sr)
    t = np.arange(n) / sr
    tone = np.sin(2 * np.pi * tone_hz * t)
    noise = rng.standard_normal(n)
    noise = dsp.band_pass(noise, noise_lo, noise_hi, sr)
    noise /= max(np.abs(noise).max(), 1e-9)
    body = (1 - noise_mix) * tone + noise_mix * noise
    return body * _decay_env(n, sr, decay_s)


def _hat(sr, lo_hz, decay_s, rng):
    n = int(decay_s * 6 * sr)
    noise = rng.standard_normal(n)
    noise = dsp.band_pass(noise, lo_hz, min(16000, 0.45 * sr), sr)
    noise /= max(np.abs(noise).max(), 1e-9)
    return noise * _decay_env(n, sr, decay_s)


def _class_params(timbre_class, rng):
    if timbre_class == "deep":
        return {
            "kick_f0": float(rng.uniform(45, 60)),
            "kick_decay": float(rng.uniform(0.12, 0.2)),
            "kick_gain": 1.0,
            "snare_tone": float(rng.uniform(160, 200)),
            "snare_band": (400.0, float(rng.uniform(1500, 2500))),
            "snare_decay": float(rng.uniform(0.1, 0.16)),
            "snare_mix": 0.5,
            "snare_gain": 0.55,
            "hat_lo": float(rng.uniform(3500, 5000)),
            "hat_decay": float(rng.uniform(0.02, 0.04)),
            "hat_gain": 0.12,
        }
    return {
        "kick_f0": float(rng.uniform(70, 90)),
        "kick_decay": float(rng.uniform(0.05, 0.09)),
        "kick_gain": 0.8,
        "snare_tone": float(rng.uniform(220, 280)),
        "snare_band": (1500.0, float(rng.uniform(5000, 8000))),
        "snare_decay": float(rng.uniform(0.06, 0.12)),
        "snare_mix": 0.85,
        "snare_gain": 0.7,
        "hat_lo": float(rng.uniform(7000, 10000)),
        "hat_decay": float(rng.uniform(0.04, 0.08)),
        "hat_gain": 0.4,
    }


def _pattern(n_steps, rng):
    """16th-note grid hits for one voice set.

    Deliberately irregular bar to bar (only the downbeat is anchored): if
    patterns repeated, a generator could infill them from context alone and
    rhythm conditioning would carry no training signal.
    """
    kick = [0] + [s for s in range(2, n_steps, 2) if rng.random() < 0.22]
    snare = [s for s in range(n_steps) if s % 16 in (4, 12) and rng.random() < 0.55]
    snare += [s for s in range(2, n_steps, 2) if s not in snare and rng.random() < 0.08]
    hat = [s for s in range(0, n_steps, 2) if rng.random() < 0.75]
    return sorted(set(kick)), sorted(set(snare)), sorted(set(hat))


def generate_clip(
    seed,
    duration_s: float = 6.0,
    sample_rate: int = dsp.PIPELINE_RATE,
    hop: int = dsp.DEFAULT_HOP,
    timbre_class: str | None = None,
):
    """Render one synthetic drum clip plus its ground-truth spec.

    The length is rounded down to a whole number of codec hops so excerpting
    and framing stay aligned.
    """
    rng = np.random.default_rng(seed)
    tempo = float(rng.uniform(80, 160))
    if timbre_class is None:
        timbre_class = TIMBRE_CLASSES[int(rng.integers(len(TIMBRE_CLASSES)))]
    params = _class_params(timbre_class, rng)

    n_samples = (int(duration_s * sample_rate) // hop) * hop
    step_s = 60.0 / tempo / 4.0  # 16th note
    n_steps = int(n_samples / sample_rate / step_s) + 1
    kick_steps, snare_steps, hat_steps = _pattern(n_steps, rng)

    kick_wave = _kick(sample_rate, params["kick_f0"], params["kick_decay"], sweep=60.0)
    snare_wave = _snare(
        sample_rate, params["snare_tone"], params["snare_band"][0], params["snare_band"][1],
        params["snare_decay"], params["snare_mix"], rng,
    )
    hat_wave = _hat(sample_rate, params["hat_lo"], params["hat_decay"], rng)

    out = np.zeros(n_samples, dtype=np.float64)
    onsets = {"kick": [], "snare": [], "hat": []}
    for name, steps, wave, gain in (
        ("kick", kick_steps, kick_wave, params["kick_gain"]),
        ("snare", snare_steps, snare_wave, params["snare_gain"]),
        ("hat", hat_steps, hat_wave, params["hat_gain"]),
    ):
        for s in steps:
            pos = int(round(s * step_s * sample_rate))
            if pos >= n_samples:
                continue
            seg = wave[: n_samples - pos]
            out[pos : pos + seg.size] += gain * seg
            onsets[name].append(pos / sample_rate)

    peak = np.abs(out).max()
    if peak > 0:
        out *= 0.85 / peak
    clip = AudioClip(out.astype(np.float32), sample_rate)
    spec = ClipSpec(
        tempo_bpm=tempo,
        timbre_class=timbre_class,
        params={k: v for k, v in params.items()},
        kick=onsets["kick"],
        snare=onsets["snare"],
        hat=onsets["hat"],
    )
    return clip, spec


def generate_corpus(n_clips: int, seed: int, duration_s: float = 6.0, alternate_classes: bool = True):
    """List of (clip, spec); classes alternate by index for balance."""
    out = []
    for i in range(n_clips):
        cls = TIMBRE_CLASSES[i % 2] if alternate_classes else None
        out.append(generate_clip([seed, i], duration_s=duration_s, timbre_class=cls))
    return out


def write_corpus(out_dir, n_clips: int, seed: int, duration_s: float = 6.0) -> list:
    """Write clip_NNNN.wav files with .json onset sidecars; returns paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, (clip, spec) in enumerate(generate_corpus(n_clips, seed, duration_s)):
        wav_path = out_dir / f"clip_{i:04d}.wav"
        dsp.save_wav(wav_path, clip)
        sidecar = wav_path.with_suffix(".json")
        with open(sidecar, "w") as fh:
            json.dump(spec.to_dict(), fh, indent=1, sort_keys=True)
        paths.append(wav_path)
    return paths
