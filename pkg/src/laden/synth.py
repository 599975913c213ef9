"""Deterministic synthetic corpus generation at desk scale.

"Speech" is a harmonic complex with a wandering pitch, two formant-like
resonances, and a syllabic on/off envelope; "noise" is profile-dependent
colored noise or a babble-like mixture. Profiles shift exactly one factor:

- ``source``: baseline speakers and pink-tilted background noise
- ``shifted_speaker``: higher pitch register, same noise as source
- ``shifted_noise``: same speech generator as source, babble + bright noise
- ``shifted_language``: source pitch register with faster, wider trajectory
  statistics, same noise as source

Everything is keyed on (seed, utterance index), so a corpus is bitwise
reproducible.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .audio_io import write_wav
from .dsp import DEFAULT_SAMPLE_RATE, Waveform
from .errors import InvalidArgumentError

PROFILES = ("source", "shifted_speaker", "shifted_noise", "shifted_language")

# Each corpus profile shifts exactly one factor; the other keeps the source
# generator (and its random stream), so e.g. source and shifted_noise share
# bitwise-identical speech.
_PROFILE_FACTORS = {
    "source": ("source", "source"),
    "shifted_speaker": ("shifted_speaker", "source"),
    "shifted_noise": ("source", "shifted_noise"),
    "shifted_language": ("shifted_language", "source"),
}
_SPEECH_PROFILES = ("source", "shifted_speaker", "shifted_language")
_NOISE_PROFILES = ("source", "shifted_noise")

_SPEECH_PARAMS = {
    # f0 range (Hz), syllable rate (Hz), pitch wander depth
    "source": dict(f0_lo=100.0, f0_hi=200.0, syllable_hz=3.0, wander=0.06),
    "shifted_speaker": dict(f0_lo=230.0, f0_hi=380.0, syllable_hz=3.0, wander=0.06),
    "shifted_language": dict(f0_lo=100.0, f0_hi=200.0, syllable_hz=5.5, wander=0.16),
}

_MAX_HARMONIC_HZ = 3800.0


def _smooth_noise(rng: np.random.Generator, n: int, cutoff_hz: float, sr: int) -> np.ndarray:
    """Low-passed unit-variance Gaussian noise (frequency-domain shaping)."""
    spec = np.fft.rfft(rng.standard_normal(n))
    freqs = np.fft.rfftfreq(n, d=1.0 / sr)
    spec *= np.exp(-((freqs / max(cutoff_hz, 1e-6)) ** 2))
    x = np.fft.irfft(spec, n=n)
    std = x.std()
    return x / std if std > 0 else x


def synth_speech(rng: np.random.Generator, duration: float, profile: str, sr: int = DEFAULT_SAMPLE_RATE) -> Waveform:
    p = _SPEECH_PARAMS[profile]
    n = int(round(duration * sr))
    t = np.arange(n) / sr

    f0_base = rng.uniform(p["f0_lo"], p["f0_hi"])
    f0 = f0_base * np.exp(p["wander"] * _smooth_noise(rng, n, 2.0 * p["syllable_hz"], sr))
    phase = 2.0 * np.pi * np.cumsum(f0) / sr

    # Formant-like resonances wandering inside speech-typical bands.
    f1 = 350.0 + 400.0 * (0.5 + 0.5 * _smooth_noise(rng, n, p["syllable_hz"], sr) / 3.0).clip(0, 1)
    f2 = 1100.0 + 900.0 * (0.5 + 0.5 * _smooth_noise(rng, n, p["syllable_hz"], sr) / 3.0).clip(0, 1)

    n_harm = max(int(_MAX_HARMONIC_HZ / f0.max()), 1)
    x = np.zeros(n)
    for h in range(1, n_harm + 1):
        freq_h = h * f0
        if freq_h.min() > _MAX_HARMONIC_HZ:
            break
        gain = (
            np.exp(-0.5 * ((freq_h - f1) / 180.0) ** 2)
            + 0.7 * np.exp(-0.5 * ((freq_h - f2) / 260.0) ** 2)
            + 0.12
        ) / h**0.6
        gain = np.where(freq_h <= _MAX_HARMONIC_HZ, gain, 0.0)
        x += gain * np.sin(h * phase + rng.uniform(0, 2 * np.pi))

    # Syllabic gating with brief pauses, plus edge fades.
    gate = _smooth_noise(rng, n, p["syllable_hz"], sr)
    envelope = 0.15 + 0.85 * (1.0 / (1.0 + np.exp(-3.0 * gate)))
    fade = np.minimum(t / 0.02, 1.0) * np.minimum((duration - t) / 0.02, 1.0).clip(0, 1)
    x *= envelope * fade

    peak = np.abs(x).max()
    if peak > 0:
        x *= 0.3 / peak
    return Waveform(x, sr)


def _shaped_noise(rng: np.random.Generator, n: int, sr: int, tilt: float, lo_hz: float, hi_hz: float) -> np.ndarray:
    """Gaussian noise with a power-law spectral tilt, band-limited to [lo, hi]."""
    spec = np.fft.rfft(rng.standard_normal(n))
    freqs = np.fft.rfftfreq(n, d=1.0 / sr)
    shape = np.where(freqs > 0, np.maximum(freqs, 1.0) ** tilt, 0.0)
    shape *= (freqs >= lo_hz) & (freqs <= hi_hz)
    x = np.fft.irfft(spec * shape, n=n)
    std = x.std()
    return x / std if std > 0 else x


def synth_noise(rng: np.random.Generator, duration: float, profile: str, sr: int = DEFAULT_SAMPLE_RATE) -> Waveform:
    n = int(round(duration * sr))
    if profile == "shifted_noise":
        # Dense babble: competing harmonic voices over bright noise.
        x = 0.6 * _shaped_noise(rng, n, sr, tilt=0.4, lo_hz=300.0, hi_hz=7500.0)
        for _ in range(4):
            voice = synth_speech(rng, duration, "source", sr)
            x += 0.5 * voice.samples[:n]
    else:
        # Ambient-style mixture (like real ambient sets): per utterance either
        # colored noise with a random spectral tilt, light two-voice chatter,
        # or mains hum plus hiss.
        kind = rng.choice(3, p=[0.5, 0.3, 0.2])
        if kind == 0:
            tilt = rng.uniform(-1.2, 0.0)
            x = _shaped_noise(rng, n, sr, tilt=tilt, lo_hz=40.0, hi_hz=7000.0)
        elif kind == 1:
            x = 0.4 * _shaped_noise(rng, n, sr, tilt=-0.5, lo_hz=80.0, hi_hz=6000.0)
            for _ in range(2):
                voice = synth_speech(rng, duration, "source", sr)
                x += 0.7 * voice.samples[:n]
        else:
            t = np.arange(n) / sr
            hum_f = rng.uniform(49.0, 61.0)
            x = 0.8 * np.sin(2 * np.pi * hum_f * t) + 0.4 * np.sin(2 * np.pi * 3 * hum_f * t)
            x += 0.6 * _shaped_noise(rng, n, sr, tilt=0.6, lo_hz=1000.0, hi_hz=7800.0)
    std = x.std()
    if std > 0:
        x = 0.1 * x / std
    return Waveform(x, sr)


def synth_corpus(
    out_dir: str | Path,
    n_utts: int,
    seed: int,
    profile: str,
    duration_range: tuple[float, float] = (1.0, 5.0),
    sr: int = DEFAULT_SAMPLE_RATE,
) -> tuple[Path, Path]:
    """Write a clean/ and noise/ directory of WAV files; returns both paths.

    Noise files run 1-2 s longer than their speech counterparts so offset
    mixing with wrap-around has room to move.
    """
    if n_utts < 1:
        raise InvalidArgumentError("n_utts must be >= 1")
    if profile not in PROFILES:
        raise InvalidArgumentError(f"unknown profile {profile!r}; expected one of {PROFILES}")
    out_dir = Path(out_dir)
    clean_dir = out_dir / "clean"
    noise_dir = out_dir / "noise"
    clean_dir.mkdir(parents=True, exist_ok=True)
    noise_dir.mkdir(parents=True, exist_ok=True)
    speech_profile, noise_profile = _PROFILE_FACTORS[profile]
    for i in range(n_utts):
        speech_rng = np.random.default_rng([seed, i, 0, _SPEECH_PROFILES.index(speech_profile)])
        noise_rng = np.random.default_rng([seed, i, 1, _NOISE_PROFILES.index(noise_profile)])
        duration = speech_rng.uniform(*duration_range)
        speech = synth_speech(speech_rng, duration, speech_profile, sr)
        noise = synth_noise(noise_rng, duration + noise_rng.uniform(1.0, 2.0), noise_profile, sr)
        write_wav(clean_dir / f"utt{i:04d}.wav", speech)
        write_wav(noise_dir / f"utt{i:04d}.wav", noise)
    return clean_dir, noise_dir
