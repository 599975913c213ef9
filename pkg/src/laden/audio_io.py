"""WAV file I/O and ingest resampling.

Accepts mono RIFF/WAVE files in 16-bit signed PCM or IEEE 32-bit float at any
rate; everything is resampled to 16 kHz on ingest with a fixed-quality
polyphase windowed-sinc filter (Kaiser beta 14.77, 64 taps per zero crossing,
scipy's resample_poly).
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from scipy.io import wavfile
from scipy.signal import resample_poly

from .dsp import DEFAULT_SAMPLE_RATE, Waveform
from .errors import InvalidArgumentError, InvalidSignalError


def read_wav(path: str | Path, target_rate: int = DEFAULT_SAMPLE_RATE) -> Waveform:
    """Load a mono WAV file, converting to float64 and resampling to target_rate."""
    rate, data = wavfile.read(str(path))
    if data.ndim != 1:
        raise InvalidSignalError(f"{path}: expected mono audio, got shape {data.shape}")
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype in (np.float32, np.float64):
        samples = data.astype(np.float64)
    else:
        raise InvalidSignalError(f"{path}: unsupported sample format {data.dtype}")
    w = Waveform(samples, rate)
    if rate != target_rate:
        w = resample(w, target_rate)
    return w


def write_wav(path: str | Path, w: Waveform) -> None:
    """Write a waveform as IEEE 32-bit float WAV."""
    wavfile.write(str(path), w.sample_rate, w.samples.astype(np.float32))


def resample(w: Waveform, target_rate: int) -> Waveform:
    """Windowed-sinc rate conversion (polyphase, Kaiser window)."""
    if target_rate <= 0:
        raise InvalidArgumentError("target_rate must be positive")
    if target_rate == w.sample_rate:
        return w
    g = np.gcd(w.sample_rate, target_rate)
    up, down = target_rate // g, w.sample_rate // g
    out = resample_poly(w.samples, up, down, window=("kaiser", 14.769656459379492))
    return Waveform(out, target_rate)
