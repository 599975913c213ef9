"""Deterministic DSP primitives: framing, STFT/iSTFT, envelopes, spectral subtraction.

All operations are pure functions on immutable inputs. Waveforms are float64
throughout; the STFT uses an uncentered frame grid (first frame starts at
sample 0, last frame zero-padded) so clean/noisy/enhanced lengths always agree.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidArgumentError, InvalidSignalError, TooShortInputError

DEFAULT_SAMPLE_RATE = 16000
DEFAULT_FRAME_LEN = 512
DEFAULT_HOP = 256

# Spectral subtraction constants. The noise floor is the mean magnitude
# spectrum of the lowest-energy decile of frames (at least 5); subtraction is
# magnitude-domain with over-subtraction 2.0 and a 2% spectral floor, reusing
# the noisy phase.
SS_OVERSUB = 2.0
SS_FLOOR = 0.02
SS_NOISE_QUANTILE = 0.10
SS_MIN_NOISE_FRAMES = 5


@dataclass(frozen=True)
class Waveform:
    """Mono PCM samples plus sample rate.

    Samples are float64 with nominal range [-1, 1]; nothing enforces the
    range, but every sample must be finite and the signal non-empty.
    """

    samples: np.ndarray
    sample_rate: int = DEFAULT_SAMPLE_RATE

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1 or samples.size < 1:
            raise InvalidSignalError("waveform must be a non-empty 1-D array")
        if not np.all(np.isfinite(samples)):
            raise InvalidSignalError("waveform contains non-finite samples")
        if self.sample_rate <= 0:
            raise InvalidArgumentError("sample_rate must be positive")
        object.__setattr__(self, "samples", samples)

    def __len__(self) -> int:
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate

    def scaled(self, factor: float) -> "Waveform":
        return Waveform(self.samples * factor, self.sample_rate)


@dataclass(frozen=True)
class Spectrogram:
    """Magnitude/phase grids on the uncentered STFT frame grid.

    Shapes are (T, F) with F = frame_len // 2 + 1. Phases are in (-pi, pi].
    """

    magnitudes: np.ndarray
    phases: np.ndarray
    frame_len: int
    hop: int
    sample_rate: int = DEFAULT_SAMPLE_RATE

    def __post_init__(self):
        mags = np.asarray(self.magnitudes, dtype=np.float64)
        phases = np.asarray(self.phases, dtype=np.float64)
        if mags.ndim != 2 or mags.shape[0] < 1:
            raise InvalidArgumentError("magnitudes must be a (T, F) grid with T >= 1")
        if mags.shape != phases.shape:
            raise InvalidArgumentError("magnitude and phase grids must have equal shape")
        if mags.shape[1] != self.frame_len // 2 + 1:
            raise InvalidArgumentError("F must equal frame_len // 2 + 1")
        if np.any(mags < 0):
            raise InvalidArgumentError("magnitudes must be non-negative")
        object.__setattr__(self, "magnitudes", mags)
        object.__setattr__(self, "phases", phases)

    @property
    def n_frames(self) -> int:
        return self.magnitudes.shape[0]

    def complex_spectrum(self) -> np.ndarray:
        return self.magnitudes * np.exp(1j * self.phases)


@dataclass(frozen=True)
class FrameSet:
    """Equal-length windows of a signal (zero-padded tail)."""

    frames: np.ndarray  # (n_frames, frame_len)
    frame_len: int
    hop: int

    def __post_init__(self):
        frames = np.asarray(self.frames, dtype=np.float64)
        if frames.ndim != 2 or frames.shape[1] != self.frame_len:
            raise InvalidArgumentError("frames must be (n, frame_len)")
        if self.hop > self.frame_len:
            raise InvalidArgumentError("hop must not exceed frame_len")
        object.__setattr__(self, "frames", frames)

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]


def hann_window(frame_len: int) -> np.ndarray:
    """Periodic Hann window (w[0] = 0), the package's sole analysis window."""
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(frame_len) / frame_len)


_WINDOWS = {"hann": hann_window, "rect": lambda n: np.ones(n, dtype=np.float64)}


def get_window(window: str, frame_len: int) -> np.ndarray:
    try:
        factory = _WINDOWS[window]
    except KeyError:
        raise InvalidArgumentError(f"unknown window {window!r}") from None
    return factory(frame_len)


def n_frames_for(length: int, frame_len: int, hop: int) -> int:
    """Frame count for the uncentered grid: ceil(max(len - frame_len, 0) / hop) + 1."""
    return int(math.ceil(max(length - frame_len, 0) / hop)) + 1


def frame_signal(w: Waveform, frame_len: int, hop: int) -> FrameSet:
    """Slice a waveform into equal-length frames, zero-padding the tail.

    A signal shorter than frame_len yields a single zero-padded frame.
    """
    if frame_len < 1 or hop < 1:
        raise InvalidArgumentError("frame_len and hop must be >= 1")
    if hop > frame_len:
        raise InvalidArgumentError("hop must not exceed frame_len")
    return FrameSet(_frame_array(w.samples, frame_len, hop), frame_len, hop)


def _frame_array(x: np.ndarray, frame_len: int, hop: int) -> np.ndarray:
    n = n_frames_for(x.shape[0], frame_len, hop)
    padded_len = (n - 1) * hop + frame_len
    padded = np.zeros(padded_len, dtype=np.float64)
    padded[: x.shape[0]] = x
    idx = hop * np.arange(n)[:, None] + np.arange(frame_len)[None, :]
    return padded[idx]


def stft(
    w: Waveform,
    frame_len: int = DEFAULT_FRAME_LEN,
    hop: int = DEFAULT_HOP,
    window: str = "hann",
) -> Spectrogram:
    """Short-time Fourier transform on the uncentered frame grid.

    frame_len must be a power of two and hop must divide it; the
    corresponding synthesis (istft) is exact on the interior when the
    per-sample window-square sum is positive.
    """
    if frame_len < 2 or (frame_len & (frame_len - 1)) != 0:
        raise InvalidArgumentError("frame_len must be a power of two")
    if hop < 1 or frame_len % hop != 0:
        raise InvalidArgumentError("hop must be positive and divide frame_len")
    win = get_window(window, frame_len)
    frames = _frame_array(w.samples, frame_len, hop)
    spec = np.fft.rfft(frames * win, axis=1)
    phases = np.angle(spec)
    phases[phases == -np.pi] = np.pi  # keep phases in (-pi, pi]
    return Spectrogram(
        magnitudes=np.abs(spec),
        phases=phases,
        frame_len=frame_len,
        hop=hop,
        sample_rate=w.sample_rate,
    )


def istft(s: Spectrogram, window: str = "hann") -> Waveform:
    """Inverse STFT via normalized weighted overlap-add.

    Output length is (T - 1) * hop + frame_len. Each sample is divided by the
    accumulated squared synthesis window; positions the window never reaches
    (w[0] = 0 for Hann) come out as zero.
    """
    if s.hop < 1 or s.frame_len % s.hop != 0:
        raise InvalidArgumentError("inconsistent frame_len/hop")
    win = get_window(window, s.frame_len)
    spec = s.complex_spectrum()
    frames = np.fft.irfft(spec, n=s.frame_len, axis=1)
    out_len = (s.n_frames - 1) * s.hop + s.frame_len
    out = np.zeros(out_len, dtype=np.float64)
    den = np.zeros(out_len, dtype=np.float64)
    win_sq = win * win
    for i in range(s.n_frames):
        start = i * s.hop
        out[start : start + s.frame_len] += frames[i] * win
        den[start : start + s.frame_len] += win_sq
    nonzero = den > 1e-12
    out[nonzero] /= den[nonzero]
    out[~nonzero] = 0.0
    return Waveform(out, s.sample_rate)


def hilbert_envelope(w: Waveform, smooth_hz: float | None = None) -> Waveform:
    """Amplitude envelope as the magnitude of the analytic signal.

    The analytic signal is built in the frequency domain (positive
    frequencies doubled, negative zeroed). ``smooth_hz`` optionally low-passes
    the envelope with a moving average of width sample_rate/smooth_hz; off by
    default, raw envelopes are compared everywhere in this package.
    """
    x = w.samples
    if x.shape[0] < 1:
        raise InvalidArgumentError("empty input")
    analytic = _analytic_signal(x)
    env = np.abs(analytic)
    if smooth_hz is not None:
        if smooth_hz <= 0:
            raise InvalidArgumentError("smooth_hz must be positive")
        width = max(int(round(w.sample_rate / smooth_hz)), 1)
        kernel = np.ones(width) / width
        env = np.convolve(env, kernel, mode="same")
    return Waveform(env, w.sample_rate)


def _analytic_signal(x: np.ndarray) -> np.ndarray:
    n = x.shape[0]
    spectrum = np.fft.fft(x)
    h = np.zeros(n)
    if n % 2 == 0:
        h[0] = h[n // 2] = 1.0
        h[1 : n // 2] = 2.0
    else:
        h[0] = 1.0
        h[1 : (n + 1) // 2] = 2.0
    return np.fft.ifft(spectrum * h)


def spectral_subtraction(
    y: Waveform,
    frame_len: int = DEFAULT_FRAME_LEN,
    hop: int = DEFAULT_HOP,
) -> Waveform:
    """Classic magnitude-domain noise suppression.

    The noise magnitude spectrum is estimated from the lowest-energy decile
    of frames (minimum 5); each frame keeps
    max(|Y| - oversub * noise, floor * |Y|) with the noisy phase. The signal
    is padded by one wrapped-around frame on each side before the transform
    so the overlap-add normalization stays well-conditioned at the edges and
    the padded content is signal-like; pad-straddling frames are excluded
    from the noise estimate.
    """
    if len(y) < frame_len:
        raise TooShortInputError("input shorter than one frame")
    win = get_window("hann", frame_len)

    frames_raw = _frame_array(y.samples, frame_len, hop)
    energies = np.sum(frames_raw**2, axis=1)
    n_noise = min(max(int(math.ceil(SS_NOISE_QUANTILE * len(energies))), SS_MIN_NOISE_FRAMES), len(energies))
    quiet = np.argsort(energies, kind="stable")[:n_noise]
    noise_mag = np.abs(np.fft.rfft(frames_raw[quiet] * win, axis=1)).mean(axis=0)

    padded = np.concatenate([y.samples[-frame_len:], y.samples, y.samples[:frame_len]])
    frames = _frame_array(padded, frame_len, hop)
    spec = np.fft.rfft(frames * win, axis=1)
    mag = np.abs(spec)
    kept = np.maximum(mag - SS_OVERSUB * noise_mag[None, :], SS_FLOOR * mag)
    # Gain form keeps phase untouched and is exact where mag is zero.
    gain = np.ones_like(mag)
    nonzero = mag > 0
    gain[nonzero] = kept[nonzero] / mag[nonzero]
    out_spec = spec * gain

    out_frames = np.fft.irfft(out_spec, n=frame_len, axis=1)
    out_len = (frames.shape[0] - 1) * hop + frame_len
    out = np.zeros(out_len, dtype=np.float64)
    den = np.zeros(out_len, dtype=np.float64)
    win_sq = win * win
    for i in range(frames.shape[0]):
        start = i * hop
        out[start : start + frame_len] += out_frames[i] * win
        den[start : start + frame_len] += win_sq
    nz = den > 1e-12
    out[nz] /= den[nz]
    out[~nz] = 0.0
    return Waveform(out[frame_len : frame_len + len(y)], y.sample_rate)
