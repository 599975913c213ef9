"""Differentiable torch mirrors of the numpy DSP primitives.

Same uncentered frame grid and normalized overlap-add conventions as
:mod:`laden.dsp`; parity between the two is asserted in the test suite. All
functions run in float64 and keep gradients flowing through every step.
"""

from __future__ import annotations

import math

import torch

from .dsp import hann_window


def torch_hann(frame_len: int, dtype=torch.float64) -> torch.Tensor:
    return torch.from_numpy(hann_window(frame_len)).to(dtype)


def frame_tensor(x: torch.Tensor, frame_len: int, hop: int) -> torch.Tensor:
    """Frame a 1-D tensor on the uncentered grid, zero-padding the tail."""
    n = int(math.ceil(max(x.shape[0] - frame_len, 0) / hop)) + 1
    padded_len = (n - 1) * hop + frame_len
    if padded_len > x.shape[0]:
        x = torch.nn.functional.pad(x, (0, padded_len - x.shape[0]))
    return x.unfold(0, frame_len, hop)


def stft_tensor(x: torch.Tensor, frame_len: int, hop: int, window: torch.Tensor) -> torch.Tensor:
    """Complex (T, F) spectrum of a 1-D tensor."""
    frames = frame_tensor(x, frame_len, hop)
    return torch.fft.rfft(frames * window, dim=1)


def istft_tensor(
    spec: torch.Tensor,
    frame_len: int,
    hop: int,
    window: torch.Tensor,
) -> torch.Tensor:
    """Normalized weighted overlap-add synthesis; length (T-1)*hop + frame_len."""
    n_frames = spec.shape[0]
    frames = torch.fft.irfft(spec, n=frame_len, dim=1) * window
    out_len = (n_frames - 1) * hop + frame_len
    out = torch.zeros(out_len, dtype=frames.dtype, device=frames.device)
    starts = hop * torch.arange(n_frames, device=frames.device)
    idx = (starts[:, None] + torch.arange(frame_len, device=frames.device)[None, :]).reshape(-1)
    out = out.index_add(0, idx, frames.reshape(-1))
    den = torch.zeros(out_len, dtype=frames.dtype, device=frames.device)
    den = den.index_add(0, idx, (window * window).expand(n_frames, -1).reshape(-1))
    return torch.where(den > 1e-12, out / den.clamp_min(1e-12), torch.zeros_like(out))


def hilbert_envelope_tensor(x: torch.Tensor, eps: float = 0.0) -> torch.Tensor:
    """Magnitude of the analytic signal; eps > 0 keeps the gradient finite at zeros."""
    n = x.shape[0]
    spectrum = torch.fft.fft(x)
    h = torch.zeros(n, dtype=x.dtype, device=x.device)
    if n % 2 == 0:
        h[0] = h[n // 2] = 1.0
        h[1 : n // 2] = 2.0
    else:
        h[0] = 1.0
        h[1 : (n + 1) // 2] = 2.0
    analytic = torch.fft.ifft(spectrum * h)
    if eps > 0.0:
        return torch.sqrt(analytic.real**2 + analytic.imag**2 + eps)
    return torch.abs(analytic)
