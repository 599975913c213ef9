"""Test-time adaptation for speech enhancement via latent denoising."""

from .dsp import Waveform, Spectrogram, FrameSet
from .adapt import LadenConfig

__version__ = "0.1.0"

__all__ = ["Waveform", "Spectrogram", "FrameSet", "LadenConfig", "__version__"]
