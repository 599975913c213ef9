"""Amplitude-mask speech enhancement model and its source training loop.

The model predicts a non-negative gain for every time-frequency bin of the
noisy magnitude spectrogram and resynthesizes with the noisy phase. Residual
blocks mix a per-frame frequency MLP, scaled dot-product self-attention along
time (no positional encoding), and multi-dilated 2-D convolutions.

Only layer-norm affine terms and the final mask projection are exposed to
test-time adaptation; everything else stays frozen after source training.
"""

from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .data import MixRecord, load_pair
from .dsp import DEFAULT_FRAME_LEN, DEFAULT_HOP, Waveform
from .errors import CorruptFileError, InvalidSignalError
from .serialization import read_blob_archive, write_blob_archive
from .torchdsp import istft_tensor, stft_tensor, torch_hann


@dataclass(frozen=True)
class AmConfig:
    n_blocks: int = 3
    hidden_dim: int = 256
    attention_heads: int = 4
    conv_dilations: tuple[int, ...] = (1, 2, 4)
    conv_channels: int = 8
    fft_size: int = DEFAULT_FRAME_LEN
    hop: int = DEFAULT_HOP

    @property
    def n_freq(self) -> int:
        return self.fft_size // 2 + 1


@dataclass(frozen=True)
class ParamPartition:
    adaptable: tuple[str, ...]
    frozen: tuple[str, ...]


class FrequencyMlp(nn.Module):
    """Two-layer MLP applied per time step along the feature dimension."""

    def __init__(self, dim: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, dim)
        self.fc2 = nn.Linear(dim, dim)

    def forward(self, x):
        return self.fc2(torch.nn.functional.gelu(self.fc1(x)))


class TimeSelfAttention(nn.Module):
    """Multi-head scaled dot-product attention over the time axis."""

    def __init__(self, dim: int, heads: int):
        super().__init__()
        if dim % heads != 0:
            raise ValueError("hidden_dim must be divisible by attention_heads")
        self.heads = heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x):
        t, dim = x.shape
        head_dim = dim // self.heads
        q, k, v = self.qkv(x).chunk(3, dim=-1)
        q = q.view(t, self.heads, head_dim).transpose(0, 1)
        k = k.view(t, self.heads, head_dim).transpose(0, 1)
        v = v.view(t, self.heads, head_dim).transpose(0, 1)
        scores = q @ k.transpose(1, 2) / math.sqrt(head_dim)
        attn = torch.softmax(scores, dim=-1)
        out = (attn @ v).transpose(0, 1).reshape(t, dim)
        return self.proj(out)


class DilatedConv(nn.Module):
    """Parallel dilated 3x3 convolutions over the time-frequency plane, summed."""

    def __init__(self, dilations: tuple[int, ...], channels: int):
        super().__init__()
        self.branches = nn.ModuleList(
            nn.Conv2d(1, channels, 3, padding=d, dilation=d) for d in dilations
        )
        self.merge = nn.Conv2d(channels, 1, 3, padding=1)

    def forward(self, x):
        img = x.unsqueeze(0).unsqueeze(0)
        h = sum(branch(img) for branch in self.branches)
        return self.merge(torch.nn.functional.gelu(h)).squeeze(0).squeeze(0)


class ResidualBlock(nn.Module):
    """norm -> attention (+r) -> MLP (+r) -> conv (+r) -> norm -> MLP (+input)."""

    def __init__(self, cfg: AmConfig):
        super().__init__()
        self.norm1 = nn.LayerNorm(cfg.hidden_dim)
        self.attn = TimeSelfAttention(cfg.hidden_dim, cfg.attention_heads)
        self.mlp1 = FrequencyMlp(cfg.hidden_dim)
        self.conv = DilatedConv(cfg.conv_dilations, cfg.conv_channels)
        self.norm2 = nn.LayerNorm(cfg.hidden_dim)
        self.mlp2 = FrequencyMlp(cfg.hidden_dim)

    def forward(self, x):
        h = self.norm1(x)
        h = h + self.attn(h)
        h = h + self.mlp1(h)
        h = h + self.conv(h)
        return x + self.mlp2(self.norm2(h))

    def zero_sublayers(self):
        """Test hook: zero every non-norm weight so the block becomes identity."""
        with torch.no_grad():
            for module in (self.attn, self.mlp1, self.conv, self.mlp2):
                for p in module.parameters():
                    p.zero_()


class AmModel(nn.Module):
    """Waveform-to-waveform enhancement via a masked magnitude spectrogram."""

    def __init__(self, cfg: AmConfig):
        super().__init__()
        self.cfg = cfg
        self.input_proj = nn.Linear(cfg.n_freq, cfg.hidden_dim)
        self.blocks = nn.ModuleList(ResidualBlock(cfg) for _ in range(cfg.n_blocks))
        self.output_proj = nn.Linear(cfg.hidden_dim, cfg.n_freq)
        # Zero-init mask head: the model starts as a constant softplus(0) gain,
        # so early training moves the gain rather than unlearning init noise.
        nn.init.zeros_(self.output_proj.weight)
        nn.init.zeros_(self.output_proj.bias)
        self.double()
        self.register_buffer("window", torch_hann(cfg.fft_size), persistent=False)

    def compute_mask(self, mag: torch.Tensor) -> torch.Tensor:
        feats = torch.log1p(mag)
        std, mean = torch.std_mean(feats)
        feats = (feats - mean) / std.clamp_min(1e-8)
        h = self.input_proj(feats)
        for block in self.blocks:
            h = block(h)
        return torch.nn.functional.softplus(self.output_proj(h))

    def forward(self, samples: torch.Tensor, mask_override=None) -> torch.Tensor:
        """Enhance a 1-D sample tensor; output has the input's length.

        The signal is zero-padded by one frame on each side before analysis
        so overlap-add normalization stays well-conditioned at the edges;
        mask_override (scalar or (T, F) tensor) bypasses the network for
        tests.
        """
        if not torch.isfinite(samples).all():
            raise InvalidSignalError("non-finite input samples")
        n = samples.shape[0]
        cfg = self.cfg
        padded = torch.nn.functional.pad(samples.to(torch.float64), (cfg.fft_size, cfg.fft_size))
        spec = stft_tensor(padded, cfg.fft_size, cfg.hop, self.window)
        mag = torch.abs(spec)
        phase = torch.angle(spec)
        if mask_override is None:
            mask = self.compute_mask(mag)
        elif torch.is_tensor(mask_override):
            mask = mask_override
        else:
            mask = torch.full_like(mag, float(mask_override))
        out_spec = torch.polar(mask * mag, phase)
        out = istft_tensor(out_spec, cfg.fft_size, cfg.hop, self.window)
        return out[cfg.fft_size : cfg.fft_size + n]

    def enhance(self, w: Waveform) -> Waveform:
        with torch.no_grad():
            out = self.forward(torch.from_numpy(w.samples))
        return Waveform(out.numpy(), w.sample_rate)


def partition_params(model: AmModel) -> ParamPartition:
    """Split parameter names into the adaptable set and its frozen complement.

    Adaptable: every layer-norm scale/offset plus the output projection.
    """
    norm_prefixes = tuple(
        name for name, module in model.named_modules() if isinstance(module, nn.LayerNorm)
    )
    adaptable, frozen = [], []
    for name, _ in model.named_parameters():
        if name.startswith("output_proj.") or name.startswith(norm_prefixes):
            adaptable.append(name)
        else:
            frozen.append(name)
    return ParamPartition(adaptable=tuple(adaptable), frozen=tuple(frozen))


def adaptable_param_count(cfg: AmConfig) -> int:
    """Closed-form count of the adaptable set for a given architecture."""
    per_norm = 2 * cfg.hidden_dim
    output = cfg.hidden_dim * cfg.n_freq + cfg.n_freq
    return cfg.n_blocks * 2 * per_norm + output


def total_param_count(cfg: AmConfig) -> int:
    h, f, c = cfg.hidden_dim, cfg.n_freq, cfg.conv_channels
    linear = lambda i, o: i * o + o
    attn = linear(h, 3 * h) + linear(h, h)
    mlp = 2 * linear(h, h)
    conv = len(cfg.conv_dilations) * (c * 9 + c) + (c * 9 + 1)
    block = 2 * (2 * h) + attn + 2 * mlp + conv
    return linear(f, h) + cfg.n_blocks * block + linear(h, f)


@dataclass
class TrainResult:
    initial_val_mse: float
    final_val_mse: float
    epoch_losses: list[float]


def waveform_mse(estimate: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    return torch.mean((estimate - target) ** 2)


def train_source(
    model: AmModel,
    records: list[MixRecord],
    epochs: int = 5,
    lr: float = 1e-3,
    weight_decay: float = 0.01,
    val_fraction: float = 0.2,
    seed: int = 0,
    cosine_decay: bool = False,
) -> TrainResult:
    """Train on labeled pairs with time-domain MSE (AdamW, one utterance per step).

    A trailing fraction of the records is held out for validation; training
    aborts with diagnostics if the loss goes non-finite. cosine_decay anneals
    the learning rate to zero over the epochs (useful when a run must land
    precisely, e.g. overfitting checks).
    """
    rng = np.random.default_rng(seed)
    if val_fraction > 0.0 and len(records) > 1:
        n_val = max(int(round(val_fraction * len(records))), 1)
    else:
        n_val = 0
    train_records = records[: len(records) - n_val] if n_val else records
    val_records = records[len(records) - n_val :] if n_val else records

    pairs = {r.id: load_pair(r) for r in records}
    tensors = {
        uid: (torch.from_numpy(p.noisy.samples), torch.from_numpy(p.clean.samples))
        for uid, p in pairs.items()
    }

    def val_mse() -> float:
        with torch.no_grad():
            losses = [
                waveform_mse(model(tensors[r.id][0]), tensors[r.id][1]).item()
                for r in val_records
            ]
        return float(np.mean(losses))

    optimizer = torch.optim.AdamW(model.parameters(), lr=lr, weight_decay=weight_decay)
    initial = val_mse()
    epoch_losses = []
    for epoch in range(epochs):
        if cosine_decay:
            scale = 0.5 * (1.0 + np.cos(np.pi * epoch / max(epochs - 1, 1)))
            for group in optimizer.param_groups:
                group["lr"] = lr * scale
        order = rng.permutation(len(train_records))
        total = 0.0
        for i in order:
            noisy, clean = tensors[train_records[i].id]
            optimizer.zero_grad()
            loss = waveform_mse(model(noisy), clean)
            if not torch.isfinite(loss):
                raise RuntimeError(
                    f"training diverged at epoch {epoch}, utterance "
                    f"{train_records[i].id}: loss={loss.item()}"
                )
            loss.backward()
            optimizer.step()
            total += loss.item()
        epoch_losses.append(total / len(train_records))
    return TrainResult(initial_val_mse=initial, final_val_mse=val_mse(), epoch_losses=epoch_losses)


def save_checkpoint(model: AmModel, path: str | Path, extra_meta: dict | None = None) -> None:
    meta = {"kind": "am_model", "config": asdict(model.cfg)}
    if extra_meta:
        meta.update(extra_meta)
    arrays = {name: p.detach().numpy() for name, p in model.state_dict().items()}
    write_blob_archive(path, meta, arrays)


def load_checkpoint(path: str | Path) -> AmModel:
    meta, arrays = read_blob_archive(path)
    if meta.get("kind") != "am_model":
        raise CorruptFileError(f"{path}: not a model checkpoint")
    cfg_dict = dict(meta["config"])
    cfg_dict["conv_dilations"] = tuple(cfg_dict["conv_dilations"])
    model = AmModel(AmConfig(**cfg_dict))
    state = {name: torch.from_numpy(arr) for name, arr in arrays.items()}
    model.load_state_dict(state)
    return model


def clone_model(model: AmModel) -> AmModel:
    return copy.deepcopy(model)
