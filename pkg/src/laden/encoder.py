"""Frozen speech encoders producing utterance-level embeddings.

The encoder contract is a black box: a declared output dimension, a frame
hop, and a deterministic, gradient-transparent mapping from a 16 kHz waveform
to one vector (the mean of per-frame embeddings). The shipped implementation
is a small random-weight convolutional stack; a pretrained CNN encoder
exported to the same weight-archive format plugs into the identical slot.

The toy encoder is a random strided filterbank (bias-free convolutions) with
log-energy features: per frame, channel energies are compressed as
log(h^2 + 0.1 * mean(h^2)) and centered across channels. The filterbank is
linear, so an input gain becomes an additive constant under the log that the
centering removes: embeddings are exactly invariant to positive rescaling.
Everything is smooth, so finite differences track the analytic sensitivity.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .data import MixRecord, load_pair
from .dsp import DEFAULT_SAMPLE_RATE, Waveform
from .errors import EncoderConflictError, InvalidArgumentError, TooShortInputError
from .serialization import (
    ROLE_CLEAN,
    ROLE_NOISY,
    read_blob_archive,
    read_embedding_cache,
    write_blob_archive,
    write_embedding_cache,
)

TOY_LAYERS = (
    # out_channels (None -> encoder dim), kernel, stride
    (32, 64, 16),
    (64, 8, 4),
    (None, 4, 1),
)


@dataclass(frozen=True)
class EncoderSpec:
    encoder_id: str
    dim: int
    frame_hop: int
    sample_rate: int = DEFAULT_SAMPLE_RATE
    frozen: bool = True


@dataclass(frozen=True)
class Embedding:
    vector: np.ndarray
    encoder_id: str
    utterance_id: str = ""

    def __post_init__(self):
        vec = np.asarray(self.vector, dtype=np.float64)
        if vec.ndim != 1 or not np.all(np.isfinite(vec)):
            raise InvalidArgumentError("embedding must be a finite 1-D vector")
        object.__setattr__(self, "vector", vec)


class ToyEncoderNet(nn.Module):
    """Strided random filterbank -> log-energy features -> L2 norm -> mean pool.

    The log compression makes features spectral-shape-like (raw rectified or
    linear features collapse onto one dominant direction across utterances);
    the relative floor inside the log keeps the map smooth at small energies.
    """

    ENERGY_FLOOR = 0.1  # relative floor inside the log compression

    def __init__(self, dim: int):
        super().__init__()
        channels_in = 1
        convs = []
        for out_ch, kernel, stride in TOY_LAYERS:
            out_ch = dim if out_ch is None else out_ch
            convs.append(nn.Conv1d(channels_in, out_ch, kernel, stride=stride, bias=False))
            channels_in = out_ch
        self.convs = nn.ModuleList(convs)
        self.double()

    @property
    def min_input_len(self) -> int:
        n = 1
        for _, kernel, stride in reversed(TOY_LAYERS):
            n = (n - 1) * stride + kernel
        return n

    @property
    def hop(self) -> int:
        hop = 1
        for _, _, stride in TOY_LAYERS:
            hop *= stride
        return hop

    def frame_embeddings(self, x: torch.Tensor) -> torch.Tensor:
        """(n_samples,) -> (n_frames, dim), each frame L2-normalized."""
        h = x.view(1, 1, -1)
        for conv in self.convs:
            h = conv(h)
        energies = h.squeeze(0).transpose(0, 1) ** 2  # (frames, dim)
        scale = energies.mean(dim=1, keepdim=True)
        feats = torch.log(energies + self.ENERGY_FLOOR * scale + 1e-300)
        feats = feats - feats.mean(dim=1, keepdim=True)
        norms = feats.norm(dim=1, keepdim=True).clamp_min(1e-12)
        return feats / norms

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.frame_embeddings(x).mean(dim=0)


class Encoder:
    """A frozen encoder: spec plus the module that realizes it."""

    def __init__(self, spec: EncoderSpec, net: ToyEncoderNet):
        self.spec = spec
        self.net = net
        for p in self.net.parameters():
            p.requires_grad_(False)
        # Warm-up pass so lazy backend kernel selection happens here, keeping
        # the first user-visible encode bitwise identical to later ones.
        with torch.no_grad():
            self.net(torch.zeros(self.net.min_input_len, dtype=torch.float64))

    def embed_tensor(self, x: torch.Tensor) -> torch.Tensor:
        """Gradient-transparent embedding of a 1-D sample tensor."""
        if x.shape[0] < self.net.min_input_len:
            raise TooShortInputError(
                f"utterance of {x.shape[0]} samples is shorter than one encoder frame "
                f"({self.net.min_input_len} samples)"
            )
        return self.net(x.to(torch.float64))

    def encode(self, w: Waveform, utterance_id: str = "") -> Embedding:
        if w.sample_rate != self.spec.sample_rate:
            raise InvalidArgumentError(
                f"encoder expects {self.spec.sample_rate} Hz, got {w.sample_rate}"
            )
        with torch.no_grad():
            vec = self.embed_tensor(torch.from_numpy(w.samples))
        return Embedding(vec.numpy(), self.spec.encoder_id, utterance_id)

    def weights_checksum(self) -> str:
        digest = hashlib.sha256()
        for name, p in sorted(self.net.state_dict().items()):
            digest.update(name.encode())
            digest.update(p.numpy().astype("<f8").tobytes())
        return digest.hexdigest()


def make_toy_encoder(seed: int, dim: int = 64) -> Encoder:
    """Build a fixed random-initialized encoder; the id pins exact weights."""
    net = ToyEncoderNet(dim)
    rng = np.random.default_rng(seed)
    with torch.no_grad():
        for conv in net.convs:
            fan_in = conv.in_channels * conv.kernel_size[0]
            w = rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=tuple(conv.weight.shape))
            conv.weight.copy_(torch.from_numpy(w))
    encoder = Encoder(EncoderSpec("pending", dim, net.hop), net)
    encoder.spec = EncoderSpec(
        encoder_id=f"toy{dim}-{encoder.weights_checksum()[:12]}",
        dim=dim,
        frame_hop=net.hop,
    )
    return encoder


def save_encoder(encoder: Encoder, path: str | Path) -> None:
    arrays = {name: p.numpy() for name, p in encoder.net.state_dict().items()}
    meta = {
        "kind": "toy_conv_encoder",
        "encoder_id": encoder.spec.encoder_id,
        "dim": encoder.spec.dim,
        "frame_hop": encoder.spec.frame_hop,
        "sample_rate": encoder.spec.sample_rate,
    }
    write_blob_archive(path, meta, arrays)


def load_encoder(path: str | Path) -> Encoder:
    meta, arrays = read_blob_archive(path)
    net = ToyEncoderNet(int(meta["dim"]))
    state = {name: torch.from_numpy(arr) for name, arr in arrays.items()}
    net.load_state_dict(state)
    spec = EncoderSpec(
        encoder_id=meta["encoder_id"],
        dim=int(meta["dim"]),
        frame_hop=int(meta["frame_hop"]),
        sample_rate=int(meta.get("sample_rate", DEFAULT_SAMPLE_RATE)),
    )
    return Encoder(spec, net)


def cache_embeddings(
    records: list[MixRecord],
    encoder: Encoder,
    which: str,
    out_path: str | Path,
) -> Path:
    """Embed every manifest record and persist the vectors.

    which is "clean", "noisy", or "both"; noisy signals are mixed on the fly
    from the record's parameters. Re-running with identical inputs rewrites
    an identical file.
    """
    roles = {"clean": (ROLE_CLEAN,), "noisy": (ROLE_NOISY,), "both": (ROLE_CLEAN, ROLE_NOISY)}
    if which not in roles:
        raise InvalidArgumentError('which must be "clean", "noisy", or "both"')
    out_path = Path(out_path)
    if out_path.exists():
        try:
            existing, _ = read_embedding_cache(out_path)
        except Exception:
            existing = None
        if existing is not None:
            check_encoder_match(existing["encoder_id"], encoder.spec.encoder_id, "cache_embeddings")
    cached = []
    for record in records:
        pair = load_pair(record)
        for role in roles[which]:
            w = pair.clean if role == ROLE_CLEAN else pair.noisy
            emb = encoder.encode(w, record.id)
            cached.append((record.id, role, emb.vector))
    write_embedding_cache(out_path, encoder.spec.encoder_id, encoder.spec.dim, cached)
    return Path(out_path)


def check_encoder_match(expected_id: str, actual_id: str, context: str) -> None:
    if expected_id != actual_id:
        raise EncoderConflictError(
            f"{context}: encoder {actual_id!r} does not match expected {expected_id!r}"
        )
