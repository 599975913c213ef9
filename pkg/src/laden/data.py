"""SNR mixing, manifests, and ordered utterance streaming.

A manifest is JSON-lines, one record per utterance, naming the clean and
noise files plus the mixing parameters; noisy audio is always reconstructed
from those parameters at load time, never stored, so every pair's SNR is
verifiable against the record.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from .audio_io import read_wav
from .dsp import Waveform
from .errors import (
    AlignmentError,
    CannotSetSnrError,
    EmptyManifestError,
    InvalidArgumentError,
)

logger = logging.getLogger(__name__)

SPLITS = ("train", "test")


@dataclass(frozen=True)
class MixRecord:
    id: str
    clean_path: str
    noise_path: str
    noise_offset: int
    snr_db: float
    split: str

    def __post_init__(self):
        if not np.isfinite(self.snr_db):
            raise InvalidArgumentError("snr_db must be finite")
        if self.split not in SPLITS:
            raise InvalidArgumentError(f"split must be one of {SPLITS}")


@dataclass(frozen=True)
class UtterancePair:
    """Aligned clean/noisy waveforms; noisy = clean + scaled noise segment."""

    clean: Waveform
    noisy: Waveform
    record: MixRecord


@dataclass(frozen=True)
class StreamOrder:
    seed: int
    permutation: tuple[str, ...]


def mix(clean: Waveform, noise: Waveform, offset: int, snr_db: float) -> Waveform:
    """Add a noise segment (wrap-around from offset) scaled to the target SNR.

    SNR is measured as the full-utterance power ratio; the returned waveform
    satisfies 10*log10(P_clean / P_noise_scaled) == snr_db to float precision.
    """
    if clean.sample_rate != noise.sample_rate:
        raise InvalidArgumentError("clean and noise sample rates differ")
    segment = noise_segment(noise, offset, len(clean))
    p_clean = float(np.mean(clean.samples**2))
    p_noise = float(np.mean(segment**2))
    if p_clean <= 0.0 or p_noise <= 0.0:
        raise CannotSetSnrError("clean and noise must both have nonzero power")
    scale = np.sqrt(p_clean / (p_noise * 10.0 ** (snr_db / 10.0)))
    return Waveform(clean.samples + scale * segment, clean.sample_rate)


def noise_segment(noise: Waveform, offset: int, length: int) -> np.ndarray:
    """Length samples of noise starting at offset, wrapping around the end."""
    if offset < 0:
        raise InvalidArgumentError("offset must be non-negative")
    idx = (offset + np.arange(length)) % len(noise)
    return noise.samples[idx]


def measured_snr_db(clean: Waveform, noisy: Waveform) -> float:
    """Independent power-ratio oracle: SNR recovered from the pair itself."""
    residual = noisy.samples - clean.samples
    p_clean = float(np.mean(clean.samples**2))
    p_noise = float(np.mean(residual**2))
    if p_noise <= 0.0:
        raise CannotSetSnrError("pair has no noise component")
    return 10.0 * np.log10(p_clean / p_noise)


def build_manifest(
    clean_dir: str | Path,
    noise_dir: str | Path,
    snr_range: tuple[float, float],
    seed: int,
    split: str,
    out_path: str | Path,
) -> list[MixRecord]:
    """Pair every clean file with a noise file at a uniformly drawn SNR.

    Deterministic given the seed; unreadable audio files are skipped with a
    warning. Writes JSON-lines to out_path and returns the records.
    """
    if split not in SPLITS:
        raise InvalidArgumentError(f"split must be one of {SPLITS}")
    lo, hi = snr_range
    if not (np.isfinite(lo) and np.isfinite(hi)) or hi < lo:
        raise InvalidArgumentError("snr_range must be a finite [lo, hi] with hi >= lo")
    clean_files = sorted(Path(clean_dir).glob("*.wav"))
    noise_files = sorted(Path(noise_dir).glob("*.wav"))
    if not clean_files or not noise_files:
        raise EmptyManifestError("clean_dir and noise_dir must contain WAV files")

    rng = np.random.default_rng(seed)
    noise_lengths = {}
    for nf in noise_files:
        try:
            noise_lengths[nf] = len(read_wav(nf))
        except Exception as exc:
            logger.warning("skipping unreadable noise file %s: %s", nf, exc)
    usable_noise = [nf for nf in noise_files if nf in noise_lengths]
    if not usable_noise:
        raise EmptyManifestError("no readable noise files")

    records = []
    for cf in clean_files:
        try:
            read_wav(cf)
        except Exception as exc:
            logger.warning("skipping unreadable clean file %s: %s", cf, exc)
            continue
        noise_path = usable_noise[int(rng.integers(len(usable_noise)))]
        offset = int(rng.integers(noise_lengths[noise_path]))
        snr_db = float(rng.uniform(lo, hi))
        records.append(
            MixRecord(
                id=cf.stem,
                clean_path=str(cf),
                noise_path=str(noise_path),
                noise_offset=offset,
                snr_db=snr_db,
                split=split,
            )
        )
    if not records:
        raise EmptyManifestError("no readable clean files")
    save_manifest(records, out_path)
    return records


def save_manifest(records: list[MixRecord], path: str | Path) -> None:
    ids = [r.id for r in records]
    if len(set(ids)) != len(ids):
        raise AlignmentError("duplicate utterance ids in manifest")
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(asdict(r), sort_keys=True) + "\n")


def load_manifest(path: str | Path) -> list[MixRecord]:
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                records.append(MixRecord(**json.loads(line)))
    if not records:
        raise EmptyManifestError(f"{path} contains no records")
    ids = [r.id for r in records]
    if len(set(ids)) != len(ids):
        raise AlignmentError("duplicate utterance ids in manifest")
    return records


def load_pair(record: MixRecord) -> UtterancePair:
    """Load and mix one utterance; verifies the record's SNR on the fly."""
    clean = read_wav(record.clean_path)
    noise = read_wav(record.noise_path)
    noisy = mix(clean, noise, record.noise_offset, record.snr_db)
    recovered = measured_snr_db(clean, noisy)
    if abs(recovered - record.snr_db) > 1e-6:
        raise CannotSetSnrError(
            f"record {record.id}: mixed SNR {recovered:.9f} dB != requested {record.snr_db:.9f} dB"
        )
    return UtterancePair(clean=clean, noisy=noisy, record=record)


def make_stream_order(records: list[MixRecord], seed: int, split: str = "test") -> StreamOrder:
    ids = [r.id for r in records if r.split == split]
    if not ids:
        raise EmptyManifestError(f"manifest has no records in split {split!r}")
    rng = np.random.default_rng(seed)
    perm = [ids[i] for i in rng.permutation(len(ids))]
    return StreamOrder(seed=seed, permutation=tuple(perm))


def save_stream_order(order: StreamOrder, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump({"seed": order.seed, "permutation": list(order.permutation)}, fh)


def load_stream_order(path: str | Path) -> StreamOrder:
    with open(path, "r", encoding="utf-8") as fh:
        raw = json.load(fh)
    return StreamOrder(seed=int(raw["seed"]), permutation=tuple(raw["permutation"]))


def stream(
    records: list[MixRecord],
    order: StreamOrder,
    batch_size: int = 1,
) -> Iterator[list[UtterancePair]]:
    """Yield utterance pairs in permutation order, batch_size at a time.

    The permutation must be a bijection over the records it names; a missing
    audio file fails fast with the offending record id.
    """
    if batch_size < 1:
        raise InvalidArgumentError("batch_size must be >= 1")
    by_id = {r.id: r for r in records}
    missing = [i for i in order.permutation if i not in by_id]
    if missing:
        raise AlignmentError(f"stream order names unknown ids: {missing[:5]}")
    batch = []
    for uid in order.permutation:
        record = by_id[uid]
        try:
            batch.append(load_pair(record))
        except FileNotFoundError as exc:
            raise FileNotFoundError(f"record {uid}: {exc}") from exc
        if len(batch) == batch_size:
            yield batch
            batch = []
    if batch:
        yield batch
