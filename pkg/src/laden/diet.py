"""Fitting, applying, and evaluating the clean-from-noisy embedding map.

The map is a single d x d matrix taking an utterance's noisy embedding
approximately onto its clean embedding. It is fitted offline on labeled
source pairs by least squares and reused unchanged on shifted domains as a
pseudo-label generator.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.linalg

from .encoder import Embedding, check_encoder_match
from .errors import AlignmentError, CorruptFileError, InvalidArgumentError
from .serialization import ROLE_CLEAN, ROLE_NOISY, read_embedding_cache


@dataclass(frozen=True)
class DietMap:
    matrix: np.ndarray
    encoder_id: str
    source_manifest_id: str
    k_samples: int
    fit_residual: float
    ridge: float = 0.0
    rank_deficient: bool = False
    offset: np.ndarray | None = None  # affine variant only; strictly linear by default

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise InvalidArgumentError("matrix must be square")
        if not np.all(np.isfinite(m)):
            raise InvalidArgumentError("matrix must be finite")
        if self.k_samples < m.shape[0] and self.ridge == 0.0 and not self.rank_deficient:
            raise InvalidArgumentError(
                "fewer samples than dimensions requires ridge > 0 or the rank-deficient flag"
            )
        object.__setattr__(self, "matrix", m)
        if self.offset is not None:
            off = np.asarray(self.offset, dtype=np.float64)
            if off.shape != (m.shape[0],) or not np.all(np.isfinite(off)):
                raise InvalidArgumentError("offset must be a finite length-d vector")
            object.__setattr__(self, "offset", off)

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]


@dataclass(frozen=True)
class DietEvalReport:
    mean_sim_noisy: float
    mean_sim_transformed: float
    n_utterances: int
    n_excluded: int


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise InvalidArgumentError("cosine similarity undefined for zero-norm vectors")
    return float(np.dot(a, b) / (na * nb))


def fit_arrays(
    clean: np.ndarray,
    noisy: np.ndarray,
    ridge: float = 0.0,
    encoder_id: str = "",
    source_manifest_id: str = "",
    affine: bool = False,
) -> DietMap:
    """Least-squares fit of the map from column-stacked (d, K) embeddings.

    ridge = 0 solves min ||clean - A noisy||_F by a rank-revealing
    factorization (minimum-norm solution when noisy is rank deficient, which
    is flagged in the result); ridge > 0 gives the Tikhonov-regularized
    solution. affine adds a fitted offset vector (off by default: the map is
    strictly linear).
    """
    clean = np.asarray(clean, dtype=np.float64)
    noisy = np.asarray(noisy, dtype=np.float64)
    if clean.shape != noisy.shape or clean.ndim != 2:
        raise InvalidArgumentError("clean and noisy must both be (d, K)")
    d, k = clean.shape
    if k < 1:
        raise InvalidArgumentError("at least one sample required")
    if ridge < 0:
        raise InvalidArgumentError("ridge must be non-negative")
    design = np.vstack([noisy, np.ones((1, k))]) if affine else noisy
    n_coef = design.shape[0]
    rank_deficient = False
    if ridge == 0.0:
        solution, _, rank, _ = scipy.linalg.lstsq(design.T, clean.T, lapack_driver="gelsd")
        coef = solution.T
        rank_deficient = rank < n_coef
    else:
        gram = design @ design.T + ridge * np.eye(n_coef)
        coef = scipy.linalg.solve(gram, design @ clean.T, assume_a="pos").T
    matrix = coef[:, :d]
    offset = coef[:, d] if affine else None
    residual = clean - coef @ design
    fit_residual = float(np.mean(residual**2))
    return DietMap(
        matrix=matrix,
        encoder_id=encoder_id,
        source_manifest_id=source_manifest_id,
        k_samples=k,
        fit_residual=fit_residual,
        ridge=ridge,
        rank_deficient=rank_deficient,
        offset=offset,
    )


def _aligned_matrices(clean_cache: str | Path, noisy_cache: str | Path) -> tuple[np.ndarray, np.ndarray, str]:
    clean_header, clean_records = read_embedding_cache(clean_cache)
    noisy_header, noisy_records = read_embedding_cache(noisy_cache)
    if clean_header["encoder_id"] != noisy_header["encoder_id"]:
        raise AlignmentError("caches come from different encoders")
    clean_by_id = {uid: vec for uid, role, vec in clean_records if role == ROLE_CLEAN}
    noisy_by_id = {uid: vec for uid, role, vec in noisy_records if role == ROLE_NOISY}
    if not clean_by_id or not noisy_by_id:
        raise AlignmentError("caches are missing clean or noisy records")
    if set(clean_by_id) != set(noisy_by_id):
        raise AlignmentError("caches are not aligned by utterance id")
    ids = sorted(clean_by_id)
    clean = np.stack([clean_by_id[i] for i in ids], axis=1)
    noisy = np.stack([noisy_by_id[i] for i in ids], axis=1)
    return clean, noisy, clean_header["encoder_id"]


def fit(
    clean_cache: str | Path,
    noisy_cache: str | Path,
    ridge: float = 0.0,
    source_manifest_id: str = "",
    affine: bool = False,
) -> DietMap:
    """Fit the map from aligned embedding caches (clean and noisy roles)."""
    clean, noisy, encoder_id = _aligned_matrices(clean_cache, noisy_cache)
    return fit_arrays(
        clean, noisy, ridge=ridge, encoder_id=encoder_id,
        source_manifest_id=source_manifest_id, affine=affine,
    )


def apply(m: DietMap, y_emb: Embedding) -> Embedding:
    """Transform a noisy embedding into a clean pseudo-label.

    Strictly linear unless the map was fitted with the affine flag.
    """
    check_encoder_match(m.encoder_id, y_emb.encoder_id, "apply")
    if y_emb.vector.shape[0] != m.dim:
        raise InvalidArgumentError(
            f"embedding dim {y_emb.vector.shape[0]} does not match map dim {m.dim}"
        )
    vec = m.matrix @ y_emb.vector
    if m.offset is not None:
        vec = vec + m.offset
    return Embedding(vec, m.encoder_id, y_emb.utterance_id)


def evaluate(m: DietMap, clean_cache: str | Path, noisy_cache: str | Path) -> DietEvalReport:
    """Mean cosine similarity of clean vs noisy and clean vs transformed noisy.

    Zero-norm embeddings are excluded and counted rather than failing the run.
    """
    clean, noisy, encoder_id = _aligned_matrices(clean_cache, noisy_cache)
    check_encoder_match(m.encoder_id, encoder_id, "evaluate")
    transformed = m.matrix @ noisy
    if m.offset is not None:
        transformed = transformed + m.offset[:, None]
    sims_noisy, sims_transformed, excluded = [], [], 0
    for i in range(clean.shape[1]):
        try:
            sims_noisy.append(cosine_similarity(clean[:, i], noisy[:, i]))
            sims_transformed.append(cosine_similarity(clean[:, i], transformed[:, i]))
        except InvalidArgumentError:
            excluded += 1
    if not sims_noisy:
        raise AlignmentError("every pair was excluded (zero-norm embeddings)")
    return DietEvalReport(
        mean_sim_noisy=float(np.mean(sims_noisy)),
        mean_sim_transformed=float(np.mean(sims_transformed)),
        n_utterances=len(sims_noisy),
        n_excluded=excluded,
    )


def save(m: DietMap, path: str | Path) -> None:
    payload = np.ascontiguousarray(m.matrix, dtype="<f8").tobytes()
    if m.offset is not None:
        payload += np.ascontiguousarray(m.offset, dtype="<f8").tobytes()
    header = {
        "encoder_id": m.encoder_id,
        "source_manifest_id": m.source_manifest_id,
        "d": m.dim,
        "k_samples": m.k_samples,
        "ridge": m.ridge,
        "fit_residual": m.fit_residual,
        "rank_deficient": m.rank_deficient,
        "affine": m.offset is not None,
        "checksum": hashlib.sha256(payload).hexdigest(),
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<I", len(header_bytes)))
        fh.write(header_bytes)
        fh.write(payload)


def load(path: str | Path) -> DietMap:
    with open(path, "rb") as fh:
        raw = fh.read()
    try:
        (header_len,) = struct.unpack_from("<I", raw, 0)
        header = json.loads(raw[4 : 4 + header_len].decode("utf-8"))
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptFileError(f"{path}: unreadable header") from exc
    d = int(header["d"])
    affine = bool(header.get("affine", False))
    expected = d * d * 8 + (d * 8 if affine else 0)
    payload = raw[4 + header_len :]
    if len(payload) != expected:
        raise CorruptFileError(f"{path}: matrix payload truncated")
    if hashlib.sha256(payload).hexdigest() != header["checksum"]:
        raise CorruptFileError(f"{path}: matrix checksum mismatch")
    matrix = np.frombuffer(payload[: d * d * 8], dtype="<f8").reshape(d, d).copy()
    offset = np.frombuffer(payload[d * d * 8 :], dtype="<f8").copy() if affine else None
    return DietMap(
        matrix=matrix,
        encoder_id=header["encoder_id"],
        source_manifest_id=header.get("source_manifest_id", ""),
        k_samples=int(header["k_samples"]),
        fit_residual=float(header["fit_residual"]),
        ridge=float(header["ridge"]),
        rank_deficient=bool(header["rank_deficient"]),
        offset=offset,
    )
