"""Binary containers for model weights, embedding caches, and linear maps.

Two layouts are used:

- blob archive (checkpoints, encoder weights): u32-LE header length, JSON
  header with per-tensor sha256 checksums, then the raw little-endian float64
  buffers in header order.
- embedding cache: u32-LE header length, JSON header
  {"encoder_id", "dim", "count"}, then per record a u32-LE id byte length,
  the UTF-8 id, one role byte (0 = clean, 1 = noisy), and dim float64-LE.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .errors import CorruptFileError

ROLE_CLEAN = 0
ROLE_NOISY = 1
_ROLE_NAMES = {ROLE_CLEAN: "clean", ROLE_NOISY: "noisy"}


def _sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def write_blob_archive(path: str | Path, meta: dict, arrays: dict[str, np.ndarray]) -> None:
    blobs = {}
    tensors = []
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr, dtype=np.float64)
        buf = arr.tobytes()
        blobs[name] = buf
        tensors.append({"name": name, "shape": list(arr.shape), "sha256": _sha256(buf)})
    header = {"meta": meta, "tensors": tensors}
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<I", len(header_bytes)))
        fh.write(header_bytes)
        for entry in tensors:
            fh.write(blobs[entry["name"]])


def read_blob_archive(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        raw = fh.read()
    try:
        (header_len,) = struct.unpack_from("<I", raw, 0)
        header = json.loads(raw[4 : 4 + header_len].decode("utf-8"))
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptFileError(f"{path}: unreadable header") from exc
    offset = 4 + header_len
    arrays = {}
    for entry in header.get("tensors", []):
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        nbytes = count * 8
        buf = raw[offset : offset + nbytes]
        if len(buf) != nbytes:
            raise CorruptFileError(f"{path}: truncated tensor {entry['name']!r}")
        if _sha256(buf) != entry["sha256"]:
            raise CorruptFileError(f"{path}: checksum mismatch for tensor {entry['name']!r}")
        arrays[entry["name"]] = np.frombuffer(buf, dtype="<f8").reshape(entry["shape"]).copy()
        offset += nbytes
    if offset != len(raw):
        raise CorruptFileError(f"{path}: trailing bytes after tensors")
    return header["meta"], arrays


def write_embedding_cache(
    path: str | Path,
    encoder_id: str,
    dim: int,
    records: list[tuple[str, int, np.ndarray]],
) -> None:
    """records: (utterance_id, role byte, vector) in the order to persist."""
    header_bytes = json.dumps(
        {"encoder_id": encoder_id, "dim": dim, "count": len(records)}, sort_keys=True
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<I", len(header_bytes)))
        fh.write(header_bytes)
        for uid, role, vec in records:
            vec = np.ascontiguousarray(vec, dtype="<f8")
            if vec.shape != (dim,):
                raise ValueError(f"vector for {uid!r} has shape {vec.shape}, expected ({dim},)")
            if role not in _ROLE_NAMES:
                raise ValueError(f"unknown role byte {role}")
            uid_bytes = uid.encode("utf-8")
            fh.write(struct.pack("<I", len(uid_bytes)))
            fh.write(uid_bytes)
            fh.write(struct.pack("B", role))
            fh.write(vec.tobytes())


def read_embedding_cache(path: str | Path) -> tuple[dict, list[tuple[str, int, np.ndarray]]]:
    with open(path, "rb") as fh:
        raw = fh.read()
    try:
        (header_len,) = struct.unpack_from("<I", raw, 0)
        header = json.loads(raw[4 : 4 + header_len].decode("utf-8"))
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptFileError(f"{path}: unreadable cache header") from exc
    dim = int(header["dim"])
    offset = 4 + header_len
    records = []
    for _ in range(int(header["count"])):
        try:
            (uid_len,) = struct.unpack_from("<I", raw, offset)
            offset += 4
            uid = raw[offset : offset + uid_len].decode("utf-8")
            offset += uid_len
            role = raw[offset]
            offset += 1
            vec = np.frombuffer(raw[offset : offset + dim * 8], dtype="<f8")
            offset += dim * 8
        except (struct.error, UnicodeDecodeError, IndexError, ValueError) as exc:
            raise CorruptFileError(f"{path}: truncated cache record") from exc
        if vec.shape != (dim,):
            raise CorruptFileError(f"{path}: truncated cache record for {uid!r}")
        records.append((uid, int(role), vec.copy()))
    if offset != len(raw):
        raise CorruptFileError(f"{path}: trailing bytes after records")
    return header, records
