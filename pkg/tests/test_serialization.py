"""Binary container formats: blob archives and embedding caches."""

import numpy as np
import pytest

from laden import serialization as ser
from laden.errors import CorruptFileError


def test_blob_archive_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    arrays = {"a": rng.standard_normal((3, 4)), "b": rng.standard_normal(7)}
    path = tmp_path / "x.bin"
    ser.write_blob_archive(path, {"kind": "test", "n": 2}, arrays)
    meta, back = ser.read_blob_archive(path)
    assert meta == {"kind": "test", "n": 2}
    for name in arrays:
        assert np.array_equal(back[name], arrays[name])


def test_blob_archive_checksum_detects_corruption(tmp_path):
    path = tmp_path / "x.bin"
    ser.write_blob_archive(path, {}, {"a": np.arange(10.0)})
    raw = bytearray(path.read_bytes())
    raw[-1] ^= 0xFF
    path.write_bytes(bytes(raw))
    with pytest.raises(CorruptFileError, match="checksum"):
        ser.read_blob_archive(path)


def test_blob_archive_truncation(tmp_path):
    path = tmp_path / "x.bin"
    ser.write_blob_archive(path, {}, {"a": np.arange(10.0)})
    path.write_bytes(path.read_bytes()[:-8])
    with pytest.raises(CorruptFileError):
        ser.read_blob_archive(path)


def test_cache_roundtrip_bitwise(tmp_path):
    rng = np.random.default_rng(1)
    records = [
        ("utt0", ser.ROLE_CLEAN, rng.standard_normal(16)),
        ("utt0", ser.ROLE_NOISY, rng.standard_normal(16)),
        ("utt1", ser.ROLE_CLEAN, rng.standard_normal(16)),
    ]
    path = tmp_path / "c.bin"
    ser.write_embedding_cache(path, "enc-x", 16, records)
    header, back = ser.read_embedding_cache(path)
    assert header == {"encoder_id": "enc-x", "dim": 16, "count": 3}
    for (uid, role, vec), (uid2, role2, vec2) in zip(records, back):
        assert uid == uid2 and role == role2
        assert np.array_equal(vec, vec2)


def test_cache_rewrite_identical_bytes(tmp_path):
    rng = np.random.default_rng(2)
    records = [("u", ser.ROLE_CLEAN, rng.standard_normal(8))]
    p1, p2 = tmp_path / "a.bin", tmp_path / "b.bin"
    ser.write_embedding_cache(p1, "enc", 8, records)
    ser.write_embedding_cache(p2, "enc", 8, records)
    assert p1.read_bytes() == p2.read_bytes()


def test_cache_truncation_detected(tmp_path):
    path = tmp_path / "c.bin"
    ser.write_embedding_cache(path, "enc", 8, [("u", 0, np.ones(8))])
    path.write_bytes(path.read_bytes()[:-4])
    with pytest.raises(CorruptFileError):
        ser.read_embedding_cache(path)
