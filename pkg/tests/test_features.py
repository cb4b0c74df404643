import numpy as np
import pytest

from tinyvlm import features as fs


def _entries(rng, n=3, dim=4):
    out = {fs.PLACEHOLDER_KEY: rng.normal(size=dim).astype(np.float32)}
    for i in range(n - 1):
        out[f"img{i}"] = rng.normal(size=dim).astype(np.float32)
    return out


def test_round_trip_bit_exact(tmp_path, rng):
    entries = _entries(rng, n=5, dim=8)
    path = tmp_path / "feat.bin"
    fs.write_store(entries, 8, path)
    store = fs.open_store(path)
    assert store.dim == 8
    assert set(store.entries) == set(entries)
    for key, vec in entries.items():
        got = fs.get_feature(store, key)
        assert got.dtype == np.float32
        assert np.array_equal(got, vec)
        assert got.tobytes() == vec.tobytes()


def test_zero_vector_round_trip(tmp_path):
    entries = {fs.PLACEHOLDER_KEY: np.zeros(1024, dtype=np.float32)}
    path = tmp_path / "feat.bin"
    fs.write_store(entries, 1024, path)
    store = fs.open_store(path)
    assert np.array_equal(fs.get_feature(store, fs.PLACEHOLDER_KEY), np.zeros(1024))


def test_file_size_matches_format(tmp_path, rng):
    entries = _entries(rng, n=3, dim=4)
    path = tmp_path / "feat.bin"
    fs.write_store(entries, 4, path)
    expected = 20 + sum(2 + len(k.encode("utf-8")) + 4 * 4 for k in entries)
    assert path.stat().st_size == expected


def test_empty_store_rejected(tmp_path):
    with pytest.raises(ValueError, match="placeholder"):
        fs.write_store({}, 4, tmp_path / "x.bin")


def test_missing_placeholder_rejected_on_write(tmp_path):
    with pytest.raises(ValueError, match="placeholder"):
        fs.write_store({"img0": np.zeros(4, np.float32)}, 4, tmp_path / "x.bin")


def test_dim_mismatch_names_key(tmp_path):
    entries = {
        fs.PLACEHOLDER_KEY: np.zeros(4, np.float32),
        "bad": np.zeros(5, np.float32),
    }
    with pytest.raises(ValueError, match="bad"):
        fs.write_store(entries, 4, tmp_path / "x.bin")


def test_key_length_limit(tmp_path):
    entries = {
        fs.PLACEHOLDER_KEY: np.zeros(2, np.float32),
        "k" * 256: np.zeros(2, np.float32),
    }
    with pytest.raises(ValueError, match="255"):
        fs.write_store(entries, 2, tmp_path / "x.bin")


def test_non_finite_rejected(tmp_path):
    entries = {fs.PLACEHOLDER_KEY: np.array([1.0, np.nan], np.float32)}
    with pytest.raises(ValueError, match="non-finite"):
        fs.write_store(entries, 2, tmp_path / "x.bin")


def test_bad_magic(tmp_path):
    p = tmp_path / "x.bin"
    p.write_bytes(b"NOPE" + bytes(16))
    with pytest.raises(fs.FormatError, match="magic"):
        fs.open_store(p)


def test_bad_version(tmp_path, rng):
    p = tmp_path / "x.bin"
    fs.write_store(_entries(rng), 4, p)
    data = bytearray(p.read_bytes())
    data[4] = 99
    p.write_bytes(bytes(data))
    with pytest.raises(fs.FormatError, match="version"):
        fs.open_store(p)


def test_truncated_reports_offset(tmp_path, rng):
    p = tmp_path / "x.bin"
    fs.write_store(_entries(rng), 4, p)
    p.write_bytes(p.read_bytes()[:-3])
    with pytest.raises(fs.FormatError, match="byte"):
        fs.open_store(p)


def test_trailing_garbage_rejected(tmp_path, rng):
    p = tmp_path / "x.bin"
    fs.write_store(_entries(rng), 4, p)
    p.write_bytes(p.read_bytes() + b"xx")
    with pytest.raises(fs.FormatError, match="trailing"):
        fs.open_store(p)


def test_store_without_placeholder_rejected_on_open(tmp_path):
    import struct

    p = tmp_path / "x.bin"
    with open(p, "wb") as f:
        f.write(struct.pack("<4sIIQ", b"FSTR", 1, 2, 1))
        f.write(struct.pack("<H", 4))
        f.write(b"img0")
        f.write(np.zeros(2, np.float32).tobytes())
    with pytest.raises(fs.FormatError, match="placeholder"):
        fs.open_store(p)


def test_unknown_key_lookup_names_key(tmp_path, rng):
    p = tmp_path / "x.bin"
    fs.write_store(_entries(rng), 4, p)
    store = fs.open_store(p)
    with pytest.raises(KeyError, match="zzz"):
        fs.get_feature(store, "zzz")


def test_dim_uniformity_scan(tmp_path, rng):
    p = tmp_path / "x.bin"
    fs.write_store(_entries(rng, n=6, dim=7), 7, p)
    store = fs.open_store(p)
    assert all(v.shape == (7,) for v in store.entries.values())


def test_entries_are_read_only(tmp_path, rng):
    p = tmp_path / "x.bin"
    fs.write_store(_entries(rng), 4, p)
    store = fs.open_store(p)
    with pytest.raises(ValueError):
        fs.get_feature(store, fs.PLACEHOLDER_KEY)[0] = 1.0
