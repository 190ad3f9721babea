import json
import struct
import zlib

import numpy as np
import pytest

from handfield.io.formats import (
    BadMagicError,
    ChecksumError,
    FeatureMap,
    FormatError,
    HeaderError,
    TruncatedFileError,
    VersionMismatchError,
    decode_checkpoint,
    decode_feature_map,
    decode_pfm,
    encode_checkpoint,
    encode_feature_map,
    encode_pfm,
    load_checkpoint_file,
    load_feature_map,
    load_pfm,
    load_png,
    save_checkpoint_file,
    save_feature_map,
    save_pfm,
    save_png,
)


def _arrays(seed=0):
    rng = np.random.default_rng(seed)
    return {
        "field/w": rng.normal(size=(5, 7)).astype(np.float32),
        "field/b": rng.normal(size=7),
        "latent": rng.normal(size=(3, 4)),
        "scalar": np.array(2.5),
        "ids": np.arange(6, dtype=np.int64),
        "empty": np.zeros((0, 3)),
    }


META = {"config": {"width": 4, "frames": [0, 1]}, "step": 12}


def test_checkpoint_round_trip_bitwise(tmp_path):
    arrays = _arrays()
    data = encode_checkpoint(arrays, META)
    back, meta = decode_checkpoint(data)
    assert meta == META and set(back) == set(arrays)
    for k, a in arrays.items():
        assert back[k].dtype == a.dtype and back[k].shape == a.shape
        assert back[k].tobytes() == a.tobytes()
    assert encode_checkpoint(back, meta) == data
    path = tmp_path / "m.hfck"
    save_checkpoint_file(path, arrays, META)
    assert path.read_bytes() == data
    assert load_checkpoint_file(path)[1] == META
    with pytest.raises(FileNotFoundError):
        load_checkpoint_file(tmp_path / "missing.hfck")


def test_checkpoint_typed_errors():
    data = encode_checkpoint(_arrays(), META)
    with pytest.raises(BadMagicError):
        decode_checkpoint(b"XXXX" + data[4:])
    with pytest.raises(VersionMismatchError):
        decode_checkpoint(data[:4] + struct.pack("<I", 9) + data[8:])
    with pytest.raises(TruncatedFileError):
        decode_checkpoint(data[:2])
    with pytest.raises(TruncatedFileError):
        decode_checkpoint(data[:30])
    with pytest.raises(ChecksumError):
        decode_checkpoint(data[:-9] + data[-8:])
    flipped = bytearray(data)
    flipped[-10] ^= 0xFF
    with pytest.raises(ChecksumError):
        decode_checkpoint(bytes(flipped))


def _reseal(header: bytes, blobs: bytes, version=1) -> bytes:
    body = b"HFCK" + struct.pack("<IQ", version, len(header)) + header + blobs
    return body + struct.pack("<I", zlib.crc32(body))


def _split(data):
    (hlen,) = struct.unpack_from("<Q", data, 8)
    return json.loads(data[16:16 + hlen]), data[16 + hlen:-4]


def _mutate_header(header, rng):
    """One structural corruption of a parsed checkpoint header."""
    pick = lambda options: options[rng.integers(len(options))]
    h = json.loads(json.dumps(header))
    e = h["arrays"][rng.integers(len(h["arrays"]))]
    kind = rng.integers(9)
    if kind == 0:
        del e[pick(sorted(e))]
    elif kind == 1:
        e["dtype"] = pick(["<q9", "nonsense", 3, None])
    elif kind == 2:
        e["shape"] = pick([None, "abc", [-1, 2], [10**6, 10**6]]) if rng.integers(2) else [int(x) + 1 for x in e["shape"]] or [1]
    elif kind == 3:
        e["offset"] = pick([-8, 10**9])
    elif kind == 4:
        e["nbytes"] = e["nbytes"] + int(rng.integers(1, 64))
    elif kind == 5:
        del h[pick(["arrays", "meta"])]
    elif kind == 6:
        h["arrays"] = pick([None, 5, "x"])
    elif kind == 7:
        h = pick([[], "header", 3])
    else:
        h["meta"] = [1, 2]
    return json.dumps(h).encode()


def test_fuzzed_headers_raise_typed_errors():
    """100 corrupted files: raw byte damage and resealed structural damage must all map to FormatError."""
    data = encode_checkpoint(_arrays(), META)
    header, blobs = _split(data)
    rng = np.random.default_rng(0)
    seen = set()
    for case in range(100):
        mode = case % 4
        if mode == 0:  # random byte flips inside the fixed header and JSON
            buf = bytearray(data)
            for i in rng.integers(0, 16 + len(json.dumps(header)), size=rng.integers(1, 4)):
                buf[i] ^= int(rng.integers(1, 256))
            bad = bytes(buf)
        elif mode == 1:  # truncation at a random point
            bad = data[: rng.integers(0, len(data) - 1)]
        elif mode == 2:  # structurally broken JSON with a valid checksum
            bad = _reseal(_mutate_header(header, rng), blobs)
        else:  # non-JSON bytes or wrong version, resealed
            junk = bytes(rng.integers(0, 256, size=rng.integers(1, 40), dtype=np.uint8))
            bad = _reseal(junk, blobs) if rng.integers(2) else _reseal(json.dumps(header).encode(), blobs, version=int(rng.integers(2, 100)))
        with pytest.raises(FormatError) as info:
            decode_checkpoint(bad)
        seen.add(type(info.value))
    assert seen >= {BadMagicError, VersionMismatchError, TruncatedFileError, ChecksumError, HeaderError}


def _fmap(seed=0):
    rng = np.random.default_rng(seed)
    return FeatureMap(rng.normal(size=(6, 5, 4)).astype(np.float32), frame_id=3, camera_id=-1)


def test_feature_map_round_trip(tmp_path):
    fm = _fmap()
    data = encode_feature_map(fm)
    assert len(data) == 32 + 4 * 6 * 5 * 4
    back = decode_feature_map(data)
    assert back.data.tobytes() == fm.data.tobytes()
    assert (back.frame_id, back.camera_id) == (3, -1)
    save_feature_map(tmp_path / "f.hffm", fm)
    assert load_feature_map(tmp_path / "f.hffm").data.tobytes() == fm.data.tobytes()
    with pytest.raises(ValueError):
        encode_feature_map(FeatureMap(np.zeros((2, 2)), 0, 0))


def test_feature_map_fuzz():
    data = encode_feature_map(_fmap())
    rng = np.random.default_rng(1)
    for case in range(100):
        buf = bytearray(data)
        if case % 2:
            buf = buf[: rng.integers(0, len(buf))]
        else:
            i = int(rng.integers(0, 32))
            buf[i] ^= int(rng.integers(1, 256))
        with pytest.raises(FormatError):
            decode_feature_map(bytes(buf))
    with pytest.raises(TruncatedFileError):
        decode_feature_map(data + b"\0\0\0\0")


def test_png_round_trip(tmp_path):
    rng = np.random.default_rng(2)
    img = np.round(rng.uniform(size=(7, 9, 3)) * 255) / 255
    save_png(tmp_path / "a.png", img)
    assert np.allclose(load_png(tmp_path / "a.png"), img, atol=1e-12)
    mask = rng.uniform(size=(7, 9)) > 0.5
    save_png(tmp_path / "m.png", mask)
    assert np.array_equal(load_png(tmp_path / "m.png", mask=True), mask)
    (tmp_path / "bad.png").write_bytes(b"not a png")
    with pytest.raises(FormatError):
        load_png(tmp_path / "bad.png")


def test_pfm_round_trip(tmp_path):
    d = np.random.default_rng(3).uniform(1, 3, (5, 8)).astype(np.float32)
    d[0, 0] = np.inf
    assert np.array_equal(decode_pfm(encode_pfm(d)), d)
    save_pfm(tmp_path / "d.pfm", d)
    assert np.array_equal(load_pfm(tmp_path / "d.pfm"), d)
    # big-endian files carry a positive scale
    big = b"Pf\n8 5\n1.0\n" + np.ascontiguousarray(d[::-1]).astype(">f4").tobytes()
    assert np.array_equal(decode_pfm(big), d)
    with pytest.raises(BadMagicError):
        decode_pfm(b"PF\n1 1\n-1\n" + bytes(12))
    with pytest.raises(HeaderError):
        decode_pfm(b"Pf\nx y\n-1\n" + bytes(4))
    with pytest.raises(TruncatedFileError):
        decode_pfm(encode_pfm(d)[:-1])
