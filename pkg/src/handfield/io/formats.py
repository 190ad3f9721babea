"""Binary and image file formats.

Checkpoint layout (all little-endian)::

    b"HFCK" | u32 version | u64 header length | JSON header | raw arrays | u32 CRC32

Feature maps::

    b"HFFM" | u16 version | u16 reserved | u32 H | u32 W | u32 C | i32 frame | i32 camera
    | u32 CRC32 of the preceding header bytes | float32 data, row-major (H, W, C)
"""

from __future__ import annotations

import json
import math
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

CHECKPOINT_MAGIC = b"HFCK"
CHECKPOINT_VERSION = 1
FEATURE_MAGIC = b"HFFM"
FEATURE_VERSION = 1
_FEATURE_HEADER = struct.Struct("<4sHHIIIii")
_CRC = struct.Struct("<I")


class FormatError(ValueError):
    """Base class for unreadable files."""


class BadMagicError(FormatError):
    pass


class VersionMismatchError(FormatError):
    pass


class TruncatedFileError(FormatError):
    pass


class ChecksumError(FormatError):
    pass


class HeaderError(FormatError):
    pass


# ---------------------------------------------------------------------------
# checkpoints


def encode_checkpoint(arrays: dict[str, np.ndarray], meta: dict) -> bytes:
    entries, blobs, offset = [], [], 0
    for name in sorted(arrays):
        a = np.asarray(arrays[name])  # tobytes() writes C order; ascontiguousarray would promote 0-d arrays
        le = a.astype(a.dtype.newbyteorder("<"), copy=False)
        raw = le.tobytes()
        entries.append({"name": name, "dtype": le.dtype.str, "shape": list(a.shape), "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"arrays": entries, "meta": meta}, sort_keys=True, separators=(",", ":")).encode()
    body = CHECKPOINT_MAGIC + struct.pack("<IQ", CHECKPOINT_VERSION, len(header)) + header + b"".join(blobs)
    return body + _CRC.pack(zlib.crc32(body))


def decode_checkpoint(data: bytes) -> tuple[dict[str, np.ndarray], dict]:
    if len(data) < 4:
        raise TruncatedFileError(f"checkpoint is {len(data)} bytes, too short for a header")
    if data[:4] != CHECKPOINT_MAGIC:
        raise BadMagicError(f"not a checkpoint (magic {data[:4]!r})")
    if len(data) < 16:
        raise TruncatedFileError("checkpoint header truncated")
    version, hlen = struct.unpack_from("<IQ", data, 4)
    if version != CHECKPOINT_VERSION:
        raise VersionMismatchError(f"checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    if 16 + hlen + 4 > len(data):
        raise TruncatedFileError("checkpoint truncated inside the header")
    (crc,) = _CRC.unpack_from(data, len(data) - 4)
    if zlib.crc32(data[:-4]) != crc:
        raise ChecksumError("checkpoint checksum mismatch (truncated or corrupted)")
    try:
        header = json.loads(data[16:16 + hlen].decode())
        entries = header["arrays"]
        meta = header["meta"]
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise HeaderError(f"malformed checkpoint header: {exc}") from None
    start = 16 + hlen
    payload_end = len(data) - 4
    if not isinstance(entries, list) or not isinstance(meta, dict):
        raise HeaderError("checkpoint header needs an array list and a meta object")
    arrays = {}
    for e in entries:
        try:
            name, offset, nbytes = str(e["name"]), int(e["offset"]), int(e["nbytes"])
            if not isinstance(e["dtype"], str):
                raise TypeError("dtype must be a string")
            dtype = np.dtype(e["dtype"])
            shape = tuple(int(n) for n in e["shape"])
        except (KeyError, TypeError, ValueError) as exc:
            raise HeaderError(f"malformed array entry {e!r}: {exc}") from None
        if offset < 0 or min(shape, default=0) < 0 or nbytes != dtype.itemsize * math.prod(shape):
            raise HeaderError(f"array {name!r} has inconsistent offset, shape or size")
        lo = start + offset
        hi = lo + nbytes
        if hi > payload_end:
            raise TruncatedFileError(f"array {name!r} runs past the end of the file")
        arrays[name] = np.frombuffer(data[lo:hi], dtype=dtype).reshape(shape).copy()
    return arrays, meta


def save_checkpoint_file(path, arrays, meta):
    Path(path).write_bytes(encode_checkpoint(arrays, meta))


def load_checkpoint_file(path):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return decode_checkpoint(path.read_bytes())


# ---------------------------------------------------------------------------
# feature maps


@dataclass
class FeatureMap:
    data: np.ndarray  # (H, W, C) float32
    frame_id: int
    camera_id: int


def encode_feature_map(fm: FeatureMap) -> bytes:
    a = np.ascontiguousarray(fm.data, dtype="<f4")
    if a.ndim != 3:
        raise ValueError("feature map must be (H, W, C)")
    H, W, C = a.shape
    head = _FEATURE_HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, 0, H, W, C, int(fm.frame_id), int(fm.camera_id))
    return head + _CRC.pack(zlib.crc32(head)) + a.tobytes()


def decode_feature_map(data: bytes) -> FeatureMap:
    n_head = _FEATURE_HEADER.size + _CRC.size
    if len(data) >= 4 and data[:4] != FEATURE_MAGIC:
        raise BadMagicError(f"not a feature map (magic {data[:4]!r})")
    if len(data) < n_head:
        raise TruncatedFileError(f"feature map is {len(data)} bytes, header needs {n_head}")
    magic, version, _, H, W, C, frame, cam = _FEATURE_HEADER.unpack_from(data, 0)
    if version != FEATURE_VERSION:
        raise VersionMismatchError(f"feature map version {version}, expected {FEATURE_VERSION}")
    (crc,) = _CRC.unpack_from(data, _FEATURE_HEADER.size)
    if zlib.crc32(data[:_FEATURE_HEADER.size]) != crc:
        raise ChecksumError("feature map header checksum mismatch")
    expected = n_head + 4 * H * W * C
    if len(data) != expected:
        raise TruncatedFileError(f"feature map has {len(data)} bytes, header implies {expected}")
    arr = np.frombuffer(data, dtype="<f4", offset=n_head).reshape(H, W, C).copy()
    return FeatureMap(arr, frame, cam)


def save_feature_map(path, fm: FeatureMap):
    Path(path).write_bytes(encode_feature_map(fm))


def load_feature_map(path) -> FeatureMap:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"feature map not found: {path}")
    return decode_feature_map(path.read_bytes())


# ---------------------------------------------------------------------------
# images


def save_png(path, image):
    """8-bit PNG from a float image in [0, 1] (H, W[, 3]) or a bool mask."""
    a = np.asarray(image)
    if a.dtype == bool:
        a = a.astype(np.uint8) * 255
    else:
        a = np.round(np.clip(a, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(a).save(path, format="PNG")


def load_png(path, mask: bool = False) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"image not found: {path}")
    try:
        with Image.open(path) as im:
            a = np.asarray(im)
    except OSError as exc:
        raise FormatError(f"unreadable image {path}: {exc}") from None
    if mask:
        return a > 127
    return a.astype(np.float64) / 255.0


def encode_pfm(depth: np.ndarray) -> bytes:
    """Single-channel little-endian PFM; rows stored bottom to top."""
    a = np.asarray(depth, dtype="<f4")
    if a.ndim != 2:
        raise ValueError("depth map must be 2D")
    H, W = a.shape
    return f"Pf\n{W} {H}\n-1.0\n".encode("ascii") + np.ascontiguousarray(a[::-1]).tobytes()


def decode_pfm(data: bytes) -> np.ndarray:
    parts = data.split(b"\n", 3)
    if len(parts) < 4 or parts[0] != b"Pf":
        raise BadMagicError("not a single-channel PFM file")
    try:
        W, H = (int(x) for x in parts[1].split())
        scale = float(parts[2])
    except ValueError:
        raise HeaderError("malformed PFM header") from None
    if W <= 0 or H <= 0 or scale == 0:
        raise HeaderError("malformed PFM header")
    body = parts[3]
    if len(body) != 4 * W * H:
        raise TruncatedFileError(f"PFM body has {len(body)} bytes, expected {4 * W * H}")
    dtype = "<f4" if scale < 0 else ">f4"
    return np.frombuffer(body, dtype=dtype).reshape(H, W)[::-1].astype(np.float32)


def save_pfm(path, depth):
    Path(path).write_bytes(encode_pfm(depth))


def load_pfm(path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"depth map not found: {path}")
    return decode_pfm(path.read_bytes())
