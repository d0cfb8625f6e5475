"""Flat binary container for named float32 tensors.

Layout: 8-byte magic ``MEMOTNSR``, u64 little-endian header length, a
UTF-8 JSON header mapping tensor names to ``{"dtype", "shape",
"offset", "len"}`` (plus an optional top-level ``base_fingerprint``
string), then the payload of little-endian float32 data. Offsets are
relative to the payload start and 8-byte aligned; ``len`` counts bytes.
"""

from __future__ import annotations

import hashlib
import json
import struct
from typing import IO, Mapping

import numpy as np

MAGIC = b"MEMOTNSR"
ALIGNMENT = 8
FINGERPRINT_KEY = "base_fingerprint"


class TensorFormatError(ValueError):
    """Container is malformed or tensors violate the format's constraints."""


def _check_name(name: str):
    if not name:
        raise TensorFormatError("tensor name must be non-empty")
    if name == FINGERPRINT_KEY:
        raise TensorFormatError(f"tensor name {FINGERPRINT_KEY!r} is reserved")


def _as_f32(name: str, array) -> np.ndarray:
    arr = np.asarray(array)
    if not np.issubdtype(arr.dtype, np.floating) and not np.issubdtype(arr.dtype, np.integer):
        raise TensorFormatError(f"tensor {name!r} has non-numeric dtype {arr.dtype}")
    # ascontiguousarray would promote 0-d arrays to 1-d; keep scalar shapes.
    out = arr.astype("<f4", copy=False)
    return out if out.flags.c_contiguous else np.ascontiguousarray(out)


def fingerprint(tensors: Mapping[str, np.ndarray]) -> str:
    """SHA-256 over names, shapes, and raw little-endian bytes, in sorted name order."""
    digest = hashlib.sha256()
    for name in sorted(tensors):
        _check_name(name)
        arr = _as_f32(name, tensors[name])
        digest.update(name.encode("utf-8"))
        digest.update(b"\x00")
        digest.update(",".join(str(d) for d in arr.shape).encode("ascii"))
        digest.update(b"\x00")
        digest.update(arr.tobytes())
    return digest.hexdigest()


def _pad_to(n: int, alignment: int = ALIGNMENT) -> int:
    return (alignment - n % alignment) % alignment


def save(path_or_fh, tensors: Mapping[str, np.ndarray],
         base_fingerprint: str | None = None) -> None:
    """Write tensors to a container file or binary file object."""
    if hasattr(path_or_fh, "write"):
        _write(path_or_fh, tensors, base_fingerprint)
    else:
        with open(path_or_fh, "wb") as fh:
            _write(fh, tensors, base_fingerprint)


def _write(fh: IO[bytes], tensors: Mapping[str, np.ndarray],
           base_fingerprint: str | None) -> None:
    arrays: dict[str, np.ndarray] = {}
    for name in tensors:
        _check_name(name)
        arrays[name] = _as_f32(name, tensors[name])

    header: dict = {}
    offset = 0
    for name in sorted(arrays):
        arr = arrays[name]
        nbytes = arr.nbytes
        header[name] = {
            "dtype": "f32",
            "shape": list(arr.shape),
            "offset": offset,
            "len": nbytes,
        }
        offset += nbytes + _pad_to(nbytes)
    if base_fingerprint is not None:
        header[FINGERPRINT_KEY] = base_fingerprint

    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    # Pad the header with spaces so the payload starts 8-byte aligned.
    prefix_len = len(MAGIC) + 8 + len(header_bytes)
    header_bytes += b" " * _pad_to(prefix_len)

    fh.write(MAGIC)
    fh.write(struct.pack("<Q", len(header_bytes)))
    fh.write(header_bytes)
    for name in sorted(arrays):
        data = arrays[name].tobytes()
        fh.write(data)
        fh.write(b"\x00" * _pad_to(len(data)))


def load(path_or_fh) -> tuple[dict[str, np.ndarray], str | None]:
    """Read a container; returns (tensors, base_fingerprint or None)."""
    if hasattr(path_or_fh, "read"):
        return _read(path_or_fh)
    with open(path_or_fh, "rb") as fh:
        return _read(fh)


def _read(fh: IO[bytes]) -> tuple[dict[str, np.ndarray], str | None]:
    magic = fh.read(len(MAGIC))
    if magic != MAGIC:
        raise TensorFormatError(f"bad magic {magic!r}")
    (header_len,) = struct.unpack("<Q", fh.read(8))
    try:
        header = json.loads(fh.read(header_len).decode("utf-8"))
    except (UnicodeDecodeError, ValueError) as exc:
        raise TensorFormatError(f"unreadable header: {exc}") from exc
    if not isinstance(header, dict):
        raise TensorFormatError("header must be a JSON object")

    base = header.pop(FINGERPRINT_KEY, None)
    if base is not None and not isinstance(base, str):
        raise TensorFormatError("base_fingerprint must be a string")

    payload = fh.read()
    tensors: dict[str, np.ndarray] = {}
    for name, meta in header.items():
        _check_name(name)
        if not isinstance(meta, dict):
            raise TensorFormatError(f"entry for {name!r} must be an object")
        if meta.get("dtype") != "f32":
            raise TensorFormatError(f"tensor {name!r} has unsupported dtype {meta.get('dtype')!r}")
        offset, nbytes = int(meta["offset"]), int(meta["len"])
        shape = tuple(int(d) for d in meta["shape"])
        if offset % ALIGNMENT:
            raise TensorFormatError(f"tensor {name!r} offset {offset} not {ALIGNMENT}-byte aligned")
        if offset < 0 or offset + nbytes > len(payload):
            raise TensorFormatError(f"tensor {name!r} extends past payload end")
        expected = 4
        for d in shape:
            expected *= d
        if nbytes != expected:
            raise TensorFormatError(
                f"tensor {name!r} len {nbytes} does not match shape {shape}")
        arr = np.frombuffer(payload[offset:offset + nbytes], dtype="<f4").reshape(shape)
        tensors[name] = arr.copy()
    return tensors, base
