"""Checksummed binary container used for corpora, checkpoints and predictions.

Layout (all integers little-endian)::

    magic        8 bytes   e.g. b"STEPCORP"
    version      u32
    header_len   u64
    header       UTF-8 JSON; must contain "arrays": [{"dtype", "shape"}, ...]
    payload      raw array bytes in header order ('<f8' floats, '|u1' masks)
    sha256       32 bytes over everything above

Files are written to a temporary name and renamed, so readers never see a
partial file.
"""
from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .errors import StepError

VERSION = 1
_DTYPES = {"<f8": np.dtype("<f8"), "|u1": np.dtype("|u1"), "<i8": np.dtype("<i8")}


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def encode_container(magic: bytes, header: dict, arrays) -> bytes:
    if len(magic) != 8:
        raise ValueError("magic must be 8 bytes")
    blobs, descr = [], []
    for a in arrays:
        a = np.asarray(a)
        if a.dtype == bool:
            a = a.astype("|u1")
        elif a.dtype.kind in "iu" and a.dtype.itemsize > 1:
            a = a.astype("<i8")
        elif a.dtype.kind != "u":
            a = a.astype("<f8")
        key = "|u1" if a.dtype.itemsize == 1 else a.dtype.str
        descr.append({"dtype": key, "shape": list(a.shape)})
        blobs.append(np.ascontiguousarray(a, dtype=_DTYPES[key]).tobytes())
    hdr = dict(header)
    hdr["arrays"] = descr
    hbytes = json.dumps(hdr, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = magic + struct.pack("<IQ", VERSION, len(hbytes)) + hbytes + b"".join(blobs)
    return body + hashlib.sha256(body).digest()


def decode_container(data: bytes, magic: bytes) -> tuple[dict, list[np.ndarray]]:
    if len(data) < 8 + 12 + 32:
        raise StepError("CORRUPT_FILE", "file too short")
    body, digest = data[:-32], data[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise StepError("CORRUPT_FILE", "checksum mismatch")
    if body[:8] != magic:
        raise StepError("CORRUPT_FILE", f"bad magic {body[:8]!r}, expected {magic!r}")
    version, hlen = struct.unpack("<IQ", body[8:20])
    if version != VERSION:
        raise StepError("CORRUPT_FILE", f"unsupported container version {version}")
    header = json.loads(body[20:20 + hlen].decode("utf-8"))
    off = 20 + hlen
    arrays = []
    for d in header["arrays"]:
        dt = _DTYPES[d["dtype"]]
        count = int(np.prod(d["shape"], dtype=np.int64)) if d["shape"] else 1
        nbytes = count * dt.itemsize
        arrays.append(np.frombuffer(body[off:off + nbytes], dtype=dt).reshape(d["shape"]).copy())
        off += nbytes
    if off != len(body):
        raise StepError("CORRUPT_FILE", "trailing bytes after payload")
    return header, arrays


def write_container(path, magic: bytes, header: dict, arrays) -> None:
    atomic_write_bytes(path, encode_container(magic, header, arrays))


def read_container(path, magic: bytes) -> tuple[dict, list[np.ndarray]]:
    path = Path(path)
    if not path.exists():
        raise StepError("MISSING_FILE", str(path))
    return decode_container(path.read_bytes(), magic)


def stable_hash(obj) -> str:
    """Content hash of a JSON-serializable object (sorted keys, repr floats)."""
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=_default)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def _default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, (set, frozenset)):
        return sorted(o)
    if isinstance(o, tuple):
        return list(o)
    raise TypeError(f"not hashable as JSON: {type(o).__name__}")
