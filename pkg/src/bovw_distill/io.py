"""Binary artifact formats: vocabulary files and named-parameter checkpoints.

Vocabulary (``PBVW``)::

    magic b"PBVW" | version u32 | K u32 | D u32 | K*D float64, row-major by word

Checkpoint (``PBDT``)::

    magic b"PBDT" | version u32 | count u32 |
    count x (name_len u32 | name utf-8 | rank u32 | extents u32*rank | float64*prod(extents))

All integers and floats are little-endian.
"""

from __future__ import annotations

import hashlib
import struct
from collections import OrderedDict
from pathlib import Path

import numpy as np

VOCAB_MAGIC = b"PBVW"
CKPT_MAGIC = b"PBDT"
FORMAT_VERSION = 1

_F64 = np.dtype("<f8")


class FormatError(ValueError):
    """Base class for malformed artifact files."""


class BadMagicError(FormatError):
    pass


class UnsupportedVersionError(FormatError):
    pass


class TruncatedFileError(FormatError):
    pass


class _Reader:
    def __init__(self, buf: bytes, path):
        self.buf, self.pos, self.path = buf, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedFileError(f"{self.path}: expected {n} more bytes at offset {self.pos}, file has {len(self.buf)}")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def f64(self, count: int) -> np.ndarray:
        return np.frombuffer(self.take(8 * count), dtype=_F64).astype(np.float64)


def _check_header(r: _Reader, magic: bytes) -> None:
    got = r.take(4)
    if got != magic:
        raise BadMagicError(f"{r.path}: bad magic {got!r}, expected {magic!r}")
    version = r.u32()
    if version != FORMAT_VERSION:
        raise UnsupportedVersionError(f"{r.path}: unsupported format version {version}")


def save_vocabulary(path, words: np.ndarray) -> None:
    words = np.asarray(words, dtype=np.float64)
    k, d = words.shape
    with open(path, "wb") as fh:
        fh.write(VOCAB_MAGIC)
        fh.write(struct.pack("<III", FORMAT_VERSION, k, d))
        fh.write(words.astype(_F64).tobytes(order="C"))


def load_vocabulary(path) -> np.ndarray:
    r = _Reader(Path(path).read_bytes(), path)
    _check_header(r, VOCAB_MAGIC)
    k, d = r.u32(), r.u32()
    words = r.f64(k * d).reshape(k, d)
    if r.pos != len(r.buf):
        raise FormatError(f"{path}: {len(r.buf) - r.pos} trailing bytes")
    return words


def checkpoint_bytes(state: "OrderedDict[str, np.ndarray]") -> bytes:
    parts = [CKPT_MAGIC, struct.pack("<II", FORMAT_VERSION, len(state))]
    for name, arr in state.items():
        arr = np.asarray(arr, dtype=np.float64)
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.astype(_F64).tobytes(order="C"))
    return b"".join(parts)


def save_checkpoint(path, state) -> str:
    """Write ``state`` and return the sha256 of the written bytes."""
    blob = checkpoint_bytes(state)
    Path(path).write_bytes(blob)
    return hashlib.sha256(blob).hexdigest()


def load_checkpoint(path) -> "OrderedDict[str, np.ndarray]":
    r = _Reader(Path(path).read_bytes(), path)
    _check_header(r, CKPT_MAGIC)
    count = r.u32()
    out: OrderedDict[str, np.ndarray] = OrderedDict()
    for _ in range(count):
        name = r.take(r.u32()).decode("utf-8")
        rank = r.u32()
        shape = struct.unpack(f"<{rank}I", r.take(4 * rank))
        out[name] = r.f64(int(np.prod(shape, dtype=np.int64))).reshape(shape)
    if r.pos != len(r.buf):
        raise FormatError(f"{path}: {len(r.buf) - r.pos} trailing bytes")
    return out


def state_hash(state) -> str:
    return hashlib.sha256(checkpoint_bytes(state)).hexdigest()


def file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
