"""Binary pruning masks over the prunable subset of the trunk.

A mask is the artifact a ticket IS: per-name {0,1} arrays aligned with a
ParamStore's prunable entries.  Masks are exchanged between the find and
evaluate phases through a bit-packed file format:

    header:    magic (8 bytes) | version u32 | entry count u32
    per entry: name length u32 | name | rank u32 | dims u64 * rank |
               payload length u64 | packed bits | zero count u64
    footer:    total u64 | zeros u64 | sparsity f64
"""
from __future__ import annotations

import hashlib
import io
import struct
from typing import Mapping

import numpy as np

from .errors import MaskError

MASK_MAGIC = b"TKTMASK\x00"
MASK_VERSION = 1


class Mask:
    """Per-name binary arrays; 1 keeps a weight, 0 prunes it."""

    def __init__(self, arrays: Mapping[str, np.ndarray]):
        self.arrays: dict[str, np.ndarray] = {}
        for name in sorted(arrays):
            arr = np.asarray(arrays[name])
            if arr.ndim != 2:
                raise MaskError(f"mask entry {name!r} must be 2-D")
            if not np.all((arr == 0) | (arr == 1)):
                raise MaskError(f"mask entry {name!r} has values outside {{0,1}}")
            self.arrays[name] = arr.astype(np.float64)

    @classmethod
    def ones_like(cls, params) -> "Mask":
        return cls({n: np.ones_like(params.entries[n])
                    for n in params.prunable_names})

    # -- bookkeeping --------------------------------------------------------

    @property
    def total(self) -> int:
        return sum(a.size for a in self.arrays.values())

    @property
    def zeros(self) -> int:
        return int(sum((a == 0).sum() for a in self.arrays.values()))

    @property
    def sparsity(self) -> float:
        return self.zeros / self.total

    def check_layout(self, params) -> None:
        """Raise MaskError unless this mask matches the prunable set exactly."""
        names = tuple(sorted(self.arrays))
        if names != tuple(params.prunable_names):
            raise MaskError("mask names do not match the prunable set")
        for name in names:
            if self.arrays[name].shape != params.entries[name].shape:
                raise MaskError(
                    f"mask shape {self.arrays[name].shape} != parameter shape "
                    f"{params.entries[name].shape} for {name!r}")

    def same_layout(self, other: "Mask") -> bool:
        if sorted(self.arrays) != sorted(other.arrays):
            return False
        return all(self.arrays[n].shape == other.arrays[n].shape
                   for n in self.arrays)

    def apply_to(self, params) -> None:
        """Zero masked positions of the store in place (exact 0.0)."""
        self.check_layout(params)
        for name, m in self.arrays.items():
            params.entries[name][m == 0] = 0.0

    def copy(self) -> "Mask":
        return Mask({n: a.copy() for n, a in self.arrays.items()})

    def flat(self) -> np.ndarray:
        """Concatenate entries in sorted name order into one {0,1} vector."""
        return np.concatenate([self.arrays[n].reshape(-1)
                               for n in sorted(self.arrays)])

    def content_hash(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.arrays):
            h.update(name.encode("utf-8"))
            h.update(np.packbits(self.arrays[name].astype(np.uint8)).tobytes())
        return h.hexdigest()

    # -- serialization -------------------------------------------------------

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        names = sorted(self.arrays)
        buf.write(MASK_MAGIC)
        buf.write(struct.pack("<II", MASK_VERSION, len(names)))
        for name in names:
            raw = name.encode("utf-8")
            arr = self.arrays[name]
            packed = np.packbits(arr.astype(np.uint8).reshape(-1)).tobytes()
            buf.write(struct.pack("<I", len(raw)))
            buf.write(raw)
            buf.write(struct.pack("<I", arr.ndim))
            for d in arr.shape:
                buf.write(struct.pack("<Q", d))
            buf.write(struct.pack("<Q", len(packed)))
            buf.write(packed)
            buf.write(struct.pack("<Q", int((arr == 0).sum())))
        buf.write(struct.pack("<QQd", self.total, self.zeros, self.sparsity))
        return buf.getvalue()

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def from_bytes(cls, blob: bytes) -> "Mask":
        buf = io.BytesIO(blob)
        if buf.read(8) != MASK_MAGIC:
            raise MaskError("not a mask file (bad magic)")
        version, count = struct.unpack("<II", buf.read(8))
        if version != MASK_VERSION:
            raise MaskError(f"unsupported mask file version {version}")
        arrays = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<I", buf.read(4))
            name = buf.read(nlen).decode("utf-8")
            (rank,) = struct.unpack("<I", buf.read(4))
            shape = tuple(struct.unpack("<Q", buf.read(8))[0] for _ in range(rank))
            (plen,) = struct.unpack("<Q", buf.read(8))
            packed = np.frombuffer(buf.read(plen), dtype=np.uint8)
            n = int(np.prod(shape))
            bits = np.unpackbits(packed)[:n]
            (zero_count,) = struct.unpack("<Q", buf.read(8))
            if int((bits == 0).sum()) != zero_count:
                raise MaskError(f"zero count mismatch for entry {name!r}")
            arrays[name] = bits.reshape(shape)
        total, zeros, sparsity = struct.unpack("<QQd", buf.read(24))
        mask = cls(arrays)
        if mask.total != total or mask.zeros != zeros:
            raise MaskError("mask footer does not match payload")
        return mask

    @classmethod
    def load(cls, path) -> "Mask":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())
