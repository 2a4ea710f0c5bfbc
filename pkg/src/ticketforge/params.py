"""Named parameter collections split into trunk and head.

The trunk holds the shared backbone weights, the head holds task-specific
classifier weights.  Pruning only ever touches the prunable subset of the
trunk: 2-D weight matrices.  Biases, layer-norm gains/shifts and other 1-D
vectors are never pruned.

The on-disk format is a flat binary layout:
    header:    magic (8 bytes) | version u32 | entry count u32
    per entry: name length u32 | name utf-8 | rank u32 | dims u64 * rank |
               little-endian float64 payload
Entries are written in sorted name order so the round trip is bit-exact.
"""
from __future__ import annotations

import hashlib
import io
import struct
from typing import Iterable, Mapping

import numpy as np

from .errors import DimensionError, MaskError, TrainingError

PARAMS_MAGIC = b"TKTPARAM"
PARAMS_VERSION = 1


class ParamStore:
    """Named map of float64 arrays partitioned into trunk and head."""

    def __init__(self, entries: Mapping[str, np.ndarray],
                 trunk_names: Iterable[str], head_names: Iterable[str],
                 prunable_names: Iterable[str], arch=None):
        self.entries = {k: np.asarray(v, dtype=np.float64) for k, v in entries.items()}
        self.trunk_names = frozenset(trunk_names)
        self.head_names = frozenset(head_names)
        self.prunable_names = tuple(sorted(prunable_names))
        self.arch = arch  # opaque tag set by the model builder
        self._validate()

    def _validate(self):
        overlap = self.trunk_names & self.head_names
        if overlap:
            raise ValueError(f"names in both trunk and head: {sorted(overlap)}")
        all_names = self.trunk_names | self.head_names
        if all_names != set(self.entries):
            raise ValueError("every entry must be in exactly one of trunk/head")
        stray = set(self.prunable_names) - self.trunk_names
        if stray:
            raise ValueError(f"prunable names outside trunk: {sorted(stray)}")
        for name in self.prunable_names:
            if self.entries[name].ndim != 2:
                raise ValueError(f"prunable entry {name!r} is not a 2-D matrix")

    # -- views ------------------------------------------------------------

    def sorted_names(self) -> list[str]:
        return sorted(self.entries)

    def prunable_total(self) -> int:
        return sum(self.entries[n].size for n in self.prunable_names)

    def copy(self) -> "ParamStore":
        return ParamStore({k: v.copy() for k, v in self.entries.items()},
                          self.trunk_names, self.head_names,
                          self.prunable_names, arch=self.arch)

    def with_head(self, head_entries: Mapping[str, np.ndarray]) -> "ParamStore":
        """A new store sharing this trunk (copied) with a replacement head."""
        entries = {k: self.entries[k].copy() for k in self.trunk_names}
        entries.update({k: np.asarray(v, dtype=np.float64).copy()
                        for k, v in head_entries.items()})
        return ParamStore(entries, self.trunk_names, head_entries.keys(),
                          self.prunable_names, arch=self.arch)

    def content_hash(self) -> str:
        h = hashlib.sha256()
        for name in self.sorted_names():
            h.update(name.encode("utf-8"))
            h.update(self.entries[name].astype("<f8").tobytes())
        return h.hexdigest()

    # -- serialization ----------------------------------------------------

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        names = self.sorted_names()
        buf.write(PARAMS_MAGIC)
        buf.write(struct.pack("<II", PARAMS_VERSION, len(names)))
        for name in names:
            raw = name.encode("utf-8")
            arr = self.entries[name]
            buf.write(struct.pack("<I", len(raw)))
            buf.write(raw)
            buf.write(struct.pack("<I", arr.ndim))
            for d in arr.shape:
                buf.write(struct.pack("<Q", d))
            buf.write(arr.astype("<f8").tobytes())
        return buf.getvalue()

    def save(self, path):
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @staticmethod
    def entries_from_bytes(blob: bytes) -> dict[str, np.ndarray]:
        buf = io.BytesIO(blob)
        magic = buf.read(8)
        if magic != PARAMS_MAGIC:
            raise ValueError("not a parameter file (bad magic)")
        version, count = struct.unpack("<II", buf.read(8))
        if version != PARAMS_VERSION:
            raise ValueError(f"unsupported parameter file version {version}")
        entries = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<I", buf.read(4))
            name = buf.read(nlen).decode("utf-8")
            (rank,) = struct.unpack("<I", buf.read(4))
            shape = tuple(struct.unpack("<Q", buf.read(8))[0] for _ in range(rank))
            n = int(np.prod(shape)) if shape else 1
            payload = buf.read(8 * n)
            entries[name] = np.frombuffer(payload, dtype="<f8").reshape(shape).copy()
        return entries

    @classmethod
    def from_bytes(cls, blob: bytes, trunk_names, head_names,
                   prunable_names) -> "ParamStore":
        return cls(cls.entries_from_bytes(blob), trunk_names, head_names,
                   prunable_names)

    def restored_from(self, blob: bytes) -> "ParamStore":
        """Deserialize ``blob`` reusing this store's partition sets."""
        out = ParamStore.from_bytes(blob, self.trunk_names, self.head_names,
                                    self.prunable_names)
        out.arch = self.arch
        return out

    @classmethod
    def load(cls, path, trunk_names, head_names, prunable_names) -> "ParamStore":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read(), trunk_names, head_names,
                                  prunable_names)


# ---------------------------------------------------------------------------
# optimizers
# ---------------------------------------------------------------------------

class SGD:
    """Plain stochastic gradient descent with a fixed learning rate."""

    def __init__(self, lr: float):
        if lr <= 0:
            raise ValueError("learning rate must be positive")
        self.lr = float(lr)

    def step(self, params: ParamStore, grads: Mapping[str, np.ndarray],
             mask=None):
        optimizer_step(params, grads, self.lr, mask)


class Adam:
    """Adam with bias correction; an alternative for the pluggable slot.

    State is keyed by parameter name and lives with the optimizer, so a
    fresh instance restarts the moments (as every fresh training run does).
    """

    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        if lr <= 0:
            raise ValueError("learning rate must be positive")
        self.lr = float(lr)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}
        self._t = 0

    def step(self, params: ParamStore, grads: Mapping[str, np.ndarray],
             mask=None):
        missing = set(params.entries) - set(grads)
        if missing:
            raise ValueError(f"gradients missing for parameters: {sorted(missing)}")
        if mask is not None:
            mask.check_layout(params)
        self._t += 1
        b1, b2 = self.beta1, self.beta2
        scale = self.lr * np.sqrt(1.0 - b2 ** self._t) / (1.0 - b1 ** self._t)
        for name in params.sorted_names():
            g = grads[name]
            if not np.all(np.isfinite(g)):
                raise TrainingError(f"non-finite gradient for parameter {name!r}")
            m = self._m.setdefault(name, np.zeros_like(g))
            v = self._v.setdefault(name, np.zeros_like(g))
            m += (1.0 - b1) * (g - m)
            v += (1.0 - b2) * (g * g - v)
            w = params.entries[name]
            w -= scale * m / (np.sqrt(v) + self.eps)
            if mask is not None and name in mask.arrays:
                w[mask.arrays[name] == 0] = 0.0
        return params


def optimizer_step(params: ParamStore, grads: Mapping[str, np.ndarray],
                   lr: float, mask=None) -> ParamStore:
    """In-place SGD update w <- w - lr * g over every entry.

    When a mask is supplied, masked-off positions are forced to exactly 0.0
    after the update, keeping pruned weights frozen bit-for-bit.
    """
    missing = set(params.entries) - set(grads)
    if missing:
        raise ValueError(f"gradients missing for parameters: {sorted(missing)}")
    if mask is not None:
        mask.check_layout(params)
    for name in params.sorted_names():
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for parameter {name!r}")
        w = params.entries[name]
        if g.shape != w.shape:
            raise DimensionError(
                f"gradient shape {g.shape} != parameter shape {w.shape} for {name!r}")
        w -= lr * g
        if mask is not None and name in mask.arrays:
            w[mask.arrays[name] == 0] = 0.0  # exact zero, not -0.0 residue
    return params
