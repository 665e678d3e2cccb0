"""Named parameter sets and the binary weights format.

A ParamSet maps dotted names to rank-4 tensors and remembers which entries
train. Iteration is always in lexicographic name order, which fixes the
initialization draw order, the optimizer update order, and the on-disk
tensor order, so a seed fully determines a build.

Weights file layout (all integers little-endian):

    magic "CDWT" | u16 version=1 | u32 tensor count
    per tensor: u16 name length | name bytes (UTF-8) | u8 rank
                | rank x u32 extents | raw float32 payload, row-major

Payloads are written in float32 regardless of the in-memory element type;
loading yields float32 tensors (cast afterwards for verification runs).
"""

from __future__ import annotations

import struct
from collections.abc import Iterator

import numpy as np

from .errors import ContractViolation, ParseError, require
from .tensor import Tensor

_MAGIC = b"CDWT"
_VERSION = 1


class ParamSet:
    """Ordered name -> Tensor mapping with per-entry trainable flags."""

    def __init__(self):
        self._entries: dict[str, Tensor] = {}
        self._trainable: dict[str, bool] = {}

    def add(self, name: str, value: Tensor, trainable: bool = True) -> None:
        require(isinstance(value, Tensor), f"parameter {name!r} must be a Tensor")
        require(len(name) > 0, "parameter names must be non-empty")
        require(name not in self._entries, f"duplicate parameter {name!r}")
        value.requires_grad = bool(trainable)
        self._entries[name] = value
        self._trainable[name] = bool(trainable)

    def names(self) -> list[str]:
        return sorted(self._entries)

    def items(self) -> Iterator[tuple[str, Tensor]]:
        for name in self.names():
            yield name, self._entries[name]

    def trainable_items(self) -> Iterator[tuple[str, Tensor]]:
        for name, value in self.items():
            if self._trainable[name]:
                yield name, value

    def is_trainable(self, name: str) -> bool:
        return self._trainable[name]

    def __getitem__(self, name: str) -> Tensor:
        entry = self._entries.get(name)
        if entry is None:
            raise ContractViolation(f"unknown parameter {name!r}")
        return entry

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def total_values(self) -> int:
        return sum(v.data.size for _, v in self.items())

    def replace(self, updates: dict[str, Tensor]) -> "ParamSet":
        """New set with some tensors swapped; flags and names are kept."""
        out = ParamSet()
        for name, value in self.items():
            new = updates.get(name, value)
            require(
                new.dims == value.dims,
                f"replacement for {name!r} changes dims {value.dims} -> {new.dims}",
            )
            out.add(name, new, self._trainable[name])
        return out

    def astype(self, dtype) -> "ParamSet":
        out = ParamSet()
        for name, value in self.items():
            out.add(name, value.astype(dtype), self._trainable[name])
        return out


def save_weights(params: ParamSet, path: str) -> None:
    """Serialize a ParamSet; see the module docstring for the layout."""
    chunks = [_MAGIC, struct.pack("<HI", _VERSION, len(params))]
    for name, value in params.items():
        encoded = name.encode("utf-8")
        require(len(encoded) < 1 << 16, f"parameter name too long: {name!r}")
        arr = value.data
        chunks.append(struct.pack("<H", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, count: int, what: str) -> bytes:
        if self.pos + count > len(self.blob):
            raise ParseError(f"truncated while reading {what}", offset=self.pos)
        out = self.blob[self.pos : self.pos + count]
        self.pos += count
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def load_weights(path: str) -> ParamSet:
    with open(path, "rb") as fh:
        blob = fh.read()
    r = _Reader(blob)
    if r.take(4, "magic") != _MAGIC:
        raise ParseError("bad magic, not a weights file", offset=0)
    (version,) = r.unpack("<H", "version")
    if version != _VERSION:
        raise ParseError(f"unsupported weights version {version}", offset=4)
    (count,) = r.unpack("<I", "tensor count")
    out = ParamSet()
    for _ in range(count):
        (name_len,) = r.unpack("<H", "name length")
        at = r.pos
        try:
            name = r.take(name_len, "name").decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ParseError("parameter name is not UTF-8", offset=at) from exc
        (rank,) = r.unpack("<B", "rank")
        if rank == 0 or rank > 8:
            raise ParseError(f"implausible tensor rank {rank}", offset=r.pos - 1)
        extents = r.unpack(f"<{rank}I", "extents")
        size = 1
        for e in extents:
            size *= e
        payload = r.take(4 * size, f"payload of {name!r}")
        arr = np.frombuffer(payload, dtype="<f4").reshape(extents)
        if rank != 4:
            raise ParseError(
                f"tensor {name!r} has rank {rank}, this model stores rank-4 only",
                offset=at,
            )
        if name in out:
            raise ParseError(f"duplicate tensor name {name!r}", offset=at)
        out.add(name, Tensor(arr.astype(np.float32), copy=False))
    if r.pos != len(blob):
        raise ParseError("trailing bytes after last tensor", offset=r.pos)
    return out
