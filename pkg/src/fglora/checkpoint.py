"""Binary checkpoint format.

Layout (all integers little-endian)::

    magic       4 bytes   b"FGLS" (parameter stores) or b"FGLA" (adapters)
    version     u32       1
    count       u32       number of tensor entries
    entries     count x { u16 name_len, name (UTF-8), u8 rank,
                          u32 extents[rank], f64 data[prod(extents)] }
    meta_count  u32
    metadata    meta_count x { u16 key_len, key, u32 value_len, value }  (UTF-8)
    checksum    u64       blake2b-64 of every preceding byte

Entries are written in lexicographic name order.
"""

from __future__ import annotations

import hashlib
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .params import ParamStore

MAGIC_STORE = b"FGLS"
MAGIC_ADAPTER = b"FGLA"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    """Malformed, truncated, corrupted or incompatible checkpoint."""


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray] = field(default_factory=dict)
    metadata: dict[str, str] = field(default_factory=dict)
    version: int = FORMAT_VERSION
    magic: bytes = MAGIC_STORE

    @classmethod
    def from_store(cls, store: ParamStore, magic: bytes = MAGIC_STORE) -> "Checkpoint":
        return cls({n: t.data.copy() for n, t in store.items()}, dict(store.metadata), magic=magic)

    def to_store(self, trainable: bool = False) -> ParamStore:
        store = ParamStore(metadata=self.metadata)
        for name in sorted(self.tensors):
            store.add(name, self.tensors[name], trainable=trainable)
        return store


def _checksum(payload: bytes) -> bytes:
    return hashlib.blake2b(payload, digest_size=8).digest()


def encode(ckpt: Checkpoint) -> bytes:
    parts = [ckpt.magic, struct.pack("<II", ckpt.version, len(ckpt.tensors))]
    for name in sorted(ckpt.tensors):
        arr = np.asarray(ckpt.tensors[name], dtype="<f8", order="C")
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise CheckpointError(f"name too long: {name[:40]}...")
        if arr.ndim > 0xFF:
            raise CheckpointError(f"rank too large for {name!r}")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    parts.append(struct.pack("<I", len(ckpt.metadata)))
    for key in sorted(ckpt.metadata):
        k = str(key).encode("utf-8")
        v = str(ckpt.metadata[key]).encode("utf-8")
        parts.append(struct.pack("<H", len(k)) + k + struct.pack("<I", len(v)) + v)
    payload = b"".join(parts)
    return payload + _checksum(payload)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError("truncated checkpoint")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode(buf: bytes, magic: bytes | None = None) -> Checkpoint:
    if len(buf) < 4 + 8 + 4 + 8:
        raise CheckpointError("truncated checkpoint")
    payload, tail = buf[:-8], buf[-8:]
    if _checksum(payload) != tail:
        raise CheckpointError("checksum mismatch (corrupted or truncated file)")
    r = _Reader(payload)
    got_magic = r.take(4)
    if got_magic not in (MAGIC_STORE, MAGIC_ADAPTER):
        raise CheckpointError(f"bad magic {got_magic!r}")
    if magic is not None and got_magic != magic:
        raise CheckpointError(f"expected magic {magic!r}, found {got_magic!r}")
    version, count = r.unpack("<II")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {FORMAT_VERSION})")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode("utf-8")
        (rank,) = r.unpack("<B")
        shape = r.unpack(f"<{rank}I") if rank else ()
        n = int(np.prod(shape)) if rank else 1
        data = np.frombuffer(r.take(8 * n), dtype="<f8").astype(np.float64).reshape(shape)
        if name in tensors:
            raise CheckpointError(f"duplicate entry {name!r}")
        tensors[name] = data
    (mcount,) = r.unpack("<I")
    metadata = {}
    for _ in range(mcount):
        (klen,) = r.unpack("<H")
        key = r.take(klen).decode("utf-8")
        (vlen,) = r.unpack("<I")
        metadata[key] = r.take(vlen).decode("utf-8")
    if r.pos != len(payload):
        raise CheckpointError("trailing bytes after metadata")
    return Checkpoint(tensors, metadata, version, got_magic)


def write_checkpoint(ckpt: Checkpoint, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(encode(ckpt))
    os.replace(tmp, path)


def read_checkpoint(path, magic: bytes | None = None) -> Checkpoint:
    return decode(Path(path).read_bytes(), magic)


def save_checkpoint(store: ParamStore, path, metadata: dict[str, str] | None = None) -> None:
    ckpt = Checkpoint.from_store(store)
    if metadata:
        ckpt.metadata.update(metadata)
    write_checkpoint(ckpt, path)


def load_checkpoint(path, into: ParamStore | None = None) -> ParamStore:
    """Read a parameter-store file.

    With ``into`` given, every entry must exist there with the same shape; the
    values are copied in (freeze flags untouched) and ``into`` is returned.
    """
    ckpt = read_checkpoint(path, MAGIC_STORE)
    if into is None:
        return ckpt.to_store()
    for name, arr in ckpt.tensors.items():
        if name not in into:
            raise CheckpointError(f"checkpoint entry {name!r} not present in target store")
        if into[name].shape != arr.shape:
            raise CheckpointError(f"shape mismatch for {name!r}: file {arr.shape} vs store {into[name].shape}")
    for name, arr in ckpt.tensors.items():
        into.set_array(name, arr, allow_frozen=True)
    into.metadata.update(ckpt.metadata)
    return into


def file_hash(path) -> str:
    return hashlib.blake2b(Path(path).read_bytes(), digest_size=8).hexdigest()
