"""Binary embedding store.

Layout (all integers little-endian)::

    magic      b"RELB"
    version    u32
    dim        u32
    count      u64
    prov_len   u32, then prov_len bytes of UTF-8 JSON provenance
    records    count x [u16 head_len, head, u16 tail_len, tail, dim x f32]
    crc32      u32 over every preceding byte
"""
from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import WordPair

MAGIC = b"RELB"
VERSION = 1
_HEADER = struct.Struct("<4sIIQ")
_U16 = struct.Struct("<H")
_U32 = struct.Struct("<I")
_LE_F32 = np.dtype("<f4")


class StoreError(ValueError):
    pass


@dataclass
class EmbeddingStore:
    pairs: list[WordPair]
    vectors: np.ndarray
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.vectors = np.ascontiguousarray(self.vectors, dtype=np.float32)
        if self.vectors.ndim != 2 or self.vectors.shape[0] != len(self.pairs):
            raise StoreError(f"expected ({len(self.pairs)}, dim) vectors, got {self.vectors.shape}")

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def mapping(self) -> dict[WordPair, np.ndarray]:
        return {p: v for p, v in zip(self.pairs, self.vectors)}


def _encode_word(word: str) -> bytes:
    raw = word.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise StoreError(f"word too long for the store ({len(raw)} bytes)")
    return _U16.pack(len(raw)) + raw


def encode_store(pairs: Sequence[WordPair], vectors: np.ndarray, provenance: dict | None = None) -> bytes:
    store = EmbeddingStore(list(pairs), vectors, provenance or {})
    prov = json.dumps(store.provenance, sort_keys=True).encode("utf-8")
    parts = [_HEADER.pack(MAGIC, VERSION, store.dim, len(store.pairs)), _U32.pack(len(prov)), prov]
    for pair, vec in zip(store.pairs, store.vectors):
        parts += [_encode_word(pair.head), _encode_word(pair.tail), vec.astype(_LE_F32).tobytes()]
    body = b"".join(parts)
    return body + _U32.pack(zlib.crc32(body))


def save_store(path, pairs: Sequence[WordPair], vectors: np.ndarray, provenance: dict | None = None) -> Path:
    path = Path(path)
    path.write_bytes(encode_store(pairs, vectors, provenance))
    return path


def decode_store(blob: bytes, source: str = "<bytes>") -> EmbeddingStore:
    if len(blob) < _HEADER.size + 2 * _U32.size:
        raise StoreError(f"{source}: truncated embedding store")
    body, (crc,) = blob[:-4], _U32.unpack(blob[-4:])
    if zlib.crc32(body) != crc:
        raise StoreError(f"{source}: CRC32 mismatch")
    magic, version, dim, count = _HEADER.unpack_from(body, 0)
    if magic != MAGIC:
        raise StoreError(f"{source}: bad magic {magic!r}")
    if version != VERSION:
        raise StoreError(f"{source}: store version {version} unsupported (expected {VERSION})")
    pos = _HEADER.size
    (prov_len,) = _U32.unpack_from(body, pos)
    pos += _U32.size
    provenance = json.loads(body[pos:pos + prov_len].decode("utf-8")) if prov_len else {}
    pos += prov_len

    def word():
        nonlocal pos
        (n,) = _U16.unpack_from(body, pos)
        pos += _U16.size
        text = body[pos:pos + n].decode("utf-8")
        pos += n
        return text

    pairs, vectors = [], np.empty((count, dim), dtype=np.float32)
    try:
        for i in range(count):
            head, tail = word(), word()
            pairs.append(WordPair(head, tail))
            vectors[i] = np.frombuffer(body, dtype=_LE_F32, count=dim, offset=pos)
            pos += 4 * dim
    except (struct.error, ValueError) as exc:
        raise StoreError(f"{source}: malformed record {len(pairs)}: {exc}") from None
    if pos != len(body):
        raise StoreError(f"{source}: {len(body) - pos} trailing bytes after {count} records")
    return EmbeddingStore(pairs, vectors, provenance)


def load_store(path) -> EmbeddingStore:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such file: {path}")
    return decode_store(path.read_bytes(), str(path))
