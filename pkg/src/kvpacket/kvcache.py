"""Serving-time data plane for KV caches: realign, concat, persist, prune.

Keys are cached post-RoPE, so moving a cache by ``delta`` positions is a single
rotation per key pair; values never change.
"""

from __future__ import annotations

import hashlib
import json
import os
import re
import struct
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from kvpacket import flops
from kvpacket import tensor as T
from kvpacket.model import (
    AttentionRecord,
    CacheError,
    KVCache,
    LayerKV,
    PositionRangeError,
    attend,
    rope_angles,
)
from kvpacket.tensor import Tensor

FORMAT_VERSION = 1
NO_FINGERPRINT = "none"
_MAGIC = b"KVPC"


class ContiguityError(CacheError):
    pass


class CacheNotFoundError(KeyError):
    pass


class CacheFormatError(ValueError):
    pass


class DuplicateEntryError(ValueError):
    pass


# ---------------------------------------------------------------------------
# realign / concat
# ---------------------------------------------------------------------------


def realign(cache: KVCache, delta: int, theta: float = 10000.0) -> KVCache:
    """Move ``cache`` by ``delta`` positions: keys rotated by ``delta``, values kept."""
    delta = int(delta)
    if cache.base_position + delta < 0:
        raise PositionRangeError(
            f"realign by {delta} moves base_position {cache.base_position} below zero"
        )
    if delta == 0:
        return cache
    layers = []
    for layer in cache.layers:
        head_dim = layer.keys.shape[-1]
        cos, sin = rope_angles([delta], head_dim, theta)
        flops.count_realign(layer.keys.data.size)
        keys = T.rotate_pairs(layer.keys, cos, sin)
        pos = None if layer.positions is None else layer.positions + delta
        layers.append(LayerKV(keys, layer.values, layer.base_position + delta, pos))
    return KVCache(tuple(layers), cache.n_tokens, cache.base_position + delta)


def concat(caches: Sequence[KVCache]) -> KVCache:
    """Join position-contiguous caches along the token axis."""
    caches = list(caches)
    if not caches:
        raise CacheError("concat needs at least one cache")
    if len(caches) == 1:
        return caches[0]
    for prev, nxt in zip(caches, caches[1:]):
        if nxt.base_position != prev.end_position:
            raise ContiguityError(
                f"gap between caches: previous ends at {prev.end_position}, "
                f"next starts at {nxt.base_position}"
            )
        if len(nxt.layers) != len(prev.layers):
            raise CacheError("caches have different layer counts")
    pruned = any(c.is_pruned for c in caches)
    layers = []
    for i in range(len(caches[0].layers)):
        parts = [c.layers[i] for c in caches]
        pos = np.concatenate([p.token_positions() for p in parts]) if pruned else None
        layers.append(LayerKV(
            T.concat([p.keys for p in parts], axis=0),
            T.concat([p.values for p in parts], axis=0),
            caches[0].base_position,
            pos,
        ))
    total = caches[-1].end_position - caches[0].base_position
    return KVCache(tuple(layers), total, caches[0].base_position)


def slice_cache(cache: KVCache, start: int, stop: int) -> KVCache:
    """Contiguous sub-span ``[start, stop)`` in cache-relative token indices."""
    if cache.is_pruned:
        raise CacheError("cannot slice a pruned cache")
    layers = [LayerKV(l.keys[start:stop], l.values[start:stop], cache.base_position + start) for l in cache.layers]
    return KVCache(tuple(layers), stop - start, cache.base_position + start)


# ---------------------------------------------------------------------------
# pruning
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PruneMask:
    keep: tuple[np.ndarray, ...]  # per-layer boolean over the cache span

    def __post_init__(self):
        for k in self.keep:
            if not k.any():
                raise CacheError("prune mask drops every token of a layer")

    def kept_counts(self) -> list[int]:
        return [int(k.sum()) for k in self.keep]


def prune(cache: KVCache, rate: float, method: str = "random", seed: int = 0,
          protect: np.ndarray | None = None) -> tuple[KVCache, PruneMask]:
    """Drop ``floor(rate * n)`` tokens per layer, chosen independently per layer.

    ``random`` drops uniformly; ``key_norm`` drops the smallest-L2-norm keys (ties
    go to the lower position first). ``protect`` marks span positions that are
    never dropped; the budget is then taken from the unprotected tokens only.
    """
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"prune rate must be in [0, 1), got {rate}")
    if method not in ("random", "key_norm"):
        raise ValueError(f"unknown prune method {method!r}")
    if cache.is_pruned:
        raise CacheError("cache is already pruned")
    n = cache.n_tokens
    protect = np.zeros(n, dtype=bool) if protect is None else np.asarray(protect, dtype=bool)
    candidates = np.flatnonzero(~protect)
    n_drop = int(np.floor(rate * len(candidates) + 1e-9))
    if protect.sum() == 0:
        n_drop = min(n_drop, n - 1)
    rng = np.random.default_rng(seed)
    layers, masks = [], []
    for layer in cache.layers:
        keep = np.ones(n, dtype=bool)
        if n_drop:
            if method == "random":
                drop = rng.choice(candidates, size=n_drop, replace=False)
            else:
                norms = np.linalg.norm(layer.keys.data.reshape(n, -1), axis=1)[candidates]
                order = np.lexsort((candidates, norms))
                drop = candidates[order[:n_drop]]
            keep[drop] = False
        idx = np.flatnonzero(keep)
        layers.append(LayerKV(
            Tensor(layer.keys.data[idx]), Tensor(layer.values.data[idx]),
            cache.base_position, cache.base_position + idx,
        ))
        masks.append(keep)
    return KVCache(tuple(layers), n, cache.base_position), PruneMask(tuple(masks))


def attend_with_gaps(q: Tensor, q_positions, layer: LayerKV,
                     record: AttentionRecord | None = None) -> Tensor:
    """Attention of post-RoPE queries ``[n, H, hd]`` over a possibly pruned layer."""
    if layer.n_tokens == 0:
        raise CacheError("cannot attend over an empty cache layer")
    scale = 1.0 / np.sqrt(q.shape[-1])
    return attend(q, layer.keys, layer.values, q_positions, layer.token_positions(), scale, record)


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CacheEntry:
    doc_id: str
    cache: KVCache
    token_count: int
    created_with: str = NO_FINGERPRINT  # hex sha256 of the adapter generation, or "none"
    format_version: int = FORMAT_VERSION
    n_header: int = 0
    n_trailer: int = 0

    @classmethod
    def from_cache(cls, doc_id: str, cache: KVCache, created_with: str = NO_FINGERPRINT,
                   n_header: int = 0, n_trailer: int = 0) -> "CacheEntry":
        return cls(doc_id, cache, cache.n_tokens, created_with, FORMAT_VERSION, n_header, n_trailer)


_DOC_ID = re.compile(r"^[A-Za-z0-9_.\-]{1,200}$")


def _fp_bytes(fp: str) -> bytes:
    if fp == NO_FINGERPRINT:
        return bytes(32)
    raw = bytes.fromhex(fp)
    if len(raw) != 32:
        raise CacheFormatError("fingerprint must be a 32-byte hex digest")
    return raw


def encode_entry(entry: CacheEntry) -> bytes:
    """``KVPC`` | version | doc_id | fingerprint(32) | base | layers | tokens |
    heads | head_dim | n_header | n_trailer | per-layer K then V (f32 LE)."""
    cache = entry.cache
    if cache.is_pruned:
        raise CacheError("only contiguous caches are persisted")
    doc = entry.doc_id.encode()
    n_heads, head_dim = cache.layers[0].keys.shape[1:]
    parts = [
        _MAGIC,
        struct.pack("<I", entry.format_version),
        struct.pack("<I", len(doc)), doc,
        _fp_bytes(entry.created_with),
        struct.pack("<qIIIIII", cache.base_position, len(cache.layers), cache.n_tokens,
                    n_heads, head_dim, entry.n_header, entry.n_trailer),
    ]
    for layer in cache.layers:
        parts.append(np.ascontiguousarray(layer.keys.data, dtype="<f4").tobytes())
        parts.append(np.ascontiguousarray(layer.values.data, dtype="<f4").tobytes())
    return b"".join(parts)


def decode_entry(raw: bytes) -> CacheEntry:
    if raw[:4] != _MAGIC:
        raise CacheFormatError("not a KVPC cache file")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != FORMAT_VERSION:
        raise CacheFormatError(f"cache format version {version} != {FORMAT_VERSION}")
    (ln,) = struct.unpack_from("<I", raw, 8)
    off = 12
    doc_id = raw[off:off + ln].decode()
    off += ln
    fp = raw[off:off + 32]
    off += 32
    base, n_layers, n_tokens, n_heads, head_dim, n_h, n_t = struct.unpack_from("<qIIIIII", raw, off)
    off += struct.calcsize("<qIIIIII")
    count = n_tokens * n_heads * head_dim
    keys, values = [], []
    for _ in range(n_layers):
        for dest in (keys, values):
            arr = np.frombuffer(raw, dtype="<f4", count=count, offset=off)
            dest.append(arr.reshape(n_tokens, n_heads, head_dim).astype(np.float32))
            off += 4 * count
    if off != len(raw):
        raise CacheFormatError("trailing or missing bytes in cache file")
    cache = KVCache.from_arrays(keys, values, base)
    created = NO_FINGERPRINT if fp == bytes(32) else fp.hex()
    return CacheEntry(doc_id, cache, n_tokens, created, version, n_h, n_t)


class CacheStore:
    """Directory of ``<doc_id>.kvpc`` files plus ``index.json``; in memory when
    ``root`` is None. Reads may run concurrently, writes are serialized."""

    INDEX = "index.json"

    def __init__(self, root: str | os.PathLike | None = None):
        self.root = Path(root) if root is not None else None
        self._mem: dict[str, CacheEntry] = {}
        self._index: dict[str, dict] = {}
        self._write_lock = threading.Lock()
        if self.root is not None:
            self.root.mkdir(parents=True, exist_ok=True)
            idx = self.root / self.INDEX
            if idx.exists():
                self._index = json.loads(idx.read_text())["entries"]

    def __len__(self) -> int:
        return len(self._index) if self.root is not None else len(self._mem)

    def __contains__(self, doc_id: str) -> bool:
        return doc_id in (self._index if self.root is not None else self._mem)

    def doc_ids(self) -> list[str]:
        return sorted(self._index if self.root is not None else self._mem)

    def _path(self, doc_id: str) -> Path:
        return self.root / f"{doc_id}.kvpc"

    def put(self, entry: CacheEntry, overwrite: bool = False) -> None:
        if not _DOC_ID.match(entry.doc_id):
            raise ValueError(f"invalid doc_id {entry.doc_id!r}")
        with self._write_lock:
            if entry.doc_id in self and not overwrite:
                raise DuplicateEntryError(f"doc_id {entry.doc_id!r} already stored")
            if self.root is None:
                self._mem[entry.doc_id] = entry
                return
            raw = encode_entry(entry)
            tmp = self._path(entry.doc_id).with_suffix(".tmp")
            tmp.write_bytes(raw)
            tmp.replace(self._path(entry.doc_id))
            self._index[entry.doc_id] = {
                "token_count": entry.token_count,
                "fingerprint": entry.created_with,
                "n_header": entry.n_header,
                "n_trailer": entry.n_trailer,
                "sha256": hashlib.sha256(raw).hexdigest(),
            }
            self._mem.pop(entry.doc_id, None)
            self._write_index()

    def _write_index(self) -> None:
        payload = {"format_version": FORMAT_VERSION, "entries": dict(sorted(self._index.items()))}
        tmp = self.root / (self.INDEX + ".tmp")
        tmp.write_text(json.dumps(payload, indent=1, sort_keys=True))
        tmp.replace(self.root / self.INDEX)

    def get(self, doc_id: str) -> CacheEntry:
        if doc_id in self._mem:
            return self._mem[doc_id]
        if self.root is None or doc_id not in self._index:
            raise CacheNotFoundError(doc_id)
        entry = decode_entry(self._path(doc_id).read_bytes())
        self._mem[doc_id] = entry
        return entry

    def file_bytes(self, doc_id: str) -> int:
        """Serialized size of an entry (what a load from host memory moves)."""
        if self.root is not None and doc_id in self._index:
            return self._path(doc_id).stat().st_size
        return len(encode_entry(self.get(doc_id)))


# functional forms of CacheStore.put / CacheStore.get
def store_put(store: CacheStore, entry: CacheEntry, overwrite: bool = False) -> None:
    store.put(entry, overwrite=overwrite)


def store_get(store: CacheStore, doc_id: str) -> CacheEntry:
    return store.get(doc_id)
