"""KV Packets: document caches wrapped in shared Header/Trailer soft tokens.

A packet is built offline from ``[H; embed(doc); T]`` at position 0. At serving
time packets are realigned to consecutive offsets and concatenated; no attention
or FFN work touches document tokens after that.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from kvpacket import kvcache
from kvpacket import tensor as T
from kvpacket.kvcache import NO_FINGERPRINT, CacheEntry, CacheStore
from kvpacket.model import (
    ConfigError,
    KVCache,
    ModelConfig,
    ModelWeights,
    decode_greedy,
    embed_tokens,
    prefill,
)
from kvpacket.tensor import Tensor

DEFAULT_ADAPTER_TOKENS = 8

_MAGIC = b"KVPA"
_VERSION = 1


class CompositionError(ValueError):
    pass


class AdapterFormatError(ValueError):
    pass


@dataclass
class AdapterParams:
    """Header ``H [N_h, d]`` and trailer ``T [N_t, d]`` shared by every document."""

    header: Tensor
    trailer: Tensor
    model_hash: bytes = bytes(32)

    def __post_init__(self):
        if self.header.ndim != 2 or self.trailer.ndim != 2:
            raise ConfigError("adapters must be 2-D [n_tokens, d_model]")
        if self.header.shape[1] != self.trailer.shape[1]:
            raise ConfigError("header and trailer widths differ")

    @property
    def n_header(self) -> int:
        return self.header.shape[0]

    @property
    def n_trailer(self) -> int:
        return self.trailer.shape[0]

    @property
    def d_model(self) -> int:
        return self.header.shape[1]

    def parameters(self) -> list[Tensor]:
        return [self.header, self.trailer]

    def requires_grad_(self, flag: bool = True) -> "AdapterParams":
        for p in self.parameters():
            p.requires_grad = flag
            p.grad = None
        return self

    def copy(self) -> "AdapterParams":
        return AdapterParams(Tensor(self.header.data.copy()), Tensor(self.trailer.data.copy()), self.model_hash)

    def astype(self, dtype) -> "AdapterParams":
        return AdapterParams(Tensor(self.header.data.astype(dtype)), Tensor(self.trailer.data.astype(dtype)),
                             self.model_hash)

    def fingerprint(self) -> str:
        """Hex sha256 over adapter bytes and the model checkpoint hash."""
        h = hashlib.sha256()
        h.update(struct.pack("<II", self.n_header, self.n_trailer))
        h.update(np.ascontiguousarray(self.header.data, dtype="<f4").tobytes())
        h.update(np.ascontiguousarray(self.trailer.data, dtype="<f4").tobytes())
        h.update(self.model_hash)
        return h.hexdigest()

    def to_bytes(self) -> bytes:
        """``KVPA`` | u32 version | u32 N_h | u32 N_t | u32 d | H | T (f32 LE) | model hash."""
        return b"".join([
            _MAGIC,
            struct.pack("<IIII", _VERSION, self.n_header, self.n_trailer, self.d_model),
            np.ascontiguousarray(self.header.data, dtype="<f4").tobytes(),
            np.ascontiguousarray(self.trailer.data, dtype="<f4").tobytes(),
            self.model_hash,
        ])

    @classmethod
    def from_bytes(cls, raw: bytes) -> "AdapterParams":
        if raw[:4] != _MAGIC:
            raise AdapterFormatError("not a KVPA adapter checkpoint")
        version, n_h, n_t, d = struct.unpack_from("<IIII", raw, 4)
        if version != _VERSION:
            raise AdapterFormatError(f"unsupported adapter version {version}")
        off = 20
        h = np.frombuffer(raw, "<f4", n_h * d, off).reshape(n_h, d)
        off += 4 * n_h * d
        t = np.frombuffer(raw, "<f4", n_t * d, off).reshape(n_t, d)
        off += 4 * n_t * d
        model_hash = raw[off:off + 32]
        if len(model_hash) != 32 or off + 32 != len(raw):
            raise AdapterFormatError("truncated adapter checkpoint")
        return cls(Tensor(h.astype(np.float32)), Tensor(t.astype(np.float32)), bytes(model_hash))

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "AdapterParams":
        return cls.from_bytes(Path(path).read_bytes())


def init_adapters(weights: ModelWeights, n_header: int = DEFAULT_ADAPTER_TOKENS,
                  n_trailer: int = DEFAULT_ADAPTER_TOKENS, seed: int = 0) -> AdapterParams:
    """Sample adapter vectors from a diagonal Gaussian fitted to the token embeddings."""
    emb = weights["tok_emb"].data.astype(np.float64)
    mu, sd = emb.mean(axis=0), emb.std(axis=0)
    rng = np.random.default_rng(seed)
    h = rng.normal(mu, sd, size=(n_header, emb.shape[1]))
    t = rng.normal(mu, sd, size=(n_trailer, emb.shape[1]))
    return AdapterParams(Tensor(h.astype(np.float32)), Tensor(t.astype(np.float32)), weights.fingerprint())


def empty_adapters(config: ModelConfig, model_hash: bytes = bytes(32)) -> AdapterParams:
    z = np.zeros((0, config.d_model), dtype=np.float32)
    return AdapterParams(Tensor(z), Tensor(z.copy()), model_hash)


@dataclass(frozen=True)
class Packet:
    doc_id: str
    cache: KVCache
    doc_token_count: int
    n_header: int
    n_trailer: int
    fingerprint: str

    def __post_init__(self):
        if self.cache.n_tokens != self.n_header + self.doc_token_count + self.n_trailer:
            raise CompositionError("packet cache length disagrees with its layout")

    def to_entry(self) -> CacheEntry:
        return CacheEntry.from_cache(self.doc_id, self.cache, self.fingerprint, self.n_header, self.n_trailer)

    @classmethod
    def from_entry(cls, entry: CacheEntry) -> "Packet":
        n_doc = entry.token_count - entry.n_header - entry.n_trailer
        return cls(entry.doc_id, entry.cache, n_doc, entry.n_header, entry.n_trailer, entry.created_with)


def wrapped_embeddings(doc_token_ids: Sequence[int], adapters: AdapterParams, weights: ModelWeights) -> Tensor:
    parts = [adapters.header, embed_tokens(weights, doc_token_ids), adapters.trailer]
    return T.concat([p for p in parts if p.shape[0]], axis=0)


def wrap_cache(doc_token_ids: Sequence[int], adapters: AdapterParams, weights: ModelWeights,
               config: ModelConfig) -> KVCache:
    """Cache of ``[H; doc; T]`` prefilled in isolation at position 0 (differentiable
    in the adapters when a tape is active)."""
    if len(doc_token_ids) < 1:
        raise CompositionError("cannot wrap an empty document")
    if adapters.d_model != config.d_model:
        raise ConfigError(f"adapter width {adapters.d_model} != d_model {config.d_model}")
    return prefill(weights, config, wrapped_embeddings(doc_token_ids, adapters, weights), 0, logits=False).cache


def wrap(doc_token_ids: Sequence[int], adapters: AdapterParams, weights: ModelWeights,
         config: ModelConfig, doc_id: str = "doc") -> Packet:
    """Offline packet construction (tape-free)."""
    if T.active_tape() is not None:
        raise CompositionError("wrap() is the offline path; use wrap_cache() under a tape")
    cache = wrap_cache(doc_token_ids, adapters, weights, config)
    fp = adapters.fingerprint() if adapters.n_header + adapters.n_trailer else NO_FINGERPRINT
    return Packet(doc_id, cache, len(doc_token_ids), adapters.n_header, adapters.n_trailer, fp)


@dataclass(frozen=True)
class PacketSpans:
    header: tuple[int, int]
    doc: tuple[int, int]
    trailer: tuple[int, int]


@dataclass(frozen=True)
class ComposedContext:
    packet_ids: tuple[str, ...]
    cache: KVCache
    spans: tuple[PacketSpans, ...]
    prefix_tokens: int = 0

    def region_labels(self) -> list[str]:
        """One label per cache position: prompt | header | document | trailer."""
        labels = ["prompt"] * self.prefix_tokens
        for s in self.spans:
            labels += ["header"] * (s.header[1] - s.header[0])
            labels += ["document"] * (s.doc[1] - s.doc[0])
            labels += ["trailer"] * (s.trailer[1] - s.trailer[0])
        return labels


def compose_packets(packets: Sequence[Packet], start_position: int = 0, theta: float = 10000.0,
                    prefix_cache: KVCache | None = None) -> ComposedContext:
    """Realign packet ``i`` by the total length of packets before it and concatenate.

    With ``prefix_cache`` (the shared task prompt) packets start where it ends.
    """
    if not packets:
        raise CompositionError("nothing to compose")
    fps = {p.fingerprint for p in packets}
    if len(fps) > 1:
        raise CompositionError(f"packets from different adapter generations: {sorted(fps)}")
    if prefix_cache is not None:
        start_position = prefix_cache.end_position
    offset = start_position
    moved, spans = [], []
    for p in packets:
        moved.append(kvcache.realign(p.cache, offset - p.cache.base_position, theta))
        h0 = offset
        d0 = h0 + p.n_header
        t0 = d0 + p.doc_token_count
        spans.append(PacketSpans((h0, d0), (d0, t0), (t0, t0 + p.n_trailer)))
        offset = t0 + p.n_trailer
    parts = ([prefix_cache] if prefix_cache is not None else []) + moved
    merged = kvcache.concat(parts)
    prefix_tokens = prefix_cache.n_tokens if prefix_cache is not None else 0
    return ComposedContext(tuple(p.doc_id for p in packets), merged, tuple(spans), prefix_tokens)


def compose(packet_ids: Sequence[str], store: CacheStore, start_position: int = 0,
            theta: float = 10000.0, prefix_cache: KVCache | None = None) -> ComposedContext:
    packets = [Packet.from_entry(store.get(pid)) for pid in packet_ids]
    return compose_packets(packets, start_position, theta, prefix_cache)


def query_logits(composed: ComposedContext, query_token_ids: Sequence[int], weights: ModelWeights,
                 config: ModelConfig):
    """Prefill the query on top of the composed cache; returns (PrefillResult, merged cache)."""
    if len(query_token_ids) == 0:
        raise CompositionError("query must be non-empty")
    res = prefill(weights, config, embed_tokens(weights, query_token_ids), prefix_cache=composed.cache)
    return res, kvcache.concat([composed.cache, res.cache])


def answer(composed: ComposedContext, query_token_ids: Sequence[int], weights: ModelWeights,
           config: ModelConfig, max_new_tokens: int, stop_token: int | None = None) -> list[int]:
    res, cache = query_logits(composed, query_token_ids, weights, config)
    ids, _ = decode_greedy(weights, config, cache, res.logits, max_new_tokens, stop_token)
    return ids
