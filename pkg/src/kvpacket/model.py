"""Decoder-only RoPE transformer whose forward pass consumes and emits KV caches.

Pre-norm RMSNorm blocks with a SiLU-gated FFN. Keys are cached *after* rotary
embedding at their absolute positions, so a cache can be moved to a new offset
by a pure rotation (see :func:`kvpacket.kvcache.realign`).

Inputs are embeddings rather than token ids so soft adapter vectors can be
spliced in front of / behind document tokens.
"""

from __future__ import annotations

import hashlib
import io
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from kvpacket import tensor as T
from kvpacket.tensor import Tensor


class ConfigError(ValueError):
    pass


class PositionRangeError(IndexError):
    pass


class CheckpointFormatError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 512
    d_model: int = 128
    n_layers: int = 4
    n_heads: int = 4
    head_dim: int = 32
    ffn_dim: int = 512
    rope_theta: float = 10000.0
    max_position: int = 2048

    def __post_init__(self):
        if self.head_dim % 2:
            raise ConfigError(f"head_dim must be even for RoPE, got {self.head_dim}")
        if self.d_model != self.n_heads * self.head_dim:
            raise ConfigError(
                f"d_model ({self.d_model}) != n_heads ({self.n_heads}) * head_dim ({self.head_dim})"
            )
        if min(self.vocab_size, self.n_layers, self.n_heads, self.ffn_dim, self.max_position) < 1:
            raise ConfigError("model dimensions must be positive")
        if self.rope_theta <= 0:
            raise ConfigError("rope_theta must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


# ---------------------------------------------------------------------------
# Weights
# ---------------------------------------------------------------------------


def _layer_names(i: int) -> list[str]:
    p = f"layers.{i}."
    return [p + n for n in ("attn_norm", "wq", "wk", "wv", "wo", "ffn_norm", "w_gate", "w_up", "w_down")]


def weight_names(config: ModelConfig) -> list[str]:
    names = ["tok_emb"]
    for i in range(config.n_layers):
        names += _layer_names(i)
    return names + ["final_norm", "lm_head"]


@dataclass
class ModelWeights:
    config: ModelConfig
    tensors: dict[str, Tensor]

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    @classmethod
    def init(cls, config: ModelConfig, seed: int) -> "ModelWeights":
        rng = np.random.default_rng(seed)
        d, f = config.d_model, config.ffn_dim
        out_std = 0.02 / np.sqrt(2 * config.n_layers)
        shapes = {
            "tok_emb": ((config.vocab_size, d), 1.0),
            "final_norm": ((d,), None),
            "lm_head": ((d, config.vocab_size), 1.0 / np.sqrt(d)),
        }
        for i in range(config.n_layers):
            p = f"layers.{i}."
            shapes.update({
                p + "attn_norm": ((d,), None),
                p + "wq": ((d, d), 1.0 / np.sqrt(d)),
                p + "wk": ((d, d), 1.0 / np.sqrt(d)),
                p + "wv": ((d, d), 1.0 / np.sqrt(d)),
                p + "wo": ((d, d), out_std),
                p + "ffn_norm": ((d,), None),
                p + "w_gate": ((d, f), 1.0 / np.sqrt(d)),
                p + "w_up": ((d, f), 1.0 / np.sqrt(d)),
                p + "w_down": ((f, d), out_std),
            })
        tensors = {}
        for name in weight_names(config):
            shape, std = shapes[name]
            data = np.ones(shape) if std is None else rng.normal(0.0, std, size=shape)
            tensors[name] = Tensor(data.astype(T.DTYPE), name=name)
        return cls(config, tensors)

    def set_trainable(self, flag: bool) -> None:
        for t in self.tensors.values():
            t.requires_grad = flag
            t.grad = None

    def freeze(self) -> "ModelWeights":
        self.set_trainable(False)
        return self

    def parameters(self) -> list[Tensor]:
        return [self.tensors[n] for n in weight_names(self.config)]

    def astype(self, dtype) -> "ModelWeights":
        return ModelWeights(self.config, {k: Tensor(v.data.astype(dtype), name=k) for k, v in self.tensors.items()})

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        save_checkpoint(self, buf)
        return buf.getvalue()

    def fingerprint(self) -> bytes:
        """sha256 over the serialized checkpoint."""
        return hashlib.sha256(self.to_bytes()).digest()


_WEIGHTS_MAGIC = b"KVPW"
_WEIGHTS_VERSION = 1


def save_checkpoint(weights: ModelWeights, dest) -> None:
    """Write ``KVPW`` | u32 version | u32 len + config JSON | u32 count | tensors."""
    cfg = json.dumps(weights.config.to_dict(), sort_keys=True).encode()
    own = isinstance(dest, (str, Path))
    fh = open(dest, "wb") if own else dest
    try:
        fh.write(_WEIGHTS_MAGIC)
        fh.write(struct.pack("<I", _WEIGHTS_VERSION))
        fh.write(struct.pack("<I", len(cfg)))
        fh.write(cfg)
        names = weight_names(weights.config)
        fh.write(struct.pack("<I", len(names)))
        for name in names:
            arr = np.ascontiguousarray(weights[name].data, dtype="<f4")
            raw = name.encode()
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(arr.tobytes())
    finally:
        if own:
            fh.close()


def _read_exact(fh, n: int) -> bytes:
    b = fh.read(n)
    if len(b) != n:
        raise CheckpointFormatError("truncated checkpoint")
    return b


def load_checkpoint(src) -> ModelWeights:
    own = isinstance(src, (str, Path))
    fh = open(src, "rb") if own else src
    try:
        if _read_exact(fh, 4) != _WEIGHTS_MAGIC:
            raise CheckpointFormatError("not a KVPW checkpoint")
        (version,) = struct.unpack("<I", _read_exact(fh, 4))
        if version != _WEIGHTS_VERSION:
            raise CheckpointFormatError(f"unsupported checkpoint version {version}")
        (n,) = struct.unpack("<I", _read_exact(fh, 4))
        config = ModelConfig.from_dict(json.loads(_read_exact(fh, n)))
        (count,) = struct.unpack("<I", _read_exact(fh, 4))
        tensors = {}
        for _ in range(count):
            (ln,) = struct.unpack("<I", _read_exact(fh, 4))
            name = _read_exact(fh, ln).decode()
            (rank,) = struct.unpack("<I", _read_exact(fh, 4))
            dims = struct.unpack(f"<{rank}Q", _read_exact(fh, 8 * rank))
            size = int(np.prod(dims)) if rank else 1
            data = np.frombuffer(_read_exact(fh, 4 * size), dtype="<f4").reshape(dims)
            tensors[name] = Tensor(data.astype(np.float32), name=name)
    finally:
        if own:
            fh.close()
    missing = set(weight_names(config)) - set(tensors)
    if missing:
        raise CheckpointFormatError(f"checkpoint missing tensors: {sorted(missing)}")
    return ModelWeights(config, tensors)


# ---------------------------------------------------------------------------
# KV cache types
# ---------------------------------------------------------------------------


class CacheError(ValueError):
    pass


@dataclass(frozen=True)
class LayerKV:
    """Post-RoPE keys and values ``[n_tokens, n_heads, head_dim]`` for one layer.

    ``positions`` is only set for pruned (non-contiguous) layers; otherwise the
    tokens occupy ``base_position, base_position + 1, ...``.
    """

    keys: Tensor
    values: Tensor
    base_position: int
    positions: np.ndarray | None = None

    def __post_init__(self):
        if self.keys.shape != self.values.shape:
            raise CacheError(f"keys {self.keys.shape} and values {self.values.shape} differ")
        if self.base_position < 0:
            raise CacheError(f"negative base_position {self.base_position}")
        if self.positions is not None and len(self.positions) != self.keys.shape[0]:
            raise CacheError("positions length does not match token count")

    @property
    def n_tokens(self) -> int:
        return self.keys.shape[0]

    def token_positions(self) -> np.ndarray:
        if self.positions is not None:
            return self.positions
        return np.arange(self.base_position, self.base_position + self.n_tokens)


@dataclass(frozen=True)
class KVCache:
    """One :class:`LayerKV` per model layer over a span of ``n_tokens`` positions.

    A pruned cache still reports the full span in ``n_tokens``; its layers hold
    subsets (with explicit positions) of that span.
    """

    layers: tuple[LayerKV, ...]
    n_tokens: int
    base_position: int = 0

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        for layer in self.layers:
            if layer.base_position != self.base_position:
                raise CacheError("all layers must share base_position")
            if layer.positions is None and layer.n_tokens != self.n_tokens:
                raise CacheError(f"layer has {layer.n_tokens} entries, cache spans {self.n_tokens}")

    @property
    def end_position(self) -> int:
        return self.base_position + self.n_tokens

    @property
    def is_pruned(self) -> bool:
        return any(layer.positions is not None for layer in self.layers)

    @classmethod
    def from_arrays(cls, keys: Sequence[np.ndarray], values: Sequence[np.ndarray], base_position: int = 0) -> "KVCache":
        layers = [LayerKV(Tensor(k), Tensor(v), base_position) for k, v in zip(keys, values)]
        return cls(tuple(layers), layers[0].n_tokens if layers else 0, base_position)

    def nbytes(self) -> int:
        return sum(l.keys.data.nbytes + l.values.data.nbytes for l in self.layers)


@dataclass
class AttentionRecord:
    """Per-layer attention probabilities ``[n_heads, n_queries, n_keys]``."""

    probs: list[np.ndarray] = field(default_factory=list)
    query_positions: np.ndarray | None = None
    key_positions: list[np.ndarray] = field(default_factory=list)


class PrefillResult(NamedTuple):
    cache: KVCache
    logits: Tensor | None
    attn_record: AttentionRecord | None


# ---------------------------------------------------------------------------
# RoPE
# ---------------------------------------------------------------------------


def rope_angles(positions, head_dim: int, theta: float) -> tuple[np.ndarray, np.ndarray]:
    """cos/sin tables ``[n, 1, head_dim/2]``; angles are formed in float64."""
    if head_dim % 2:
        raise ConfigError(f"head_dim must be even for RoPE, got {head_dim}")
    inv_freq = theta ** (-np.arange(0, head_dim, 2, dtype=np.float64) / head_dim)
    ang = np.asarray(positions, dtype=np.float64)[:, None] * inv_freq[None, :]
    return np.cos(ang)[:, None, :], np.sin(ang)[:, None, :]


def rope_rotate(x: Tensor, positions, theta: float) -> Tensor:
    """Rotate ``x [n, heads, head_dim]`` pairwise by ``pos * theta^(-2j/head_dim)``."""
    positions = np.asarray(positions)
    if x.shape[-1] % 2:
        raise ConfigError(f"head_dim must be even for RoPE, got {x.shape[-1]}")
    if len(positions) != x.shape[-3]:
        raise ConfigError(f"{len(positions)} positions for {x.shape[-3]} tokens")
    cos, sin = rope_angles(positions, x.shape[-1], theta)
    return T.rotate_pairs(x, cos, sin)


# ---------------------------------------------------------------------------
# Forward
# ---------------------------------------------------------------------------


def _heads_first(t: Tensor) -> Tensor:
    # [..., L, H, hd] -> [..., H, L, hd]
    axes = list(range(t.ndim))
    axes[-3], axes[-2] = axes[-2], axes[-3]
    return t.transpose(axes)


def embed_tokens(weights: ModelWeights, token_ids) -> Tensor:
    return T.embedding(weights["tok_emb"], np.asarray(token_ids, dtype=np.int64))


def _run_layers(weights, config, x, positions, past=None, replace=False, record=None, stop_after=None):
    """Run the first ``stop_after`` (default all) blocks; returns hidden states and
    the new tokens' post-RoPE ``(k, v)`` per layer.

    ``past`` is a list of LayerKV visible to the new tokens. With ``replace`` the
    new tokens already live inside ``past`` (selective recomputation) and their
    fresh K/V overwrite the stale entries at the same positions.
    """
    positions = np.asarray(positions, dtype=np.int64)
    n_new = positions.shape[0]
    cos, sin = rope_angles(positions, config.head_dim, config.rope_theta)
    scale = 1.0 / np.sqrt(config.head_dim)
    lead = x.shape[:-2]
    new_kv = []
    n_layers = config.n_layers if stop_after is None else stop_after
    for i in range(n_layers):
        p = f"layers.{i}."
        h = T.rms_norm(x, weights[p + "attn_norm"])
        split = lead + (n_new, config.n_heads, config.head_dim)
        q = T.rotate_pairs((h @ weights[p + "wq"]).reshape(split), cos, sin)
        k = T.rotate_pairs((h @ weights[p + "wk"]).reshape(split), cos, sin)
        v = (h @ weights[p + "wv"]).reshape(split)
        new_kv.append((k, v))

        layer_past = past[i] if past is not None else None
        if layer_past is None:
            keys, values, key_pos = k, v, positions
        elif replace:
            key_pos = layer_past.token_positions()
            idx = np.searchsorted(key_pos, positions)
            if np.any(idx >= len(key_pos)) or np.any(key_pos[np.minimum(idx, len(key_pos) - 1)] != positions):
                raise CacheError("recomputed positions are not present in the cache")
            kd = layer_past.keys.data.copy()
            vd = layer_past.values.data.copy()
            kd[idx] = k.data
            vd[idx] = v.data
            keys, values = Tensor(kd), Tensor(vd)
        else:
            key_pos = np.concatenate([layer_past.token_positions(), positions])
            keys = T.concat([layer_past.keys, k], axis=0)
            values = T.concat([layer_past.values, v], axis=0)

        out = attend(q, keys, values, positions, key_pos, scale, record)
        attn = out.reshape(lead + (n_new, config.d_model))
        x = x + attn @ weights[p + "wo"]

        h2 = T.rms_norm(x, weights[p + "ffn_norm"])
        x = x + (T.silu(h2 @ weights[p + "w_gate"]) * (h2 @ weights[p + "w_up"])) @ weights[p + "w_down"]
    return x, new_kv


def project_kv(weights: ModelWeights, config: ModelConfig, layer: int, hidden: Tensor, positions):
    """K/V that block ``layer`` would cache for residual-stream ``hidden [n, d]``."""
    positions = np.asarray(positions)
    cos, sin = rope_angles(positions, config.head_dim, config.rope_theta)
    p = f"layers.{layer}."
    h = T.rms_norm(hidden, weights[p + "attn_norm"])
    split = (len(positions), config.n_heads, config.head_dim)
    k = T.rotate_pairs((h @ weights[p + "wk"]).reshape(split), cos, sin)
    v = (h @ weights[p + "wv"]).reshape(split)
    return k, v


def attend(q: Tensor, keys: Tensor, values: Tensor, q_pos, key_pos, scale: float,
           record: AttentionRecord | None = None) -> Tensor:
    """Causal multi-head attention by absolute position.

    ``q [..., n, H, hd]`` attends to ``keys/values [..., N, H, hd]``; key ``j`` is
    visible to query ``i`` iff ``key_pos[j] <= q_pos[i]``. Key positions need not
    be contiguous. Returns ``[..., n, H, hd]``.
    """
    q_pos = np.asarray(q_pos)
    key_pos = np.asarray(key_pos)
    mask = np.where(key_pos[None, :] > q_pos[:, None], -np.inf, 0.0).astype(q.dtype)
    qh = _heads_first(q)
    kh = _heads_first(keys)
    vh = _heads_first(values)
    kt = kh.transpose(list(range(kh.ndim - 2)) + [kh.ndim - 1, kh.ndim - 2])
    probs = T.softmax((qh @ kt) * scale + mask, axis=-1)
    if record is not None:
        record.probs.append(probs.data.copy())
        record.key_positions.append(key_pos.copy())
    return _heads_first(probs @ vh)


def lm_logits(weights: ModelWeights, hidden: Tensor) -> Tensor:
    return T.rms_norm(hidden, weights["final_norm"]) @ weights["lm_head"]


def prefill(
    weights: ModelWeights,
    config: ModelConfig,
    embeddings: Tensor,
    start_position: int | None = None,
    prefix_cache: KVCache | None = None,
    record_attention: bool = False,
    logits: str | bool = True,
) -> PrefillResult:
    """Causal forward over ``embeddings [L, d]`` attending to ``prefix_cache``.

    ``logits`` may be True (all positions), ``"last"`` or False (skip the LM head,
    e.g. when only the cache is wanted).
    """
    if embeddings.ndim != 2 or embeddings.shape[1] != config.d_model:
        raise ConfigError(f"embeddings must be [L, {config.d_model}], got {embeddings.shape}")
    n = embeddings.shape[0]
    if prefix_cache is not None:
        expected = prefix_cache.end_position
        if start_position is None:
            start_position = expected
        elif start_position != expected:
            raise PositionRangeError(
                f"start_position {start_position} does not follow prefix ending at {expected}"
            )
    start_position = 0 if start_position is None else int(start_position)
    if start_position < 0:
        raise PositionRangeError(f"negative start_position {start_position}")
    if start_position + n > config.max_position:
        raise PositionRangeError(
            f"positions up to {start_position + n - 1} exceed max_position {config.max_position}"
        )
    positions = np.arange(start_position, start_position + n)
    record = AttentionRecord(query_positions=positions) if record_attention else None
    past = list(prefix_cache.layers) if prefix_cache is not None else None
    hidden, new_kv = _run_layers(weights, config, embeddings, positions, past=past, record=record)
    cache = KVCache(tuple(LayerKV(k, v, start_position) for k, v in new_kv), n, start_position)
    out = None
    if logits == "last":
        out = lm_logits(weights, hidden[n - 1:n])
    elif logits:
        out = lm_logits(weights, hidden)
    return PrefillResult(cache, out, record)


def recompute(
    weights: ModelWeights,
    config: ModelConfig,
    cache: KVCache,
    token_ids: Sequence[int],
    positions: Sequence[int],
) -> KVCache:
    """Recompute K/V for tokens at ``positions`` (ascending) with full visibility
    of ``cache``; returns a cache whose entries at those positions are replaced.

    Layers run in order, so layer ``i`` of the recomputed tokens already sees the
    repaired entries of layer ``i - 1``.
    """
    positions = np.asarray(positions, dtype=np.int64)
    if len(positions) == 0:
        return cache
    if T.active_tape() is not None:
        raise CacheError("recompute is an inference-only path")
    _, new_kv = _run_layers(weights, config, embed_tokens(weights, token_ids), positions,
                            past=list(cache.layers), replace=True)
    layers = []
    for layer, (k, v) in zip(cache.layers, new_kv):
        idx = np.searchsorted(layer.token_positions(), positions)
        kd = layer.keys.data.copy()
        vd = layer.values.data.copy()
        kd[idx] = k.data
        vd[idx] = v.data
        layers.append(LayerKV(Tensor(kd), Tensor(vd), layer.base_position, layer.positions))
    return KVCache(tuple(layers), cache.n_tokens, cache.base_position)


def generate(
    weights: ModelWeights,
    config: ModelConfig,
    context_token_ids: Sequence[int],
    max_new_tokens: int,
    stop_token: int | None = None,
    prefix_cache: KVCache | None = None,
) -> tuple[list[int], Tensor]:
    """Greedy decoding; returns generated ids and the softmax at every step."""
    if len(context_token_ids) == 0:
        raise ConfigError("generate needs a non-empty context")
    ids = list(context_token_ids)
    res = prefill(weights, config, embed_tokens(weights, ids), prefix_cache=prefix_cache, logits="last")
    return decode_greedy(weights, config, res.cache if prefix_cache is None else _join(prefix_cache, res.cache),
                         res.logits, max_new_tokens, stop_token)


def _join(a: KVCache, b: KVCache) -> KVCache:
    layers = []
    for la, lb in zip(a.layers, b.layers):
        layers.append(LayerKV(T.concat([la.keys, lb.keys]), T.concat([la.values, lb.values]), a.base_position,
                              None if la.positions is None and lb.positions is None
                              else np.concatenate([la.token_positions(), lb.token_positions()])))
    return KVCache(tuple(layers), b.end_position - a.base_position, a.base_position)


def decode_greedy(weights, config, cache: KVCache, last_logits: Tensor, max_new_tokens: int,
                  stop_token: int | None = None) -> tuple[list[int], Tensor]:
    """Continue greedily from ``last_logits`` (the prediction after ``cache``)."""
    out_ids: list[int] = []
    dists: list[np.ndarray] = []
    logits = last_logits.data[-1]
    for step in range(max_new_tokens):
        probs = T.softmax(Tensor(logits)).data
        tok = int(np.argmax(probs))
        out_ids.append(tok)
        dists.append(probs)
        if (stop_token is not None and tok == stop_token) or step == max_new_tokens - 1:
            break
        res = prefill(weights, config, embed_tokens(weights, [tok]), prefix_cache=cache, logits="last")
        cache = _join(cache, res.cache)
        logits = res.logits.data[-1]
    if not dists:
        return [], Tensor(np.zeros((0, config.vocab_size), dtype=T.DTYPE))
    return out_ids, Tensor(np.stack(dists))
