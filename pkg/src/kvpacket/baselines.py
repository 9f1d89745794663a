"""Recomputation baselines: full / none / selective repair of stale document caches.

Every policy starts from per-document caches prefilled in isolation at position 0
(the same offline artifact), realigns and concatenates them after the shared
prompt prefix, optionally recomputes a token subset with full-prefix
visibility, and only then serves the query.

The selective policies are one-shot members of their families: random ratio,
EPIC-style boundary anchors, CacheBlend-style KV deviation and A3-style
query attention.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from kvpacket import flops, kvcache
from kvpacket import tensor as T
from kvpacket.metrics import FlopsReport, flops_meter, full_prefill_flops
from kvpacket.model import (
    KVCache,
    ModelConfig,
    ModelWeights,
    _run_layers,
    decode_greedy,
    embed_tokens,
    prefill,
    project_kv,
    recompute,
    rope_angles,
)

POLICY_KINDS = ("full", "none", "random_ratio", "boundary_anchor", "deviation", "attention_topk")


@dataclass(frozen=True)
class RecomputePolicy:
    kind: str
    ratio: float = 0.0
    anchors: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in POLICY_KINDS:
            raise ValueError(f"unknown recompute policy {self.kind!r}")
        if not 0.0 <= self.ratio <= 1.0:
            raise ValueError(f"ratio must be in [0, 1], got {self.ratio}")
        if self.anchors < 0:
            raise ValueError("anchor count must be non-negative")

    @property
    def label(self) -> str:
        if self.kind in ("full", "none"):
            return self.kind
        if self.kind == "boundary_anchor":
            return f"boundary_anchor({self.anchors})"
        return f"{self.kind}({self.ratio:g})"


@dataclass
class SelectionResult:
    per_doc: list[np.ndarray]

    def __post_init__(self):
        self.per_doc = [np.asarray(ix, dtype=np.int64) for ix in self.per_doc]
        for ix in self.per_doc:
            if len(np.unique(ix)) != len(ix):
                raise ValueError("selection indices must be unique")

    @property
    def total(self) -> int:
        return int(sum(len(ix) for ix in self.per_doc))


def _budget(r: float, n: int) -> int:
    return min(n, math.ceil(r * n - 1e-9))


def _top_by_score(scores: np.ndarray, k: int) -> np.ndarray:
    # highest score first; equal scores resolved by ascending position
    order = np.lexsort((np.arange(len(scores)), -scores))
    return np.sort(order[:k])


def select_random(doc_lens: Sequence[int], r: float, seed: int = 0) -> SelectionResult:
    rng = np.random.default_rng(seed)
    return SelectionResult([np.sort(rng.choice(n, size=_budget(r, n), replace=False)) for n in doc_lens])


def select_boundary(doc_lens: Sequence[int], k: int) -> SelectionResult:
    return SelectionResult([np.arange(min(k, n)) for n in doc_lens])


@dataclass
class StaleContext:
    """Stale per-document caches realigned and joined after the prompt."""

    documents: list[list[int]]
    prefix_cache: KVCache | None
    cache: KVCache
    offsets: list[int] = field(default_factory=list)

    @property
    def prefix_len(self) -> int:
        return 0 if self.prefix_cache is None else self.prefix_cache.n_tokens

    def absolute(self, sel: SelectionResult) -> np.ndarray:
        return np.concatenate([off + ix for off, ix in zip(self.offsets, sel.per_doc)]).astype(np.int64)


def isolated_caches(documents: Sequence[Sequence[int]], weights: ModelWeights, config: ModelConfig) -> list[KVCache]:
    """Offline artifact: each document prefilled alone from position 0."""
    return [prefill(weights, config, embed_tokens(weights, d), 0, logits=False).cache for d in documents]


def stale_context(documents, weights, config, prefix_cache=None, doc_caches=None) -> StaleContext:
    """Realign + concat isolated caches (the whole of the no-recompute prep)."""
    if doc_caches is None:
        # built offline; never charged to serving
        with flops.suspended():
            doc_caches = isolated_caches(documents, weights, config)
    offset = 0 if prefix_cache is None else prefix_cache.end_position
    parts = [] if prefix_cache is None else [prefix_cache]
    offsets = []
    for c in doc_caches:
        offsets.append(offset)
        parts.append(kvcache.realign(c, offset - c.base_position, config.rope_theta))
        offset += c.n_tokens
    return StaleContext([list(d) for d in documents], prefix_cache, kvcache.concat(parts), offsets)


def select_deviation(documents, r: float, weights: ModelWeights, config: ModelConfig,
                     context: StaleContext | None = None) -> tuple[SelectionResult, list[np.ndarray]]:
    """Rank tokens by how far their second-layer K/V drift once the first block
    sees the full prefix; returns the selection and per-document deviations."""
    if not 0.0 < r <= 1.0:
        raise ValueError(f"deviation ratio must be in (0, 1], got {r}")
    if config.n_layers < 2:
        raise ValueError("deviation probe needs at least two layers")
    ctx = context or stale_context(documents, weights, config)
    ids = [t for d in documents for t in d]
    positions = np.arange(ctx.offsets[0], ctx.offsets[0] + len(ids))
    past = [ctx.prefix_cache.layers[0]] if ctx.prefix_cache is not None else None
    hidden, _ = _run_layers(weights, config, embed_tokens(weights, ids), positions, past=past, stop_after=1)
    k_new, v_new = project_kv(weights, config, 1, hidden, positions)
    stale = ctx.cache.layers[1]
    rows = positions - ctx.cache.base_position
    diff = np.concatenate([
        (k_new.data - stale.keys.data[rows]).reshape(len(ids), -1),
        (v_new.data - stale.values.data[rows]).reshape(len(ids), -1),
    ], axis=1)
    dev = np.linalg.norm(diff.astype(np.float64), axis=1)
    per_doc, picks, start = [], [], 0
    for d in documents:
        s = dev[start:start + len(d)]
        per_doc.append(s)
        picks.append(np.arange(len(d)) if r >= 1.0 else _top_by_score(s, _budget(r, len(d))))
        start += len(d)
    return SelectionResult(picks), per_doc


def select_attention_topk(documents, query: Sequence[int], r: float, weights: ModelWeights,
                          config: ModelConfig, context: StaleContext | None = None
                          ) -> tuple[SelectionResult, list[np.ndarray]]:
    """Rank document tokens by first-layer query attention over the stale cache
    (mean over heads and query tokens)."""
    ctx = context or stale_context(documents, weights, config)
    layer = ctx.cache.layers[0]
    q_pos = np.arange(ctx.cache.end_position, ctx.cache.end_position + len(query))
    h = T.rms_norm(embed_tokens(weights, query), weights["layers.0.attn_norm"])
    q = (h @ weights["layers.0.wq"]).reshape(len(query), config.n_heads, config.head_dim)
    cos, sin = rope_angles(q_pos, config.head_dim, config.rope_theta)
    q = T.rotate_pairs(q, cos, sin)
    qh = q.transpose(1, 0, 2)
    kt = layer.keys.transpose(1, 2, 0)
    probs = T.softmax((qh @ kt) * (1.0 / np.sqrt(config.head_dim)), axis=-1).data
    score = probs.mean(axis=(0, 1)).astype(np.float64)
    per_doc, picks = [], []
    for off, d in zip(ctx.offsets, documents):
        s = score[off - ctx.cache.base_position: off - ctx.cache.base_position + len(d)]
        per_doc.append(s)
        picks.append(np.arange(len(d)) if r >= 1.0 else _top_by_score(s, _budget(r, len(d))))
    return SelectionResult(picks), per_doc


@dataclass
class Prepared:
    cache: KVCache
    selection: SelectionResult
    meter: flops.FlopsMeter


def prepare(policy: RecomputePolicy, documents, weights, config, prefix_cache=None,
            doc_caches=None, query=None) -> Prepared:
    """Serving-time preparation under a FLOPs meter (query not included)."""
    if not documents:
        raise ValueError("documents must be non-empty")
    lens = [len(d) for d in documents]
    meter = flops.FlopsMeter()
    with meter:
        if policy.kind == "full":
            ids = [t for d in documents for t in d]
            res = prefill(weights, config, embed_tokens(weights, ids), prefix_cache=prefix_cache,
                          start_position=None if prefix_cache is not None else 0, logits=False)
            cache = res.cache if prefix_cache is None else kvcache.concat([prefix_cache, res.cache])
            return Prepared(cache, SelectionResult([np.arange(n) for n in lens]), meter)
        ctx = stale_context(documents, weights, config, prefix_cache, doc_caches)
        if policy.kind == "none":
            sel = SelectionResult([np.zeros(0, np.int64) for _ in lens])
        elif policy.kind == "random_ratio":
            sel = select_random(lens, policy.ratio, policy.seed)
        elif policy.kind == "boundary_anchor":
            sel = select_boundary(lens, policy.anchors)
        else:
            with meter.category(flops.SELECTION):
                if policy.kind == "deviation":
                    sel, _ = select_deviation(documents, policy.ratio, weights, config, ctx)
                else:
                    if query is None:
                        raise ValueError("attention_topk needs the query")
                    sel, _ = select_attention_topk(documents, query, policy.ratio, weights, config, ctx)
        cache = ctx.cache
        if sel.total:
            pos = ctx.absolute(sel)
            flat = [t for d in documents for t in d]
            ids = [flat[p - ctx.offsets[0]] for p in pos]
            cache = recompute(weights, config, ctx.cache, ids, pos)
    return Prepared(cache, sel, meter)


def answer_from(cache: KVCache, query: Sequence[int], weights, config, max_new_tokens: int,
                stop_token: int | None = None):
    """Prefill the query against a prepared cache and decode greedily.

    Returns (generated ids, first-step logits row)."""
    res = prefill(weights, config, embed_tokens(weights, query), prefix_cache=cache, logits="last")
    joined = kvcache.concat([cache, res.cache])
    ids, _ = decode_greedy(weights, config, joined, res.logits, max_new_tokens, stop_token)
    return ids, res.logits.data[-1]


def run_baseline(policy: RecomputePolicy, documents, query, weights, config, max_new_tokens: int = 2,
                 prefix_tokens: Sequence[int] = (), doc_caches=None):
    """Full serving path for one policy.

    Returns (generated ids, FlopsReport, SelectionResult). ``prefix_tokens`` (the
    task prompt) is prefilled normally and shared by every policy.
    """
    prefix_cache = None
    if len(prefix_tokens):
        prefix_cache = prefill(weights, config, embed_tokens(weights, prefix_tokens), 0, logits=False).cache
    prep = prepare(policy, documents, weights, config, prefix_cache, doc_caches, query)
    ids, _ = answer_from(prep.cache, query, weights, config, max_new_tokens)
    ref = full_prefill_flops(config, len(prefix_tokens), [len(d) for d in documents])
    return ids, flops_meter(prep.meter, ref), prep.selection


def baseline_logits(policy: RecomputePolicy, documents, query, weights, config,
                    prefix_tokens: Sequence[int] = ()) -> np.ndarray:
    """Query logits (all query positions) after preparing with ``policy``."""
    prefix_cache = None
    if len(prefix_tokens):
        prefix_cache = prefill(weights, config, embed_tokens(weights, prefix_tokens), 0, logits=False).cache
    prep = prepare(policy, documents, weights, config, prefix_cache, None, query)
    return prefill(weights, config, embed_tokens(weights, query), prefix_cache=prep.cache).logits.data


__all__ = [
    "FlopsReport",
    "POLICY_KINDS",
    "Prepared",
    "RecomputePolicy",
    "SelectionResult",
    "StaleContext",
    "answer_from",
    "baseline_logits",
    "isolated_caches",
    "prepare",
    "run_baseline",
    "select_attention_topk",
    "select_boundary",
    "select_deviation",
    "select_random",
    "stale_context",
]
