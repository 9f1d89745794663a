"""Query-to-context attention profiles for the no-recompute and packet strategies.

Each profile is indexed by packet-layout position so the two strategies line up:
the no-recompute document tokens are mapped to where the same tokens sit once
adapters are inserted, leaving header/trailer slots empty for that strategy.
Rows are normalized per (layer, head, query token) by the softmax itself and
averaged afterwards.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from kvpacket import tasks
from kvpacket.baselines import stale_context
from kvpacket.model import AttentionRecord, ModelConfig, ModelWeights, embed_tokens, prefill
from kvpacket.packet import AdapterParams, compose_packets, wrap

REGIONS = ("prompt", "header", "document", "trailer")
ROW_SUM_TOL = 1e-5


class ProfileError(ValueError):
    pass


@dataclass
class AttnProfile:
    strategy: str
    scores: np.ndarray  # [n_positions], NaN where the strategy has no token
    labels: list[str]
    doc_starts: list[int]
    n_samples: int
    max_row_error: float
    raw: list[np.ndarray] = field(default_factory=list, repr=False)

    def region_means(self) -> dict[str, float]:
        """Mean score per region plus ``doc_first`` / ``doc_interior``."""
        labels = np.array(self.labels)
        out = {}
        for reg in REGIONS:
            vals = self.scores[(labels == reg) & ~np.isnan(self.scores)]
            out[reg] = float(vals.mean()) if len(vals) else float("nan")
        first = np.zeros(len(labels), dtype=bool)
        first[self.doc_starts] = True
        doc = (labels == "document") & ~np.isnan(self.scores)
        out["doc_first"] = float(self.scores[doc & first].mean())
        out["doc_interior"] = float(self.scores[doc & ~first].mean())
        adapters = np.isin(labels, ("header", "trailer")) & ~np.isnan(self.scores)
        out["adapter"] = float(self.scores[adapters].mean()) if adapters.any() else float("nan")
        return out

    def rows(self) -> list[dict]:
        return [{"position": i, "region": lab, "mean_score": float(s), "strategy": self.strategy}
                for i, (lab, s) in enumerate(zip(self.labels, self.scores)) if not np.isnan(s)]


def _layout(prompt_len: int, doc_lens: Sequence[int], n_h: int, n_t: int):
    labels = ["prompt"] * prompt_len
    starts, doc_slots = [], []
    for n in doc_lens:
        labels += ["header"] * n_h
        starts.append(len(labels))
        doc_slots.append(np.arange(len(labels), len(labels) + n))
        labels += ["document"] * n + ["trailer"] * n_t
    return labels, starts, doc_slots


def _query_scores(record: AttentionRecord, n_context: int) -> tuple[np.ndarray, float]:
    """Mean over layers, heads and query tokens of attention paid to each context key."""
    err = 0.0
    acc = np.zeros(n_context, dtype=np.float64)
    for probs in record.probs:
        err = max(err, float(np.abs(probs.sum(axis=-1) - 1.0).max()))
        acc += probs[..., :n_context].astype(np.float64).mean(axis=(0, 1))
    return acc / len(record.probs), err


def attn_profile(strategy: str, instances: Sequence[tasks.TaskInstance], weights: ModelWeights,
                 config: ModelConfig, adapters: AdapterParams | None = None) -> AttnProfile:
    """Average query-to-context attention over ``instances`` (same layout required).

    ``adapters`` fixes the shared layout; for ``none`` it only decides where the
    document tokens are placed.
    """
    if strategy not in ("none", "packet"):
        raise ProfileError(f"attention profiles cover 'none' and 'packet', not {strategy!r}")
    if not instances:
        raise ProfileError("no instances to profile")
    if strategy == "packet" and adapters is None:
        raise ProfileError("packet profile needs adapters")
    n_h = adapters.n_header if adapters is not None else 0
    n_t = adapters.n_trailer if adapters is not None else 0
    first = instances[0]
    shape = (len(first.prompt), tuple(len(d) for d in first.documents))
    labels, starts, slots = _layout(shape[0], shape[1], n_h, n_t)
    total = np.zeros(len(labels))
    raw, worst = [], 0.0
    for inst in instances:
        if (len(inst.prompt), tuple(len(d) for d in inst.documents)) != shape:
            raise ProfileError("instances must share prompt and document lengths")
        prompt_cache = prefill(weights, config, embed_tokens(weights, inst.prompt), 0, logits=False).cache
        if strategy == "packet":
            packets = [wrap(d, adapters, weights, config, f"p{i}") for i, d in enumerate(inst.documents)]
            ctx = compose_packets(packets, theta=config.rope_theta, prefix_cache=prompt_cache).cache
        else:
            ctx = stale_context(inst.documents, weights, config, prompt_cache).cache
        res = prefill(weights, config, embed_tokens(weights, inst.query), prefix_cache=ctx,
                      record_attention=True, logits=False)
        scores, err = _query_scores(res.attn_record, ctx.n_tokens)
        worst = max(worst, err)
        if strategy == "packet":
            aligned = scores
        else:
            aligned = np.full(len(labels), np.nan)
            aligned[:shape[0]] = scores[:shape[0]]
            off = shape[0]
            for slot in slots:
                aligned[slot] = scores[off:off + len(slot)]
                off += len(slot)
        raw.append(aligned)
        total += aligned
    return AttnProfile(strategy, total / len(instances), labels, starts, len(instances), worst, raw)


def write_profiles(profiles: Sequence[AttnProfile], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["position", "region", "mean_score", "strategy"])
        w.writeheader()
        for p in profiles:
            w.writerows(p.rows())


def read_profile_rows(path) -> list[dict]:
    with open(Path(path), newline="") as fh:
        return [{**r, "position": int(r["position"]), "mean_score": float(r["mean_score"])}
                for r in csv.DictReader(fh)]
