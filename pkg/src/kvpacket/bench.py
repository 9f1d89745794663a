"""Benchmark harness: serving strategies, F1 / FLOPs / TTFT rows and summaries.

A strategy turns offline artifacts for one task instance (isolated document
caches, adapter-wrapped packets) into a context cache, then answers the query.
Offline construction is excluded from every measurement.
"""

from __future__ import annotations

import csv
import json
import re
import statistics
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from kvpacket import flops, kvcache, tasks
from kvpacket.baselines import RecomputePolicy, answer_from, isolated_caches, prepare
from kvpacket.kvcache import CacheEntry, encode_entry
from kvpacket.metrics import FlopsReport, TtftReport, f1_score, flops_meter, full_prefill_flops, transfer_seconds
from kvpacket.model import KVCache, ModelConfig, ModelWeights, embed_tokens, prefill
from kvpacket.packet import AdapterParams, Packet, compose_packets, wrap

DEFAULT_BANDWIDTH_GBPS = 8.0
DEFAULT_REPS = 5

RESULT_COLUMNS = (
    "strategy", "policy_params", "domain", "instance_id", "f1", "realign_ops", "forward_flops",
    "selection_flops", "total_flops", "relative_flops", "load_s", "prep_s", "query_s", "ttft_s",
)

_SELECTIVE = ("random_ratio", "boundary_anchor", "deviation", "attention_topk")
_KINDS = ("full", "none", "packet", "no_cache") + _SELECTIVE


class BenchConfigError(ValueError):
    pass


class InvariantViolation(AssertionError):
    pass


@dataclass(frozen=True)
class Strategy:
    """One serving strategy; ``param`` is the ratio or anchor count of a selective policy."""

    kind: str
    param: float = 0.0
    prune_rate: float = 0.0
    prune_method: str = "random"
    seed: int = 0

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise BenchConfigError(f"unknown strategy {self.kind!r}; choose from {_KINDS}")
        if self.prune_rate and self.kind not in ("packet", "none"):
            raise BenchConfigError("pruning applies to the packet and none strategies only")
        if not 0.0 <= self.prune_rate < 1.0:
            raise BenchConfigError(f"prune rate must be in [0, 1), got {self.prune_rate}")

    @property
    def name(self) -> str:
        return self.kind

    @property
    def policy_params(self) -> str:
        parts = []
        if self.kind == "boundary_anchor":
            parts.append(f"anchors={int(self.param)}")
        elif self.kind in _SELECTIVE:
            parts.append(f"r={self.param:g}")
        if self.prune_rate:
            parts.append(f"prune={self.prune_method}:{self.prune_rate:g}")
        return ";".join(parts)

    @property
    def label(self) -> str:
        p = self.policy_params
        return f"{self.kind}[{p}]" if p else self.kind

    def policy(self) -> RecomputePolicy:
        if self.kind in ("packet", "no_cache"):
            raise BenchConfigError(f"{self.kind} is not a recompute policy")
        if self.kind == "boundary_anchor":
            return RecomputePolicy(self.kind, anchors=int(self.param), seed=self.seed)
        return RecomputePolicy(self.kind, ratio=float(self.param), seed=self.seed)


_SPEC = re.compile(r"^(?P<kind>[a-z_]+)(?:=(?P<param>[0-9.]+))?(?:\+(?P<method>random|key_norm)_prune=(?P<rate>[0-9.]+))?$")


def parse_strategy(text: str) -> Strategy:
    """``packet``, ``random_ratio=0.3``, ``boundary_anchor=4``, ``packet+random_prune=0.3``."""
    m = _SPEC.match(text.strip())
    if not m:
        raise BenchConfigError(f"cannot parse strategy {text!r}")
    kind = m["kind"]
    if kind in _SELECTIVE and m["param"] is None:
        raise BenchConfigError(f"{kind} needs a parameter, e.g. {kind}=0.3")
    if kind not in _SELECTIVE and m["param"] is not None:
        raise BenchConfigError(f"{kind} takes no parameter")
    return Strategy(kind, float(m["param"] or 0.0), float(m["rate"] or 0.0), m["method"] or "random")


@dataclass
class Offline:
    """Per-instance artifacts built ahead of serving."""

    instance: tasks.TaskInstance
    doc_caches: list[KVCache]
    packets: list[Packet] | None
    doc_bytes: int
    packet_bytes: int


@dataclass
class Bench:
    weights: ModelWeights
    config: ModelConfig
    adapters: AdapterParams | None = None
    bandwidth_gbps: float = DEFAULT_BANDWIDTH_GBPS
    max_new_tokens: int = tasks.ANSWER_LEN
    _prompt_caches: dict = field(default_factory=dict, repr=False)

    def prompt_cache(self, prompt: Sequence[int]) -> KVCache:
        key = tuple(prompt)
        if key not in self._prompt_caches:
            emb = embed_tokens(self.weights, list(prompt))
            self._prompt_caches[key] = prefill(self.weights, self.config, emb, 0, logits=False).cache
        return self._prompt_caches[key]

    def offline(self, inst: tasks.TaskInstance) -> Offline:
        with flops.suspended():
            caches = isolated_caches(inst.documents, self.weights, self.config)
            doc_bytes = sum(len(encode_entry(CacheEntry.from_cache(f"d{i}", c))) for i, c in enumerate(caches))
            packets, packet_bytes = None, 0
            if self.adapters is not None:
                packets = [wrap(d, self.adapters, self.weights, self.config, f"{inst.instance_id}.{i}")
                           for i, d in enumerate(inst.documents)]
                packet_bytes = sum(len(encode_entry(p.to_entry())) for p in packets)
        return Offline(inst, caches, packets, doc_bytes, packet_bytes)

    # -- serving ----------------------------------------------------------

    def prep(self, strategy: Strategy, off: Offline) -> tuple[KVCache, flops.FlopsMeter]:
        """Serving-time preparation (the metered, timed phase)."""
        inst = off.instance
        prefix = self.prompt_cache(inst.prompt)
        if strategy.kind == "no_cache":
            meter = flops.FlopsMeter()
            with meter:
                pass
            return prefix, meter
        if strategy.kind == "packet":
            if off.packets is None:
                raise BenchConfigError("packet strategy needs an adapter checkpoint")
            packets = off.packets
            if strategy.prune_rate:
                packets = [_pruned(p, strategy, i) for i, p in enumerate(packets)]
            meter = flops.FlopsMeter()
            with meter:
                ctx = compose_packets(packets, theta=self.config.rope_theta, prefix_cache=prefix)
            return ctx.cache, meter
        caches = off.doc_caches
        if strategy.prune_rate:
            caches = [kvcache.prune(c, strategy.prune_rate, strategy.prune_method, strategy.seed + i)[0]
                      for i, c in enumerate(caches)]
        p = prepare(strategy.policy(), inst.documents, self.weights, self.config, prefix, caches, inst.query)
        return p.cache, p.meter

    def load_bytes(self, strategy: Strategy, off: Offline) -> int:
        if strategy.kind in ("full", "no_cache"):
            return 0
        return off.packet_bytes if strategy.kind == "packet" else off.doc_bytes

    def flops_report(self, strategy: Strategy, off: Offline, meter: flops.FlopsMeter) -> FlopsReport:
        inst = off.instance
        ref = full_prefill_flops(self.config, len(inst.prompt), [len(d) for d in inst.documents])
        return flops_meter(meter, ref)

    def answer(self, cache: KVCache, query: Sequence[int]) -> list[int]:
        ids, _ = answer_from(cache, query, self.weights, self.config, self.max_new_tokens)
        return ids

    def run(self, strategy: Strategy, off: Offline, reps: int = 1) -> dict:
        """One result row; ``reps`` > 1 takes wall-clock medians."""
        if reps < 1:
            raise BenchConfigError("reps must be >= 1")
        inst = off.instance
        prep_t, query_t = [], []
        cache = meter = None
        for _ in range(reps):
            t0 = time.perf_counter()
            cache, meter = self.prep(strategy, off)
            t1 = time.perf_counter()
            with flops.suspended():
                prefill(self.weights, self.config, embed_tokens(self.weights, inst.query), prefix_cache=cache,
                        logits="last")
            t2 = time.perf_counter()
            prep_t.append(t1 - t0)
            query_t.append(t2 - t1)
        rep = self.flops_report(strategy, off, meter)
        with flops.suspended():
            pred = self.answer(cache, inst.query)
        ttft = TtftReport(transfer_seconds(self.load_bytes(strategy, off), self.bandwidth_gbps),
                          statistics.median(prep_t), statistics.median(query_t))
        return {
            "strategy": strategy.kind,
            "policy_params": strategy.policy_params,
            "domain": inst.domain,
            "instance_id": inst.instance_id,
            "f1": f1_score(pred, inst.gold_answer),
            "realign_ops": rep.realign_ops,
            "forward_flops": rep.forward_flops,
            "selection_flops": rep.selection_flops,
            "total_flops": rep.total,
            "relative_flops": rep.relative_to_full,
            "load_s": ttft.load_time,
            "prep_s": ttft.prep_time,
            "query_s": ttft.query_prefill_time,
            "ttft_s": ttft.ttft,
        }


def _pruned(p: Packet, strategy: Strategy, i: int) -> Packet:
    # adapter tokens stay; only document entries are candidates
    protect = np.zeros(p.cache.n_tokens, dtype=bool)
    protect[:p.n_header] = True
    protect[p.n_header + p.doc_token_count:] = True
    cache, _ = kvcache.prune(p.cache, strategy.prune_rate, strategy.prune_method, strategy.seed + i, protect)
    return Packet(p.doc_id, cache, p.doc_token_count, p.n_header, p.n_trailer, p.fingerprint)


def measure_ttft(strategy: Strategy, instance: tasks.TaskInstance, bench: Bench,
                 reps: int = DEFAULT_REPS, offline: Offline | None = None) -> TtftReport:
    if reps < DEFAULT_REPS:
        raise BenchConfigError(f"TTFT medians need at least {DEFAULT_REPS} repetitions")
    row = bench.run(strategy, offline or bench.offline(instance), reps)
    return TtftReport(row["load_s"], row["prep_s"], row["query_s"])


# ---------------------------------------------------------------------------
# suite
# ---------------------------------------------------------------------------


def check_invariants(rows: Sequence[dict]) -> list[str]:
    """Hard invariants of a results table; returns violated invariant names."""
    bad = []
    for r in rows:
        if r["strategy"] == "packet" and r["forward_flops"] != 0:
            bad.append(f"packet forward_flops == 0 ({r['domain']}#{r['instance_id']})")
        if r["total_flops"] != r["realign_ops"] + r["forward_flops"] + r["selection_flops"]:
            bad.append(f"FLOPs additivity ({r['strategy']} {r['domain']}#{r['instance_id']})")
        if not 0.0 <= r["f1"] <= 1.0:
            bad.append(f"F1 bounds ({r['strategy']} {r['domain']}#{r['instance_id']})")
        if r["strategy"] == "full" and abs(r["relative_flops"] - 1.0) > 1e-9:
            bad.append(f"full relative_flops == 1 ({r['domain']}#{r['instance_id']})")
    # forward work ordering within an instance: none == packet == 0 < selective <= full
    by_inst: dict[tuple, list[dict]] = {}
    for r in rows:
        by_inst.setdefault((r["domain"], r["instance_id"]), []).append(r)
    for (dom, iid), rs in by_inst.items():
        full = [r["forward_flops"] for r in rs if r["strategy"] == "full"]
        for r in rs:
            if r["strategy"] == "none" and r["forward_flops"] != 0:
                bad.append(f"none forward_flops == 0 ({dom}#{iid})")
            if r["strategy"] in _SELECTIVE and r["policy_params"] not in ("r=0", "anchors=0"):
                if r["forward_flops"] <= 0 or (full and r["forward_flops"] > full[0]):
                    bad.append(f"selective forward FLOPs within (0, full] ({r['strategy']} {dom}#{iid})")
    return sorted(set(bad))


def summarize(rows: Iterable[dict]) -> dict:
    """Per-(strategy label, domain) means of every numeric column."""
    groups: dict[tuple[str, str], list[dict]] = {}
    for r in rows:
        label = r["strategy"] + (f"[{r['policy_params']}]" if r["policy_params"] else "")
        groups.setdefault((label, r["domain"]), []).append(r)
    out: dict = {}
    numeric = [c for c in RESULT_COLUMNS if c not in ("strategy", "policy_params", "domain", "instance_id")]
    for (label, dom), rs in sorted(groups.items()):
        out.setdefault(label, {})[dom] = {"n": len(rs), **{f"mean_{c}": float(np.mean([r[c] for r in rs]))
                                                          for c in numeric}}
    return out


@dataclass
class SuiteResult:
    rows: list[dict]
    summary: dict
    violations: list[str]

    def write(self, out_dir) -> dict[str, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {"results": out / "results.csv", "summary": out / "summary.json"}
        write_rows(self.rows, paths["results"])
        paths["summary"].write_text(json.dumps({"summary": self.summary, "violations": self.violations},
                                               indent=2, sort_keys=True))
        return paths


def write_rows(rows: Sequence[dict], path, columns: Sequence[str] = RESULT_COLUMNS) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(columns))
        w.writeheader()
        for r in rows:
            w.writerow({c: r[c] for c in columns})


def run_suite(strategies: Sequence[Strategy], instances: Mapping[str, Sequence[tasks.TaskInstance]],
              bench: Bench, reps: int = 1) -> SuiteResult:
    """Every strategy on every instance; ``instances`` maps domain -> instances."""
    if any(s.kind == "packet" for s in strategies) and bench.adapters is None:
        raise BenchConfigError("packet strategy requested without an adapter checkpoint")
    rows = []
    for dom, insts in instances.items():
        for inst in insts:
            off = bench.offline(inst)
            rows += [bench.run(s, off, reps) for s in strategies]
    return SuiteResult(rows, summarize(rows), check_invariants(rows))


def packet_f1(instances: Sequence[tasks.TaskInstance], bench: Bench) -> float:
    s = Strategy("packet")
    return float(np.mean([bench.run(s, bench.offline(i))["f1"] for i in instances]))


def cross_domain_matrix(adapters_by_row: Mapping[str, AdapterParams],
                        instances: Mapping[str, Sequence[tasks.TaskInstance]],
                        weights: ModelWeights, config: ModelConfig) -> dict[str, dict[str, float]]:
    """Packet F1 of each adapter set (train domain or ``mixture``) on each eval domain."""
    out = {}
    for row, adapters in adapters_by_row.items():
        bench = Bench(weights, config, adapters)
        out[row] = {dom: packet_f1(insts, bench) for dom, insts in instances.items()}
    return out


def write_matrix(matrix: Mapping[str, Mapping[str, float]], path) -> None:
    cols = sorted({c for r in matrix.values() for c in r})
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["train_domain"] + cols + ["min"])
        for row, vals in matrix.items():
            w.writerow([row] + [f"{vals[c]:.6f}" for c in cols] + [f"{min(vals.values()):.6f}"])
