"""Synthetic retrieval tasks standing in for NIAH, Biography and multi-hop QA.

All tasks share one token layout::

    [BOS, PROMPT_<domain>] [DOC ...]*M [QRY ... ANS] -> gold answer, EOS

Documents are fixed-length so per-position statistics line up across
instances. Vocabulary ranges are disjoint so every token has one role.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

PAD, BOS, DOC, QRY, ANS, EOS, LINK = 0, 1, 2, 3, 4, 5, 10
PROMPT = {"needle": 6, "kv_biography": 7, "multihop": 8}
ATTRS = np.arange(16, 24)
ENTITIES = np.arange(32, 160)
VALUES = np.arange(160, 288)
FILLER = np.arange(288, 512)
MIN_VOCAB = 512

DOMAINS = ("needle", "kv_biography", "multihop")
ANSWER_LEN = 2


class TaskConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Difficulty:
    n_docs: int = 4
    doc_len: int = 32
    n_facts: int = 2  # needle pairs per doc, bio attributes per entity, chains total

    def __post_init__(self):
        if self.n_docs < 1 or self.doc_len < 8 or self.n_facts < 1:
            raise TaskConfigError(f"invalid difficulty {self}")


@dataclass
class TaskInstance:
    documents: list[list[int]]
    query: list[int]
    gold_answer: list[int]
    domain: str
    instance_id: int = 0
    # doc index holding the evidence, in hop order
    evidence_docs: list[int] = field(default_factory=list)

    @property
    def prompt(self) -> list[int]:
        return [BOS, PROMPT[self.domain]]

    def context_ids(self, drop_doc: int | None = None) -> list[int]:
        ids = list(self.prompt)
        for i, d in enumerate(self.documents):
            if i != drop_doc:
                ids += d
        return ids + self.query


def _place(doc: list[int], spans: list[list[int]], rng: np.random.Generator) -> None:
    """Write non-overlapping ``spans`` into ``doc`` (index 0 is the DOC marker)."""
    free = len(doc) - 1 - sum(len(s) for s in spans)
    if free < 0:
        raise TaskConfigError("document too short for its facts")
    # random gaps between spans
    cuts = np.sort(rng.integers(0, free + 1, size=len(spans)))
    order = rng.permutation(len(spans))
    pos, prev = 1, 0
    for cut, j in zip(cuts, order):
        pos += int(cut - prev)
        prev = cut
        doc[pos:pos + len(spans[j])] = spans[j]
        pos += len(spans[j])


def _blank_docs(diff: Difficulty, rng) -> list[list[int]]:
    return [[DOC] + list(rng.choice(FILLER, size=diff.doc_len - 1)) for _ in range(diff.n_docs)]


def _needle(diff, rng, n_queries):
    docs = _blank_docs(diff, rng)
    n_pairs = diff.n_docs * diff.n_facts
    keys = rng.choice(ENTITIES, size=n_pairs, replace=False)
    vals = rng.choice(VALUES, size=(n_pairs, ANSWER_LEN), replace=False)
    owner = np.repeat(np.arange(diff.n_docs), diff.n_facts)
    for d in range(diff.n_docs):
        _place(docs[d], [[int(keys[i])] + vals[i].tolist() for i in np.flatnonzero(owner == d)], rng)
    qs = []
    for i in rng.choice(n_pairs, size=n_queries, replace=False):
        qs.append(([QRY, int(keys[i]), ANS], vals[i].tolist(), [int(owner[i])]))
    return docs, qs


def _biography(diff, rng, n_queries):
    docs = _blank_docs(diff, rng)
    ents = rng.choice(ENTITIES, size=diff.n_docs, replace=False)
    n_attr = min(diff.n_facts, len(ATTRS))
    vals = rng.choice(VALUES, size=(diff.n_docs, n_attr, ANSWER_LEN), replace=False)
    facts = []
    for d in range(diff.n_docs):
        attrs = rng.choice(ATTRS, size=n_attr, replace=False)
        # the entity name opens the record; attributes follow in order
        record = [int(ents[d])]
        for a, v in zip(attrs, vals[d]):
            record += [int(a)] + v.tolist()
        _place(docs[d], [record], rng)
        facts += [(d, int(a), v.tolist()) for a, v in zip(attrs, vals[d])]
    qs = []
    for j in rng.choice(len(facts), size=n_queries, replace=False):
        d, a, v = facts[j]
        qs.append(([QRY, int(ents[d]), a, ANS], v, [d]))
    return docs, qs


def _multihop(diff, rng, n_queries):
    if diff.n_docs < 2:
        raise TaskConfigError("multihop needs at least two documents")
    docs = _blank_docs(diff, rng)
    n_chains = max(diff.n_facts, n_queries)
    ents = rng.choice(ENTITIES, size=(n_chains, 2), replace=False)
    vals = rng.choice(VALUES, size=(n_chains, ANSWER_LEN), replace=False)
    spans: list[list[list[int]]] = [[] for _ in range(diff.n_docs)]
    hops = []
    for c in range(n_chains):
        a, b = rng.choice(diff.n_docs, size=2, replace=False)
        x, y = int(ents[c, 0]), int(ents[c, 1])
        spans[a].append([x, LINK, y])
        spans[b].append([y, LINK] + vals[c].tolist())
        hops.append((x, vals[c].tolist(), [int(a), int(b)]))
    for d in range(diff.n_docs):
        _place(docs[d], spans[d], rng)
    qs = []
    for c in rng.choice(n_chains, size=n_queries, replace=False):
        x, v, ev = hops[c]
        qs.append(([QRY, x, LINK, LINK, ANS], v, ev))
    return docs, qs


_BUILDERS = {"needle": _needle, "kv_biography": _biography, "multihop": _multihop}


def _check_domain(domain: str) -> None:
    if domain not in _BUILDERS:
        raise TaskConfigError(f"unsupported domain {domain!r}; choose from {DOMAINS}")


def make_instance(domain: str, diff: Difficulty, rng: np.random.Generator, instance_id: int = 0) -> TaskInstance:
    _check_domain(domain)
    docs, qs = _BUILDERS[domain](diff, rng, 1)
    query, gold, ev = qs[0]
    return TaskInstance(docs, query, gold, domain, instance_id, ev)


def gen_tasks(domain: str, n: int, difficulty: Difficulty | None = None, seed: int = 0,
              verify_with=None, min_accuracy: float = 0.9) -> list[TaskInstance]:
    """Seeded task instances; optionally verified against a full-prefill model.

    ``verify_with=(weights, config)`` decodes every instance with full attention
    and raises :class:`TaskConfigError` when fewer than ``min_accuracy`` of them
    are answered exactly (the batch is rejected rather than filtered).
    """
    _check_domain(domain)
    diff = difficulty or Difficulty()
    rng = np.random.default_rng([seed, DOMAINS.index(domain)])
    out = [make_instance(domain, diff, rng, i) for i in range(n)]
    if verify_with is not None and out:
        from kvpacket.model import generate

        weights, config = verify_with
        hits = sum(generate(weights, config, t.context_ids(), ANSWER_LEN)[0] == t.gold_answer for t in out)
        if hits / len(out) < min_accuracy:
            raise TaskConfigError(
                f"{domain}: full-prefill model answers only {hits}/{len(out)} instances"
            )
    return out


def training_sequence(domain: str, diff: Difficulty, rng: np.random.Generator,
                      n_queries: int = 2) -> tuple[list[int], list[float]]:
    """A pretraining sequence with several QA turns; returns ids and loss weights
    (1 on answer/EOS targets, 0 elsewhere) aligned to next-token targets."""
    docs, qs = _BUILDERS[domain](diff, rng, n_queries)
    ids = [BOS, PROMPT[domain]] + [t for d in docs for t in d]
    weights = [0.0] * len(ids)
    for query, gold, _ in qs:
        ids += query
        weights += [0.0] * len(query)
        ids += gold + [EOS]
        weights += [1.0] * (len(gold) + 1)
    # weights[i] marks token i as a target, i.e. prediction made at i - 1
    return ids, weights
