"""Pretraining of the toy base model on the synthetic retrieval corpus.

Retrieval needs induction-style heads (find the earlier copy of a token, read
what follows it). These form slowly from the sparse answer loss alone, so the
run opens with dense-loss copy sequences and then mixes them with task
sequences whose length grows along a curriculum.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from kvpacket import tasks
from kvpacket import tensor as T
from kvpacket.model import ModelConfig, ModelWeights, _run_layers, embed_tokens, generate, lm_logits
from kvpacket.optim import AdamW, linear_decay

log = logging.getLogger(__name__)


class TrainingFailure(RuntimeError):
    def __init__(self, message: str, accuracy: dict[str, float] | None = None):
        super().__init__(message)
        self.accuracy = accuracy or {}


@dataclass(frozen=True)
class PretrainSpec:
    steps: int = 10000
    copy_steps: int = 1500
    batch_size: int = 16
    lr: float = 1e-3
    warmup: int = 100
    copy_len: tuple[int, int] = (6, 24)
    doc_lens: tuple[int, ...] = (16, 32, 48, 64)
    max_docs: int = 4
    eval_every: int = 1000
    eval_n: int = 100
    eval_docs: int = 4
    eval_doc_len: int = 32
    threshold: float = 0.9
    gate_domain: str = "needle"

    def __post_init__(self):
        if self.steps < 1 or not 0 <= self.copy_steps <= self.steps:
            raise ValueError("need steps >= 1 and 0 <= copy_steps <= steps")
        if self.batch_size < 2 or self.lr <= 0:
            raise ValueError("batch_size must be >= 2 and lr positive")
        if not 0.0 <= self.threshold <= 1.0:
            raise ValueError("threshold must be in [0, 1]")
        if self.gate_domain not in tasks.DOMAINS:
            raise ValueError(f"unsupported gate domain {self.gate_domain!r}")


@dataclass
class PretrainLog:
    losses: list[float] = field(default_factory=list)
    evals: list[tuple[int, dict[str, float]]] = field(default_factory=list)


def _copy_sequence(spec: PretrainSpec, rng) -> tuple[list[int], list[float]]:
    n = int(rng.integers(spec.copy_len[0], spec.copy_len[1] + 1))
    body = rng.integers(tasks.ATTRS[0], tasks.MIN_VOCAB, size=n).tolist()
    ids = [tasks.BOS] + body + body
    # first token of the repeat is unpredictable
    return ids, [0.0] * (n + 2) + [1.0] * (n - 1)


def _task_sequence(spec: PretrainSpec, frac: float, rng) -> tuple[list[int], list[float]]:
    dom = tasks.DOMAINS[int(rng.integers(len(tasks.DOMAINS)))]
    n_docs = int(rng.integers(2, 2 + 1 + int((spec.max_docs - 2) * frac)))
    lens = spec.doc_lens[:1 + int((len(spec.doc_lens) - 1) * frac)]
    diff = tasks.Difficulty(n_docs, int(rng.choice(lens)), 2)
    return tasks.training_sequence(dom, diff, rng, 2)


def make_batch(spec: PretrainSpec, step: int, rng) -> tuple[np.ndarray, np.ndarray]:
    """Padded ids and target weights for one step."""
    frac = min(1.0, max(0, step - spec.copy_steps) / max(1.0, 0.4 * (spec.steps - spec.copy_steps)))
    seqs = []
    for i in range(spec.batch_size):
        if step < spec.copy_steps or i < spec.batch_size // 2:
            seqs.append(_copy_sequence(spec, rng))
        else:
            seqs.append(_task_sequence(spec, frac, rng))
    width = max(len(s) for s, _ in seqs)
    ids = np.full((len(seqs), width), tasks.PAD, dtype=np.int64)
    wts = np.zeros((len(seqs), width), dtype=np.float32)
    for i, (s, w) in enumerate(seqs):
        ids[i, :len(s)] = s
        wts[i, :len(s)] = w
    return ids, wts


def retrieval_accuracy(weights: ModelWeights, config: ModelConfig, spec: PretrainSpec, seed: int,
                       domains=tasks.DOMAINS) -> dict[str, float]:
    """Exact-match accuracy of full-prefill greedy answers on held-out instances."""
    diff = tasks.Difficulty(spec.eval_docs, spec.eval_doc_len, 2)
    out = {}
    for dom in domains:
        insts = tasks.gen_tasks(dom, spec.eval_n, diff, seed=seed + 10_007)
        hits = sum(generate(weights, config, t.context_ids(), tasks.ANSWER_LEN)[0] == t.gold_answer
                   for t in insts)
        out[dom] = hits / len(insts)
    return out


def pretrain_toy_model(config: ModelConfig, spec: PretrainSpec | None = None, seed: int = 0,
                       history: PretrainLog | None = None) -> ModelWeights:
    """Train from scratch and freeze; raises :class:`TrainingFailure` when held-out
    accuracy on the gate domain stays below ``spec.threshold``."""
    spec = spec or PretrainSpec()
    if config.vocab_size < tasks.MIN_VOCAB:
        raise ValueError(f"vocab_size must be >= {tasks.MIN_VOCAB}")
    history = history if history is not None else PretrainLog()
    weights = ModelWeights.init(config, seed)
    weights.set_trainable(True)
    opt = AdamW(weights.parameters(), lr=spec.lr, weight_decay=0.0)
    rng = np.random.default_rng([seed, 1])
    for step in range(spec.steps):
        ids, wts = make_batch(spec, step, rng)
        n = ids.shape[1] - 1
        with T.Tape() as tape:
            hidden, _ = _run_layers(weights, config, embed_tokens(weights, ids[:, :-1]), np.arange(n))
            loss = T.cross_entropy(lm_logits(weights, hidden), ids[:, 1:], wts[:, 1:])
        opt.zero_grad()
        tape.backward(loss)
        value = loss.item()
        if not np.isfinite(value):
            raise TrainingFailure(f"non-finite pretraining loss at step {step}")
        opt.step(linear_decay(spec.lr, step, spec.steps, spec.warmup))
        history.losses.append(value)
        if step % 100 == 0:
            log.info("step %d loss %.4f", step, value)
        if (step + 1) % spec.eval_every == 0 and step + 1 < spec.steps:
            acc = retrieval_accuracy(weights, config, spec, seed)
            history.evals.append((step + 1, acc))
            log.info("step %d loss %.4f %s", step + 1, value, acc)
    weights.freeze()
    acc = retrieval_accuracy(weights, config, spec, seed)
    history.evals.append((spec.steps, acc))
    if acc[spec.gate_domain] < spec.threshold:
        raise TrainingFailure(
            f"{spec.gate_domain} accuracy {acc[spec.gate_domain]:.3f} below {spec.threshold} after {spec.steps} steps",
            acc,
        )
    return weights
