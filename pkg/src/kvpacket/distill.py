"""Self-distillation of Header/Trailer adapters against full-attention outputs.

Teacher: the frozen model decodes greedily over ``[prompt, D_1..D_M, Q]``.
Student: every document is wrapped and prefilled independently, realigned,
concatenated, and ``[Q, G]`` is run teacher-forced on top. The loss is the mean
per-step KL(teacher || student); only H and T receive gradients.
"""

from __future__ import annotations

import csv
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from kvpacket import kvcache, tasks
from kvpacket import tensor as T
from kvpacket.model import ModelConfig, ModelWeights, embed_tokens, generate, prefill
from kvpacket.optim import AdamW, linear_decay
from kvpacket.packet import AdapterParams, wrap_cache
from kvpacket.tensor import Tensor

log = logging.getLogger(__name__)

_MAGIC = b"KVDS"
_VERSION = 1


class DistillConfigError(ValueError):
    pass


class TrainingError(RuntimeError):
    pass


@dataclass
class DistillSample:
    documents: list[list[int]]
    query: list[int]
    continuation: list[int]
    teacher_dists: np.ndarray  # [|G|, V] float32
    prompt: list[int] = field(default_factory=list)
    domain: str = ""

    def __post_init__(self):
        if not self.documents:
            raise DistillConfigError("a sample needs at least one document")
        if not self.continuation:
            raise DistillConfigError("teacher continuation is empty")
        if self.teacher_dists.shape[0] != len(self.continuation):
            raise DistillConfigError("one teacher distribution per continuation token required")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 64
    lr: float = 5e-4
    weight_decay: float = 0.01
    n_samples: int = 256
    max_gen: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.lr <= 0:
            raise DistillConfigError("lr must be positive")
        if self.epochs < 0 or self.batch_size < 1:
            raise DistillConfigError("epochs must be >= 0 and batch_size >= 1")
        if self.max_gen < 1 or self.max_gen > 16:
            raise DistillConfigError("max_gen must be in [1, 16]")


# ---------------------------------------------------------------------------
# teacher pass
# ---------------------------------------------------------------------------


def build_samples(corpus, n_samples: int, weights: ModelWeights, config: ModelConfig,
                  docs_per_sample: Sequence[int] = (2, 3, 4), max_gen: int = 4,
                  difficulty: tasks.Difficulty | None = None, seed: int = 0,
                  cache_path: str | Path | None = None) -> list[DistillSample]:
    """Teacher generations for ``n_samples`` contexts.

    ``corpus`` is a domain name (fresh synthetic instances, M drawn from
    ``docs_per_sample``) or a sequence of :class:`~kvpacket.tasks.TaskInstance`
    sampled with replacement. With ``cache_path`` an existing sample file is
    reused and a new one is written otherwise.
    """
    if cache_path is not None and Path(cache_path).exists():
        return load_samples(cache_path)
    if n_samples < 1:
        raise DistillConfigError("n_samples must be positive")
    rng = np.random.default_rng([seed, 7])
    if isinstance(corpus, str):
        base = difficulty or tasks.Difficulty()
        instances = []
        for i in range(n_samples):
            m = int(rng.choice(docs_per_sample))
            diff = tasks.Difficulty(m, base.doc_len, base.n_facts)
            instances.append(tasks.make_instance(corpus, diff, rng, i))
    else:
        pool = list(corpus)
        if not pool:
            raise DistillConfigError("empty corpus")
        instances = [pool[i] for i in rng.integers(0, len(pool), size=n_samples)]
    samples = []
    for inst in instances:
        g, dists = generate(weights, config, inst.context_ids(), max_gen, stop_token=tasks.EOS)
        samples.append(DistillSample([list(d) for d in inst.documents], list(inst.query), g,
                                     dists.data.astype(np.float32), inst.prompt, inst.domain))
    if cache_path is not None:
        save_samples(samples, cache_path)
    return samples


def _write_ids(parts: list, ids: Sequence[int]) -> None:
    parts.append(struct.pack("<I", len(ids)))
    parts.append(np.asarray(ids, dtype="<u4").tobytes())


def save_samples(samples: Sequence[DistillSample], path) -> None:
    """``KVDS`` | version | n | per sample: domain, prompt, M docs, query, G,
    teacher dists [|G|, V] f32 LE."""
    parts = [_MAGIC, struct.pack("<II", _VERSION, len(samples))]
    for s in samples:
        dom = s.domain.encode()
        parts += [struct.pack("<I", len(dom)), dom]
        _write_ids(parts, s.prompt)
        parts.append(struct.pack("<I", len(s.documents)))
        for d in s.documents:
            _write_ids(parts, d)
        _write_ids(parts, s.query)
        _write_ids(parts, s.continuation)
        parts.append(struct.pack("<I", s.teacher_dists.shape[1]))
        parts.append(np.ascontiguousarray(s.teacher_dists, dtype="<f4").tobytes())
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(b"".join(parts))


def load_samples(path) -> list[DistillSample]:
    raw = Path(path).read_bytes()
    if raw[:4] != _MAGIC:
        raise DistillConfigError(f"{path} is not a KVDS sample file")
    version, n = struct.unpack_from("<II", raw, 4)
    if version != _VERSION:
        raise DistillConfigError(f"unsupported sample file version {version}")
    off = 12

    def ids():
        nonlocal off
        (k,) = struct.unpack_from("<I", raw, off)
        off += 4
        out = np.frombuffer(raw, "<u4", k, off).astype(int).tolist()
        off += 4 * k
        return out

    samples = []
    for _ in range(n):
        (ld,) = struct.unpack_from("<I", raw, off)
        off += 4
        domain = raw[off:off + ld].decode()
        off += ld
        prompt = ids()
        (m,) = struct.unpack_from("<I", raw, off)
        off += 4
        docs = [ids() for _ in range(m)]
        query = ids()
        cont = ids()
        (v,) = struct.unpack_from("<I", raw, off)
        off += 4
        dists = np.frombuffer(raw, "<f4", len(cont) * v, off).reshape(len(cont), v).astype(np.float32)
        off += 4 * len(cont) * v
        samples.append(DistillSample(docs, query, cont, dists, prompt, domain))
    return samples


# ---------------------------------------------------------------------------
# student pass
# ---------------------------------------------------------------------------


def student_forward(sample: DistillSample, adapters: AdapterParams, weights: ModelWeights,
                    config: ModelConfig, prompt_cache=None) -> Tensor:
    """Per-step student distributions ``[|G|, V]`` for the sample's continuation."""
    if prompt_cache is None and sample.prompt:
        prompt_cache = prefill(weights, config, embed_tokens(weights, sample.prompt), 0, logits=False).cache
    offset = 0 if prompt_cache is None else prompt_cache.end_position
    parts = [] if prompt_cache is None else [prompt_cache]
    for doc in sample.documents:
        c = wrap_cache(doc, adapters, weights, config)
        parts.append(kvcache.realign(c, offset, config.rope_theta))
        offset += c.n_tokens
    context = kvcache.concat(parts)
    forced = list(sample.query) + list(sample.continuation[:-1])
    res = prefill(weights, config, embed_tokens(weights, forced), prefix_cache=context)
    g = len(sample.continuation)
    logits = res.logits[len(sample.query) - 1: len(sample.query) - 1 + g]
    return T.softmax(logits, axis=-1)


def sample_loss(sample: DistillSample, adapters, weights, config, prompt_cache=None) -> Tensor:
    q = student_forward(sample, adapters, weights, config, prompt_cache)
    return T.kl_divergence(sample.teacher_dists.astype(q.dtype), q)


# ---------------------------------------------------------------------------
# optimisation
# ---------------------------------------------------------------------------


@dataclass
class LossRecord:
    step: int
    lr: float
    loss: float


def interleave(domain_samples: Mapping[str, Sequence[DistillSample]], rng: np.random.Generator) -> list[DistillSample]:
    """One epoch order: each domain shuffled, then merged by fractional rank so
    every prefix holds each domain near its proportional share."""
    keyed = []
    for di, (name, group) in enumerate(domain_samples.items()):
        perm = rng.permutation(len(group))
        n = len(group)
        keyed += [((j + 0.5) / n, di, group[i]) for j, i in enumerate(perm)]
    keyed.sort(key=lambda t: (t[0], t[1]))
    return [s for _, _, s in keyed]


def _grad_norms(adapters: AdapterParams) -> dict:
    return {n: float(np.linalg.norm(p.grad)) if p.grad is not None else None
            for n, p in zip(("header", "trailer"), adapters.parameters())}


def train_mixture(domain_samples: Mapping[str, Sequence[DistillSample]], adapters: AdapterParams,
                  cfg: TrainConfig, weights: ModelWeights, config: ModelConfig,
                  checkpoint: str | Path | None = None, loss_csv: str | Path | None = None,
                  progress: bool = False) -> tuple[AdapterParams, list[LossRecord]]:
    """AdamW on {H, T} with linear decay to zero; batches interleave domains."""
    if not domain_samples or not any(len(v) for v in domain_samples.values()):
        raise DistillConfigError("no training samples")
    before = weights.fingerprint()
    adapters = adapters.copy().requires_grad_(True)
    n_total = sum(len(v) for v in domain_samples.values())
    steps_per_epoch = math.ceil(n_total / cfg.batch_size)
    total_steps = cfg.epochs * steps_per_epoch
    opt = AdamW(adapters.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    rng = np.random.default_rng([cfg.seed, 11])
    prompt_caches: dict[tuple, object] = {}
    history: list[LossRecord] = []
    step = 0
    for epoch in range(cfg.epochs):
        order = interleave(domain_samples, rng)
        for b in range(steps_per_epoch):
            batch = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            opt.zero_grad()
            losses = []
            for s in batch:
                key = tuple(s.prompt)
                if key and key not in prompt_caches:
                    prompt_caches[key] = prefill(weights, config, embed_tokens(weights, s.prompt), 0,
                                                 logits=False).cache
                lr = linear_decay(cfg.lr, step, total_steps)
                try:
                    with T.Tape() as tape:
                        loss = sample_loss(s, adapters, weights, config, prompt_caches.get(key))
                    losses.append(loss.item())
                    tape.backward(loss)
                except T.NumericError as exc:
                    raise TrainingError(f"non-finite values at step {step} (lr={lr:.3g}, "
                                        f"grad norms={_grad_norms(adapters)}): {exc}") from exc
            mean_loss = float(np.mean(losses))
            if not np.isfinite(mean_loss):
                raise TrainingError(f"non-finite loss at step {step} (lr={lr:.3g}, "
                                    f"grad norms={_grad_norms(adapters)})")
            opt.step(lr, grad_scale=1.0 / len(batch))
            history.append(LossRecord(step, lr, mean_loss))
            if progress:
                log.info("epoch %d step %d lr %.2e loss %.4f", epoch, step, lr, mean_loss)
            step += 1
    adapters.requires_grad_(False)
    if weights.fingerprint() != before:
        raise TrainingError("base model weights changed during adapter training")
    adapters.model_hash = before
    if checkpoint is not None:
        adapters.save(checkpoint)
    if loss_csv is not None:
        write_loss_csv(history, loss_csv)
    return adapters, history


def train(samples: Sequence[DistillSample], adapters: AdapterParams, cfg: TrainConfig,
          weights: ModelWeights, config: ModelConfig, **kwargs) -> tuple[AdapterParams, list[LossRecord]]:
    return train_mixture({"all": list(samples)}, adapters, cfg, weights, config, **kwargs)


def write_loss_csv(history: Sequence[LossRecord], path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "lr", "loss"])
        for r in history:
            w.writerow([r.step, f"{r.lr:.8g}", f"{r.loss:.8g}"])
