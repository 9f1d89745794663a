"""Quality and efficiency metrics: token F1, FLOPs reports, TTFT reports."""

from __future__ import annotations

from collections import Counter
from dataclasses import asdict, dataclass
from typing import Sequence

from kvpacket import flops
from kvpacket.model import ModelConfig
from kvpacket.tasks import PAD

# probe passes may push a selective policy slightly past a full prefill
RELATIVE_FLOPS_SLACK = 0.5


def f1_score(prediction: Sequence[int], gold: Sequence[int]) -> float:
    """Bag-of-tokens F1 with multiset overlap."""
    pred = [t for t in prediction if t != PAD]
    gold = [t for t in gold if t != PAD]
    if not pred and not gold:
        return 1.0
    if not pred or not gold:
        return 0.0
    overlap = sum((Counter(pred) & Counter(gold)).values())
    if overlap == 0:
        return 0.0
    p = overlap / len(pred)
    r = overlap / len(gold)
    return 2 * p * r / (p + r)


def block_flops(config: ModelConfig, n_new: int, n_keys: int, n_layers: int | None = None) -> int:
    """Matmul FLOPs (2*m*n*k) of ``n_new`` tokens attending over ``n_keys`` keys."""
    d, f, h, hd = config.d_model, config.ffn_dim, config.n_heads, config.head_dim
    per_layer = 2 * n_new * d * d * 4 + 2 * h * n_new * n_keys * hd * 2 + 2 * n_new * d * f * 3
    return per_layer * (config.n_layers if n_layers is None else n_layers)


def full_prefill_flops(config: ModelConfig, prefix_len: int, doc_lens: Sequence[int]) -> int:
    """Forward FLOPs of recomputing every document token after a cached prefix."""
    n = int(sum(doc_lens))
    return block_flops(config, n, prefix_len + n)


def realign_ops(config: ModelConfig, n_tokens: int) -> int:
    return n_tokens * config.n_layers * config.n_heads * config.head_dim


@dataclass(frozen=True)
class FlopsReport:
    realign_ops: int
    forward_flops: int
    selection_flops: int
    total: int
    relative_to_full: float

    def __post_init__(self):
        if self.total != self.realign_ops + self.forward_flops + self.selection_flops:
            raise ValueError("FLOPs total must equal the sum of its parts")

    def to_dict(self) -> dict:
        return asdict(self)


def flops_meter(meter: flops.FlopsMeter, full_reference: int) -> FlopsReport:
    """Summarize a finished metered run against the full-recompute FLOPs."""
    if meter.active or not meter.closed:
        raise flops.MeterStateError("meter must be read after its run has finished")
    r = meter.reading(flops.REALIGN)
    fwd = meter.reading(flops.FORWARD)
    sel = meter.reading(flops.SELECTION)
    total = r + fwd + sel
    rel = total / full_reference if full_reference else 0.0
    return FlopsReport(r, fwd, sel, total, rel)


@dataclass(frozen=True)
class TtftReport:
    load_time: float
    prep_time: float
    query_prefill_time: float

    @property
    def ttft(self) -> float:
        return self.load_time + self.prep_time + self.query_prefill_time

    def to_dict(self) -> dict:
        return {**asdict(self), "ttft": self.ttft}


def transfer_seconds(n_bytes: int, bandwidth_gbps: float) -> float:
    """Simulated host-to-device copy time at ``bandwidth_gbps`` GB/s."""
    if bandwidth_gbps <= 0:
        raise ValueError("bandwidth must be positive")
    return n_bytes / (bandwidth_gbps * 1e9)
