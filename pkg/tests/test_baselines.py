import math

import numpy as np
import pytest

from kvpacket import flops
from kvpacket.baselines import (
    RecomputePolicy,
    SelectionResult,
    baseline_logits,
    prepare,
    run_baseline,
    select_attention_topk,
    select_boundary,
    select_deviation,
    select_random,
)
from kvpacket.metrics import block_flops, full_prefill_flops
from kvpacket.model import embed_tokens, prefill

DOCS = [list(range(10, 26)), list(range(26, 42)), list(range(42, 58))]
QUERY = [3, 11, 4]
PROMPT = [1, 6]


def test_policy_validation_and_labels():
    with pytest.raises(ValueError):
        RecomputePolicy("magic")
    with pytest.raises(ValueError):
        RecomputePolicy("random_ratio", ratio=1.5)
    assert RecomputePolicy("random_ratio", 0.3).label == "random_ratio(0.3)"
    assert RecomputePolicy("boundary_anchor", anchors=4).label == "boundary_anchor(4)"


def test_selectors():
    sel = select_random([16, 16], 0.3, seed=1)
    assert [len(s) for s in sel.per_doc] == [math.ceil(0.3 * 16)] * 2
    assert select_random([16], 0.3, 1).per_doc[0].tolist() == sel.per_doc[0].tolist()
    assert [s.tolist() for s in select_boundary([5, 2], 3).per_doc] == [[0, 1, 2], [0, 1]]
    with pytest.raises(ValueError):
        SelectionResult([np.array([1, 1])])


def test_full_and_ratio_one_match_whole_prefill(task_weights, task_cfg):
    flat = [t for d in DOCS for t in d]
    ref = prefill(task_weights, task_cfg, embed_tokens(task_weights, PROMPT + flat + QUERY), 0).logits.data
    ref = ref[-len(QUERY):]
    for pol in (RecomputePolicy("full"), RecomputePolicy("random_ratio", 1.0)):
        got = baseline_logits(pol, DOCS, QUERY, task_weights, task_cfg, PROMPT)
        np.testing.assert_allclose(got, ref, atol=1e-4)


def test_none_differs_from_full(task_weights, task_cfg):
    a = baseline_logits(RecomputePolicy("none"), DOCS, QUERY, task_weights, task_cfg, PROMPT)
    b = baseline_logits(RecomputePolicy("full"), DOCS, QUERY, task_weights, task_cfg, PROMPT)
    assert np.abs(a - b).max() > 1e-3


def _report(kind, task_weights, task_cfg, **kw):
    return run_baseline(RecomputePolicy(kind, **kw), DOCS, QUERY, task_weights, task_cfg, 2, PROMPT)[1]


def test_flops_accounting(task_weights, task_cfg):
    n = sum(map(len, DOCS))
    full = _report("full", task_weights, task_cfg)
    assert full.forward_flops == full_prefill_flops(task_cfg, len(PROMPT), [16] * 3)
    assert full.relative_to_full == 1.0 and full.realign_ops == 0
    none = _report("none", task_weights, task_cfg)
    assert none.forward_flops == 0 and none.selection_flops == 0
    # docs 1 and 2 move by their offsets; doc 0 moves by the prompt length
    assert none.realign_ops == n * task_cfg.n_layers * task_cfg.n_heads * task_cfg.head_dim
    half = _report("random_ratio", task_weights, task_cfg, ratio=0.5)
    doc_flops = block_flops(task_cfg, n, len(PROMPT) + n)
    assert half.forward_flops == pytest.approx(0.5 * doc_flops, rel=0.05)
    dev = _report("deviation", task_weights, task_cfg, ratio=0.2)
    assert dev.selection_flops > 0 and none.total < dev.total < full.total * 1.5
    for r in (full, none, half, dev):
        assert r.total == r.realign_ops + r.forward_flops + r.selection_flops


def test_ratio_forward_flops_monotone(task_weights, task_cfg):
    vals = [_report("random_ratio", task_weights, task_cfg, ratio=r).forward_flops for r in (0.1, 0.3, 0.5, 0.9)]
    assert vals == sorted(vals) and vals[0] > 0


def test_deviation_selection_is_deterministic_and_sized(task_weights, task_cfg):
    a, dev = select_deviation(DOCS, 0.25, task_weights, task_cfg)
    b, _ = select_deviation(DOCS, 0.25, task_weights, task_cfg)
    assert [x.tolist() for x in a.per_doc] == [x.tolist() for x in b.per_doc]
    assert [len(x) for x in a.per_doc] == [4, 4, 4]
    # the first document sees no new context, so its deviations are ~0
    assert dev[0].max() < 1e-4 < dev[1].max()
    for d, picks in zip(dev, a.per_doc):
        assert d[picks].min() >= np.delete(d, picks).max() - 1e-12


def test_attention_topk_scores_are_a_distribution(task_weights, task_cfg):
    sel, scores = select_attention_topk(DOCS, QUERY, 0.25, task_weights, task_cfg)
    assert sum(s.sum() for s in scores) == pytest.approx(1.0, abs=1e-5)
    assert [len(x) for x in sel.per_doc] == [4, 4, 4]


def test_selective_needs_query_for_attention(task_weights, task_cfg):
    with pytest.raises(ValueError):
        prepare(RecomputePolicy("attention_topk", 0.2), DOCS, task_weights, task_cfg)


def test_prepare_meter_is_closed(task_weights, task_cfg):
    prep = prepare(RecomputePolicy("boundary_anchor", anchors=2), DOCS, task_weights, task_cfg)
    assert prep.meter.closed and prep.selection.total == 6
    assert prep.meter.reading(flops.FORWARD) > 0
