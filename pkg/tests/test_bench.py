import csv
import json

import numpy as np
import pytest

from kvpacket import tasks
from kvpacket.bench import (
    RESULT_COLUMNS,
    Bench,
    BenchConfigError,
    Strategy,
    check_invariants,
    cross_domain_matrix,
    measure_ttft,
    parse_strategy,
    run_suite,
    write_matrix,
)
from kvpacket.packet import init_adapters

DIFF = tasks.Difficulty(3, 16, 1)


@pytest.fixture(scope="module")
def bench(task_weights, task_cfg):
    return Bench(task_weights, task_cfg, init_adapters(task_weights, seed=0))


@pytest.fixture(scope="module")
def instances():
    return {d: tasks.gen_tasks(d, 2, DIFF, seed=0) for d in ("needle", "multihop")}


def test_parse_strategy():
    assert parse_strategy("packet") == Strategy("packet")
    assert parse_strategy("random_ratio=0.3") == Strategy("random_ratio", 0.3)
    assert parse_strategy("boundary_anchor=4").policy_params == "anchors=4"
    s = parse_strategy("packet+key_norm_prune=0.5")
    assert (s.prune_rate, s.prune_method, s.label) == (0.5, "key_norm", "packet[prune=key_norm:0.5]")
    for bad in ("random_ratio", "packet=0.3", "warp", "full+random_prune=0.2", "packet+random_prune=1.0"):
        with pytest.raises(BenchConfigError):
            parse_strategy(bad)


def test_suite_rows_and_invariants(bench, instances, tmp_path):
    strategies = [Strategy("full"), Strategy("none"), Strategy("packet"), Strategy("random_ratio", 0.5),
                  Strategy("no_cache")]
    res = run_suite(strategies, instances, bench)
    assert len(res.rows) == len(strategies) * 2 * 2
    assert res.violations == []
    for r in res.rows:
        assert set(r) == set(RESULT_COLUMNS)
        if r["strategy"] == "packet":
            assert r["forward_flops"] == 0 and r["selection_flops"] == 0 and r["realign_ops"] > 0
        if r["strategy"] == "full":
            assert r["relative_flops"] == 1.0 and r["load_s"] == 0.0
        if r["strategy"] == "no_cache":
            assert r["load_s"] == 0.0 and r["total_flops"] == 0
        if r["strategy"] in ("none", "packet"):
            assert r["load_s"] > 0
    paths = res.write(tmp_path)
    with open(paths["results"]) as fh:
        assert len(list(csv.DictReader(fh))) == len(res.rows)
    summary = json.loads(paths["summary"].read_text())
    assert set(summary["summary"]) == {"full", "none", "packet", "random_ratio[r=0.5]", "no_cache"}


def test_load_time_scales_with_packet_bytes(bench, instances):
    off = bench.offline(instances["needle"][0])
    packet = bench.run(Strategy("packet"), off)
    none = bench.run(Strategy("none"), off)
    ratio = off.packet_bytes / off.doc_bytes
    assert packet["load_s"] / none["load_s"] == pytest.approx(ratio)
    assert ratio > 1.0  # adapter tokens are stored with every packet


def test_pruned_packets_keep_adapters(bench, instances):
    off = bench.offline(instances["needle"][0])
    cache, meter = bench.prep(Strategy("packet", prune_rate=0.5), off)
    assert meter.reading("forward") == 0
    row = bench.run(Strategy("packet", prune_rate=0.5), off)
    assert 0.0 <= row["f1"] <= 1.0


def test_invariant_checker_flags_bad_rows():
    base = dict(strategy="packet", policy_params="", domain="needle", instance_id=0, f1=0.5, realign_ops=1,
                forward_flops=5, selection_flops=0, total_flops=6, relative_flops=0.1)
    assert any("packet forward_flops" in v for v in check_invariants([base]))
    assert any("additivity" in v for v in check_invariants([{**base, "forward_flops": 0}]))
    full = {**base, "strategy": "full", "forward_flops": 10, "realign_ops": 0, "total_flops": 10,
            "relative_flops": 1.0}
    sel = {**full, "strategy": "random_ratio", "policy_params": "r=0.5", "forward_flops": 20, "total_flops": 20,
           "relative_flops": 2.0}
    assert any("selective" in v for v in check_invariants([full, sel]))


def test_measure_ttft_needs_five_reps(bench, instances):
    inst = instances["needle"][0]
    with pytest.raises(BenchConfigError):
        measure_ttft(Strategy("packet"), inst, bench, reps=3)
    rep = measure_ttft(Strategy("no_cache"), inst, bench)
    assert rep.load_time == 0.0 and rep.prep_time >= 0 and rep.ttft > 0


def test_packet_needs_adapters(task_weights, task_cfg, instances):
    with pytest.raises(BenchConfigError):
        run_suite([Strategy("packet")], instances, Bench(task_weights, task_cfg))


def test_cross_domain_matrix(task_weights, task_cfg, instances, tmp_path):
    rows = {"needle": init_adapters(task_weights, seed=1), "mixture": init_adapters(task_weights, seed=2)}
    m = cross_domain_matrix(rows, instances, task_weights, task_cfg)
    assert set(m) == set(rows) and all(set(v) == set(instances) for v in m.values())
    write_matrix(m, tmp_path / "m.csv")
    with open(tmp_path / "m.csv") as fh:
        got = list(csv.reader(fh))
    assert got[0] == ["train_domain", "multihop", "needle", "min"]
    assert float(got[1][-1]) == pytest.approx(min(m["needle"].values()))
