import csv
import hashlib
import json
import math

import numpy as np
import pytest
import yaml

from kvpacket import cli, kvcache
from kvpacket.model import load_checkpoint

TINY = {
    "seed": 3,
    "checkpoint": "model.kvpw",
    "adapters": "adapters.kvpa",
    "out": "out",
    "store": "store",
    "domains": ["needle", "multihop"],
    "strategies": ["full", "none", "packet", "random_ratio=0.5"],
    "model": {"d_model": 16, "n_layers": 2, "n_heads": 2, "head_dim": 8, "ffn_dim": 32},
    "pretrain": {"steps": 4, "copy_steps": 2, "batch_size": 2, "eval_every": 100, "eval_n": 2,
                 "eval_docs": 2, "eval_doc_len": 16, "threshold": 0.0},
    "task": {"n_docs": 2, "doc_len": 16, "n_facts": 1, "n_eval": 2, "min_accuracy": 0.0},
    "train": {"epochs": 2, "batch_size": 2, "n_samples": 3, "max_gen": 2},
}


def _sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("run")
    (d / "run.yaml").write_text(yaml.safe_dump(TINY))
    assert cli.main(["pretrain", "--config", str(d / "run.yaml")]) == 0
    return d


def _main(run_dir, *args):
    return cli.main([args[0], "--config", str(run_dir / "run.yaml"), *args[1:]])


def test_pretrain_outputs_and_probe(run_dir):
    ckpt = run_dir / "model.kvpw"
    probe = json.loads(ckpt.with_suffix(".probe.json").read_text())
    weights = load_checkpoint(ckpt)
    assert probe["sha256"] == weights.fingerprint().hex()
    got = cli.probe_logits(weights, weights.config)
    np.testing.assert_allclose(got, np.array(probe["logits"]), atol=1e-6)
    with open(run_dir / "out" / "pretrain_loss.csv") as fh:
        assert len(list(csv.DictReader(fh))) == TINY["pretrain"]["steps"]


def test_pretrain_same_seed_same_checkpoint(run_dir, tmp_path):
    (tmp_path / "run.yaml").write_text(yaml.safe_dump(TINY))
    assert cli.main(["pretrain", "--config", str(tmp_path / "run.yaml")]) == 0
    assert _sha(tmp_path / "model.kvpw") == _sha(run_dir / "model.kvpw")
    assert cli.main(["pretrain", "--config", str(tmp_path / "run.yaml"), "--seed", "4"]) == 0
    assert _sha(tmp_path / "model.kvpw") != _sha(run_dir / "model.kvpw")


def test_pretrain_gate_failure_exit_code(tmp_path):
    raw = {**TINY, "pretrain": {**TINY["pretrain"], "threshold": 1.0}}
    (tmp_path / "run.yaml").write_text(yaml.safe_dump(raw))
    assert cli.main(["pretrain", "--config", str(tmp_path / "run.yaml")]) == cli.EXIT_TRAINING
    assert (tmp_path / "out" / "pretrain_eval.json").is_file()


def test_config_errors_exit_2(tmp_path, capsys):
    assert cli.main(["bench", "--config", str(tmp_path / "missing.yaml")]) == cli.EXIT_CONFIG
    (tmp_path / "run.yaml").write_text(yaml.safe_dump({**TINY, "typo": 1}))
    assert cli.main(["pretrain", "--config", str(tmp_path / "run.yaml")]) == cli.EXIT_CONFIG
    assert "typo" in capsys.readouterr().err
    with pytest.raises(SystemExit):
        cli.main(["pretrain"])


def test_missing_checkpoint_is_config_error(tmp_path):
    (tmp_path / "run.yaml").write_text(yaml.safe_dump(TINY))
    assert cli.main(["build-cache", "--config", str(tmp_path / "run.yaml")]) == cli.EXIT_CONFIG


def test_full_pipeline(run_dir):
    out = run_dir / "out"
    # plain caches only, before adapters exist
    assert _main(run_dir, "build-cache") == 0
    plain = kvcache.CacheStore(run_dir / "store" / "plain")
    n_docs = len(TINY["domains"]) * TINY["task"]["n_eval"] * TINY["task"]["n_docs"]
    assert len(plain.doc_ids()) == n_docs
    before = {i: _sha(plain.root / f"{i}.kvpc") for i in plain.doc_ids()}
    # rebuilding without --overwrite collides
    assert _main(run_dir, "build-cache") == cli.EXIT_INVARIANT
    assert _main(run_dir, "build-cache", "--overwrite") == 0
    assert {i: _sha(plain.root / f"{i}.kvpc") for i in plain.doc_ids()} == before

    assert _main(run_dir, "train-adapters") == 0
    with open(out / "loss.mixture.csv") as fh:
        n_rows = len(list(csv.DictReader(fh)))
    n_samples = TINY["train"]["n_samples"] * len(TINY["domains"])
    assert n_rows == TINY["train"]["epochs"] * math.ceil(n_samples / TINY["train"]["batch_size"])

    assert _main(run_dir, "build-cache", "--overwrite") == 0
    packets = kvcache.CacheStore(run_dir / "store" / "packets")
    entry = packets.get(packets.doc_ids()[0])
    assert entry.token_count == TINY["task"]["doc_len"] + 16

    assert _main(run_dir, "bench") == 0
    with open(out / "results.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == len(TINY["strategies"]) * len(TINY["domains"]) * TINY["task"]["n_eval"]
    assert all(int(r["forward_flops"]) == 0 for r in rows if r["strategy"] == "packet")
    assert all(float(r["relative_flops"]) == 1.0 for r in rows if r["strategy"] == "full")
    for name in ("summary.json", "f1_vs_flops.svg", "f1_vs_ttft.svg"):
        assert (out / name).is_file()
    assert (out / "f1_vs_flops.svg").read_text().lstrip().startswith("<?xml")

    assert _main(run_dir, "attn-report") == 0
    with open(out / "attention.csv") as fh:
        att = list(csv.DictReader(fh))
    assert {r["strategy"] for r in att} == {"none", "packet"}
    packet_pos = [int(r["position"]) for r in att if r["strategy"] == "packet"]
    assert sorted(packet_pos) == list(range(len(packet_pos)))
    summary = json.loads((out / "attention_summary.json").read_text(),
                         parse_constant=lambda c: pytest.fail(f"non-JSON constant {c}"))
    assert summary["none"]["header"] is None
    for strat in ("none", "packet"):
        rs = [r for r in att if r["strategy"] == strat]
        for region in ("prompt", "document"):
            vals = [float(r["mean_score"]) for r in rs if r["region"] == region]
            assert abs(np.mean(vals) - summary[strat][region]) < 1e-9


def test_bench_strategy_flag_and_seed_determinism(run_dir, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for d in (a, b):
        assert _main(run_dir, "bench", "--strategy", "none", "--domain", "needle", "--out", str(d)) == 0
    cols = ("strategy", "domain", "instance_id", "f1", "total_flops", "load_s")
    rows = []
    for d in (a, b):
        with open(d / "results.csv") as fh:
            rows.append([{c: r[c] for c in cols} for r in csv.DictReader(fh)])
    assert rows[0] == rows[1] and len(rows[0]) == TINY["task"]["n_eval"]


def test_bench_without_adapters_is_config_error(run_dir, tmp_path):
    raw = {**TINY, "adapters": str(tmp_path / "none.kvpa"), "checkpoint": str(run_dir / "model.kvpw")}
    (tmp_path / "run.yaml").write_text(yaml.safe_dump(raw))
    assert cli.main(["bench", "--config", str(tmp_path / "run.yaml")]) == cli.EXIT_CONFIG


def test_train_adapters_matrix(run_dir, tmp_path):
    raw = {**TINY, "checkpoint": str(run_dir / "model.kvpw"), "domains": list(cli.tasks.DOMAINS),
           "train": {**TINY["train"], "epochs": 1}}
    (tmp_path / "run.yaml").write_text(yaml.safe_dump(raw))
    assert cli.main(["train-adapters", "--config", str(tmp_path / "run.yaml"), "--matrix"]) == 0
    for row in cli.MATRIX_ROWS:
        assert (tmp_path / f"adapters.{row}.kvpa").is_file()
    # the all-domain run doubles as the mixture row
    assert (tmp_path / "adapters.mixture.kvpa").read_bytes() == (tmp_path / "adapters.kvpa").read_bytes()
    assert not (tmp_path / "out" / "loss.kv_biography.csv").read_text() == ""
    assert cli.main(["bench", "--config", str(tmp_path / "run.yaml"), "--strategy", "packet"]) == 0
    assert (tmp_path / "out" / "matrix.csv").read_text().count("\n") == 1 + len(cli.MATRIX_ROWS)


def test_zero_sample_corpus_is_config_error(run_dir, tmp_path):
    raw = {**TINY, "checkpoint": str(run_dir / "model.kvpw"), "train": {**TINY["train"], "n_samples": 0}}
    (tmp_path / "run.yaml").write_text(yaml.safe_dump(raw))
    assert cli.main(["train-adapters", "--config", str(tmp_path / "run.yaml")]) == cli.EXIT_CONFIG
