"""``kvpacket`` command line: pretrain, build-cache, train-adapters, bench, attn-report.

Exit codes: 0 success, 2 configuration error, 3 invariant violation,
4 training failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from kvpacket import analysis, bench, distill, kvcache, plots, tasks
from kvpacket import config as runcfg
from kvpacket.model import (
    CheckpointFormatError,
    ConfigError,
    embed_tokens,
    load_checkpoint,
    prefill,
    save_checkpoint,
)
from kvpacket.packet import AdapterFormatError, AdapterParams, empty_adapters, init_adapters, wrap
from kvpacket.pretrain import PretrainLog, TrainingFailure, pretrain_toy_model

EXIT_OK, EXIT_CONFIG, EXIT_INVARIANT, EXIT_TRAINING = 0, 2, 3, 4
MATRIX_ROWS = tasks.DOMAINS + ("mixture",)
PROBE_IDS = [tasks.BOS, tasks.PROMPT["needle"], tasks.DOC, 40, 170, 171, 300, 301, tasks.QRY, 40, tasks.ANS]

log = logging.getLogger("kvpacket")


class ConfigProblem(Exception):
    pass


class InvariantProblem(Exception):
    pass


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def _load_model(cfg: runcfg.RunConfig):
    if not cfg.checkpoint.is_file():
        raise ConfigProblem(f"model checkpoint not found: {cfg.checkpoint} (run `kvpacket pretrain` first)")
    weights = load_checkpoint(cfg.checkpoint)
    return weights, weights.config


def _load_adapters(path: Path, weights) -> AdapterParams:
    if not path.is_file():
        raise ConfigProblem(f"adapter checkpoint not found: {path} (run `kvpacket train-adapters` first)")
    adapters = AdapterParams.load(path)
    if adapters.model_hash != weights.fingerprint():
        raise ConfigProblem(f"adapters {path} were trained against a different model checkpoint")
    return adapters


def matrix_path(cfg: runcfg.RunConfig, row: str) -> Path:
    return cfg.adapters.with_name(f"{cfg.adapters.stem}.{row}{cfg.adapters.suffix}")


def eval_instances(cfg, weights, model_cfg, domains, verify: bool = True):
    verify_with = (weights, model_cfg) if verify else None
    return {d: tasks.gen_tasks(d, cfg.task.n_eval, cfg.task.difficulty(), cfg.seed_for("tasks"), verify_with,
                               cfg.task.min_accuracy)
            for d in domains}


def probe_logits(weights, model_cfg) -> np.ndarray:
    return prefill(weights, model_cfg, embed_tokens(weights, PROBE_IDS), 0, logits="last").logits.data[-1]


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_pretrain(cfg: runcfg.RunConfig, args) -> int:
    history = PretrainLog()
    cfg.out.mkdir(parents=True, exist_ok=True)
    try:
        weights = pretrain_toy_model(cfg.model, cfg.pretrain, cfg.seed_for("pretrain"), history)
    finally:
        with open(cfg.out / "pretrain_loss.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "loss"])
            w.writerows((i, f"{v:.8g}") for i, v in enumerate(history.losses))
        (cfg.out / "pretrain_eval.json").write_text(json.dumps(history.evals, indent=2))
    cfg.checkpoint.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(weights, cfg.checkpoint)
    probe = {"ids": PROBE_IDS, "logits": probe_logits(weights, weights.config).tolist(),
             "sha256": weights.fingerprint().hex()}
    cfg.checkpoint.with_suffix(".probe.json").write_text(json.dumps(probe))
    print(f"saved {cfg.checkpoint} ({history.evals[-1][1]})")
    return EXIT_OK


def cmd_build_cache(cfg: runcfg.RunConfig, args) -> int:
    weights, mc = _load_model(cfg)
    adapters = _load_adapters(cfg.adapters, weights) if cfg.adapters.is_file() else None
    domains = args.domain or cfg.domains
    insts = eval_instances(cfg, weights, mc, domains, verify=False)
    plain = kvcache.CacheStore(cfg.store / "plain")
    packed = kvcache.CacheStore(cfg.store / "packets") if adapters is not None else None
    bare_adapters = empty_adapters(mc, weights.fingerprint())
    count = 0
    for dom, items in insts.items():
        for inst in items:
            for j, doc in enumerate(inst.documents):
                doc_id = f"{dom}.{inst.instance_id}.{j}"
                plain.put(wrap(doc, bare_adapters, weights, mc, doc_id).to_entry(), overwrite=args.overwrite)
                if packed is not None:
                    packed.put(wrap(doc, adapters, weights, mc, doc_id).to_entry(), overwrite=args.overwrite)
                count += 1
    print(f"stored {count} documents under {cfg.store}" + (" (plain + packets)" if packed else " (plain)"))
    return EXIT_OK


def _train_one(cfg, weights, mc, domains, dest: Path, tag: str) -> AdapterParams:
    per_dom = {}
    for dom in domains:
        cache = cfg.out / "samples" / f"{dom}.s{cfg.seed_for('samples')}.n{cfg.train.n_samples}.kvds"
        per_dom[dom] = distill.build_samples(dom, cfg.train.n_samples, weights, mc, max_gen=cfg.train.max_gen,
                                             difficulty=cfg.task.difficulty(),
                                             seed=cfg.seed_for("samples") + tasks.DOMAINS.index(dom),
                                             cache_path=cache)
    init = init_adapters(weights, cfg.adapter.n_header, cfg.adapter.n_trailer, cfg.seed_for("adapters"))
    train_cfg = dataclasses.replace(cfg.train, seed=cfg.seed_for("adapters"))
    dest.parent.mkdir(parents=True, exist_ok=True)
    adapters, hist = distill.train_mixture(per_dom, init, train_cfg, weights, mc, checkpoint=dest,
                                           loss_csv=cfg.out / f"loss.{tag}.csv",
                                           progress=log.isEnabledFor(logging.INFO))
    final = f"final loss {hist[-1].loss:.4f}" if hist else "no steps"
    print(f"{tag}: {len(hist)} steps, {final} -> {dest}")
    return adapters


def cmd_train_adapters(cfg: runcfg.RunConfig, args) -> int:
    weights, mc = _load_model(cfg)
    domains = tuple(args.domain or cfg.domains)
    cfg.out.mkdir(parents=True, exist_ok=True)
    main = _train_one(cfg, weights, mc, domains, cfg.adapters, "mixture" if len(domains) > 1 else domains[0])
    if args.matrix:
        for row in MATRIX_ROWS:
            doms = tasks.DOMAINS if row == "mixture" else (row,)
            if set(doms) == set(domains) and len(doms) == len(domains):
                # same samples, seed and config: the run above is this row
                main.save(matrix_path(cfg, row))
                continue
            _train_one(cfg, weights, mc, doms, matrix_path(cfg, row), row)
    return EXIT_OK


def cmd_bench(cfg: runcfg.RunConfig, args) -> int:
    weights, mc = _load_model(cfg)
    strategies = tuple(bench.parse_strategy(s) for s in args.strategy) if args.strategy else cfg.strategies
    needs_packet = any(s.kind == "packet" for s in strategies)
    adapters = _load_adapters(cfg.adapters, weights) if needs_packet else None
    domains = tuple(args.domain or cfg.domains)
    insts = eval_instances(cfg, weights, mc, domains)
    b = bench.Bench(weights, mc, adapters, cfg.bandwidth_gbps)
    result = bench.run_suite(strategies, insts, b, reps=cfg.reps)
    paths = result.write(cfg.out)
    plots.tradeoff_plot(result.rows, "relative_flops", cfg.out / "f1_vs_flops.svg")
    plots.tradeoff_plot(result.rows, "ttft_s", cfg.out / "f1_vs_ttft.svg")
    if all(matrix_path(cfg, r).is_file() for r in MATRIX_ROWS):
        rows = {r: _load_adapters(matrix_path(cfg, r), weights) for r in MATRIX_ROWS}
        matrix = bench.cross_domain_matrix(rows, insts, weights, mc)
        bench.write_matrix(matrix, cfg.out / "matrix.csv")
    for label, per_dom in result.summary.items():
        print(label, {d: round(v["mean_f1"], 3) for d, v in per_dom.items()})
    print(f"wrote {paths['results']} and {paths['summary']}")
    if result.violations:
        raise InvariantProblem("; ".join(result.violations))
    return EXIT_OK


def cmd_attn_report(cfg: runcfg.RunConfig, args) -> int:
    weights, mc = _load_model(cfg)
    adapters = _load_adapters(cfg.adapters, weights)
    domains = tuple(args.domain or cfg.domains)
    insts = eval_instances(cfg, weights, mc, domains, verify=False)
    sample = [i for d in domains for i in insts[d][:max(1, 50 // len(domains))]]
    profiles = [analysis.attn_profile(s, sample, weights, mc, adapters) for s in ("none", "packet")]
    cfg.out.mkdir(parents=True, exist_ok=True)
    analysis.write_profiles(profiles, cfg.out / "attention.csv")
    plots.attention_plot(profiles, cfg.out / "attention.svg")
    # regions a strategy lacks (no adapters under "none") come out as null
    summary = {p.strategy: {"n_samples": p.n_samples, "max_row_error": p.max_row_error,
                            **{k: (None if math.isnan(v) else v) for k, v in p.region_means().items()}}
               for p in profiles}
    (cfg.out / "attention_summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    print(json.dumps(summary, indent=2, sort_keys=True))
    worst = max(p.max_row_error for p in profiles)
    if worst > analysis.ROW_SUM_TOL:
        raise InvariantProblem(f"attention rows deviate from 1 by {worst:.2e}")
    return EXIT_OK


COMMANDS = {
    "pretrain": cmd_pretrain,
    "build-cache": cmd_build_cache,
    "train-adapters": cmd_train_adapters,
    "bench": cmd_bench,
    "attn-report": cmd_attn_report,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="YAML run configuration")
    common.add_argument("--seed", type=int, help="override the top-level seed")
    common.add_argument("--out", help="override the output directory")
    common.add_argument("--strategy", action="append", help="serving strategy (repeatable)")
    common.add_argument("--domain", action="append", choices=tasks.DOMAINS, help="task domain (repeatable)")
    common.add_argument("--overwrite", action="store_true", help="replace existing cache entries")
    common.add_argument("-v", "--verbose", action="store_true")
    parser = argparse.ArgumentParser(prog="kvpacket", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, parents=[common])
        if name == "train-adapters":
            p.add_argument("--matrix", action="store_true",
                           help="also train per-domain and mixture adapters for the cross-domain matrix")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = runcfg.load(args.config)
        if args.seed is not None:
            cfg = cfg.with_seed(args.seed)
        if args.out:
            cfg.out = Path(args.out)
        return COMMANDS[args.command](cfg, args)
    except (runcfg.RunConfigError, ConfigProblem, ConfigError, CheckpointFormatError, AdapterFormatError,
            bench.BenchConfigError, distill.DistillConfigError, tasks.TaskConfigError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (InvariantProblem, kvcache.DuplicateEntryError) as exc:
        print(f"invariant violation: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    except (TrainingFailure, distill.TrainingError) as exc:
        print(f"training failure: {exc}", file=sys.stderr)
        return EXIT_TRAINING


if __name__ == "__main__":
    sys.exit(main())
