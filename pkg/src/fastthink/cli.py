"""Command-line interface.

Subcommands run one pipeline stage each and exchange artifacts through the
output directory:

    fastthink gen-data     -c run.cfg --out runs/demo
    fastthink build-hints  -c run.cfg --out runs/demo
    fastthink train-align  -c run.cfg --out runs/demo
    fastthink train-sft    -c run.cfg --out runs/demo
    fastthink train-router -c run.cfg --out runs/demo
    fastthink eval         -c run.cfg --out runs/demo [--mode routed]
    fastthink report       -c run.cfg --out runs/demo

Configuration is a flat key=value file with dotted keys
(e.g. backbone.num_layers=4); -o key=value overrides single entries.
Models that earlier stages would have produced are trained on demand, so
each subcommand also works standalone.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys

import torch

from .backbone import FastThinker
from .checkpoint import load_model, save_model
from .config import RunConfig, config_digest, dump_config, load_config
from .datapipe import save_hint_dataset
from .errors import FastthinkError
from .evaluate import MODES, build_routing_dataset, evaluate
from .pipeline import (build_hints, derive_seed, generate_splits, new_backbone,
                       new_student, pretrain_base, problems_from_tasks, seed_torch,
                       stage1_examples, stage2_examples, train_slow_model)
from .report import collect_activation_data, emit_report, write_routing_records
from .router import RouterParams, RouterTrainConfig, train_router
from .synth import load_tasks, save_tasks
from .training import (MetricsLogger, clone_frozen_reference, run_stage1, run_stage2)


def _paths(out: str) -> dict[str, str]:
    return {name: os.path.join(out, fname) for name, fname in {
        "train": "tasks_train.jsonl",
        "test": "tasks_test.jsonl",
        "router_split": "tasks_router.jsonl",
        "hints": "hints.jsonl",
        "hints_report": "hints_report.json",
        "base": "base.ckpt",
        "student": "student.ckpt",
        "slow": "slow.ckpt",
        "router": "router.ckpt",
        "metrics": "metrics.jsonl",
        "config": "config.snapshot",
        "routing_records": "routing_records.jsonl",
        "report_dir": "report",
    }.items()}


def _ensure_splits(cfg, paths):
    if all(os.path.exists(paths[k]) for k in ("train", "test", "router_split")):
        return {"train": load_tasks(paths["train"]), "test": load_tasks(paths["test"]),
                "router": load_tasks(paths["router_split"])}
    splits = generate_splits(cfg)
    save_tasks(splits["train"], paths["train"])
    save_tasks(splits["test"], paths["test"])
    save_tasks(splits["router"], paths["router_split"])
    return splits


def _ensure_base(cfg, paths, splits, log):
    base = FastThinker(new_backbone(cfg, with_adapters=True))
    if os.path.exists(paths["base"]):
        load_model(base, paths["base"], config_digest(cfg))
        base.eval()
        return base
    base = pretrain_base(cfg, splits["train"], log)
    save_model(base, paths["base"], config_digest(cfg))
    return base


def _ensure_hints(cfg, paths, splits, base):
    tasks_by_id = {t.id: t for t in splits["train"]}
    records, report = build_hints(cfg, splits["train"], base)
    problems = {p.id: p for p in problems_from_tasks(splits["train"])}
    save_hint_dataset(records, problems, paths["hints"])
    with open(paths["hints_report"], "w", encoding="utf-8") as f:
        json.dump(dataclasses.asdict(report), f, indent=2)
    return records, tasks_by_id


def _ensure_student(cfg, paths, splits, log, train: bool):
    base = _ensure_base(cfg, paths, splits, log)
    seed_torch(derive_seed(cfg.seed, "student-init"))
    student = new_student(cfg, base)
    if os.path.exists(paths["student"]) and not train:
        load_model(student, paths["student"], config_digest(cfg))
        student.eval()
        return student, base
    return student, base


def _ensure_slow(cfg, paths, splits, log):
    slow = FastThinker(new_backbone(cfg, with_adapters=False))
    if os.path.exists(paths["slow"]):
        load_model(slow, paths["slow"], config_digest(cfg))
        slow.eval()
        return slow
    slow = train_slow_model(cfg, splits["train"], log)
    save_model(slow, paths["slow"], config_digest(cfg))
    return slow


def cmd_gen_data(cfg, paths, log):
    splits = _ensure_splits(cfg, paths)
    print(f"generated {sum(len(s) for s in splits.values())} tasks "
          f"({', '.join(f'{k}={len(v)}' for k, v in splits.items())})")


def cmd_build_hints(cfg, paths, log):
    splits = _ensure_splits(cfg, paths)
    base = _ensure_base(cfg, paths, splits, log)
    records, _ = _ensure_hints(cfg, paths, splits, base)
    print(f"accepted {len(records)}/{len(splits['train'])} hints -> {paths['hints']}")


def cmd_train_align(cfg, paths, log):
    splits = _ensure_splits(cfg, paths)
    student, base = _ensure_student(cfg, paths, splits, log, train=True)
    records, tasks_by_id = _ensure_hints(cfg, paths, splits, base)
    reference = clone_frozen_reference(base)
    losses = run_stage1(stage1_examples(records, tasks_by_id), student, reference,
                        cfg.stage1, seed=derive_seed(cfg.seed, "stage1"), log=log)
    save_model(student, paths["student"], config_digest(cfg))
    print(f"stage 1 done: {len(losses)} steps, final loss {losses[-1]:.4f}")


def cmd_train_sft(cfg, paths, log):
    splits = _ensure_splits(cfg, paths)
    base = _ensure_base(cfg, paths, splits, log)
    seed_torch(derive_seed(cfg.seed, "student-init"))
    student = new_student(cfg, base)
    if os.path.exists(paths["student"]):
        load_model(student, paths["student"], config_digest(cfg))
    records, tasks_by_id = _ensure_hints(cfg, paths, splits, base)
    losses = run_stage2(stage2_examples(records, tasks_by_id), student, cfg.stage2,
                        seed=derive_seed(cfg.seed, "stage2"), log=log)
    student.eval()
    save_model(student, paths["student"], config_digest(cfg))
    print(f"stage 2 done: {len(losses)} steps, final loss {losses[-1]:.4f}")
    if cfg.slow.epochs > 0:
        slow = train_slow_model(cfg, splits["train"], log)
        save_model(slow, paths["slow"], config_digest(cfg))
        print(f"slow model trained -> {paths['slow']}")


def cmd_train_router(cfg, paths, log):
    splits = _ensure_splits(cfg, paths)
    student, _ = _ensure_student(cfg, paths, splits, log, train=False)
    slow = _ensure_slow(cfg, paths, splits, log)
    examples, s_ell = build_routing_dataset(student, slow, splits["router"],
                                            cfg.eval.max_new)
    seed_torch(derive_seed(cfg.seed, "router-init"))
    router, metrics = train_router(
        examples,
        RouterTrainConfig(d=cfg.router.d, epochs=cfg.router.epochs, lr=cfg.router.lr,
                          batch_size=cfg.router.batch_size,
                          lambda_len=cfg.router.lambda_len,
                          lambda_reg=cfg.router.lambda_reg,
                          val_fraction=cfg.router.val_fraction,
                          seed=derive_seed(cfg.seed, "router")),
        s_ell=s_ell)
    save_model(router, paths["router"], config_digest(cfg))
    print(f"router trained: val acc {metrics['val_accuracy']:.3f}, "
          f"s_ell {s_ell:.2f} -> {paths['router']}")


def cmd_eval(cfg, paths, log, mode: str | None):
    splits = _ensure_splits(cfg, paths)
    student, _ = _ensure_student(cfg, paths, splits, log, train=False)
    slow = _ensure_slow(cfg, paths, splits, log)
    router = None
    modes = (mode,) if mode else MODES
    if "routed" in modes:
        router = RouterParams(cfg.backbone.hidden, d=cfg.router.d)
        load_model(router, paths["router"], config_digest(cfg))
    for m in modes:
        report, outcomes = evaluate(student, slow, router, splits["test"], m,
                                    cfg.eval.max_new)
        out = os.path.join(os.path.dirname(paths["hints"]), f"eval_{m}.json")
        with open(out, "w", encoding="utf-8") as f:
            json.dump(dataclasses.asdict(report), f, indent=2)
        if m == "routed":
            write_routing_records(outcomes, paths["routing_records"])
        print(f"{m}: accuracy {report.accuracy:.4f}, avg len {report.avg_gen_len:.2f}, "
              f"escalation {report.escalation_rate:.3f}")


def cmd_report(cfg, paths, log):
    splits = _ensure_splits(cfg, paths)
    student, _ = _ensure_student(cfg, paths, splits, log, train=False)
    slow = _ensure_slow(cfg, paths, splits, log)
    router = None
    eval_path = os.path.join(os.path.dirname(paths["hints"]), "eval_routed.json")
    if os.path.exists(paths["router"]):
        router = RouterParams(cfg.backbone.hidden, d=cfg.router.d)
        load_model(router, paths["router"], config_digest(cfg))
        mode = "routed"
    else:
        mode = "fast_only"
    report, outcomes = evaluate(student, slow, router, splits["test"], mode,
                                cfg.eval.max_new)
    activation = collect_activation_data(student, splits["test"])
    written = emit_report(report, activation, paths["report_dir"], outcomes)
    if mode == "routed":
        write_routing_records(outcomes, paths["routing_records"])
    print(f"report written: {written['summary']}, {written['data']}")


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="fastthink",
        description="codebook-conditioned fast inference with fast/slow routing")
    parser.add_argument("-c", "--config", default=None, help="key=value config file")
    parser.add_argument("-o", "--override", action="append", default=[],
                        metavar="KEY=VALUE", help="config override (repeatable)")
    parser.add_argument("--out", default="runs/default", help="artifact directory")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("gen-data", "build-hints", "train-align", "train-sft",
                 "train-router", "report"):
        sub.add_parser(name)
    p_eval = sub.add_parser("eval")
    p_eval.add_argument("--mode", choices=MODES, default=None)

    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config, args.override)
        os.makedirs(args.out, exist_ok=True)
        paths = _paths(args.out)
        with open(paths["config"], "w", encoding="utf-8") as f:
            f.write(dump_config(cfg))
        log = MetricsLogger(paths["metrics"])
        try:
            if args.command == "gen-data":
                cmd_gen_data(cfg, paths, log)
            elif args.command == "build-hints":
                cmd_build_hints(cfg, paths, log)
            elif args.command == "train-align":
                cmd_train_align(cfg, paths, log)
            elif args.command == "train-sft":
                cmd_train_sft(cfg, paths, log)
            elif args.command == "train-router":
                cmd_train_router(cfg, paths, log)
            elif args.command == "eval":
                cmd_eval(cfg, paths, log, args.mode)
            elif args.command == "report":
                cmd_report(cfg, paths, log)
        finally:
            log.close()
    except FastthinkError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
