"""End-to-end orchestration: data -> hints -> stage 1 -> stage 2 -> router -> eval.

The toy pipeline stands in a pretraining phase for the full-scale "frozen
pretrained backbone": the base model trains on <question; hint> -> answer
sequences, then serves both as the frozen stage-1 reference and as the
frozen base of the student. The slow model is a separate backbone trained
on explicit derivations, skewed toward needs_slow instances so that it
overthinks easy ones the way a reasoning-tuned model does.

Every stage derives its seed from the run seed, so a full pipeline run is
reproducible end to end.
"""

from __future__ import annotations

import copy
import random
import zlib
from dataclasses import dataclass, field

import torch

from .backbone import Backbone, FastThinker
from .codebook import CodebookParams, RefinerParams
from .config import RunConfig, config_digest
from .datapipe import (BuildReport, HintRecord, Problem, SyntheticTeacher,
                       build_dataset)
from .errors import ConfigError
from .evaluate import (EvalReport, build_routing_dataset, evaluate, extract_answer)
from .router import RouterParams, RouterTrainConfig, RoutingExample, train_router
from .synth import (NEEDS_SLOW, SyntheticTask, VOCAB, generate_synthetic,
                    reference_tokens)
from .training import (AlignmentBatch, LMTrainConfig, MetricsLogger, Stage2Example,
                       clone_frozen_reference, run_stage1, run_stage2, train_lm)


def derive_seed(base: int, tag: str) -> int:
    return (base * 1000003 + zlib.crc32(tag.encode())) % (2 ** 31)


def seed_torch(seed: int) -> None:
    torch.manual_seed(seed)


def generate_splits(cfg: RunConfig) -> dict[str, list[SyntheticTask]]:
    """Train/test/router splits sharing one world (key->strategy) rule."""
    d = cfg.data
    world = cfg.seed
    return {
        "train": generate_synthetic(d.family, d.train_n, derive_seed(cfg.seed, "train"),
                                    d.hard_fraction, d.n_operands, world_seed=world),
        "test": generate_synthetic(d.family, d.test_n, derive_seed(cfg.seed, "test"),
                                   d.hard_fraction, d.n_operands, world_seed=world),
        "router": generate_synthetic(d.family, d.router_n, derive_seed(cfg.seed, "router"),
                                     d.hard_fraction, d.n_operands, world_seed=world),
    }


def new_backbone(cfg: RunConfig, with_adapters: bool = True) -> Backbone:
    if cfg.backbone.vocab_size < VOCAB.size:
        raise ConfigError(
            f"backbone vocab_size {cfg.backbone.vocab_size} < task vocabulary {VOCAB.size}"
        )
    return Backbone(cfg.backbone, cfg.adapters if with_adapters else None)


def new_student(cfg: RunConfig, base: FastThinker) -> FastThinker:
    """Frozen copy of the pretrained base plus a fresh codebook stack."""
    backbone = copy.deepcopy(base.backbone)
    codebook = CodebookParams(cfg.codebook.M, cfg.codebook.K, cfg.backbone.hidden)
    refiner = RefinerParams(cfg.backbone.hidden, cfg.codebook.refiner_hidden or None)
    return FastThinker(backbone, codebook, refiner)


def reference_example(task: SyntheticTask, hint_text: str) -> Stage2Example:
    ref, _span = reference_tokens(task, hint_text)
    return Stage2Example(tokens=ref + task.gold, question_len=len(ref))


def pretrain_base(cfg: RunConfig, train_tasks: list[SyntheticTask],
                  log: MetricsLogger | None = None) -> FastThinker:
    """Train the stand-in pretrained backbone on <question; hint> -> answer."""
    seed_torch(derive_seed(cfg.seed, "base-init"))
    base = FastThinker(new_backbone(cfg, with_adapters=True))
    data = [reference_example(t, t.hint_text) for t in train_tasks]
    train_lm(data, base, cfg.pretrain, seed=derive_seed(cfg.seed, "pretrain"),
             log=log, stage="pretrain")
    base.eval()
    return base


def make_student_fn(base: FastThinker, max_new: int):
    """Student callable for hint verification: decode conditioned on <x; hint>."""
    def student(problem: Problem, hint_text: str):
        task = problem.meta["task"]
        ref, _span = reference_tokens(task, hint_text)
        res = base.greedy(ref, max_new, VOCAB.EOS, use_thinking=False)
        answer = extract_answer(res.tokens)
        return " ".join(VOCAB.decode(answer)) if answer else ""
    return student


def problems_from_tasks(tasks: list[SyntheticTask]) -> list[Problem]:
    return [Problem(id=t.id, x=t.question, y=t.gold_str, task_kind="synthetic",
                    meta={"hint_text": t.hint_text, "task": t}) for t in tasks]


def build_hints(cfg: RunConfig, tasks: list[SyntheticTask],
                base: FastThinker) -> tuple[list[HintRecord], BuildReport]:
    teacher = SyntheticTeacher(seed=derive_seed(cfg.seed, "teacher"))
    problems = problems_from_tasks(tasks)
    student = make_student_fn(base, cfg.eval.max_new)
    return build_dataset(problems, teacher, student, cfg.datapipe.max_retries)


def stage1_examples(records: list[HintRecord],
                    tasks_by_id: dict[str, SyntheticTask]) -> list[AlignmentBatch]:
    out = []
    for rec in records:
        task = tasks_by_id[rec.problem_id]
        ref, span = reference_tokens(task, rec.accepted_hint.text)
        out.append(AlignmentBatch(tokens_with_rationale=ref, rationale_span=span,
                                  tokens_plain=task.question))
    return out


def stage2_examples(records: list[HintRecord],
                    tasks_by_id: dict[str, SyntheticTask]) -> list[Stage2Example]:
    out = []
    for rec in records:
        task = tasks_by_id[rec.problem_id]
        out.append(Stage2Example(tokens=task.question + task.gold,
                                 question_len=len(task.question)))
    return out


def slow_examples(cfg: RunConfig, tasks: list[SyntheticTask]) -> list[Stage2Example]:
    """Derivation targets, skewed toward needs_slow instances."""
    hard = [t for t in tasks if t.difficulty == NEEDS_SLOW]
    easy = [t for t in tasks if t.difficulty != NEEDS_SLOW]
    chosen = list(hard)
    if hard and easy:
        rng = random.Random(derive_seed(cfg.seed, "slow-mix"))
        n_easy = round(len(easy) * cfg.slow.easy_fraction)
        chosen += rng.sample(easy, n_easy)
    elif not hard:
        chosen = easy
    return [Stage2Example(tokens=t.question + t.slow_target, question_len=len(t.question))
            for t in chosen]


def train_slow_model(cfg: RunConfig, train_tasks: list[SyntheticTask],
                     log: MetricsLogger | None = None) -> FastThinker:
    seed_torch(derive_seed(cfg.seed, "slow-init"))
    slow = FastThinker(new_backbone(cfg, with_adapters=False))
    data = slow_examples(cfg, train_tasks)
    slow_cfg = LMTrainConfig(lr=cfg.slow.lr, epochs=cfg.slow.epochs,
                             batch_size=cfg.slow.batch_size)
    train_lm(data, slow, slow_cfg, seed=derive_seed(cfg.seed, "slow"), log=log,
             stage="slow")
    slow.eval()
    return slow


@dataclass
class PipelineResult:
    cfg: RunConfig
    splits: dict[str, list[SyntheticTask]]
    base: FastThinker
    student: FastThinker
    slow: FastThinker
    router: RouterParams
    records: list[HintRecord]
    build_report: BuildReport
    routing_examples: list[RoutingExample]
    s_ell: float
    router_metrics: dict
    reports: dict[str, EvalReport] = field(default_factory=dict)
    outcomes: dict[str, list] = field(default_factory=dict)
    losses: dict[str, list[float]] = field(default_factory=dict)


def run_full_pipeline(cfg: RunConfig, log: MetricsLogger | None = None,
                      modes: tuple[str, ...] = ("fast_only", "slow_only", "routed"),
                      ) -> PipelineResult:
    """Deterministic end-to-end run returning models, reports, and artifacts."""
    splits = generate_splits(cfg)
    tasks_by_id = {t.id: t for split in splits.values() for t in split}

    base = pretrain_base(cfg, splits["train"], log)
    records, build_report = build_hints(cfg, splits["train"], base)

    seed_torch(derive_seed(cfg.seed, "student-init"))
    student = new_student(cfg, base)
    reference = clone_frozen_reference(base)

    losses = {}
    losses["stage1"] = run_stage1(stage1_examples(records, tasks_by_id), student,
                                  reference, cfg.stage1,
                                  seed=derive_seed(cfg.seed, "stage1"), log=log)
    losses["stage2"] = run_stage2(stage2_examples(records, tasks_by_id), student,
                                  cfg.stage2, seed=derive_seed(cfg.seed, "stage2"),
                                  log=log)
    student.eval()

    slow = train_slow_model(cfg, splits["train"], log)

    routing_examples, s_ell = build_routing_dataset(student, slow, splits["router"],
                                                    cfg.eval.max_new)
    router_cfg = cfg.router
    seed_torch(derive_seed(cfg.seed, "router-init"))
    router, router_metrics = train_router(
        routing_examples,
        RouterTrainConfig(d=router_cfg.d, epochs=router_cfg.epochs, lr=router_cfg.lr,
                          batch_size=router_cfg.batch_size,
                          lambda_len=router_cfg.lambda_len,
                          lambda_reg=router_cfg.lambda_reg,
                          val_fraction=router_cfg.val_fraction,
                          seed=derive_seed(cfg.seed, "router")),
        s_ell=s_ell,
    )

    result = PipelineResult(cfg=cfg, splits=splits, base=base, student=student,
                            slow=slow, router=router, records=records,
                            build_report=build_report,
                            routing_examples=routing_examples, s_ell=s_ell,
                            router_metrics=router_metrics, losses=losses)
    for mode in modes:
        report, outcomes = evaluate(student, slow, router, splits["test"], mode,
                                    cfg.eval.max_new)
        result.reports[mode] = report
        result.outcomes[mode] = outcomes
    return result


def pipeline_digest(cfg: RunConfig) -> int:
    return config_digest(cfg)
