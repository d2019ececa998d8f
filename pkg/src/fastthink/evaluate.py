"""End-to-end evaluation: fast pass, slow pass, and routed execution.

Correctness is exact-match on the answer segment (tokens between the last
separator and the stop token); generation length counts emitted tokens only,
never prompt tokens or thinking slots. Routed mode extracts gate features
from the prompt forward pass alone and decodes a single branch per example;
its average length is therefore the routing-weighted mix of branch lengths.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch

from .backbone import FastThinker, pool_span
from .errors import ConfigError, PreconditionError
from .router import (RouterParams, RoutingDecision, RoutingExample, decide,
                     extract_features, make_label)
from .synth import SyntheticTask, Vocab

MODES = ("fast_only", "slow_only", "routed")


@dataclass
class EvalReport:
    total: int
    accuracy: float
    avg_gen_len: float
    fast_correct: int
    fast_wrong: int
    slow_correct: int
    slow_wrong: int
    escalation_rate: float

    def __post_init__(self):
        counted = self.fast_correct + self.fast_wrong + self.slow_correct + self.slow_wrong
        if counted != self.total:
            raise ConfigError(f"confusion cells sum to {counted}, expected {self.total}")


@dataclass
class ExampleOutcome:
    task_id: str
    branch: str            # "fast" | "slow"
    correct: bool
    gen_len: int
    difficulty: str = ""
    decision: RoutingDecision | None = None


def extract_answer(tokens: list[int]) -> list[int] | None:
    """Answer segment of an emission: before EOS, after the last SEP.

    Returns None when no stop token was emitted (treated as incorrect).
    """
    if Vocab.EOS not in tokens:
        return None
    seg = tokens[: tokens.index(Vocab.EOS)]
    if Vocab.SEP in seg:
        seg = seg[len(seg) - seg[::-1].index(Vocab.SEP):]
    return seg


def run_one(model: FastThinker, task: SyntheticTask, max_new: int,
            use_thinking: bool) -> tuple[bool, int, list[int]]:
    res = model.greedy(task.question, max_new, Vocab.EOS, use_thinking=use_thinking)
    answer = extract_answer(res.tokens)
    correct = answer == task.gold_answer
    return correct, res.length, res.tokens


@dataclass
class PairedOutcome:
    task: SyntheticTask
    fast_correct: bool
    fast_len: int
    slow_correct: bool
    slow_len: int


def run_paired(fast_model: FastThinker, slow_model: FastThinker,
               tasks: list[SyntheticTask], max_new: int) -> list[PairedOutcome]:
    out = []
    for task in tasks:
        fc, fl, _ = run_one(fast_model, task, max_new, use_thinking=True)
        sc, sl, _ = run_one(slow_model, task, max_new, use_thinking=False)
        out.append(PairedOutcome(task, fc, fl, sc, sl))
    return out


def report_from_outcomes(outcomes: list[ExampleOutcome]) -> EvalReport:
    total = len(outcomes)
    if total == 0:
        raise PreconditionError("empty evaluation set")
    cells = {"fast": [0, 0], "slow": [0, 0]}
    for o in outcomes:
        cells[o.branch][0 if o.correct else 1] += 1
    correct = cells["fast"][0] + cells["slow"][0]
    escalated = sum(cells["slow"])
    return EvalReport(
        total=total,
        accuracy=correct / total,
        avg_gen_len=sum(o.gen_len for o in outcomes) / total,
        fast_correct=cells["fast"][0],
        fast_wrong=cells["fast"][1],
        slow_correct=cells["slow"][0],
        slow_wrong=cells["slow"][1],
        escalation_rate=escalated / total,
    )


def prompt_features(fast_model: FastThinker, task: SyntheticTask):
    """Pooled question vector (insert layer of the fast pass) plus the
    current thinking-token vectors."""
    device = next(fast_model.parameters()).device
    tokens = torch.tensor([task.question], dtype=torch.long, device=device)
    lens = torch.tensor([len(task.question)], device=device)
    qlens = lens.clone()
    with torch.no_grad():
        _, trace = fast_model(tokens, lens, qlens, use_thinking=True, collect_trace=True)
        q = pool_span(trace, fast_model.backbone.config.insert_layer,
                      trace.question_span(0))
        thinking = fast_model.thinking().T
    return q.detach().clone(), thinking.detach().clone()


def evaluate(fast_model: FastThinker | None, slow_model: FastThinker | None,
             router: RouterParams | None, tasks: list[SyntheticTask], mode: str,
             max_new: int = 24) -> tuple[EvalReport, list[ExampleOutcome]]:
    """Evaluate one execution mode over a task list."""
    if mode not in MODES:
        raise ConfigError(f"unknown mode {mode!r}")
    if not tasks:
        raise PreconditionError("empty evaluation set")
    if mode == "routed" and router is None:
        raise ConfigError("routed mode needs a trained router")
    if mode in ("fast_only", "routed") and fast_model is None:
        raise ConfigError(f"{mode} needs the fast model")
    if mode in ("slow_only", "routed") and slow_model is None:
        raise ConfigError(f"{mode} needs the slow model")

    outcomes: list[ExampleOutcome] = []
    for task in tasks:
        decision = None
        if mode == "fast_only":
            branch = "fast"
        elif mode == "slow_only":
            branch = "slow"
        else:
            q, thinking = prompt_features(fast_model, task)
            decision = decide(extract_features(q, thinking, router), router)
            branch = "slow" if decision.use_think else "fast"
        if branch == "fast":
            correct, length, _ = run_one(fast_model, task, max_new, use_thinking=True)
        else:
            correct, length, _ = run_one(slow_model, task, max_new, use_thinking=False)
        outcomes.append(ExampleOutcome(task_id=task.id, branch=branch, correct=correct,
                                       gen_len=length, difficulty=task.difficulty,
                                       decision=decision))
    return report_from_outcomes(outcomes), outcomes


def policy_report(paired: list[PairedOutcome], escalate: list[bool]) -> EvalReport:
    """Report for an arbitrary escalation policy over paired executions."""
    if len(paired) != len(escalate):
        raise PreconditionError("policy flags must match the paired outcomes")
    outcomes = []
    for p, up in zip(paired, escalate):
        if up:
            outcomes.append(ExampleOutcome(p.task.id, "slow", p.slow_correct, p.slow_len,
                                           p.task.difficulty))
        else:
            outcomes.append(ExampleOutcome(p.task.id, "fast", p.fast_correct, p.fast_len,
                                           p.task.difficulty))
    return report_from_outcomes(outcomes)


def random_escalation_flags(n: int, n_escalate: int, seed: int) -> list[bool]:
    """Exactly n_escalate True flags at uniformly random positions."""
    import random as _random
    if not 0 <= n_escalate <= n:
        raise PreconditionError("escalation count out of range")
    picks = set(_random.Random(seed).sample(range(n), n_escalate))
    return [i in picks for i in range(n)]


def build_routing_dataset(fast_model: FastThinker, slow_model: FastThinker,
                          tasks: list[SyntheticTask],
                          max_new: int = 24) -> tuple[list[RoutingExample], float]:
    """Paired executions -> labeled routing examples plus the length scale
    s_ell (mean fast-path generation length over this split)."""
    if not tasks:
        raise PreconditionError("no tasks for the routing dataset")
    paired = run_paired(fast_model, slow_model, tasks, max_new)
    s_ell = sum(p.fast_len for p in paired) / len(paired)
    s_ell = max(s_ell, 1e-6)
    examples = []
    for p in paired:
        q, thinking = prompt_features(fast_model, p.task)
        examples.append(RoutingExample(
            example_id=p.task.id, q=q, tokens=thinking,
            fast_correct=p.fast_correct, slow_correct=p.slow_correct,
            fast_len=p.fast_len, slow_len=p.slow_len,
            label=make_label(p.fast_correct, p.slow_correct),
            length_gap_norm=(p.slow_len - p.fast_len) / s_ell,
            difficulty=p.task.difficulty,
        ))
    return examples, s_ell
