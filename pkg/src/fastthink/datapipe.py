"""Concise-hint dataset construction with leak checking and verification.

For each problem a teacher proposes a short hint; the hint is rejected if
its canonical form contains the canonical gold answer, otherwise a student
model predicts the answer conditioned on <problem; hint> and a task-specific
checker verifies the prediction. The loop re-queries the teacher with the
accumulated (hint, prediction) history and keeps the first hint that passes
both checks. Leaked hints count against the retry budget; transport failures
do not.

Canonicalization: lowercase, split on punctuation/whitespace, unwrap
\\boxed{...} and similar markers, normalize numbers (strip leading zeros,
drop trailing fractional zeros, put a leading 0 before bare decimals).
"""

from __future__ import annotations

import json
import logging
import os
import re
import subprocess
import sys
import time
from dataclasses import dataclass, field, asdict

from .errors import ConfigError, PreconditionError, TransportError

logger = logging.getLogger(__name__)

TASK_KINDS = ("math_exact", "code_tests", "synthetic")

_BOXED = re.compile(r"\\boxed\s*\{([^}]*)\}")
_TOKEN = re.compile(r"[a-z]+|[0-9][0-9.]*|\.[0-9]+")


def _normalize_number(tok: str) -> str:
    tok = tok.strip(".")
    if not tok:
        return "0"
    if "." in tok:
        whole, frac = tok.split(".", 1)
        whole = whole.lstrip("0") or "0"
        frac = frac.rstrip("0")
        return f"{whole}.{frac}" if frac else whole
    return tok.lstrip("0") or "0"


def canonical_tokens(text: str) -> list[str]:
    """Canonical token list of arbitrary answer/hint text."""
    text = _BOXED.sub(r" \1 ", str(text)).lower()
    out = []
    for tok in _TOKEN.findall(text):
        if tok[0].isdigit() or tok[0] == ".":
            out.append(_normalize_number(tok))
        else:
            out.append(tok)
    return out


def canonical_label(text: str) -> str:
    return " ".join(canonical_tokens(text))


@dataclass
class Problem:
    id: str
    x: object                 # text or synthetic token encoding
    y: str                    # canonical gold label
    task_kind: str = "synthetic"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if not str(self.y):
            raise ConfigError("gold label must be non-empty")
        if self.task_kind not in TASK_KINDS:
            raise ConfigError(f"unknown task kind {self.task_kind!r}")


@dataclass
class Hint:
    text: str
    attempt_index: int = 0

    def __post_init__(self):
        if not self.text:
            raise ConfigError("hint text must be non-empty")


@dataclass
class HistoryEntry:
    hint: str
    prediction: str | None    # None when rejected before the student ran
    reason: str               # "leak" | "wrong"


@dataclass
class HintRecord:
    problem_id: str
    accepted_hint: Hint
    history: list[HistoryEntry]
    attempts_used: int


@dataclass
class HintFailure:
    problem_id: str
    history: list[HistoryEntry]
    attempts_used: int


def leak_check(hint, gold: str) -> bool:
    """True iff the canonical gold answer occurs as a contiguous token run
    inside the canonicalized hint."""
    text = hint.text if isinstance(hint, Hint) else str(hint)
    hint_toks = canonical_tokens(text)
    gold_toks = canonical_tokens(str(gold))
    if not gold_toks:
        return False
    n, m = len(hint_toks), len(gold_toks)
    return any(hint_toks[i:i + m] == gold_toks for i in range(n - m + 1))


@dataclass
class VerifyResult:
    ok: bool
    diagnostic: str | None = None

    def __bool__(self) -> bool:
        return self.ok


def verify(prediction, gold, task_kind: str, tests: str | None = None,
           timeout: float = 5.0) -> VerifyResult:
    """Task-specific correctness check.

    math_exact compares canonical labels; synthetic compares token sequences
    exactly; code_tests runs the prediction plus its unit tests in a
    subprocess and treats a timeout as failure with its own diagnostic.
    """
    if task_kind == "math_exact":
        ok = canonical_label(str(prediction)) == canonical_label(str(gold))
        return VerifyResult(ok)
    if task_kind == "synthetic":
        p = prediction if isinstance(prediction, (list, tuple)) else str(prediction).split()
        g = gold if isinstance(gold, (list, tuple)) else str(gold).split()
        return VerifyResult([str(t) for t in p] == [str(t) for t in g])
    if task_kind == "code_tests":
        if tests is None:
            raise ConfigError("code_tests verification needs a test snippet")
        source = f"{prediction}\n\n{tests}\n"
        try:
            proc = subprocess.run([sys.executable, "-c", source],
                                  capture_output=True, timeout=timeout)
        except subprocess.TimeoutExpired:
            return VerifyResult(False, f"sandbox timeout after {timeout}s")
        if proc.returncode != 0:
            return VerifyResult(False, proc.stderr.decode(errors="replace")[-500:] or "failed")
        return VerifyResult(True)
    raise ConfigError(f"task kind {task_kind!r} not registered")


class SyntheticTeacher:
    """Deterministic teacher for synthetic problems.

    Emits the problem's ground-truth hint with an attempt-indexed phrasing,
    so retries are reproducible pure functions of (problem, history, seed).
    """

    kind = "synthetic_deterministic"
    PHRASINGS = ("{hint}", "use {hint}", "try {hint}", "consider {hint}")

    def __init__(self, seed: int = 0):
        self.seed = seed

    def generate(self, problem: Problem, history: list[HistoryEntry]) -> Hint:
        base = problem.meta.get("hint_text")
        if not base:
            raise ConfigError(f"problem {problem.id} carries no hint_text metadata")
        t = len(history)
        text = self.PHRASINGS[(t + self.seed) % len(self.PHRASINGS)].format(hint=base)
        return Hint(text=text, attempt_index=t)


class ScriptedTeacher:
    """Replays a fixed hint script per problem id (test instrumentation)."""

    kind = "synthetic_deterministic"

    def __init__(self, scripts: dict[str, list[str]]):
        self.scripts = scripts
        self.calls: dict[str, int] = {}

    def generate(self, problem: Problem, history: list[HistoryEntry]) -> Hint:
        t = len(history)
        script = self.scripts[problem.id]
        self.calls[problem.id] = self.calls.get(problem.id, 0) + 1
        return Hint(text=script[min(t, len(script) - 1)], attempt_index=t)


class RemoteTeacher:
    """Completion-endpoint client: prompt + history out, hint text back.

    Transport errors retry up to max_transport_retries times with exponential
    backoff, then raise TransportError; those retries never consume hint
    attempts.
    """

    kind = "remote_completion"

    def __init__(self, url: str, timeout: float = 30.0, template_id: str = "default",
                 auth_env: str = "FASTTHINK_TEACHER_TOKEN", session=None,
                 max_transport_retries: int = 2, backoff: float = 0.5):
        self.url = url
        self.timeout = timeout
        self.template_id = template_id
        self.auth_env = auth_env
        self.max_transport_retries = max_transport_retries
        self.backoff = backoff
        if session is None:
            import requests
            session = requests.Session()
        self.session = session

    def _headers(self) -> dict:
        headers = {"Content-Type": "application/json"}
        token = os.environ.get(self.auth_env, "")
        if token:
            headers["Authorization"] = f"Bearer {token}"
        return headers

    def generate(self, problem: Problem, history: list[HistoryEntry]) -> Hint:
        payload = {
            "template": self.template_id,
            "problem": str(problem.x),
            "history": [{"hint": h.hint, "prediction": h.prediction} for h in history],
        }
        last = None
        for attempt in range(self.max_transport_retries + 1):
            try:
                resp = self.session.post(self.url, json=payload, headers=self._headers(),
                                         timeout=self.timeout)
                if resp.status_code != 200:
                    raise TransportError(f"teacher endpoint returned {resp.status_code}")
                return Hint(text=resp.json()["hint"], attempt_index=len(history))
            except TransportError as exc:
                last = exc
            except Exception as exc:  # requests transport errors
                last = TransportError(str(exc))
            if attempt < self.max_transport_retries:
                time.sleep(self.backoff * (2 ** attempt))
        raise last


def make_teacher(kind: str, **kwargs):
    if kind == "synthetic_deterministic":
        return SyntheticTeacher(seed=kwargs.get("seed", 0))
    if kind == "remote_completion":
        return RemoteTeacher(**kwargs)
    raise ConfigError(f"unknown teacher kind {kind!r}")


def build_hint(problem: Problem, teacher, student, max_retries: int = 4):
    """First-valid hint construction loop; returns HintRecord or HintFailure.

    student is a callable (problem, hint_text) -> prediction.
    """
    if max_retries < 1:
        raise PreconditionError("max_retries must be >= 1")
    history: list[HistoryEntry] = []
    for t in range(max_retries):
        hint = teacher.generate(problem, history)
        if leak_check(hint, problem.y):
            history.append(HistoryEntry(hint=hint.text, prediction=None, reason="leak"))
            continue
        prediction = student(problem, hint.text)
        result = verify(prediction, problem.y, problem.task_kind,
                        tests=problem.meta.get("tests"))
        if result:
            return HintRecord(problem_id=problem.id, accepted_hint=hint,
                              history=list(history), attempts_used=t + 1)
        pred_str = " ".join(str(p) for p in prediction) \
            if isinstance(prediction, (list, tuple)) else str(prediction)
        history.append(HistoryEntry(hint=hint.text, prediction=pred_str, reason="wrong"))
    return HintFailure(problem_id=problem.id, history=history, attempts_used=max_retries)


@dataclass
class BuildReport:
    total: int = 0
    accepted: int = 0
    failed: int = 0
    leak_rejections: int = 0
    verify_rejections: int = 0
    mean_attempts: float = 0.0
    failed_ids: list[str] = field(default_factory=list)


def build_dataset(problems: list[Problem], teacher, student,
                  max_retries: int = 4) -> tuple[list[HintRecord], BuildReport]:
    """Apply build_hint over all problems; accepted records keep input order."""
    if not problems:
        raise PreconditionError("no problems to process")
    records: list[HintRecord] = []
    report = BuildReport(total=len(problems))
    attempts = []
    for problem in problems:
        outcome = build_hint(problem, teacher, student, max_retries)
        report.leak_rejections += sum(1 for h in outcome.history if h.reason == "leak")
        report.verify_rejections += sum(1 for h in outcome.history if h.reason == "wrong")
        if isinstance(outcome, HintRecord):
            records.append(outcome)
            report.accepted += 1
            attempts.append(outcome.attempts_used)
        else:
            report.failed += 1
            report.failed_ids.append(outcome.problem_id)
    report.mean_attempts = sum(attempts) / len(attempts) if attempts else 0.0
    return records, report


def save_hint_dataset(records: list[HintRecord], problems: dict[str, Problem], path) -> None:
    """Line-delimited UTF-8 records: {id, x, hint, y, attempts, history[]}."""
    with open(path, "w", encoding="utf-8") as f:
        for rec in records:
            problem = problems[rec.problem_id]
            row = {
                "id": rec.problem_id,
                "x": problem.x,
                "hint": rec.accepted_hint.text,
                "y": problem.y,
                "attempts": rec.attempts_used,
                "history": [asdict(h) for h in rec.history],
            }
            f.write(json.dumps(row) + "\n")


def load_hint_dataset(path) -> list[dict]:
    rows = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            if line.strip():
                rows.append(json.loads(line))
    return rows
