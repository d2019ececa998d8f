"""Synthetic task families with recoverable latent strategies.

Three families share one small vocabulary:

- strategy_lookup: a key token selects one of eight digit-list strategies
  through a hidden permutation; solving without the strategy hint requires
  inferring the key->strategy map.
- modular_arith: an op token (sum/max mod 10) over a digit list; the
  fast_solvable tier uses 2 operands, the needs_slow tier 6, and slow-path
  derivations restate the operands then emit running partials.
- sequence_transform: reverse / increment / sort a digit sequence.

Every task carries its gold answer, a concise hint ("plan c", "op sum"),
and a slow-path derivation target, all derived deterministically from the
seed. Strategies and tiers are assigned round-robin before shuffling, so
class balance is exact rather than probabilistic.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass, field, asdict

from .errors import ConfigError, PreconditionError

FAMILIES = ("strategy_lookup", "strategy_pair", "modular_arith", "sequence_transform")

FAST_SOLVABLE = "fast_solvable"
NEEDS_SLOW = "needs_slow"


class Vocab:
    """Fixed token registry shared by all families."""

    PAD, EOS, SEP, HINT, THINK = 0, 1, 2, 3, 4

    def __init__(self):
        self._words: list[str] = ["<pad>", "<eos>", "<sep>", "<hint>", "<think>"]
        self._ids: dict[str, int] = {w: i for i, w in enumerate(self._words)}
        for d in range(10):
            self._add(str(d))
        for ch in "abcdefgh":
            self._add(ch)
        for k in range(8):
            self._add(f"k{k}")
        for op in ("sum", "max", "rev", "inc", "sort"):
            self._add(op)

    def _add(self, word: str) -> int:
        self._ids[word] = len(self._words)
        self._words.append(word)
        return self._ids[word]

    @property
    def size(self) -> int:
        return len(self._words)

    def id(self, word: str) -> int:
        if word not in self._ids:
            raise ConfigError(f"unknown vocabulary word {word!r}")
        return self._ids[word]

    def has(self, word: str) -> bool:
        return word in self._ids

    def word(self, token_id: int) -> str:
        return self._words[token_id]

    def digit(self, d: int) -> int:
        return self.id(str(d))

    def encode_words(self, words: list[str]) -> list[int]:
        return [self.id(w) for w in words]

    def decode(self, ids: list[int]) -> list[str]:
        return [self.word(i) for i in ids]


VOCAB = Vocab()

STRATEGY_NAMES = "abcdefgh"


def _strategy_fn(s: int):
    """Pairwise mod-10 sums: every strategy needs the frozen adder circuits
    the base learns under hint supervision, so none is trivially re-derivable
    from the bare question."""
    return {
        0: lambda d: (d[0] + d[1]) % 10,
        1: lambda d: (d[1] + d[2]) % 10,
        2: lambda d: (d[2] + d[3]) % 10,
        3: lambda d: (d[0] + d[3]) % 10,
        4: lambda d: (d[0] + d[2]) % 10,
        5: lambda d: (d[1] + d[3]) % 10,
        6: lambda d: (d[0] + d[1] + 1) % 10,
        7: lambda d: (d[2] + d[3] + 1) % 10,
    }[s]


def _gen_strategy_pair(rng: random.Random, index: int, world_seed: int,
                       n_operands: int = 4) -> SyntheticTask:
    """Two key tokens compose additively into the latent strategy."""
    a, b = index % 8, (index // 8) % 8
    perm = _key_permutation(world_seed)
    digits = [rng.randrange(10) for _ in range(n_operands)]
    s = perm[(a + b) % 8]
    ans = _strategy_fn(s)(digits)
    question = ([VOCAB.id(f"k{a}"), VOCAB.id(f"k{b}")]
                + [VOCAB.digit(d) for d in digits] + [Vocab.SEP])
    gold = [VOCAB.digit(ans), Vocab.EOS]
    letter = STRATEGY_NAMES[s]
    slow = [Vocab.THINK, VOCAB.id(letter), Vocab.SEP, VOCAB.digit(ans), Vocab.EOS]
    return SyntheticTask(
        id="", family="strategy_pair", strategy_id=s, question=question,
        gold=gold, difficulty=FAST_SOLVABLE, hint_text=f"plan {letter}",
        slow_target=slow, meta={"keys": [a, b], "digits": digits},
    )


@dataclass
class SyntheticTask:
    id: str
    family: str
    strategy_id: int
    question: list[int]        # token ids, ends with SEP
    gold: list[int]            # fast answer ids, ends with EOS
    difficulty: str
    hint_text: str
    slow_target: list[int]     # derivation + SEP + answer + EOS
    meta: dict = field(default_factory=dict)

    @property
    def gold_answer(self) -> list[int]:
        return self.gold[:-1]

    @property
    def gold_str(self) -> str:
        return " ".join(VOCAB.decode(self.gold_answer))


def hint_tokens(hint_text: str) -> list[int]:
    """[HINT, word ids...] for a hint like 'plan c' or 'op sum'.

    Filler words outside the vocabulary are dropped; the informative words
    must be encodable.
    """
    words = [w for w in hint_text.split() if VOCAB.has(w)]
    if not words:
        raise ConfigError(f"hint {hint_text!r} has no encodable words")
    return [Vocab.HINT] + VOCAB.encode_words(words)


def reference_tokens(task: SyntheticTask, hint_text: str) -> tuple[list[int], tuple[int, int]]:
    """Question with the hint spliced before SEP; returns (tokens, hint span)."""
    body = task.question[:-1]
    hint = hint_tokens(hint_text)
    span = (len(body), len(body) + len(hint))
    return body + hint + [Vocab.SEP], span


def _gen_strategy_lookup(rng: random.Random, index: int, world_seed: int,
                         n_operands: int = 4) -> SyntheticTask:
    key = index % 8
    perm = _key_permutation(world_seed)
    digits = [rng.randrange(10) for _ in range(n_operands)]
    s = perm[key]
    ans = _strategy_fn(s)(digits)
    question = [VOCAB.id(f"k{key}")] + [VOCAB.digit(d) for d in digits] + [Vocab.SEP]
    gold = [VOCAB.digit(ans), Vocab.EOS]
    letter = STRATEGY_NAMES[s]
    slow = [Vocab.THINK, VOCAB.id(letter), Vocab.SEP, VOCAB.digit(ans), Vocab.EOS]
    return SyntheticTask(
        id="", family="strategy_lookup", strategy_id=s, question=question,
        gold=gold, difficulty=FAST_SOLVABLE, hint_text=f"plan {letter}",
        slow_target=slow, meta={"key": key, "digits": digits},
    )


def _key_permutation(seed: int) -> list[int]:
    """Hidden key->strategy map, fixed for a given dataset seed."""
    perm = list(range(8))
    random.Random(seed ^ 0x5EED).shuffle(perm)
    return perm


def _gen_modular(rng: random.Random, index: int, tier: str) -> SyntheticTask:
    op = ("sum", "max")[index % 2]
    m = 2 if tier == FAST_SOLVABLE else 6
    digits = [rng.randrange(10) for _ in range(m)]
    if op == "sum":
        partials = []
        acc = digits[0]
        for d in digits[1:]:
            acc = (acc + d) % 10
            partials.append(acc)
        ans = acc
    else:
        partials = []
        acc = digits[0]
        for d in digits[1:]:
            acc = max(acc, d)
            partials.append(acc)
        ans = acc
    question = [VOCAB.id(op)] + [VOCAB.digit(d) for d in digits] + [Vocab.SEP]
    gold = [VOCAB.digit(ans), Vocab.EOS]
    slow = ([Vocab.THINK] + [VOCAB.digit(d) for d in digits]
            + [VOCAB.digit(p) for p in partials]
            + [Vocab.SEP, VOCAB.digit(ans), Vocab.EOS])
    return SyntheticTask(
        id="", family="modular_arith", strategy_id=0 if op == "sum" else 1,
        question=question, gold=gold, difficulty=tier,
        hint_text=f"op {op}", slow_target=slow,
        meta={"op": op, "digits": digits},
    )


def _gen_sequence(rng: random.Random, index: int) -> SyntheticTask:
    op = ("rev", "inc", "sort")[index % 3]
    length = rng.randrange(3, 6)
    digits = [rng.randrange(10) for _ in range(length)]
    if op == "rev":
        out = digits[::-1]
    elif op == "inc":
        out = [(d + 1) % 10 for d in digits]
    else:
        out = sorted(digits)
    question = [VOCAB.id(op)] + [VOCAB.digit(d) for d in digits] + [Vocab.SEP]
    gold = [VOCAB.digit(d) for d in out] + [Vocab.EOS]
    slow = ([Vocab.THINK] + [VOCAB.digit(d) for d in digits]
            + [Vocab.SEP] + [VOCAB.digit(d) for d in out] + [Vocab.EOS])
    return SyntheticTask(
        id="", family="sequence_transform",
        strategy_id=("rev", "inc", "sort").index(op),
        question=question, gold=gold, difficulty=FAST_SOLVABLE,
        hint_text=f"op {op}", slow_target=slow,
        meta={"op": op, "digits": digits},
    )


def generate_synthetic(family: str, n: int, seed: int, hard_fraction: float = 0.0,
                       n_operands: int = 4, world_seed: int | None = None) -> list[SyntheticTask]:
    """Deterministic task list; strategies (and tiers) balanced round-robin.

    world_seed fixes cross-split structure (the key->strategy permutation) so
    train and test splits generated with different seeds share one rule.
    """
    if n < 1:
        raise PreconditionError("n must be >= 1")
    if family not in FAMILIES:
        raise ConfigError(f"unknown family {family!r}; choose one of {FAMILIES}")
    if world_seed is None:
        world_seed = seed
    rng = random.Random(seed)
    tasks: list[SyntheticTask] = []
    n_hard = round(n * hard_fraction)
    for i in range(n):
        if family == "strategy_lookup":
            t = _gen_strategy_lookup(rng, i, world_seed, n_operands)
        elif family == "strategy_pair":
            t = _gen_strategy_pair(rng, i, world_seed, n_operands)
        elif family == "modular_arith":
            tier = NEEDS_SLOW if i < n_hard else FAST_SOLVABLE
            t = _gen_modular(rng, i, tier)
        else:
            t = _gen_sequence(rng, i)
        tasks.append(t)
    rng.shuffle(tasks)
    for i, t in enumerate(tasks):
        t.id = f"{family}-{seed}-{i:05d}"
    return tasks


def save_tasks(tasks: list[SyntheticTask], path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for t in tasks:
            f.write(json.dumps(asdict(t)) + "\n")


def load_tasks(path) -> list[SyntheticTask]:
    out = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            if line.strip():
                out.append(SyntheticTask(**json.loads(line)))
    return out
