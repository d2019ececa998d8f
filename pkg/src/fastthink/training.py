"""Two-stage optimization plus gradient auditing.

Stage 1 aligns pooled thinking-slot states with pooled rationale-span states
of a frozen reference pass (cosine alignment at the insert layer plus a mean
over deeper layers); only the codebook stack trains. Stage 2 drops explicit
rationales and minimizes answer NLL with thinking tokens injected; the
codebook stack and adapters at layers >= L train at their own learning
rates. Base weights never move in either stage.

finite_diff_audit compares autograd gradients against central differences on
randomly sampled coordinates and reports the worst relative error.
"""

from __future__ import annotations

import copy
import json
import math
import random
from dataclasses import dataclass, field

import torch

from .backbone import (FastThinker, FreezePlan, LowRankAdapter, answer_nll_from_logits,
                       freeze_plan)
from .errors import ConfigError, NumericError, PreconditionError


@dataclass
class Stage1Config:
    alpha: float = 1.0
    beta: float = 1.0
    layers: tuple[int, ...] = ()  # empty -> {L+1, ..., num_layers}
    lr: float = 1e-4
    epochs: int = 2
    batch_size: int = 4
    grad_accum: int = 4

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0 or self.alpha + self.beta <= 0:
            raise ConfigError("need alpha, beta >= 0 and alpha + beta > 0")

    def resolved_layers(self, insert_layer: int, num_layers: int) -> tuple[int, ...]:
        layers = self.layers or tuple(range(insert_layer + 1, num_layers + 1))
        for l in layers:
            if not (insert_layer < l <= num_layers):
                raise ConfigError(f"alignment layer {l} outside ({insert_layer}, {num_layers}]")
        return layers


@dataclass
class Stage2Config:
    lr_codebook: float = 1e-4
    lr_adapters: float = 5e-5
    epochs: int = 3
    batch_size: int = 4
    grad_accum: int = 4

    def __post_init__(self):
        for name in ("lr_codebook", "lr_adapters", "epochs", "batch_size", "grad_accum"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")


@dataclass
class AlignmentBatch:
    """One alignment example: reference tokens carry the rationale, the
    student sees the bare question."""

    tokens_with_rationale: list[int]
    rationale_span: tuple[int, int]
    tokens_plain: list[int]

    def __post_init__(self):
        lo, hi = self.rationale_span
        if not (0 <= lo < hi <= len(self.tokens_with_rationale)):
            raise ConfigError("rationale span empty or outside the reference sequence")


class MetricsLogger:
    """Line-delimited per-step metrics; kept in memory and optionally on disk."""

    def __init__(self, path=None):
        self.path = path
        self.records: list[dict] = []
        self._fh = open(path, "a", encoding="utf-8") if path else None

    def log(self, **fields):
        self.records.append(fields)
        if self._fh:
            self._fh.write(json.dumps(fields) + "\n")
            self._fh.flush()

    def close(self):
        if self._fh:
            self._fh.close()
            self._fh = None


def pad_batch(seqs: list[list[int]], qlens: list[int], device="cpu"):
    width = max(len(s) for s in seqs)
    tokens = torch.zeros(len(seqs), width, dtype=torch.long, device=device)
    for i, s in enumerate(seqs):
        tokens[i, : len(s)] = torch.tensor(s, dtype=torch.long)
    lens = torch.tensor([len(s) for s in seqs], device=device)
    return tokens, lens, torch.tensor(qlens, device=device)


def _cos(a: torch.Tensor, b: torch.Tensor, layer: int) -> torch.Tensor:
    na, nb = a.norm(), b.norm()
    if float(na) < 1e-12 or float(nb) < 1e-12:
        raise NumericError(f"zero-norm pooled vector at layer {layer}")
    return (a * b).sum() / (na * nb)


def alignment_loss(student_trace, reference_trace, rationale_span, config: Stage1Config,
                   batch_index: int = 0) -> torch.Tensor:
    """alpha*(1-cos) at the insert layer plus beta*mean(1-cos) over deeper layers.

    Pools thinking slots on the student side against the rationale span on the
    (detached) reference side; gradients reach only the student.
    """
    insert = student_trace.insert_layer
    layers = config.resolved_layers(insert, student_trace.num_layers)

    def student_vec(l):
        lo, hi = student_trace.slot_span(batch_index)
        return student_trace.state(l)[batch_index, lo:hi].mean(dim=0)

    def reference_vec(l):
        lo, hi = rationale_span
        return reference_trace.state(l)[batch_index, lo:hi].mean(dim=0).detach()

    loss = config.alpha * (1.0 - _cos(student_vec(insert), reference_vec(insert), insert))
    if layers:
        deep = [1.0 - _cos(student_vec(l), reference_vec(l), l) for l in layers]
        loss = loss + config.beta * (sum(deep) / len(deep))
    return loss


def _batched_alignment_loss(student, reference, batches: list[AlignmentBatch],
                            config: Stage1Config) -> torch.Tensor:
    """Mean of per-example alignment losses, computed with padded batches."""
    device = next(student.parameters()).device
    plain = [b.tokens_plain for b in batches]
    refs = [b.tokens_with_rationale for b in batches]
    tok_s, len_s, q_s = pad_batch(plain, [len(s) for s in plain], device)
    tok_r, len_r, q_r = pad_batch(refs, [len(s) for s in refs], device)

    _, trace_s = student(tok_s, len_s, q_s, use_thinking=True, collect_trace=True)
    with torch.no_grad():
        _, trace_r = reference(tok_r, len_r, q_r, use_thinking=False, collect_trace=True)

    insert = student.backbone.config.insert_layer
    num_layers = student.backbone.config.num_layers
    layers = config.resolved_layers(insert, num_layers)
    B = len(batches)
    K = student.K

    slot_pos = q_s[:, None] + torch.arange(K, device=device)[None, :]

    def pooled_student(l):
        st = trace_s.state(l)
        idx = slot_pos[:, :, None].expand(-1, -1, st.shape[-1])
        return st.gather(1, idx).mean(dim=1)  # (B, H)

    def pooled_reference(l):
        st = trace_r.state(l)
        S = st.shape[1]
        pos = torch.arange(S, device=device)[None, :]
        lo = torch.tensor([b.rationale_span[0] for b in batches], device=device)[:, None]
        hi = torch.tensor([b.rationale_span[1] for b in batches], device=device)[:, None]
        mask = ((pos >= lo) & (pos < hi)).to(st.dtype)
        return (st * mask[:, :, None]).sum(dim=1) / mask.sum(dim=1, keepdim=True)

    def cos_rows(a, b, l):
        na = a.norm(dim=1)
        nb = b.norm(dim=1)
        if bool((na < 1e-12).any()) or bool((nb < 1e-12).any()):
            raise NumericError(f"zero-norm pooled vector at layer {l}")
        return (a * b).sum(dim=1) / (na * nb)

    loss = config.alpha * (1.0 - cos_rows(pooled_student(insert), pooled_reference(insert), insert))
    if layers:
        deep = torch.stack(
            [1.0 - cos_rows(pooled_student(l), pooled_reference(l), l) for l in layers]
        ).mean(dim=0)
        loss = loss + config.beta * deep
    return loss.mean()


def codebook_param_groups(model: FastThinker) -> list[torch.nn.Parameter]:
    names = ("codebook.", "refiner.")
    return [p for n, p in model.named_parameters() if n.startswith(names)]


def adapter_params(model: FastThinker, min_layer: int) -> list[torch.nn.Parameter]:
    out = []
    for module in model.modules():
        if isinstance(module, LowRankAdapter) and module.layer_index >= min_layer:
            out.extend([module.A, module.B])
    return out


def apply_freeze(model: FastThinker, plan: FreezePlan) -> None:
    """Set requires_grad to match the plan's trainable identifiers."""
    adapter_idents: dict[int, str] = {}
    for module in model.modules():
        if isinstance(module, LowRankAdapter):
            adapter_idents[id(module.A)] = module.ident
            adapter_idents[id(module.B)] = module.ident

    group_of = {
        "codebook.C": "codebook",
        "codebook.Q": "queries",
        "codebook.Wq": "projections",
        "codebook.Wk": "projections",
        "codebook.Wv": "projections",
        "codebook.Wo": "projections",
        "refiner.U1": "refiner",
        "refiner.U2": "refiner",
    }
    for name, p in model.named_parameters():
        if id(p) in adapter_idents:
            p.requires_grad = adapter_idents[id(p)] in plan.trainable
        elif name in group_of:
            p.requires_grad = group_of[name] in plan.trainable
        else:
            p.requires_grad = False  # base weight


def _check_finite(loss: torch.Tensor, context: str) -> None:
    if not torch.isfinite(loss):
        raise NumericError(f"non-finite loss in {context}: {float(loss.detach())!r}")


def grad_norm(params) -> float:
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float(p.grad.pow(2).sum())
    return math.sqrt(total)


def stage1_step(batch: list[AlignmentBatch], student: FastThinker, reference: FastThinker,
                optimizer: torch.optim.Optimizer, config: Stage1Config) -> float:
    """One optimizer step on the alignment loss; returns the pre-step loss."""
    student.train()
    reference.eval()
    optimizer.zero_grad()
    loss = _batched_alignment_loss(student, reference, batch, config)
    _check_finite(loss, "stage1_step")
    loss.backward()
    optimizer.step()
    return float(loss.detach())


def run_stage1(examples: list[AlignmentBatch], student: FastThinker, reference: FastThinker,
               config: Stage1Config, seed: int = 0,
               log: MetricsLogger | None = None) -> list[float]:
    if not examples:
        raise PreconditionError("no alignment examples")
    plan = freeze_plan(student.backbone.config, [], codebook_trainable=True)
    apply_freeze(student, plan)
    params = [p for p in student.parameters() if p.requires_grad]
    optimizer = torch.optim.AdamW(params, lr=config.lr, weight_decay=0.0)
    rng = random.Random(seed)
    losses = []
    step = 0
    chunk = config.batch_size * config.grad_accum
    for _ in range(config.epochs):
        order = list(range(len(examples)))
        rng.shuffle(order)
        for lo in range(0, len(order), chunk):
            batch = [examples[i] for i in order[lo:lo + chunk]]
            loss = stage1_step(batch, student, reference, optimizer, config)
            losses.append(loss)
            if log:
                log.log(step=step, stage="stage1", loss=loss, grad_norm=grad_norm(params))
            step += 1
    return losses


@dataclass
class Stage2Example:
    tokens: list[int]
    question_len: int


def stage2_step(batch: list[Stage2Example], model: FastThinker,
                optimizer: torch.optim.Optimizer, config: Stage2Config,
                use_thinking: bool = True) -> float:
    """One optimizer step on answer NLL with thinking tokens injected."""
    model.train()
    optimizer.zero_grad()
    device = next(model.parameters()).device
    tokens, lens, qlens = pad_batch([e.tokens for e in batch],
                                    [e.question_len for e in batch], device)
    loss = model.sequence_nll(tokens, lens, qlens, use_thinking=use_thinking)
    _check_finite(loss, "stage2_step")
    loss.backward()
    optimizer.step()
    return float(loss.detach())


def run_stage2(examples: list[Stage2Example], model: FastThinker, config: Stage2Config,
               seed: int = 0, use_thinking: bool = True,
               log: MetricsLogger | None = None) -> list[float]:
    if not examples:
        raise PreconditionError("no training examples")
    plan = freeze_plan(model.backbone.config, model.backbone.adapters(),
                       codebook_trainable=model.codebook is not None)
    apply_freeze(model, plan)
    groups = []
    cb = [p for p in codebook_param_groups(model) if p.requires_grad]
    ad = [p for p in adapter_params(model, model.backbone.config.insert_layer)
          if p.requires_grad]
    if cb:
        groups.append({"params": cb, "lr": config.lr_codebook})
    if ad:
        groups.append({"params": ad, "lr": config.lr_adapters})
    if not groups:
        raise ConfigError("nothing trainable under the freeze plan")
    optimizer = torch.optim.AdamW(groups, weight_decay=0.0)
    rng = random.Random(seed)
    losses = []
    step = 0
    chunk = config.batch_size * config.grad_accum
    for _ in range(config.epochs):
        order = list(range(len(examples)))
        rng.shuffle(order)
        for lo in range(0, len(order), chunk):
            batch = [examples[i] for i in order[lo:lo + chunk]]
            loss = stage2_step(batch, model, optimizer, config, use_thinking)
            losses.append(loss)
            if log:
                all_params = cb + ad
                log.log(step=step, stage="stage2", loss=loss, grad_norm=grad_norm(all_params))
            step += 1
    return losses


@dataclass
class LMTrainConfig:
    lr: float = 3e-4
    epochs: int = 3
    batch_size: int = 16


def train_lm(examples: list[Stage2Example], model: FastThinker, config: LMTrainConfig,
             seed: int = 0, log: MetricsLogger | None = None,
             stage: str = "pretrain") -> list[float]:
    """Plain supervised LM training of all base weights (no freeze plan).

    Used to create the stand-in 'pretrained' backbone and the slow model;
    adapter factors are excluded so they stay at their zero-start state.
    """
    if not examples:
        raise PreconditionError("no training examples")
    for p in model.parameters():
        p.requires_grad = True
    params = [p for n, p in model.named_parameters() if ".adapter." not in n]
    for n, p in model.named_parameters():
        if ".adapter." in n:
            p.requires_grad = False
    optimizer = torch.optim.AdamW(params, lr=config.lr, weight_decay=0.0)
    rng = random.Random(seed)
    losses = []
    step = 0
    for _ in range(config.epochs):
        order = list(range(len(examples)))
        rng.shuffle(order)
        for lo in range(0, len(order), config.batch_size):
            batch = [examples[i] for i in order[lo:lo + config.batch_size]]
            model.train()
            optimizer.zero_grad()
            device = next(model.parameters()).device
            tokens, lens, qlens = pad_batch([e.tokens for e in batch],
                                            [e.question_len for e in batch], device)
            logits, _ = model.forward(tokens, lens, qlens, use_thinking=False)
            loss = answer_nll_from_logits(logits, tokens, lens, qlens, 0)
            _check_finite(loss, "train_lm")
            loss.backward()
            optimizer.step()
            losses.append(float(loss.detach()))
            if log:
                log.log(step=step, stage=stage, loss=losses[-1], grad_norm=grad_norm(params))
            step += 1
    return losses


def clone_frozen_reference(model: FastThinker) -> FastThinker:
    """Deep copy with every parameter frozen; serves as the stage-1 reference."""
    ref = copy.deepcopy(model)
    for p in ref.parameters():
        p.requires_grad = False
    ref.eval()
    return ref


def parameter_fingerprint(model: torch.nn.Module, exclude_trainable: bool = False) -> int:
    """Order-stable hash of parameter bytes; detects any drift."""
    import zlib
    h = 0
    for name, p in sorted(model.named_parameters()):
        if exclude_trainable and p.requires_grad:
            continue
        h = zlib.crc32(p.detach().cpu().numpy().tobytes(), h)
        h = zlib.crc32(name.encode(), h)
    return h


def finite_diff_audit(loss_fn, params: list[torch.Tensor], step: float = 1e-5,
                      samples: int = 64, seed: int = 0) -> float:
    """Worst relative error between autograd and central differences.

    Coordinates are sampled uniformly over all parameters; evaluation is
    deterministic under the seed. Intended for float64 models.
    """
    for p in params:
        p.requires_grad_(True)
    loss = loss_fn()
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    rng = random.Random(seed)
    sizes = [p.numel() for p in params]
    total = sum(sizes)
    worst = 0.0
    with torch.no_grad():
        for _ in range(samples):
            flat_idx = rng.randrange(total)
            pi = 0
            while flat_idx >= sizes[pi]:
                flat_idx -= sizes[pi]
                pi += 1
            p = params[pi]
            orig = float(p.view(-1)[flat_idx])
            p.view(-1)[flat_idx] = orig + step
            up = float(loss_fn())
            p.view(-1)[flat_idx] = orig - step
            down = float(loss_fn())
            p.view(-1)[flat_idx] = orig
            numeric = (up - down) / (2 * step)
            analytic = 0.0 if grads[pi] is None else float(grads[pi].view(-1)[flat_idx])
            denom = max(abs(analytic), abs(numeric), 1e-6)
            worst = max(worst, abs(analytic - numeric) / denom)
    return worst
