"""Fast/slow escalation gate trained from paired executions.

The gate projects the pooled question vector and the K thinking-token
vectors to a shared space, aggregates token evidence by attention, scores
the concatenated evidence with a small MLP, and compares the score against
an adaptive threshold theta + beta1*entropy + beta2*tanh(predicted_gap/tau).
Escalation labels come from paired fast/slow runs: positive when only the
slow pass succeeds, negative whenever the fast pass succeeds, ignored when
both fail. The loss is class-balanced BCE on (score - threshold) plus a
smooth-L1 penalty on the predicted normalized length gap and an L2 penalty
on the two threshold slopes.
"""

from __future__ import annotations

import logging
import math
import random
from dataclasses import dataclass, field

import torch
from torch import nn

from .errors import ConfigError, NumericError, PreconditionError

logger = logging.getLogger(__name__)

POSITIVE = "positive"
NEGATIVE = "negative"


class RouterParams(nn.Module):
    """Projections, scoring MLP, length-gap regressor, and threshold scalars."""

    def __init__(self, hidden: int, d: int = 64):
        super().__init__()
        if d < 1:
            raise ConfigError("projection dimension must be positive")
        self.d = d
        self.proj = nn.Linear(hidden, d)
        self.score_mlp = nn.Sequential(nn.Linear(2 * d, d), nn.Tanh(), nn.Linear(d, 1))
        self.reg_head = nn.Linear(2 * d + 2, 1)
        self.theta = nn.Parameter(torch.zeros(()))
        self.beta1 = nn.Parameter(torch.zeros(()))
        self.beta2 = nn.Parameter(torch.zeros(()))
        self.register_buffer("tau", torch.ones(()))
        self.register_buffer("s_ell", torch.ones(()))

    def set_length_scale(self, s_ell: float) -> None:
        if s_ell <= 0:
            raise ConfigError("length scale must be positive")
        self.s_ell.fill_(s_ell)


@dataclass
class RouterFeatures:
    z_q: torch.Tensor          # (d,)
    z_t: torch.Tensor          # (K, d)
    attn: torch.Tensor         # (K,), sums to 1
    z_t_bar: torch.Tensor      # (d,)
    u: torch.Tensor            # (2d,)
    cos_sim: torch.Tensor      # scalar in [-1, 1]
    entropy: torch.Tensor      # scalar in [0, 1]


@dataclass
class RoutingExample:
    """One paired execution: raw inputs for the gate plus its outcome labels."""

    example_id: str
    q: torch.Tensor            # (H,) pooled question vector
    tokens: torch.Tensor       # (K, H) thinking-token vectors
    fast_correct: bool
    slow_correct: bool
    fast_len: int
    slow_len: int
    label: str | None = None
    length_gap_norm: float = 0.0
    difficulty: str = ""
    features: RouterFeatures | None = None


@dataclass
class RoutingDecision:
    use_think: bool
    raw_logit: float
    delta_theta: float
    predicted_gap: float


def _entropy_normalized(attn: torch.Tensor) -> torch.Tensor:
    k = attn.shape[-1]
    if k == 1:
        return attn.new_zeros(())
    ent = -torch.special.xlogy(attn, attn).sum()
    return ent / math.log(k)


def extract_features(q: torch.Tensor, tokens: torch.Tensor,
                     params: RouterParams) -> RouterFeatures:
    """Project, attend with 1/sqrt(d) scaling, and compute the two scalars."""
    if tokens.dim() != 2 or tokens.shape[0] < 1:
        raise PreconditionError("need at least one thinking-token vector")
    z_q = params.proj(q)
    z_t = params.proj(tokens)
    logits = z_t @ z_q / math.sqrt(params.d)
    attn = torch.softmax(logits, dim=0)
    z_t_bar = attn @ z_t
    nq, nt = z_q.norm(), z_t_bar.norm()
    if float(nq) < 1e-12 or float(nt) < 1e-12:
        raise NumericError("zero-norm vector in router cosine")
    cos = (z_q * z_t_bar).sum() / (nq * nt)
    u = torch.cat([z_q, z_t_bar])
    return RouterFeatures(z_q=z_q, z_t=z_t, attn=attn, z_t_bar=z_t_bar, u=u,
                          cos_sim=cos, entropy=_entropy_normalized(attn))


def adaptive_threshold(u_n, predicted_gap, params: RouterParams) -> torch.Tensor:
    """beta1 * entropy + beta2 * tanh(predicted_gap / tau)."""
    u_n = torch.as_tensor(u_n, dtype=torch.float32)
    gap = torch.as_tensor(predicted_gap, dtype=torch.float32)
    return params.beta1 * u_n + params.beta2 * torch.tanh(gap / params.tau)


def _score(features: RouterFeatures, params: RouterParams):
    raw = params.score_mlp(features.u).squeeze(-1)
    reg_in = torch.cat([features.u, features.cos_sim.reshape(1), features.entropy.reshape(1)])
    gap_hat = params.reg_head(reg_in).squeeze(-1)
    delta = adaptive_threshold(features.entropy, gap_hat, params)
    return raw, gap_hat, delta


def decide(features: RouterFeatures, params: RouterParams) -> RoutingDecision:
    """Escalate iff raw_logit >= theta + delta_theta (inclusive)."""
    with torch.no_grad():
        raw, gap_hat, delta = _score(features, params)
        for name, v in (("raw_logit", raw), ("predicted_gap", gap_hat), ("delta_theta", delta)):
            if not torch.isfinite(v):
                raise NumericError(f"non-finite router {name}")
        use = bool(raw >= params.theta + delta)
    return RoutingDecision(use_think=use, raw_logit=float(raw),
                           delta_theta=float(delta), predicted_gap=float(gap_hat))


def make_label(fast_correct: bool, slow_correct: bool) -> str | None:
    """Positive iff only the slow pass succeeds; negative whenever fast
    succeeds; None (ignored) when both fail."""
    if fast_correct:
        return NEGATIVE
    if slow_correct:
        return POSITIVE
    return None


def router_loss(batch: list[RoutingExample], params: RouterParams,
                lambda_len: float = 0.1, lambda_reg: float = 1e-4) -> torch.Tensor:
    """Class-balanced BCE on (raw - threshold) plus length and slope penalties.

    Per-class weights are inversely proportional to class frequency in the
    batch, normalized to mean 1; a single-class batch degenerates to uniform
    weights.
    """
    labeled = [ex for ex in batch if ex.label is not None]
    if not labeled:
        raise PreconditionError("batch contains no labeled examples")
    qs = torch.stack([ex.q for ex in labeled])
    toks = torch.stack([ex.tokens for ex in labeled])
    y = torch.tensor([1.0 if ex.label == POSITIVE else 0.0 for ex in labeled])
    gap_true = torch.tensor([ex.length_gap_norm for ex in labeled])

    z_q = params.proj(qs)                                    # (B, d)
    z_t = params.proj(toks)                                  # (B, K, d)
    logits = (z_t @ z_q.unsqueeze(-1)).squeeze(-1) / math.sqrt(params.d)
    attn = torch.softmax(logits, dim=-1)                     # (B, K)
    z_bar = (attn.unsqueeze(-1) * z_t).sum(dim=1)            # (B, d)
    nq = z_q.norm(dim=1)
    nb = z_bar.norm(dim=1)
    if bool((nq < 1e-12).any()) or bool((nb < 1e-12).any()):
        raise NumericError("zero-norm vector in router cosine")
    cos = (z_q * z_bar).sum(dim=1) / (nq * nb)
    k = toks.shape[1]
    if k == 1:
        ent = torch.zeros_like(cos)
    else:
        ent = -torch.special.xlogy(attn, attn).sum(dim=1) / math.log(k)
    u = torch.cat([z_q, z_bar], dim=1)
    raw = params.score_mlp(u).squeeze(-1)
    gap_hat = params.reg_head(torch.cat([u, cos[:, None], ent[:, None]], dim=1)).squeeze(-1)
    delta = params.beta1 * ent + params.beta2 * torch.tanh(gap_hat / params.tau)
    margin = raw - (params.theta + delta)

    counts = {POSITIVE: sum(1 for ex in labeled if ex.label == POSITIVE),
              NEGATIVE: sum(1 for ex in labeled if ex.label == NEGATIVE)}
    inv = torch.tensor([1.0 / counts[ex.label] for ex in labeled])
    weights = inv * len(labeled) / inv.sum()

    bce = nn.functional.binary_cross_entropy_with_logits(margin, y, reduction="none")
    loss = (weights * bce).mean()
    if lambda_len:
        loss = loss + lambda_len * nn.functional.smooth_l1_loss(gap_hat, gap_true, beta=1.0)
    if lambda_reg:
        loss = loss + lambda_reg * (params.beta1 ** 2 + params.beta2 ** 2)
    return loss


@dataclass
class RouterTrainConfig:
    d: int = 64
    epochs: int = 150
    lr: float = 1e-3
    batch_size: int = 32
    lambda_len: float = 0.1
    lambda_reg: float = 1e-4
    val_fraction: float = 0.2
    seed: int = 0


def train_router(dataset: list[RoutingExample], config: RouterTrainConfig,
                 params: RouterParams | None = None,
                 s_ell: float | None = None) -> tuple[RouterParams, dict]:
    """Optimize the gate on labeled examples; returns held-out metrics.

    The length scale s_ell (mean fast-path generation length of the routing
    split) is frozen into the returned params.
    """
    labeled = [ex for ex in dataset if ex.label is not None]
    if not labeled:
        raise PreconditionError("dataset is empty after filtering ignored examples")
    n_pos = sum(1 for ex in labeled if ex.label == POSITIVE)
    if n_pos == 0 or n_pos == len(labeled):
        logger.warning("router dataset has a single class; class weights are uniform")

    if params is None:
        hidden = labeled[0].q.shape[0]
        params = RouterParams(hidden, d=config.d)
    if s_ell is not None:
        params.set_length_scale(s_ell)

    rng = random.Random(config.seed)
    order = list(range(len(labeled)))
    rng.shuffle(order)
    n_val = int(len(order) * config.val_fraction)
    val_idx, train_idx = order[:n_val], order[n_val:]
    train_set = [labeled[i] for i in train_idx] or labeled
    val_set = [labeled[i] for i in val_idx] or labeled

    opt = torch.optim.Adam(params.parameters(), lr=config.lr)
    for _ in range(config.epochs):
        rng.shuffle(train_idx)
        pool = [labeled[i] for i in train_idx] or labeled
        for lo in range(0, len(pool), config.batch_size):
            batch = pool[lo:lo + config.batch_size]
            opt.zero_grad()
            loss = router_loss(batch, params, config.lambda_len, config.lambda_reg)
            loss.backward()
            opt.step()

    correct = 0
    for ex in val_set:
        dec = decide(extract_features(ex.q, ex.tokens, params), params)
        want = ex.label == POSITIVE
        correct += int(dec.use_think == want)
    metrics = {
        "val_accuracy": correct / len(val_set),
        "n_train": len(train_set),
        "n_val": len(val_set),
        "n_positive": n_pos,
        "n_negative": len(labeled) - n_pos,
    }
    return params, metrics
