"""Toy decoder-only transformer with mid-stack thinking-token injection.

Layout of one sequence: [question tokens][K thinking slots][answer tokens].
Layers below the insert layer L run on the text rows alone, so hidden states
of input positions are bit-identical to a run without injection. At layer L
the K slot rows are spliced in (refined thinking vectors plus learned slot
embeddings) and stay visible to all answer-side positions from then on.
Slots never consume vocabulary positions and are never emitted.

Visibility above L: answer-side tokens attend all slots and all earlier
text; slots attend the question and each other; question tokens never see
slots. The first answer token is predicted from the last slot row (or the
last question row when no slots are present).

Per-layer adapters follow W' = W + BA with B zero-initialized, attached to
q/v projections and the gated MLP of every layer; the freeze plan keeps
only adapters at layers >= L (plus the codebook stack) trainable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .codebook import CodebookParams, RefinerParams, ThinkingTokens, attend, refine
from .errors import CapacityError, ConfigError, PreconditionError

ADAPTER_TARGETS = ("q_proj", "v_proj", "gate_proj", "up_proj", "down_proj")
ATTN_TARGETS = ("q_proj", "v_proj")


@dataclass
class BackboneConfig:
    num_layers: int = 4
    hidden: int = 64
    num_heads: int = 4
    vocab_size: int = 40
    max_seq: int = 96
    insert_layer: int = 0  # 0 -> ceil(0.75 * num_layers)
    ffn_mult: int = 4

    def __post_init__(self):
        if self.insert_layer == 0:
            self.insert_layer = math.ceil(0.75 * self.num_layers)
        self.validate()

    def validate(self) -> None:
        if self.hidden % self.num_heads != 0:
            raise ConfigError(f"hidden={self.hidden} not divisible by num_heads={self.num_heads}")
        if not (1 <= self.insert_layer <= self.num_layers):
            raise ConfigError(
                f"insert_layer={self.insert_layer} outside [1, {self.num_layers}]"
            )
        for name in ("num_layers", "hidden", "num_heads", "vocab_size", "max_seq"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")


@dataclass
class AdapterConfig:
    rank: int = 8
    alpha: float = 16.0
    dropout: float = 0.05
    targets: tuple[str, ...] = ADAPTER_TARGETS


class LowRankAdapter(nn.Module):
    """Trainable low-rank residual BA for one frozen linear map."""

    def __init__(self, d_in: int, d_out: int, rank: int, alpha: float,
                 dropout: float, layer_index: int, target: str):
        super().__init__()
        if not 0.0 <= dropout < 1.0:
            raise ConfigError(f"dropout must be in [0,1), got {dropout}")
        self.r = rank
        self.scale = alpha / rank
        self.dropout_p = dropout
        self.layer_index = layer_index
        self.target = target
        self.A = nn.Parameter(torch.randn(rank, d_in) / math.sqrt(d_in))
        self.B = nn.Parameter(torch.zeros(d_out, rank))
        self.drop = nn.Dropout(dropout)

    @property
    def ident(self) -> str:
        return f"adapter:layer{self.layer_index}:{self.target}"


def apply_adapter(base_output: torch.Tensor, adapter: LowRankAdapter,
                  x: torch.Tensor) -> torch.Tensor:
    """base_output + scale * B(A x), with dropout on Ax in training mode."""
    if x.shape[-1] != adapter.A.shape[1] or base_output.shape[-1] != adapter.B.shape[0]:
        raise ConfigError("adapter shapes do not match input/output widths")
    h = adapter.drop(x @ adapter.A.T)
    return base_output + adapter.scale * (h @ adapter.B.T)


class AdaptedLinear(nn.Module):
    """Linear layer with an optional low-rank adapter on top."""

    def __init__(self, d_in: int, d_out: int, adapter: LowRankAdapter | None = None):
        super().__init__()
        self.base = nn.Linear(d_in, d_out, bias=False)
        self.adapter = adapter

    def forward(self, x):
        y = self.base(x)
        if self.adapter is not None:
            y = apply_adapter(y, self.adapter, x)
        return y


class RMSNorm(nn.Module):
    def __init__(self, dim: int, eps: float = 1e-6):
        super().__init__()
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(dim))

    def forward(self, x):
        rms = torch.rsqrt(x.pow(2).mean(-1, keepdim=True) + self.eps)
        return x * rms * self.weight


class CausalSelfAttention(nn.Module):
    def __init__(self, cfg: BackboneConfig, layer_index: int, adapter_cfg: AdapterConfig | None):
        super().__init__()
        H = cfg.hidden
        self.num_heads = cfg.num_heads
        self.head_dim = H // cfg.num_heads

        def adapted(target, d_in, d_out):
            ad = None
            if adapter_cfg is not None and target in adapter_cfg.targets:
                ad = LowRankAdapter(d_in, d_out, adapter_cfg.rank, adapter_cfg.alpha,
                                    adapter_cfg.dropout, layer_index, target)
            return AdaptedLinear(d_in, d_out, ad)

        self.q_proj = adapted("q_proj", H, H)
        self.k_proj = nn.Linear(H, H, bias=False)
        self.v_proj = adapted("v_proj", H, H)
        self.o_proj = nn.Linear(H, H, bias=False)

    def forward(self, x, allow):
        # x: (B, S, H); allow: (B, S, S) boolean, True where i may attend j.
        B, S, H = x.shape
        def split(t):
            return t.view(B, S, self.num_heads, self.head_dim).transpose(1, 2)
        q, k, v = split(self.q_proj(x)), split(self.k_proj(x)), split(self.v_proj(x))
        scores = q @ k.transpose(-1, -2) / math.sqrt(self.head_dim)
        scores = scores.masked_fill(~allow[:, None, :, :], float("-inf"))
        attnw = torch.softmax(scores, dim=-1)
        out = (attnw @ v).transpose(1, 2).reshape(B, S, H)
        return self.o_proj(out)


class GatedMLP(nn.Module):
    def __init__(self, cfg: BackboneConfig, layer_index: int, adapter_cfg: AdapterConfig | None):
        super().__init__()
        H, F = cfg.hidden, cfg.hidden * cfg.ffn_mult

        def adapted(target, d_in, d_out):
            ad = None
            if adapter_cfg is not None and target in adapter_cfg.targets:
                ad = LowRankAdapter(d_in, d_out, adapter_cfg.rank, adapter_cfg.alpha,
                                    adapter_cfg.dropout, layer_index, target)
            return AdaptedLinear(d_in, d_out, ad)

        self.gate_proj = adapted("gate_proj", H, F)
        self.up_proj = adapted("up_proj", H, F)
        self.down_proj = adapted("down_proj", F, H)

    def forward(self, x):
        return self.down_proj(torch.nn.functional.silu(self.gate_proj(x)) * self.up_proj(x))


class Block(nn.Module):
    def __init__(self, cfg: BackboneConfig, layer_index: int, adapter_cfg: AdapterConfig | None):
        super().__init__()
        self.norm1 = RMSNorm(cfg.hidden)
        self.attn = CausalSelfAttention(cfg, layer_index, adapter_cfg)
        self.norm2 = RMSNorm(cfg.hidden)
        self.mlp = GatedMLP(cfg, layer_index, adapter_cfg)

    def forward(self, x, allow):
        x = x + self.attn(self.norm1(x), allow)
        x = x + self.mlp(self.norm2(x))
        return x


class HiddenTrace:
    """Per-layer hidden sequences of one forward pass.

    Key l holds Z^(l), the input to layer l (1-based); key num_layers+1 holds
    the output of the final layer. Rows follow the injected physical layout
    [question, slots, answer, padding]; below the insert layer the slot rows
    are zero. Every state has exactly n + K rows per example.
    """

    def __init__(self, num_layers: int, K: int, text_lens: torch.Tensor,
                 question_lens: torch.Tensor, insert_layer: int):
        self.num_layers = num_layers
        self.K = K
        self.text_lens = text_lens
        self.question_lens = question_lens
        self.insert_layer = insert_layer
        self.layers: dict[int, torch.Tensor] = {}

    def state(self, layer: int) -> torch.Tensor:
        if layer not in self.layers:
            raise PreconditionError(f"layer {layer} not in trace (1..{self.num_layers + 1})")
        return self.layers[layer]

    def question_span(self, b: int = 0) -> tuple[int, int]:
        return (0, int(self.question_lens[b]))

    def slot_span(self, b: int = 0) -> tuple[int, int]:
        q = int(self.question_lens[b])
        return (q, q + self.K)

    def answer_span(self, b: int = 0) -> tuple[int, int]:
        q = int(self.question_lens[b])
        return (q + self.K, int(self.text_lens[b]) + self.K)


def pool_span(trace: HiddenTrace, layer: int, span: tuple[int, int],
              batch_index: int = 0) -> torch.Tensor:
    """Arithmetic mean of the rows span[0]:span[1] at the given layer."""
    start, stop = span
    if stop <= start:
        raise PreconditionError(f"empty span {span}")
    states = trace.state(layer)
    if stop > states.shape[1]:
        raise PreconditionError(f"span {span} out of bounds for {states.shape[1]} rows")
    return states[batch_index, start:stop].mean(dim=0)


def lm_loss(logits: torch.Tensor, targets: torch.Tensor,
            answer_mask: torch.Tensor) -> torch.Tensor:
    """Mean negative log-likelihood over positions where answer_mask is True."""
    if answer_mask.sum() == 0:
        raise PreconditionError("empty answer span")
    logp = torch.log_softmax(logits, dim=-1)
    nll = -logp.gather(-1, targets.unsqueeze(-1)).squeeze(-1)
    return nll[answer_mask].mean()


def _causal_text_mask(text_lens: torch.Tensor, S: int) -> torch.Tensor:
    pos = torch.arange(S, device=text_lens.device)
    valid = pos[None, :] < text_lens[:, None]
    allow = valid[:, :, None] & valid[:, None, :] & (pos[None, None, :] <= pos[None, :, None])
    allow |= torch.eye(S, dtype=torch.bool, device=text_lens.device)[None]
    return allow


def _injected_mask(text_lens: torch.Tensor, qlens: torch.Tensor, K: int,
                   S_full: int) -> torch.Tensor:
    p = torch.arange(S_full, device=text_lens.device)[None, :]
    q = qlens[:, None]
    is_slot = (p >= q) & (p < q + K)
    tidx = torch.where(p < q, p, p - K)
    is_text = ~is_slot & (tidx < text_lens[:, None]) & (tidx >= 0)
    is_ans = is_text & (tidx >= q)

    ti, tj = tidx[:, :, None], tidx[:, None, :]
    text_i, text_j = is_text[:, :, None], is_text[:, None, :]
    slot_i, slot_j = is_slot[:, :, None], is_slot[:, None, :]
    ans_i = is_ans[:, :, None]
    quest_j = text_j & (tj < qlens[:, None, None])

    allow = (text_i & text_j & (tj <= ti))
    allow |= ans_i & slot_j
    allow |= slot_i & quest_j
    allow |= slot_i & slot_j
    allow |= torch.eye(S_full, dtype=torch.bool, device=text_lens.device)[None]
    return allow


class Backbone(nn.Module):
    """Decoder-only transformer supporting mid-stack row injection."""

    def __init__(self, config: BackboneConfig, adapter_cfg: AdapterConfig | None = None):
        super().__init__()
        config.validate()
        self.config = config
        self.tok_emb = nn.Embedding(config.vocab_size, config.hidden)
        self.pos_emb = nn.Embedding(config.max_seq, config.hidden)
        self.layers = nn.ModuleList(
            Block(config, i + 1, adapter_cfg) for i in range(config.num_layers)
        )
        self.final_norm = RMSNorm(config.hidden)
        self.lm_head = nn.Linear(config.hidden, config.vocab_size, bias=True)

    def adapters(self) -> list[LowRankAdapter]:
        return [m for m in self.modules() if isinstance(m, LowRankAdapter)]

    def _scatter_text(self, h: torch.Tensor, qlens: torch.Tensor, K: int) -> torch.Tensor:
        B, S, H = h.shape
        full = h.new_zeros(B, S + K, H)
        t = torch.arange(S, device=h.device)[None, :].expand(B, -1)
        phys = torch.where(t < qlens[:, None], t, t + K)
        full.scatter_(1, phys[:, :, None].expand(-1, -1, H), h)
        return full

    def forward(self, tokens: torch.Tensor, text_lens: torch.Tensor,
                question_lens: torch.Tensor | None = None,
                inject_rows: torch.Tensor | None = None,
                collect_trace: bool = False) -> tuple[torch.Tensor, HiddenTrace | None]:
        """Run the stack; returns (logits over all rows, optional trace).

        tokens: (B, S) padded token ids; text_lens: true lengths;
        question_lens: insertion points (defaults to text_lens);
        inject_rows: (K, H) slot rows spliced in at the insert layer.
        """
        cfg = self.config
        if tokens.dim() != 2:
            raise ConfigError("tokens must be a (B, S) batch")
        B, S = tokens.shape
        if question_lens is None:
            question_lens = text_lens.clone()
        K = 0 if inject_rows is None else int(inject_rows.shape[0])
        if inject_rows is not None and inject_rows.shape[1] != cfg.hidden:
            raise ConfigError(
                f"inject rows have width {inject_rows.shape[1]}, model hidden is {cfg.hidden}"
            )
        if int(text_lens.max()) + K > cfg.max_seq:
            raise CapacityError(
                f"sequence of {int(text_lens.max())} text tokens plus {K} slots "
                f"exceeds max_seq={cfg.max_seq}"
            )

        L = cfg.insert_layer
        trace = (HiddenTrace(cfg.num_layers, K, text_lens, question_lens, L)
                 if collect_trace else None)
        pos = torch.arange(S, device=tokens.device)
        h = self.tok_emb(tokens) + self.pos_emb(pos)[None, :, :]

        text_allow = _causal_text_mask(text_lens, S)
        if inject_rows is None:
            for li, layer in enumerate(self.layers, start=1):
                if trace is not None:
                    trace.layers[li] = h
                h = layer(h, text_allow)
            if trace is not None:
                trace.layers[cfg.num_layers + 1] = h
            logits = self.lm_head(self.final_norm(h))
            return logits, trace

        # Layers below L run on text rows only: bitwise equal to the K=0 pass.
        for li in range(1, L):
            if trace is not None:
                trace.layers[li] = self._scatter_text(h, question_lens, K)
            h = self.layers[li - 1](h, text_allow)

        full = self._scatter_text(h, question_lens, K)
        slot_pos = question_lens[:, None] + torch.arange(K, device=tokens.device)[None, :]
        rows = inject_rows[None, :, :].expand(B, -1, -1).to(full.dtype)
        full = full.scatter(1, slot_pos[:, :, None].expand(-1, -1, cfg.hidden), rows)

        full_allow = _injected_mask(text_lens, question_lens, K, S + K)
        h = full
        for li in range(L, cfg.num_layers + 1):
            if trace is not None:
                trace.layers[li] = h
            h = self.layers[li - 1](h, full_allow)
        if trace is not None:
            trace.layers[cfg.num_layers + 1] = h
        logits = self.lm_head(self.final_norm(h))
        return logits, trace


def prediction_rows(text_positions: torch.Tensor, question_len: int, K: int) -> torch.Tensor:
    """Physical row that predicts each text position t: t-1 below the insertion
    point, t+K-1 at or above it (the t == question_len case lands on the last slot)."""
    t = text_positions
    return torch.where(t < question_len, t - 1, t + K - 1)


@dataclass
class FreezePlan:
    """Identifiers of everything the optimizer may touch."""

    trainable: frozenset[str]

    CODEBOOK_GROUPS = ("codebook", "queries", "projections", "refiner")


def freeze_plan(config: BackboneConfig, adapters: list[LowRankAdapter],
                codebook_trainable: bool = True) -> FreezePlan:
    """Codebook stack plus adapters at layers >= the insert layer; never base weights."""
    ids: set[str] = set(FreezePlan.CODEBOOK_GROUPS) if codebook_trainable else set()
    for ad in adapters:
        if ad.layer_index >= config.insert_layer:
            ids.add(ad.ident)
    return FreezePlan(trainable=frozenset(ids))


@dataclass
class DecodeResult:
    tokens: list[int]
    length: int
    truncated: bool = False


class FastThinker(nn.Module):
    """Backbone plus the codebook stack that produces its injected rows."""

    def __init__(self, backbone: Backbone, codebook: CodebookParams | None = None,
                 refiner: RefinerParams | None = None):
        super().__init__()
        self.backbone = backbone
        self.codebook = codebook
        self.refiner = refiner
        if codebook is not None:
            if refiner is None:
                raise ConfigError("codebook requires a refiner")
            if codebook.H != backbone.config.hidden:
                raise ConfigError("codebook hidden size does not match backbone")
            # Fixed random positional markers for the K slots; they stay frozen
            # so all learned slot content flows through the codebook path.
            self.slot_emb = nn.Parameter(
                torch.randn(codebook.K, codebook.H) / math.sqrt(codebook.H),
                requires_grad=False)
        else:
            self.slot_emb = None

    @property
    def K(self) -> int:
        return 0 if self.codebook is None else self.codebook.K

    def thinking(self) -> ThinkingTokens:
        """Refined thinking tokens (pure function of the current parameters)."""
        if self.codebook is None:
            raise ConfigError("model has no codebook")
        return refine(attend(self.codebook), self.refiner)

    def forward(self, tokens, text_lens, question_lens=None, use_thinking: bool = True,
                collect_trace: bool = False):
        inject = None
        if use_thinking and self.codebook is not None:
            inject = self.thinking().T + self.slot_emb
        return self.backbone(tokens, text_lens, question_lens,
                             inject_rows=inject, collect_trace=collect_trace)

    def sequence_nll(self, tokens, text_lens, question_lens, use_thinking: bool = True):
        """Mean NLL over answer positions (text index >= question length)."""
        logits, _ = self.forward(tokens, text_lens, question_lens, use_thinking)
        return answer_nll_from_logits(logits, tokens, text_lens, question_lens,
                                      self.K if use_thinking else 0)

    @torch.no_grad()
    def greedy(self, prompt: list[int], max_new: int, stop_id: int,
               use_thinking: bool = True) -> DecodeResult:
        return greedy_decode(self, prompt, max_new, stop_id, use_thinking)


def answer_nll_from_logits(logits, tokens, text_lens, question_lens, K):
    """Gather prediction rows for answer positions and average their NLL."""
    B, S = tokens.shape
    device = tokens.device
    t = torch.arange(S, device=device)[None, :].expand(B, -1)
    is_answer = (t >= question_lens[:, None]) & (t < text_lens[:, None])
    if not bool(is_answer.any()):
        raise PreconditionError("batch contains no answer positions")
    rows = torch.where(t < question_lens[:, None], (t - 1).clamp(min=0), t + K - 1)
    gathered = logits.gather(1, rows[:, :, None].expand(-1, -1, logits.shape[-1]))
    return lm_loss(gathered.reshape(-1, logits.shape[-1]), tokens.reshape(-1),
                   is_answer.reshape(-1))


def greedy_decode(model: FastThinker, prompt: list[int], max_new: int, stop_id: int,
                  use_thinking: bool = True) -> DecodeResult:
    """Deterministic argmax decoding; ties break toward the lowest token id.

    Stops on stop_id or after max_new tokens; hitting the capacity limit
    truncates and sets the flag instead of raising.
    """
    if max_new < 0:
        raise PreconditionError("max_new must be >= 0")
    was_training = model.training
    model.eval()
    try:
        cfg = model.backbone.config
        K = model.K if use_thinking else 0
        text = list(prompt)
        qlen = len(prompt)
        generated: list[int] = []
        truncated = False
        device = next(model.parameters()).device
        for _ in range(max_new):
            if len(text) + K > cfg.max_seq:
                truncated = True
                break
            tokens = torch.tensor([text], dtype=torch.long, device=device)
            lens = torch.tensor([len(text)], device=device)
            qlens = torch.tensor([qlen], device=device)
            with torch.no_grad():
                logits, _ = model.forward(tokens, lens, qlens, use_thinking=use_thinking)
            next_id = int(np.argmax(logits[0, len(text) + K - 1].detach().cpu().numpy()))
            generated.append(next_id)
            text.append(next_id)
            if next_id == stop_id:
                break
        return DecodeResult(tokens=generated, length=len(generated), truncated=truncated)
    finally:
        if was_training:
            model.train()


def forward_with_injection(model: FastThinker, tokens, text_lens, question_lens=None,
                           use_thinking: bool = True, collect_trace: bool = True):
    """Full forward pass returning logits over all rows and the per-layer trace."""
    return model.forward(tokens, text_lens, question_lens, use_thinking, collect_trace)
