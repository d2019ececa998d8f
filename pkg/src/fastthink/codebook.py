"""Latent strategy codebook and its analysis tools.

A bank of M prototype vectors is read by K learned queries through scaled
dot-product attention; the result is a fixed set of K "thinking token"
vectors that condition the decoder. The attention weights are also the
object of the activation analyses (top-10 mass, sparsity, overlap with
class-salient prototypes, global prototype ordering).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .errors import ConfigError, NumericError, PreconditionError, UnsupportedSizeError

ROW_SUM_TOL = 1e-6


class CodebookParams(nn.Module):
    """Learnable codebook C, shared queries Q, and the four projections.

    Queries are shared across inputs, so the attention pattern and the
    thinking tokens are a pure function of the parameters.
    """

    def __init__(self, M: int, K: int, H: int, generator: torch.Generator | None = None):
        super().__init__()
        if M < 1 or K < 1 or H < 1:
            raise ConfigError(f"M, K, H must be positive, got M={M} K={K} H={H}")
        self.M, self.K, self.H = M, K, H
        g = generator
        std = 1.0 / math.sqrt(H)
        self.C = nn.Parameter(torch.randn(M, H, generator=g) * std)
        self.Q = nn.Parameter(torch.randn(K, H, generator=g) * std)
        # Near-identity projections keep the initial attention close to uniform.
        eye = torch.eye(H)
        for name in ("Wq", "Wk", "Wv", "Wo"):
            noise = torch.randn(H, H, generator=g) * 0.02
            self.register_parameter(name, nn.Parameter(eye + noise))

    def validate(self) -> None:
        if self.C.shape != (self.M, self.H) or self.Q.shape != (self.K, self.H):
            raise ConfigError("codebook matrix shapes inconsistent with M/K/H")
        for name in ("Wq", "Wk", "Wv", "Wo"):
            w = getattr(self, name)
            if w.shape != (self.H, self.H):
                raise ConfigError(f"{name} must be {self.H}x{self.H}, got {tuple(w.shape)}")
        for name, p in self.named_parameters():
            if not torch.isfinite(p).all():
                raise NumericError(f"non-finite entries in codebook parameter {name}")


@dataclass
class ThinkingTokens:
    """K thinking-token vectors plus the attention that produced them."""

    T: torch.Tensor  # (K, H)
    A: torch.Tensor  # (K, M), rows are probability distributions

    def __post_init__(self):
        if self.T.shape[0] != self.A.shape[0]:
            raise ConfigError("T and A must agree on the number of queries K")


class RefinerParams(nn.Module):
    """Residual two-matrix MLP applied to thinking-token rows only.

    The squashing nonlinearity is the logistic sigmoid, which keeps the
    residual bounded regardless of the inner width.
    """

    def __init__(self, H: int, hidden: int | None = None, generator: torch.Generator | None = None):
        super().__init__()
        hidden = H if hidden is None else hidden
        if H < 1 or hidden < 1:
            raise ConfigError("refiner dimensions must be positive")
        self.H, self.hidden = H, hidden
        std = 1.0 / math.sqrt(H)
        self.U1 = nn.Parameter(torch.randn(H, hidden, generator=generator) * std)
        self.U2 = nn.Parameter(torch.zeros(hidden, H))

    @staticmethod
    def activation(x: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(x)


def attend(params: CodebookParams) -> ThinkingTokens:
    """Read the codebook: A = softmax(QWq (CWk)^T / sqrt(H)), T = A (CWv) Wo."""
    params.validate()
    scale = 1.0 / math.sqrt(params.H)
    logits = (params.Q @ params.Wq) @ (params.C @ params.Wk).T * scale
    A = torch.softmax(logits, dim=-1)
    T = A @ (params.C @ params.Wv) @ params.Wo
    return ThinkingTokens(T=T, A=A)


def refine(tokens: ThinkingTokens, refiner: RefinerParams) -> ThinkingTokens:
    """Apply the residual refiner to T; the attention passes through unchanged."""
    if tokens.T.shape[1] != refiner.U1.shape[0]:
        raise ConfigError(
            f"refiner expects width {refiner.U1.shape[0]}, tokens have {tokens.T.shape[1]}"
        )
    T = tokens.T + refiner.activation(tokens.T @ refiner.U1) @ refiner.U2
    return ThinkingTokens(T=T, A=tokens.A)


@dataclass
class ActivationStats:
    """Per-distribution activation statistics over the prototype axis."""

    top10_mass: float
    sparsity: float  # 1 - normalized entropy
    overlap_at_10: int
    top_indices: list[int] = field(default_factory=list)


def entropy_nats(p: np.ndarray) -> float:
    """Shannon entropy with the 0*log(0) := 0 convention."""
    p = np.asarray(p, dtype=np.float64)
    nz = p[p > 0]
    return float(-(nz * np.log(nz)).sum())


def activation_stats(a_row, class_salient=()) -> ActivationStats:
    """Top-10 mass, sparsity, and overlap with class-salient prototypes.

    Ties in the top-10 are broken toward the lowest prototype index.
    """
    a = np.asarray(a_row, dtype=np.float64).ravel()
    m = a.size
    if m < 10:
        raise UnsupportedSizeError(f"need at least 10 prototypes, got {m}")
    if abs(a.sum() - 1.0) > ROW_SUM_TOL or (a < -ROW_SUM_TOL).any():
        raise PreconditionError("activation row is not a probability distribution")
    order = np.lexsort((np.arange(m), -a))
    top = order[:10]
    top10 = float(a[top].sum())
    sparsity = 1.0 - entropy_nats(a) / math.log(m)
    overlap = len(set(int(i) for i in top) & set(int(i) for i in class_salient))
    return ActivationStats(
        top10_mass=top10,
        sparsity=float(sparsity),
        overlap_at_10=overlap,
        top_indices=[int(i) for i in top],
    )


def _profile_distances(profiles: np.ndarray) -> np.ndarray:
    """Pairwise 1 - Pearson correlation between prototype activation profiles.

    Zero-variance profiles get correlation 1 with exactly-equal profiles and
    0 with everything else, so fully degenerate inputs resolve by index ties.
    """
    m = profiles.shape[0]
    centered = profiles - profiles.mean(axis=1, keepdims=True)
    norms = np.linalg.norm(centered, axis=1)
    dist = np.ones((m, m))
    ok = norms > 1e-12
    if ok.any():
        unit = np.zeros_like(centered)
        unit[ok] = centered[ok] / norms[ok, None]
        corr = unit @ unit.T
        both = np.outer(ok, ok)
        dist[both] = (1.0 - corr)[both]
    degenerate = ~ok
    if degenerate.any():
        for i in np.flatnonzero(degenerate):
            equal = np.all(profiles == profiles[i], axis=1)
            dist[i, :] = np.where(equal, 0.0, 1.0)
            dist[:, i] = dist[i, :]
    np.fill_diagonal(dist, np.inf)
    return dist


def global_prototype_order(activations) -> list[int]:
    """Order prototypes by agglomerative similarity of their activation profiles.

    Average-linkage clustering over Pearson-correlation distance between
    cross-instance profiles, followed by a depth-first leaf walk. All ties
    resolve toward the lowest original prototype index, so the result is
    deterministic given the input order.
    """
    rows = [np.asarray(a, dtype=np.float64).ravel() for a in activations]
    if len(rows) < 2:
        raise PreconditionError("need at least 2 activation vectors")
    profiles = np.stack(rows, axis=0).T  # (M, n_instances)
    m = profiles.shape[0]
    if m == 1:
        return [0]

    dist = _profile_distances(profiles)
    finite = dist[np.isfinite(dist)]
    if finite.size and np.all(finite == finite.flat[0]):
        # Fully tied distances merge in index order; the leaf walk is identity.
        return list(range(m))
    # Each live cluster: representative = min original index it contains.
    reps = np.arange(m)
    sizes = [1] * m
    trees: list[object] = list(range(m))

    for _ in range(m - 1):
        flat = np.argwhere(dist == dist.min())
        flat = flat[flat[:, 0] < flat[:, 1]]
        ra = np.minimum(reps[flat[:, 0]], reps[flat[:, 1]])
        rb = np.maximum(reps[flat[:, 0]], reps[flat[:, 1]])
        pick = np.lexsort((rb, ra))[0]
        i, j = int(flat[pick, 0]), int(flat[pick, 1])
        if reps[j] < reps[i]:
            i, j = j, i
        # Lance-Williams average-linkage update into slot i.
        ni, nj = sizes[i], sizes[j]
        merged = (ni * dist[i, :] + nj * dist[j, :]) / (ni + nj)
        dist[i, :] = merged
        dist[:, i] = merged
        dist[i, i] = np.inf
        dist[j, :] = np.inf
        dist[:, j] = np.inf
        trees[i] = (trees[i], trees[j])
        sizes[i] = ni + nj
        reps[i] = min(reps[i], reps[j])
        root = i

    order: list[int] = []
    stack = [trees[root]]
    while stack:
        node = stack.pop()
        if isinstance(node, tuple):
            stack.append(node[1])
            stack.append(node[0])
        else:
            order.append(int(node))
    return order
