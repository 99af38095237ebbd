"""
Gating
The six router mechanisms of the gate ablation behind one interface:
score every token against every expert, select Top-K, report an aux loss.
"""

import math
from dataclasses import dataclass
from enum import Enum
from typing import Optional

import torch
from torch import nn

from src.errors import ConfigurationError, DimensionError
from src.experiment_models import GateKind


DTYPE = torch.float64
ENTROPY_FLOOR = 1e-300


class DistanceMetric(Enum):
    L1 = "l1"      # Laplacian gate
    L2SQ = "l2sq"  # Gaussian gate, halved squared Euclidean distance


@dataclass
class GateOutput:
    """Routing decision for a batch of tokens"""
    scores: torch.Tensor   # (tokens, N)
    topk: torch.Tensor     # (tokens, K) expert indices, descending score
    weights: torch.Tensor  # (tokens, K) combining weights of the selected experts
    aux_loss: Optional[torch.Tensor] = None

    @property
    def num_experts(self) -> int:
        return self.scores.shape[-1]

    @property
    def top_k(self) -> int:
        return self.topk.shape[-1]

    def with_weights(self, weights: torch.Tensor) -> 'GateOutput':
        return GateOutput(scores=self.scores, topk=self.topk, weights=weights, aux_loss=self.aux_loss)


def _check_k(k: int, num_experts: int):
    if not 1 <= k <= num_experts:
        raise ConfigurationError(f"Top-K needs 1 <= K <= N, got K={k}, N={num_experts}")


def _check_tokens(h: torch.Tensor, d: int):
    if h.dim() != 2 or h.shape[1] != d:
        raise DimensionError(f"Expected tokens of shape (T, {d}), got {tuple(h.shape)}")


def select_top_k(scores: torch.Tensor, k: int) -> torch.Tensor:
    """K highest scores per row; equal scores resolve to the lower expert index."""
    _check_k(k, scores.shape[-1])
    order = torch.sort(scores, dim=-1, descending=True, stable=True).indices
    return order[..., :k]


def load_balance_loss(scores: torch.Tensor) -> torch.Tensor:
    """Mean over tokens of 1/H(g), H taken over all N scores."""
    h = -(scores * torch.log(scores.clamp_min(ENTROPY_FLOOR))).sum(dim=-1)
    return (1.0 / h).mean()


def gate_softmax(h: torch.Tensor, router: torch.Tensor, k: int) -> GateOutput:
    _check_tokens(h, router.shape[0])
    scores = torch.softmax(h @ router, dim=-1)
    topk = select_top_k(scores, k)
    return GateOutput(scores=scores, topk=topk, weights=scores.gather(-1, topk))


def gate_softmax_load_balanced(h: torch.Tensor, router: torch.Tensor, k: int) -> GateOutput:
    output = gate_softmax(h, router, k)
    output.aux_loss = load_balance_loss(output.scores)
    return output


def gate_mean(h: torch.Tensor, router: torch.Tensor, k: int) -> GateOutput:
    """Selection by a softmax router, every selected expert weighted 1/K."""
    output = gate_softmax(h, router, k)
    weights = torch.full_like(output.weights, 1.0 / k)
    return output.with_weights(weights)


def gate_distance(h: torch.Tensor, table: torch.Tensor, k: int,
                  metric: DistanceMetric = DistanceMetric.L1, temperature: float = 1.0) -> GateOutput:
    """Softmax over experts of -dist(h, e_i)/tau."""
    if temperature <= 0:
        raise ConfigurationError(f"Gate temperature must be positive, got {temperature}")
    _check_tokens(h, table.shape[1])
    diff = h.unsqueeze(1) - table.unsqueeze(0)  # (T, N, d)
    if metric == DistanceMetric.L1:
        dist = diff.abs().sum(dim=-1)
    else:
        dist = 0.5 * (diff ** 2).sum(dim=-1)
    scores = torch.softmax(-dist / temperature, dim=-1)
    topk = select_top_k(scores, k)
    return GateOutput(scores=scores, topk=topk, weights=scores.gather(-1, topk))


def gate_confnet(h: torch.Tensor, pool: 'ConfNetPool', k: int, num_experts: Optional[int] = None) -> GateOutput:
    """
    Confidence routing: c_i = sigmoid(U_i(h)) for every expert, Top-K by
    confidence, and the raw (unnormalized) c_i become the combining weights.
    """
    if num_experts is not None and pool.num_experts != num_experts:
        raise ConfigurationError(f"ConfNet pool has {pool.num_experts} heads for {num_experts} experts")
    _check_tokens(h, pool.dim)
    scores = pool.confidences(h)
    topk = select_top_k(scores, k)
    return GateOutput(scores=scores, topk=topk, weights=scores.gather(-1, topk))


def confidence_loss(confidences: torch.Tensor, p_t: torch.Tensor, k: int) -> torch.Tensor:
    """
    Mean of (c_i - p_t)^2 over every (token, selected expert) pair.

    Args:
        confidences: (tokens, K) confidences of the selected experts
        p_t: (tokens,) probability of the true class; used as a constant target
        k: Number of selected experts per token
    """
    if confidences.dim() != 2 or confidences.shape[1] != k:
        raise DimensionError(f"Expected (tokens, {k}) confidences, got {tuple(confidences.shape)}")
    if p_t.shape != confidences.shape[:1]:
        raise DimensionError(f"p_t shape {tuple(p_t.shape)} does not match {confidences.shape[0]} tokens")
    target = p_t.detach().unsqueeze(-1)
    return ((confidences - target) ** 2).mean()


class ConfNetPool(nn.Module):
    """One linear confidence head U_i: R^d -> R per expert, stored row-wise."""

    def __init__(self, dim: int, num_experts: int):
        super().__init__()
        bound = 1.0 / math.sqrt(dim)
        self.weight = nn.Parameter(torch.empty(num_experts, dim, dtype=DTYPE).uniform_(-bound, bound))
        self.bias = nn.Parameter(torch.zeros(num_experts, dtype=DTYPE))

    @property
    def num_experts(self) -> int:
        return self.weight.shape[0]

    @property
    def dim(self) -> int:
        return self.weight.shape[1]

    def logits(self, h: torch.Tensor) -> torch.Tensor:
        return h @ self.weight.T + self.bias

    def confidences(self, h: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.logits(h))

    def per_expert_confidences(self, pooled: torch.Tensor) -> torch.Tensor:
        """pooled[..., e, :] is scored by head e only; returns (..., N)."""
        return torch.sigmoid(torch.einsum('...nd,nd->...n', pooled, self.weight) + self.bias)


class ExpertEmbeddingTable(nn.Module):
    """Learnable embedding e_i per expert for the distance gates."""

    def __init__(self, dim: int, num_experts: int):
        super().__init__()
        self.embeddings = nn.Parameter(torch.randn(num_experts, dim, dtype=DTYPE))


class Gate(nn.Module):
    """Common interface: forward(tokens) -> GateOutput."""

    def __init__(self, kind: GateKind, num_experts: int, top_k: int):
        super().__init__()
        _check_k(top_k, num_experts)
        self.kind = kind
        self.num_experts = num_experts
        self.top_k = top_k


class SoftmaxGate(Gate):
    def __init__(self, dim: int, num_experts: int, top_k: int, kind: GateKind = GateKind.SOFTMAX):
        super().__init__(kind, num_experts, top_k)
        bound = 1.0 / math.sqrt(dim)
        self.router = nn.Parameter(torch.empty(dim, num_experts, dtype=DTYPE).uniform_(-bound, bound))

    def forward(self, h: torch.Tensor) -> GateOutput:
        if self.kind == GateKind.SOFTMAX_LB:
            return gate_softmax_load_balanced(h, self.router, self.top_k)
        if self.kind == GateKind.MEAN:
            return gate_mean(h, self.router, self.top_k)
        return gate_softmax(h, self.router, self.top_k)


class DistanceGate(Gate):
    def __init__(self, dim: int, num_experts: int, top_k: int, metric: DistanceMetric,
                 temperature: float = 1.0):
        kind = GateKind.LAPLACIAN if metric == DistanceMetric.L1 else GateKind.GAUSSIAN
        super().__init__(kind, num_experts, top_k)
        if temperature <= 0:
            raise ConfigurationError(f"Gate temperature must be positive, got {temperature}")
        self.metric = metric
        self.temperature = temperature
        self.table = ExpertEmbeddingTable(dim, num_experts)

    def forward(self, h: torch.Tensor) -> GateOutput:
        return gate_distance(h, self.table.embeddings, self.top_k, self.metric, self.temperature)


class ConfNetGate(Gate):
    def __init__(self, dim: int, num_experts: int, top_k: int):
        super().__init__(GateKind.CONFNET, num_experts, top_k)
        self.pool = ConfNetPool(dim, num_experts)

    def forward(self, h: torch.Tensor) -> GateOutput:
        return gate_confnet(h, self.pool, self.top_k, self.num_experts)


def build_gate(kind: GateKind, dim: int, num_experts: int, top_k: int, temperature: float = 1.0) -> Gate:
    """Instantiate the gate module for a GateKind."""
    if kind in (GateKind.SOFTMAX, GateKind.SOFTMAX_LB, GateKind.MEAN):
        return SoftmaxGate(dim, num_experts, top_k, kind=kind)
    if kind == GateKind.LAPLACIAN:
        return DistanceGate(dim, num_experts, top_k, DistanceMetric.L1, temperature)
    if kind == GateKind.GAUSSIAN:
        return DistanceGate(dim, num_experts, top_k, DistanceMetric.L2SQ, temperature)
    if kind == GateKind.CONFNET:
        return ConfNetGate(dim, num_experts, top_k)
    raise ConfigurationError(f"Unknown gate kind: {kind}")
