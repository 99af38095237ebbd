"""
Sparse Mixture-of-Experts Layer
Expert pool, residual Top-K combination and expert-selection telemetry.
"""

import copy
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
import pandas as pd
import torch
from torch import nn

from src.errors import DimensionError, DomainError, UndefinedMetricError
from src.gating import GateOutput, DTYPE
from src.numeric_core import entropy


class ExpertPool(nn.Module):
    """N experts, expert i = ReLU(W_i h + b_i) with W_i in R^{d x d}."""

    def __init__(self, dim: int, num_experts: int):
        super().__init__()
        bound = 1.0 / math.sqrt(dim)
        self.weight = nn.Parameter(torch.empty(num_experts, dim, dim, dtype=DTYPE).uniform_(-bound, bound))
        self.bias = nn.Parameter(torch.zeros(num_experts, dim, dtype=DTYPE))

    @property
    def num_experts(self) -> int:
        return self.weight.shape[0]

    @property
    def dim(self) -> int:
        return self.weight.shape[1]

    def pre_activations(self, h: torch.Tensor) -> torch.Tensor:
        """(T, N, d) values of W_i h + b_i for every expert."""
        return torch.einsum('nod,td->tno', self.weight, h) + self.bias

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        return torch.relu(self.pre_activations(h))


def _check_shapes(h: torch.Tensor, gate: GateOutput, pool: ExpertPool):
    if h.dim() != 2 or h.shape[1] != pool.dim:
        raise DimensionError(f"Expected tokens of shape (T, {pool.dim}), got {tuple(h.shape)}")
    if gate.scores.shape[0] != h.shape[0]:
        raise DimensionError(f"Gate was computed for {gate.scores.shape[0]} tokens, batch has {h.shape[0]}")
    if gate.num_experts != pool.num_experts:
        raise DimensionError(f"Gate scores {gate.num_experts} experts, pool holds {pool.num_experts}")


def moe_expert_outputs(h: torch.Tensor, gate: GateOutput, pool: ExpertPool) -> torch.Tensor:
    """
    Un-combined outputs of the selected experts.

    Returns:
        Tensor (K, T, d); slice k holds the outputs of each token's rank-k expert
    """
    _check_shapes(h, gate, pool)
    all_outputs = pool(h)  # (T, N, d)
    index = gate.topk.unsqueeze(-1).expand(-1, -1, pool.dim)
    return all_outputs.gather(1, index).transpose(0, 1)


def moe_forward(h: torch.Tensor, gate: GateOutput, pool: ExpertPool,
                weights: Optional[torch.Tensor] = None) -> torch.Tensor:
    """
    h + sum over selected experts of weight * E_i(h).

    Args:
        h: (T, d) tokens
        gate: Routing decision for the same tokens
        pool: Expert pool
        weights: Optional (T, K) override of the gate's combining weights
    """
    selected = moe_expert_outputs(h, gate, pool)
    return combine_expert_outputs(h, selected, gate.weights if weights is None else weights)


def combine_expert_outputs(h: torch.Tensor, selected: torch.Tensor, weights: torch.Tensor) -> torch.Tensor:
    if tuple(weights.shape) != (selected.shape[1], selected.shape[0]):
        raise DimensionError(f"Weights {tuple(weights.shape)} do not match {selected.shape[0]} slots")
    return h + torch.einsum('tk,ktd->td', weights, selected)


@dataclass
class SelectionTrace:
    """Per-epoch, per-expert count of (token, selection-slot) assignments."""
    num_experts: int
    counts: Dict[int, np.ndarray] = field(default_factory=dict)
    last_epoch: Optional[int] = None

    def epochs(self) -> List[int]:
        return sorted(self.counts)

    def total(self, epoch: int) -> int:
        return int(self.counts.get(epoch, np.zeros(1, dtype=np.int64)).sum())

    def distribution(self, epoch: int) -> np.ndarray:
        total = self.total(epoch)
        if total == 0:
            raise UndefinedMetricError(f"No expert selections recorded for epoch {epoch}")
        return self.counts[epoch] / total

    def snapshot(self) -> 'SelectionTrace':
        return copy.deepcopy(self)

    def to_frame(self) -> pd.DataFrame:
        rows = [
            {"epoch": epoch, "expert_id": expert, "count": int(count)}
            for epoch in self.epochs()
            for expert, count in enumerate(self.counts[epoch])
        ]
        return pd.DataFrame(rows, columns=["epoch", "expert_id", "count"])

    def to_csv(self, path: str):
        output_path = Path(path)
        output_path.parent.mkdir(parents=True, exist_ok=True)
        self.to_frame().to_csv(output_path, index=False)

    @classmethod
    def read_csv(cls, path: str) -> 'SelectionTrace':
        frame = pd.read_csv(path)
        num_experts = int(frame["expert_id"].max()) + 1 if len(frame) else 0
        trace = cls(num_experts=num_experts)
        for epoch, group in frame.groupby("epoch", sort=True):
            counts = np.zeros(num_experts, dtype=np.int64)
            counts[group["expert_id"].to_numpy()] = group["count"].to_numpy()
            trace.counts[int(epoch)] = counts
            trace.last_epoch = int(epoch)
        return trace


def record_selection(trace: SelectionTrace, gate: GateOutput, epoch: int) -> SelectionTrace:
    """Add one count per expert occurrence in the gate's Top-K to the epoch's tally."""
    if trace.last_epoch is not None and epoch < trace.last_epoch:
        raise DomainError(f"Epochs must be recorded in nondecreasing order ({epoch} after {trace.last_epoch})")
    if gate.num_experts != trace.num_experts:
        raise DimensionError(f"Trace tracks {trace.num_experts} experts, gate routes over {gate.num_experts}")

    indices = gate.topk.detach().cpu().numpy().ravel()
    if indices.size == 0:
        return trace
    increment = np.bincount(indices, minlength=trace.num_experts).astype(np.int64)
    if epoch not in trace.counts:
        trace.counts[epoch] = np.zeros(trace.num_experts, dtype=np.int64)
    trace.counts[epoch] += increment
    trace.last_epoch = epoch
    return trace


def usage_entropy(trace: SelectionTrace, epoch: int) -> float:
    """Entropy (nats) of the epoch's normalized expert-usage distribution."""
    return entropy(trace.distribution(epoch))


def selection_oscillation(trace: SelectionTrace) -> float:
    """Mean total-variation distance between consecutive epochs' usage distributions."""
    epochs = [epoch for epoch in trace.epochs() if trace.total(epoch) > 0]
    if len(epochs) < 2:
        raise UndefinedMetricError(f"Oscillation needs at least 2 recorded epochs, got {len(epochs)}")
    distances = [
        0.5 * np.abs(trace.distribution(current) - trace.distribution(previous)).sum()
        for previous, current in zip(epochs[:-1], epochs[1:])
    ]
    return float(np.mean(distances))
