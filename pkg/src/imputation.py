"""
Missing-Modality Imputation
Stage one fills a missing modality with the mean of n instances sampled from
that modality's own training pool. Stage two refines the MoE output of the
filled modality with Top-T sparse cross-attention over the Top-K expert
outputs of each available modality, followed by LayerNorm.
"""

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
import torch
from torch import nn

from src.errors import ConfigurationError, DimensionError, ImputationError
from src.gating import DTYPE


SPLIT_CODES = {"train": 0, "test": 1}


@dataclass
class ModalityPool:
    """Per modality, the (P, s, d) stack of training instances where it was observed."""
    members: Dict[int, np.ndarray] = field(default_factory=dict)

    @classmethod
    def from_arrays(cls, tokens: np.ndarray, mask: np.ndarray) -> 'ModalityPool':
        """
        Args:
            tokens: (instances, modalities, s, d) training tokens
            mask: (instances, modalities) boolean, True = observed
        """
        if tokens.shape[:2] != mask.shape:
            raise DimensionError(f"Mask {mask.shape} does not match tokens {tokens.shape[:2]}")
        return cls(members={
            m: np.ascontiguousarray(tokens[mask[:, m], m], dtype=np.float64)
            for m in range(tokens.shape[1])
        })

    def size(self, modality: int) -> int:
        return len(self.members.get(modality, ()))

    def pre_impute(self, modality: int, n: int, rng: np.random.Generator) -> np.ndarray:
        return pre_impute(self.members.get(modality, []), n, rng)


def pre_impute(pool: Sequence[np.ndarray], n: int, rng: np.random.Generator) -> np.ndarray:
    """
    Mean of n pool members drawn uniformly; without replacement unless the
    pool holds fewer than n members.
    """
    if n < 1:
        raise ConfigurationError(f"Pre-imputation sample count must be >= 1, got {n}")
    members = np.asarray(pool, dtype=np.float64)
    if members.ndim != 3 or members.shape[0] == 0:
        raise ImputationError("Cannot pre-impute from an empty modality pool")
    chosen = rng.choice(members.shape[0], size=n, replace=members.shape[0] < n)
    return members[chosen].mean(axis=0)


def instance_rng(seed: int, instance_id: int, epoch: int, split: str = "train") -> np.random.Generator:
    """Independent stream per (seed, instance, epoch, split)."""
    return np.random.default_rng([int(seed), int(instance_id), int(epoch), SPLIT_CODES[split]])


def pre_impute_batch(tokens: np.ndarray, mask: np.ndarray, pool: ModalityPool, n: int,
                     seed: int, instance_ids: Sequence[int], epoch: int,
                     split: str = "train") -> np.ndarray:
    """Copy of tokens with every missing (instance, modality) slot pre-imputed."""
    filled = np.array(tokens, dtype=np.float64, copy=True)
    for row, instance_id in enumerate(instance_ids):
        missing = np.flatnonzero(~mask[row])
        if missing.size == 0:
            continue
        rng = instance_rng(seed, instance_id, epoch, split)
        for modality in missing:
            filled[row, modality] = pool.pre_impute(int(modality), n, rng)
    return filled


def top_t_count(seq_len: int, num_modalities: int, sparsity_b: int,
                key_length: Optional[int] = None) -> int:
    """floor(s(|M|-1)/B), clamped to [1, key_length]."""
    if num_modalities < 2:
        raise ConfigurationError("Sparse cross-attention needs at least two modalities")
    if seq_len < 1 or sparsity_b < 1:
        raise ConfigurationError(f"Need s >= 1 and B >= 1, got s={seq_len}, B={sparsity_b}")
    t = (seq_len * (num_modalities - 1)) // sparsity_b
    t = max(t, 1)
    if key_length is not None:
        t = min(t, key_length)
    return t


class SparseCrossAttention(nn.Module):
    """Shared W_q, W_k, W_v and the LayerNorm of the post-imputation step."""

    def __init__(self, dim: int, sparsity_b: int = 4, eps: float = 1e-5):
        super().__init__()
        if sparsity_b < 1:
            raise ConfigurationError(f"Sparsity divisor B must be >= 1, got {sparsity_b}")
        self.dim = dim
        self.sparsity_b = sparsity_b
        self.w_q = nn.Linear(dim, dim, bias=False, dtype=DTYPE)
        self.w_k = nn.Linear(dim, dim, bias=False, dtype=DTYPE)
        self.w_v = nn.Linear(dim, dim, bias=False, dtype=DTYPE)
        self.norm = nn.LayerNorm(dim, eps=eps, dtype=DTYPE)


def top_t_mask(attention: torch.Tensor, t: int) -> torch.Tensor:
    """Binary mask keeping the t largest entries of each row (lower key index wins ties)."""
    t = min(t, attention.shape[-1])
    order = torch.sort(attention, dim=-1, descending=True, stable=True).indices[..., :t]
    return torch.zeros_like(attention).scatter(-1, order, 1.0)


def sparse_attention_map(q: torch.Tensor, k: torch.Tensor, t: int) -> torch.Tensor:
    """Mask applied after the softmax; kept entries are not renormalized."""
    attention = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1]), dim=-1)
    return top_t_mask(attention.detach(), t) * attention


def sparse_cross_attention(query: torch.Tensor, keys: torch.Tensor, params: SparseCrossAttention,
                           t: int, return_attention: bool = False):
    """
    Args:
        query: (..., s, d) representation of the imputed modality
        keys: (..., s*K, d) concatenated Top-K expert outputs of one available modality
        params: Shared projections
        t: Entries kept per query row

    Returns:
        (..., s, d) attended values, plus the sparse map when return_attention is set
    """
    if query.shape[-1] != params.dim or keys.shape[-1] != params.dim:
        raise DimensionError(f"Query/key width must be {params.dim}, got {query.shape[-1]} and {keys.shape[-1]}")
    if query.shape[:-2] != keys.shape[:-2]:
        raise DimensionError(f"Batch shapes differ: {tuple(query.shape[:-2])} vs {tuple(keys.shape[:-2])}")
    if t < 1:
        raise ConfigurationError(f"Top-T must be >= 1, got {t}")

    attention = sparse_attention_map(params.w_q(query), params.w_k(keys), t)
    output = attention @ params.w_v(keys)
    if return_attention:
        return output, attention
    return output


def concat_expert_outputs(selected: torch.Tensor) -> torch.Tensor:
    """(..., K, s, d) -> (..., K*s, d), expert rank major."""
    return selected.reshape(*selected.shape[:-3], selected.shape[-3] * selected.shape[-2], selected.shape[-1])


def post_impute(query: torch.Tensor, available: List[torch.Tensor], params: SparseCrossAttention,
                t: int) -> torch.Tensor:
    """LayerNorm(query + sum over available modalities of SCA(query, M_a*))."""
    refined = query
    for keys in available:
        refined = refined + sparse_cross_attention(query, keys, params, t)
    return params.norm(refined)


def refine_missing(combined: torch.Tensor, selected: torch.Tensor, mask: torch.Tensor,
                   params: SparseCrossAttention, t: int, capture: bool = False):
    """
    Batched post-imputation for every missing modality of every instance.

    Args:
        combined: (B, M, s, d) MoE outputs per modality
        selected: (B, M, K, s, d) un-combined Top-K expert outputs
        mask: (B, M) boolean, True = observed
        params: Shared attention parameters
        t: Entries kept per query row
        capture: Also return the sparse attention maps keyed by (query, key) modality

    Returns:
        Refined (B, M, s, d) tensor; observed modalities are passed through
    """
    num_modalities = combined.shape[1]
    observed = mask.to(combined.dtype)
    keys = concat_expert_outputs(selected)  # (B, M, K*s, d)
    maps = {}
    outputs = []
    for m in range(num_modalities):
        query = combined[:, m]
        refined = query
        for a in range(num_modalities):
            if a == m:
                continue
            attended, attention = sparse_cross_attention(query, keys[:, a], params, t, return_attention=True)
            # instances where modality a is itself missing contribute nothing
            refined = refined + observed[:, a, None, None] * attended
            if capture:
                maps[(m, a)] = (attention * observed[:, a, None, None]).detach()
        refined = params.norm(refined)
        missing = ~mask[:, m]
        outputs.append(torch.where(missing[:, None, None], refined, query))
    result = torch.stack(outputs, dim=1)
    if capture:
        return result, maps
    return result


def attention_to_frame(maps: Dict, mask: np.ndarray, instance_ids: Sequence[int]) -> pd.DataFrame:
    """Long-format nonzero attention weights for instances whose query modality was missing."""
    rows = []
    for (query_modality, key_modality), attention in sorted(maps.items()):
        weights = attention.cpu().numpy()
        for row, instance_id in enumerate(instance_ids):
            if mask[row, query_modality] or not mask[row, key_modality]:
                continue
            query_idx, key_idx = np.nonzero(weights[row])
            for q, k in zip(query_idx, key_idx):
                rows.append({
                    "instance_id": int(instance_id),
                    "query_modality": int(query_modality),
                    "key_modality": int(key_modality),
                    "query_idx": int(q),
                    "key_idx": int(k),
                    "weight": float(weights[row, q, k])
                })
    return pd.DataFrame(rows, columns=["instance_id", "query_modality", "key_modality",
                                       "query_idx", "key_idx", "weight"])
