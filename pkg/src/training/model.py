"""
ConfSMoE Model
Per-modality input projections -> one shared sparse MoE layer over the tokens
of every modality -> post-imputation of missing modalities -> mean pooling per
modality -> linear classifier.
"""

from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import numpy as np
import torch
from torch import nn

from src.errors import ConfigurationError, DimensionError
from src.experiment_models import GateKind, ImputeMode, ModelConfig, Variant
from src.gating import ConfNetPool, GateOutput, build_gate, DTYPE
from src.imputation import SparseCrossAttention, refine_missing, top_t_count
from src.moe import ExpertPool, combine_expert_outputs, moe_expert_outputs


@dataclass
class ModelOutput:
    logits: torch.Tensor          # (B, C)
    probs: torch.Tensor           # (B, C)
    gate: GateOutput              # over B*M*s tokens, instance-major
    weights: torch.Tensor         # (B*M*s, K) combining weights actually applied
    expert_outputs: torch.Tensor  # (B, M, K, s, d)
    hidden: torch.Tensor          # (B, M, s, d) MoE input tokens
    combined: torch.Tensor        # (B, M, s, d) after MoE and post-imputation
    attention: Optional[Dict[Tuple[int, int], torch.Tensor]] = None

    def token_confidences(self) -> torch.Tensor:
        """Token-level confidences of the selected experts, (tokens, K)."""
        return self.gate.scores.gather(-1, self.gate.topk)


def expert_level_confidence(h: torch.Tensor, topk: torch.Tensor, pool: ConfNetPool,
                            groups: torch.Tensor, num_groups: int) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    Expert-level gating: within each group (instance), average the tokens
    routed to expert e and score that mean with U_e.

    Args:
        h: (T, d) token representations
        topk: (T, K) selected experts per token
        pool: ConfNet heads
        groups: (T,) group index of every token
        num_groups: Number of groups

    Returns:
        expert_weights: (G, N) sigmoid(U_e(mean)), 0 for experts with no tokens
        slot_weights: (T, K) the expert-level weight broadcast to each token slot
    """
    num_tokens, k = topk.shape
    num_experts = pool.num_experts
    keys = (groups.unsqueeze(-1) * num_experts + topk).reshape(-1)  # (T*K,)
    values = h.unsqueeze(1).expand(num_tokens, k, h.shape[-1]).reshape(-1, h.shape[-1])

    sums = torch.zeros(num_groups * num_experts, h.shape[-1], dtype=h.dtype).index_add(0, keys, values)
    counts = torch.bincount(keys, minlength=num_groups * num_experts).to(h.dtype)
    means = sums / counts.clamp_min(1.0).unsqueeze(-1)

    expert_weights = pool.per_expert_confidences(means.view(num_groups, num_experts, -1))
    expert_weights = expert_weights * (counts.view(num_groups, num_experts) > 0).to(h.dtype)
    slot_weights = expert_weights.reshape(-1)[keys].view(num_tokens, k)
    return expert_weights, slot_weights


class ConfSMoEModel(nn.Module):
    def __init__(self, config: ModelConfig, num_modalities: int, seq_len: int,
                 input_dim: int, num_classes: int):
        super().__init__()
        config.validate()
        if config.variant == Variant.EXPERT and config.gate != GateKind.CONFNET:
            raise ConfigurationError("The expert-level variant needs the confnet gate")

        d = config.hidden_dim
        self.config = config
        self.num_modalities = num_modalities
        self.seq_len = seq_len
        self.input_dim = input_dim
        self.num_classes = num_classes

        self.projections = nn.ModuleList(
            [nn.Linear(input_dim, d, dtype=DTYPE) for _ in range(num_modalities)])
        self.dropout = nn.Dropout(config.dropout_rate)
        self.gate = build_gate(config.gate, d, config.num_experts, config.top_k, config.temperature)
        self.experts = ExpertPool(d, config.num_experts)
        self.attention = SparseCrossAttention(d, config.sparsity_b, config.layer_norm_eps)
        self.classifier = nn.Linear(num_modalities * d, num_classes, dtype=DTYPE)
        self.top_t = top_t_count(seq_len, num_modalities, config.sparsity_b,
                                 key_length=seq_len * config.top_k)

    def forward(self, tokens: torch.Tensor, mask: torch.Tensor, capture_attention: bool = False) -> ModelOutput:
        """
        Args:
            tokens: (B, M, s, input_dim); missing slots already pre-imputed or zero
            mask: (B, M) boolean, True = observed
            capture_attention: Keep the sparse attention maps of post-imputation
        """
        if tokens.dim() != 4 or tokens.shape[1:] != (self.num_modalities, self.seq_len, self.input_dim):
            raise DimensionError(
                f"Expected tokens (B, {self.num_modalities}, {self.seq_len}, {self.input_dim}), "
                f"got {tuple(tokens.shape)}")
        if mask.shape != tokens.shape[:2]:
            raise DimensionError(f"Mask {tuple(mask.shape)} does not match {tuple(tokens.shape[:2])}")

        batch = tokens.shape[0]
        k, d = self.config.top_k, self.config.hidden_dim
        mask = mask.bool()

        hidden = torch.stack(
            [self.dropout(projection(tokens[:, m])) for m, projection in enumerate(self.projections)], dim=1)
        if self.config.impute == ImputeMode.OFF:
            hidden = hidden * mask[:, :, None, None].to(hidden.dtype)

        flat = hidden.reshape(-1, d)
        gate = self.gate(flat)
        selected = moe_expert_outputs(flat, gate, self.experts)  # (K, T, d)

        weights = gate.weights
        if self.config.variant == Variant.EXPERT:
            groups = torch.arange(batch).repeat_interleave(self.num_modalities * self.seq_len)
            _, weights = expert_level_confidence(flat, gate.topk, self.gate.pool, groups, batch)

        combined = combine_expert_outputs(flat, selected, weights).view(batch, self.num_modalities, self.seq_len, d)
        expert_outputs = selected.reshape(k, batch, self.num_modalities, self.seq_len, d).permute(1, 2, 0, 3, 4)

        attention = None
        if self.config.impute == ImputeMode.FULL:
            refined = refine_missing(combined, expert_outputs, mask, self.attention, self.top_t,
                                     capture=capture_attention)
            combined, attention = refined if capture_attention else (refined, None)

        pooled = combined.mean(dim=2).reshape(batch, self.num_modalities * d)
        logits = self.classifier(pooled)
        return ModelOutput(
            logits=logits,
            probs=torch.softmax(logits, dim=-1),
            gate=gate,
            weights=weights,
            expert_outputs=expert_outputs,
            hidden=hidden,
            combined=combined,
            attention=attention
        )


def forward_instance(tokens: np.ndarray, mask: np.ndarray, model: ConfSMoEModel):
    """
    Run one instance through the model without gradient tracking.

    Args:
        tokens: (M, s, input_dim) tokens, missing modalities already pre-imputed when imputing
        mask: (M,) boolean, True = observed

    Returns:
        (class probabilities (C,), GateOutput over the instance's tokens, expert outputs (M, K, s, d))
    """
    model.eval()
    with torch.no_grad():
        output = model(torch.as_tensor(np.asarray(tokens)[None], dtype=DTYPE),
                       torch.as_tensor(np.asarray(mask, dtype=bool)[None]))
    return output.probs[0].numpy(), output.gate, output.expert_outputs[0].numpy()
