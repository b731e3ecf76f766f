"""Expert heads, soft gating and logit fusion."""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

SIMPLEX_TOL = 1e-6


def inverted_dropout(x: torch.Tensor, p: float, generator: torch.Generator | None = None) -> torch.Tensor:
    """Dropout with inverted scaling so the expected output equals the input.

    Uses an explicit generator instead of the global RNG so Monte Carlo
    passes are reproducible and thread-safe.
    """
    if p < 0.0 or p >= 1.0:
        raise ValueError("dropout rate must lie in [0, 1)")
    if p == 0.0:
        return x
    keep = (torch.rand(x.shape, generator=generator, device=x.device) >= p).to(x.dtype)
    return x * keep / (1.0 - p)


class ExpertHead(nn.Module):
    """affine -> ReLU -> dropout -> affine classifier head."""

    def __init__(self, in_dim, n_classes, hidden_dim=256, dropout_rate=0.3):
        super().__init__()
        self.fc1 = nn.Linear(in_dim, hidden_dim)
        self.fc2 = nn.Linear(hidden_dim, n_classes)
        self.dropout_rate = dropout_rate

    def forward(self, f, dropout_active=False, generator=None):
        h = F.relu(self.fc1(f))
        if dropout_active:
            h = inverted_dropout(h, self.dropout_rate, generator)
        return self.fc2(h)


def gate_weights(gate_logits: torch.Tensor) -> torch.Tensor:
    """Softmax-normalized gating weights on the probability simplex."""
    return torch.softmax(gate_logits, dim=-1)


def fuse_experts(head_logits: torch.Tensor, weights: torch.Tensor) -> torch.Tensor:
    """Convex combination of per-head logits: sum_k g_k * H_k.

    head_logits: (..., K+1, C); weights: (..., K+1) on the simplex.
    """
    if head_logits.shape[:-1] != weights.shape:
        raise ValueError(
            f"shape mismatch: head_logits {tuple(head_logits.shape)} vs weights {tuple(weights.shape)}"
        )
    with torch.no_grad():
        off = (weights.sum(dim=-1) - 1.0).abs().max() if weights.numel() else torch.tensor(0.0)
        neg = (-weights).clamp(min=0.0).max() if weights.numel() else torch.tensor(0.0)
    if float(off) > SIMPLEX_TOL or float(neg) > SIMPLEX_TOL:
        raise ValueError("gate weights are off the probability simplex")
    return (head_logits * weights.unsqueeze(-1)).sum(dim=-2)


def fuse_final(expert_logits: torch.Tensor, proto_logits: torch.Tensor, lambda_expert: float, lambda_proto: float) -> torch.Tensor:
    """Hybrid fusion of expert and prototype logits."""
    if expert_logits.shape != proto_logits.shape:
        raise ValueError("expert and prototype logits must share a shape")
    if lambda_expert < 0 or lambda_proto < 0:
        raise ValueError("fusion weights must be nonnegative")
    return lambda_expert * expert_logits + lambda_proto * proto_logits


class MultiExpertBank(nn.Module):
    """K specialized experts plus one general classifier behind a dense softmax gate.

    State-dict naming is stable (`heads.expert_0..`, `heads.general`, `gate`)
    so checkpoints can be inspected by name. Optional magnification routing
    adds a fixed +2 gate-logit bias toward expert (mag index mod K).
    """

    ROUTING_BIAS = 2.0

    def __init__(self, in_dim, n_classes, n_experts=3, hidden_dim=256, dropout_rate=0.3,
                 route_by_magnification=False):
        super().__init__()
        self.n_experts = n_experts
        self.n_heads = n_experts + 1
        names = [f"expert_{k}" for k in range(n_experts)] + ["general"]
        self.head_names = tuple(names)
        self.heads = nn.ModuleDict(
            {name: ExpertHead(in_dim, n_classes, hidden_dim, dropout_rate) for name in names}
        )
        self.gate = nn.Linear(in_dim, self.n_heads)
        self.route_by_magnification = route_by_magnification

    def head_logits(self, f, dropout_active=False, generator=None):
        logits = [self.heads[name](f, dropout_active, generator) for name in self.head_names]
        return torch.stack(logits, dim=1)  # (N, K+1, C)

    def gate_logits(self, f, mag_index=None):
        logits = self.gate(f)
        if self.route_by_magnification and mag_index is not None:
            bias = torch.zeros_like(logits)
            routed = mag_index.remainder(self.n_experts)
            bias.scatter_(1, routed.view(-1, 1), self.ROUTING_BIAS)
            logits = logits + bias
        return logits

    def forward(self, f, dropout_active=False, generator=None, mag_index=None):
        head_logits = self.head_logits(f, dropout_active, generator)
        weights = gate_weights(self.gate_logits(f, mag_index))
        return head_logits, weights, fuse_experts(head_logits, weights)
