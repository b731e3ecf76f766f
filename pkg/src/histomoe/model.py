"""The assembled network: backbones + attention + gated experts + prototypes."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from .backbones import FeatureExtractor
from .cbam import CBAM, ProjectionHead, fuse_global
from .experts import MultiExpertBank, fuse_final
from .prototypes import PrototypeBank


@dataclass
class ModelOutput:
    """Batchwise forward results; logits are (N, C) unless noted."""

    f_global: torch.Tensor          # (N, D)
    z: torch.Tensor                 # (N, 128) unit rows
    head_logits: torch.Tensor       # (N, K+1, C)
    gate_weights: torch.Tensor      # (N, K+1) on the simplex
    expert_logits: torch.Tensor
    proto_logits: torch.Tensor
    final_logits: torch.Tensor
    attention_masks: list[torch.Tensor]  # per backbone, (N, 1, h, w)


class MultiExpertNet(nn.Module):
    """Gated multi-expert classifier over fused attention-refined backbone features.

    `use_attention=False` pins attention gates to identity (the no-attention
    ablation); `use_prototypes=False` removes the prototype pathway so final
    logits reduce to the gated expert fusion.
    """

    def __init__(
        self,
        n_classes=8,
        backbones=("tiny_test",),
        n_experts=3,
        n_prototypes=3,
        proto_margin=0.5,
        proto_push_weight=1.0,
        dropout_rate=0.3,
        lambda_expert=0.5,
        lambda_proto=0.5,
        use_attention=True,
        use_prototypes=True,
        pretrained=False,
        tiny_dim=32,
        tiny_stem=4,
        head_hidden=256,
        proj_hidden=512,
        embed_dim=128,
        route_by_magnification=False,
    ):
        super().__init__()
        self.n_classes = n_classes
        self.backbone_names = tuple(backbones)
        self.extractor = FeatureExtractor(self.backbone_names, pretrained, tiny_dim, tiny_stem)
        self.feature_dim = self.extractor.out_dim
        self.attention = nn.ModuleList([CBAM(d) for d in self.extractor.dims])
        self.use_attention = use_attention
        if not use_attention:
            for block in self.attention:
                block.identity_gates = True
        self.projection = ProjectionHead(self.feature_dim, proj_hidden, embed_dim)
        self.experts = MultiExpertBank(
            self.feature_dim, n_classes, n_experts, head_hidden, dropout_rate,
            route_by_magnification,
        )
        self.use_prototypes = use_prototypes
        self.prototype_bank = PrototypeBank(
            n_classes, n_prototypes, self.feature_dim, proto_margin, proto_push_weight
        )
        self.lambda_expert = lambda_expert
        self.lambda_proto = lambda_proto

    def extract_global(self, x):
        """Backbone + attention + pooled fusion; returns (f_global, refined maps, masks)."""
        raw_maps = self.extractor(x)
        refined, masks = [], []
        for block, m in zip(self.attention, raw_maps):
            r, mask = block(m)
            refined.append(r)
            masks.append(mask)
        return fuse_global(refined), refined, masks

    def forward(self, x, dropout_active=False, generator=None, mag_index=None) -> ModelOutput:
        f_global, _, masks = self.extract_global(x)
        z = self.projection(f_global)
        head_logits, weights, expert_logits = self.experts(
            f_global, dropout_active, generator, mag_index
        )
        if self.use_prototypes:
            proto_logits = self.prototype_bank.logits(f_global)
        else:
            proto_logits = torch.zeros_like(expert_logits)
        final_logits = fuse_final(expert_logits, proto_logits, self.lambda_expert, self.lambda_proto)
        return ModelOutput(
            f_global=f_global,
            z=z,
            head_logits=head_logits,
            gate_weights=weights,
            expert_logits=expert_logits,
            proto_logits=proto_logits,
            final_logits=final_logits,
            attention_masks=masks,
        )

    @torch.no_grad()
    def predict_proba(self, x, mag_index=None) -> torch.Tensor:
        """Deterministic class probabilities (dropout off)."""
        was_training = self.training
        self.eval()
        try:
            out = self.forward(x, dropout_active=False, mag_index=mag_index)
            return torch.softmax(out.final_logits, dim=-1)
        finally:
            self.train(was_training)
