"""The six-component training objective and its relation matrix.

Components, in fixed order: focal classification, supervised contrastive,
prototype push-pull (delegated to the prototypes module), morphology
preservation, spatial coherence of attention masks, and biological
plausibility of the predicted distribution.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

COMPONENT_ORDER = ("focal", "supcon", "proto", "morph", "spatial", "bio")


@dataclass
class LossWeights:
    """Component weights plus the shared loss/fusion hyperparameters."""

    focal: float = 1.0
    supcon: float = 0.5
    proto: float = 0.5
    morph: float = 0.1
    spatial: float = 0.05
    bio: float = 0.1
    gamma: float = 2.0
    temperature: float = 0.07
    lambda_expert: float = 0.5
    lambda_proto: float = 0.5

    def __post_init__(self):
        alphas = self.as_tuple()
        if all(a == 0.0 for a in alphas):
            raise ValueError("at least one component weight must be positive")
        if any(a < 0.0 for a in alphas):
            raise ValueError("component weights must be nonnegative")
        if self.gamma < 0.0:
            raise ValueError("focal exponent must be >= 0")
        if self.temperature <= 0.0:
            raise ValueError("contrastive temperature must be > 0")

    def as_tuple(self) -> tuple[float, ...]:
        return (self.focal, self.supcon, self.proto, self.morph, self.spatial, self.bio)


def focal_loss(logits: torch.Tensor, labels: torch.Tensor, gamma: float = 2.0,
               class_weights: torch.Tensor | None = None) -> torch.Tensor:
    """Mean focal loss -(1 - p_t)^gamma log p_t; plain (weighted) CE at gamma=0."""
    if logits.shape[0] == 0:
        raise ValueError("focal loss is undefined on an empty batch")
    log_p = F.log_softmax(logits, dim=-1)
    log_pt = log_p.gather(1, labels.view(-1, 1)).squeeze(1)
    pt = log_pt.exp()
    per_sample = -((1.0 - pt) ** gamma) * log_pt
    if class_weights is not None:
        w = torch.as_tensor(class_weights, dtype=logits.dtype, device=logits.device)[labels]
        return (per_sample * w).sum() / w.sum()
    return per_sample.mean()


def supcon_loss(z: torch.Tensor, labels: torch.Tensor, temperature: float = 0.07) -> torch.Tensor:
    """Supervised contrastive loss over unit embeddings.

    Anchors without a same-label partner are skipped; a batch where no anchor
    has a positive is an error.
    """
    n = z.shape[0]
    if n < 2:
        raise ValueError("contrastive loss needs at least two samples")
    sim = (z @ z.T) / temperature
    self_mask = torch.eye(n, dtype=torch.bool, device=z.device)
    pos_mask = (labels.view(-1, 1) == labels.view(1, -1)) & ~self_mask
    has_pos = pos_mask.any(dim=1)
    if not bool(has_pos.any()):
        raise ValueError("batch has no positive pairs")

    # log-sum-exp over non-self entries, shifted for stability
    sim = sim.masked_fill(self_mask, float("-inf"))
    shift = sim.amax(dim=1, keepdim=True).detach()
    log_denom = shift.squeeze(1) + torch.logsumexp(sim - shift, dim=1)
    log_prob = sim - log_denom.view(-1, 1)
    # zero out non-positives before summing (the diagonal is -inf)
    pos_log_prob = torch.where(pos_mask, log_prob, torch.zeros_like(log_prob))
    mean_pos = pos_log_prob.sum(dim=1) / pos_mask.sum(dim=1).clamp(min=1)
    return -(mean_pos[has_pos]).mean()


def morph_loss(f_x: torch.Tensor, f_tx: torch.Tensor) -> torch.Tensor:
    """Mean squared discrepancy between features of an image and its transform."""
    if f_x.shape != f_tx.shape:
        raise ValueError(f"feature shape mismatch: {tuple(f_x.shape)} vs {tuple(f_tx.shape)}")
    return ((f_x - f_tx) ** 2).mean()


def spatial_loss(attention_masks: list[torch.Tensor]) -> torch.Tensor:
    """Mean anisotropic total variation of attention masks, pooled over backbones."""
    if not attention_masks:
        raise ValueError("need at least one attention mask")
    total = None
    count = 0
    for mask in attention_masks:
        if mask.shape[-1] < 2 or mask.shape[-2] < 2:
            raise ValueError("attention masks need at least 2x2 spatial extent")
        dv = (mask[..., 1:, :] - mask[..., :-1, :]).abs()
        dh = (mask[..., :, 1:] - mask[..., :, :-1]).abs()
        contrib = dv.sum() + dh.sum()
        total = contrib if total is None else total + contrib
        count += dv.numel() + dh.numel()
    return total / count


def morph_transform(x: torch.Tensor, choice: int) -> torch.Tensor:
    """Morphology-preserving transform: horizontal flip or a 90-degree rotation."""
    if choice == 0:
        return torch.flip(x, dims=[-1])
    return torch.rot90(x, k=choice, dims=(-2, -1))


def build_relation_matrix(taxonomy: dict[int, str] | list[str], w_same: float = 1.0) -> np.ndarray:
    """Row-stochastic matrix averaging probability within superclasses.

    R = w_same * B + (1 - w_same) * I with B the uniform within-superclass
    block matrix; w_same=1 gives pure block averaging.
    """
    if isinstance(taxonomy, dict):
        n = len(taxonomy)
        supers = [taxonomy[c] for c in range(n)]
    else:
        supers = list(taxonomy)
        n = len(supers)
    if not 0.0 < w_same <= 1.0:
        raise ValueError("w_same must lie in (0, 1]")
    block = np.zeros((n, n), dtype=np.float64)
    for c in range(n):
        members = [c2 for c2 in range(n) if supers[c2] == supers[c]]
        block[c, members] = 1.0 / len(members)
    return w_same * block + (1.0 - w_same) * np.eye(n)


def bio_loss(p: torch.Tensor, relation: np.ndarray | torch.Tensor) -> torch.Tensor:
    """Biological plausibility penalty ||p - Rp||^2 (mean over a batch)."""
    r = torch.as_tensor(relation, dtype=p.dtype, device=p.device)
    single = p.dim() == 1
    probs = p.view(1, -1) if single else p
    with torch.no_grad():
        row_sums = probs.sum(dim=-1)
        if float((row_sums - 1.0).abs().max()) > 1e-6 or float(probs.min()) < -1e-6:
            raise ValueError("input is not on the probability simplex")
    residual = probs - probs @ r.T
    return (residual**2).sum(dim=-1).mean()


def total_loss(components, weights: LossWeights) -> torch.Tensor:
    """Weighted sum of the six components in the fixed order."""
    values = list(components)
    if len(values) != len(COMPONENT_ORDER):
        raise ValueError(f"expected {len(COMPONENT_ORDER)} components, got {len(values)}")
    alphas = weights.as_tuple()
    total = None
    for name, alpha, value in zip(COMPONENT_ORDER, alphas, values):
        v = value if torch.is_tensor(value) else torch.as_tensor(float(value), dtype=torch.float64)
        if torch.isnan(v).any():
            raise ValueError(f"loss component {name!r} is NaN")
        term = alpha * v
        total = term if total is None else total + term
    return total


@dataclass
class LossBreakdown:
    """Per-component values (floats) plus the combined total for logging."""

    focal: float
    supcon: float
    proto: float
    morph: float
    spatial: float
    bio: float
    total: float

    def as_dict(self) -> dict[str, float]:
        return {
            "focal": self.focal,
            "supcon": self.supcon,
            "proto": self.proto,
            "morph": self.morph,
            "spatial": self.spatial,
            "bio": self.bio,
            "total": self.total,
        }


def composite_loss(model, x, labels, weights: LossWeights, relation: np.ndarray,
                   generator=None, transform_choice=0, dropout_active=True, mag_index=None):
    """Assemble all six components from one forward pass (plus one transformed
    backbone pass when the morphology weight is active).

    Returns (total tensor, LossBreakdown).
    """
    out = model(x, dropout_active=dropout_active, generator=generator, mag_index=mag_index)

    zero = torch.zeros((), dtype=out.final_logits.dtype, device=out.final_logits.device)
    l_focal = focal_loss(out.final_logits, labels, weights.gamma) if weights.focal > 0 else zero

    if weights.supcon > 0:
        try:
            l_supcon = supcon_loss(out.z, labels, weights.temperature)
        except ValueError:
            l_supcon = zero  # no positive pairs in this batch
    else:
        l_supcon = zero

    l_proto = model.prototype_bank.loss(out.f_global, labels) if weights.proto > 0 and model.use_prototypes else zero

    if weights.morph > 0:
        f_tx = model.extract_global(morph_transform(x, transform_choice))[0]
        l_morph = morph_loss(out.f_global, f_tx)
    else:
        l_morph = zero

    l_spatial = spatial_loss(out.attention_masks) if weights.spatial > 0 else zero

    if weights.bio > 0:
        probs = torch.softmax(out.final_logits, dim=-1)
        residual = probs - probs @ torch.as_tensor(relation, dtype=probs.dtype, device=probs.device).T
        l_bio = (residual**2).sum(dim=-1).mean()
    else:
        l_bio = zero

    components = (l_focal, l_supcon, l_proto, l_morph, l_spatial, l_bio)
    total = total_loss(components, weights)
    breakdown = LossBreakdown(*(float(c.detach()) for c in components), total=float(total.detach()))
    return total, breakdown
