"""Channel + spatial attention refinement for backbone feature maps."""

import torch
import torch.nn as nn
import torch.nn.functional as F


# Gate layers start near-identity (sigmoid input biased positive, final
# weights zeroed) so an untrained block passes features through at ~0.9x
# instead of the 0.25x a fresh sigmoid pair would apply.
_OPEN_GATE_BIAS = 2.2


class ChannelGate(nn.Module):
    def __init__(self, channels, reduction=16):
        super().__init__()
        hidden = max(channels // reduction, 1)
        self.mlp = nn.Sequential(
            nn.Linear(channels, hidden),
            nn.ReLU(inplace=True),
            nn.Linear(hidden, channels),
        )
        nn.init.zeros_(self.mlp[2].weight)
        nn.init.constant_(self.mlp[2].bias, _OPEN_GATE_BIAS / 2)

    def forward(self, x):
        b, c, _, _ = x.shape
        avg = self.mlp(x.mean(dim=(2, 3)))
        mx = self.mlp(x.amax(dim=(2, 3)))
        return torch.sigmoid(avg + mx).view(b, c, 1, 1)


class SpatialGate(nn.Module):
    def __init__(self, kernel_size=7):
        super().__init__()
        self.conv = nn.Conv2d(2, 1, kernel_size, padding=(kernel_size - 1) // 2, bias=True)
        nn.init.zeros_(self.conv.weight)
        nn.init.constant_(self.conv.bias, _OPEN_GATE_BIAS)

    def forward(self, x):
        stats = torch.cat([x.mean(dim=1, keepdim=True), x.amax(dim=1, keepdim=True)], dim=1)
        return torch.sigmoid(self.conv(stats))


class CBAM(nn.Module):
    """Sequential channel-then-spatial gating.

    Returns the refined map together with the spatial mask so downstream
    regularizers can penalize mask roughness. `identity_gates` pins both
    gates to 1 (refined == input), used by tests and the no-attention
    ablation.
    """

    def __init__(self, channels, reduction=16, kernel_size=7):
        super().__init__()
        self.channel_gate = ChannelGate(channels, reduction)
        self.spatial_gate = SpatialGate(kernel_size)
        self.identity_gates = False

    def forward(self, x):
        if self.identity_gates:
            mask = torch.ones(x.shape[0], 1, x.shape[2], x.shape[3], dtype=x.dtype, device=x.device)
            return x, mask
        x = x * self.channel_gate(x)
        mask = self.spatial_gate(x)
        return x * mask, mask


def refine_attention(block: CBAM, feature_map: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Apply one CBAM block; shape-preserving, gates in [0, 1]."""
    if feature_map.dim() != 4:
        raise ValueError(f"expected NCHW feature map, got shape {tuple(feature_map.shape)}")
    refined, mask = block(feature_map)
    return refined, mask


def gap(feature_map: torch.Tensor) -> torch.Tensor:
    """Global average pooling NCHW -> NC."""
    return feature_map.mean(dim=(2, 3))


def fuse_global(refined_maps: list[torch.Tensor]) -> torch.Tensor:
    """Concatenate per-backbone GAP vectors in registry order."""
    if not refined_maps:
        raise ValueError("need at least one refined feature map")
    return torch.cat([gap(m) for m in refined_maps], dim=1)


class ProjectionHead(nn.Module):
    """Two-layer head mapping the fused vector to a unit-norm 128-d embedding."""

    def __init__(self, in_dim, hidden_dim=512, out_dim=128):
        super().__init__()
        self.fc1 = nn.Linear(in_dim, hidden_dim)
        self.fc2 = nn.Linear(hidden_dim, out_dim)

    def forward(self, x):
        z = self.fc2(F.relu(self.fc1(x)))
        return F.normalize(z, dim=-1, eps=1e-12)
