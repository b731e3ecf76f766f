"""Backbone registry and multi-backbone feature extraction."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import torch
import torch.nn as nn


@dataclass(frozen=True)
class BackboneSpec:
    name: str
    feature_dim: int
    builder: Callable[..., nn.Module]


class TinyBackbone(nn.Module):
    """Three stride-2 conv blocks (16/32/widths[-1]) for desk-scale runs.

    An average-pool stem (default 4x) shrinks 224x224 inputs before the conv
    stack so CPU training stays cheap; stem=1 disables it.
    """

    def __init__(self, feature_dim=32, stem=4):
        super().__init__()
        widths = (16, 32, feature_dim)
        self.stem = nn.AvgPool2d(stem) if stem > 1 else nn.Identity()
        layers: list[nn.Module] = []
        c_in = 3
        for w in widths:
            layers += [
                nn.Conv2d(c_in, w, 3, stride=2, padding=1),
                nn.BatchNorm2d(w),
                nn.ReLU(inplace=True),
            ]
            c_in = w
        self.body = nn.Sequential(*layers)

    def forward(self, x):
        return self.body(self.stem(x))


class _DenseNetFeatures(nn.Module):
    def __init__(self, pretrained):
        super().__init__()
        from torchvision.models import DenseNet201_Weights, densenet201

        weights = DenseNet201_Weights.DEFAULT if pretrained else None
        self.features = densenet201(weights=weights).features

    def forward(self, x):
        return torch.relu(self.features(x))


class _ConvNeXtFeatures(nn.Module):
    def __init__(self, pretrained):
        super().__init__()
        from torchvision.models import ConvNeXt_Tiny_Weights, convnext_tiny

        weights = ConvNeXt_Tiny_Weights.DEFAULT if pretrained else None
        self.features = convnext_tiny(weights=weights).features

    def forward(self, x):
        return self.features(x)


class _EfficientNetV2Features(nn.Module):
    def __init__(self, pretrained):
        super().__init__()
        from torchvision.models import EfficientNet_V2_S_Weights, efficientnet_v2_s

        weights = EfficientNet_V2_S_Weights.DEFAULT if pretrained else None
        self.features = efficientnet_v2_s(weights=weights).features

    def forward(self, x):
        return self.features(x)


REGISTRY: dict[str, BackboneSpec] = {
    "densenet201": BackboneSpec("densenet201", 1920, lambda pretrained=False, **_: _DenseNetFeatures(pretrained)),
    "convnext_tiny": BackboneSpec("convnext_tiny", 768, lambda pretrained=False, **_: _ConvNeXtFeatures(pretrained)),
    "efficientnetv2_s": BackboneSpec("efficientnetv2_s", 1280, lambda pretrained=False, **_: _EfficientNetV2Features(pretrained)),
    "tiny_test": BackboneSpec("tiny_test", 32, lambda pretrained=False, feature_dim=32, stem=4: TinyBackbone(feature_dim, stem)),
}

FULL_SCALE_BACKBONES = ("densenet201", "convnext_tiny", "efficientnetv2_s")


def backbone_dim(name: str, tiny_dim: int | None = None) -> int:
    spec = REGISTRY.get(name)
    if spec is None:
        raise KeyError(f"unknown backbone {name!r}; registry has {sorted(REGISTRY)}")
    if name == "tiny_test" and tiny_dim is not None:
        return tiny_dim
    return spec.feature_dim


def fused_dim(names: list[str] | tuple[str, ...], tiny_dim: int | None = None) -> int:
    return sum(backbone_dim(n, tiny_dim) for n in names)


class FeatureExtractor(nn.Module):
    """Runs every active backbone and returns raw feature maps in registry order."""

    def __init__(self, names, pretrained=False, tiny_dim=32, tiny_stem=4):
        super().__init__()
        self.names = tuple(names)
        if not self.names:
            raise ValueError("need at least one backbone")
        mods = {}
        dims = []
        for name in self.names:
            spec = REGISTRY.get(name)
            if spec is None:
                raise KeyError(f"unknown backbone {name!r}; registry has {sorted(REGISTRY)}")
            if name == "tiny_test":
                mods[name] = spec.builder(pretrained=pretrained, feature_dim=tiny_dim, stem=tiny_stem)
                dims.append(tiny_dim)
            else:
                mods[name] = spec.builder(pretrained=pretrained)
                dims.append(spec.feature_dim)
        self.backbones = nn.ModuleDict(mods)
        self.dims = tuple(dims)
        self.out_dim = sum(dims)

    def forward(self, x) -> list[torch.Tensor]:
        if x.shape[0] == 0:
            return [
                torch.zeros(0, d, 1, 1, dtype=x.dtype, device=x.device) for d in self.dims
            ]
        return [self.backbones[name](x) for name in self.names]
