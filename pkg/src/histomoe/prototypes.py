"""Learnable class prototypes: distance logits and the push-pull objective."""

from __future__ import annotations

import warnings

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

EPS = 1e-12


def proto_distance(f: torch.Tensor, p: torch.Tensor) -> torch.Tensor:
    """Euclidean distance between unit-normalized vectors; range [0, 2]."""
    f_hat = F.normalize(f, dim=-1, eps=EPS)
    p_hat = F.normalize(p, dim=-1, eps=EPS)
    return torch.linalg.vector_norm(f_hat - p_hat, dim=-1)


def _min_class_distances(f_global: torch.Tensor, prototypes: torch.Tensor) -> torch.Tensor:
    """Per-class minimum distance over that class's prototypes.

    f_global: (N, D); prototypes: (C, J, D) -> (N, C).
    """
    f_hat = F.normalize(f_global, dim=-1, eps=EPS)
    p_hat = F.normalize(prototypes, dim=-1, eps=EPS)
    diff = f_hat[:, None, None, :] - p_hat[None, :, :, :]
    dist = torch.linalg.vector_norm(diff, dim=-1)  # (N, C, J)
    return dist.min(dim=-1).values


def proto_logits(f_global: torch.Tensor, prototypes: torch.Tensor) -> torch.Tensor:
    """Class logits as negative minimum normalized distances; each in [-2, 0]."""
    return -_min_class_distances(f_global, prototypes)


def proto_loss(
    f_global: torch.Tensor,
    labels: torch.Tensor,
    prototypes: torch.Tensor,
    margin: float,
    push_weight: float,
) -> torch.Tensor:
    """Push-pull objective: D_y + beta * max(0, alpha + D_y - min_{c!=y} D_c)."""
    n_classes = prototypes.shape[0]
    if n_classes < 2:
        raise ValueError("push-pull loss needs at least two classes")
    dists = _min_class_distances(f_global, prototypes)  # (N, C)
    d_y = dists.gather(1, labels.view(-1, 1)).squeeze(1)
    masked = dists.scatter(1, labels.view(-1, 1), float("inf"))
    d_other = masked.min(dim=1).values
    hinge = torch.clamp(margin + d_y - d_other, min=0.0)
    return (d_y + push_weight * hinge).mean()


class PrototypeBank(nn.Module):
    """C x J x D learnable prototypes with margin/push-weight hyperparameters."""

    def __init__(self, n_classes, n_prototypes, dim, margin=0.5, push_weight=1.0):
        super().__init__()
        if margin <= 0:
            raise ValueError("margin must be positive")
        if push_weight < 0:
            raise ValueError("push weight must be nonnegative")
        self.margin = margin
        self.push_weight = push_weight
        self.prototypes = nn.Parameter(torch.empty(n_classes, n_prototypes, dim))
        nn.init.normal_(self.prototypes)
        with torch.no_grad():
            self.prototypes.copy_(F.normalize(self.prototypes, dim=-1, eps=EPS))

    @property
    def shape(self):
        return tuple(self.prototypes.shape)

    def logits(self, f_global):
        return proto_logits(f_global, self.prototypes)

    def loss(self, f_global, labels):
        return proto_loss(f_global, labels, self.prototypes, self.margin, self.push_weight)

    def set_values(self, values: torch.Tensor) -> None:
        if tuple(values.shape) != self.shape:
            raise ValueError(f"expected shape {self.shape}, got {tuple(values.shape)}")
        with torch.no_grad():
            self.prototypes.copy_(values)


def init_prototypes_random_unit(n_classes, n_prototypes, dim, seed=0) -> torch.Tensor:
    """i.i.d. Gaussian rows, each normalized to unit norm."""
    rng = np.random.default_rng(seed)
    bank = rng.standard_normal((n_classes, n_prototypes, dim))
    bank /= np.maximum(np.linalg.norm(bank, axis=-1, keepdims=True), EPS)
    return torch.as_tensor(bank, dtype=torch.float32)


def init_prototypes_kmeans(
    features: np.ndarray, labels: np.ndarray, n_classes, n_prototypes, seed=0
) -> torch.Tensor:
    """Per-class k-means centroids of training features, unit-normalized.

    Classes with fewer than J samples fall back to random unit prototypes.
    """
    from sklearn.cluster import KMeans

    dim = features.shape[1]
    bank = init_prototypes_random_unit(n_classes, n_prototypes, dim, seed).numpy()
    for c in range(n_classes):
        feats = features[labels == c]
        if feats.shape[0] < n_prototypes:
            warnings.warn(f"class {c} has {feats.shape[0]} < J={n_prototypes} samples; random init kept")
            continue
        km = KMeans(n_clusters=n_prototypes, n_init=10, random_state=seed)
        km.fit(feats)
        centers = km.cluster_centers_
        centers = centers / np.maximum(np.linalg.norm(centers, axis=1, keepdims=True), EPS)
        bank[c] = centers
    return torch.as_tensor(bank, dtype=torch.float32)


def init_prototypes(strategy, n_classes, n_prototypes, dim, seed=0, features=None, labels=None) -> torch.Tensor:
    if strategy == "random_unit":
        return init_prototypes_random_unit(n_classes, n_prototypes, dim, seed)
    if strategy == "kmeans_per_class":
        if features is None or labels is None:
            raise ValueError("kmeans_per_class needs training features and labels")
        return init_prototypes_kmeans(np.asarray(features), np.asarray(labels), n_classes, n_prototypes, seed)
    raise ValueError(f"unknown prototype init strategy {strategy!r}")


def nearest_exemplars(prototypes: torch.Tensor, features: np.ndarray, sample_ids) -> list[list[str]]:
    """For each (class, j) prototype, the id of the nearest training feature."""
    feats = torch.as_tensor(np.asarray(features), dtype=prototypes.dtype)
    f_hat = F.normalize(feats, dim=-1, eps=EPS)
    p_hat = F.normalize(prototypes.detach(), dim=-1, eps=EPS)
    out: list[list[str]] = []
    for c in range(p_hat.shape[0]):
        row = []
        for j in range(p_hat.shape[1]):
            d = torch.linalg.vector_norm(f_hat - p_hat[c, j], dim=-1)
            row.append(sample_ids[int(d.argmin())])
        out.append(row)
    return out
