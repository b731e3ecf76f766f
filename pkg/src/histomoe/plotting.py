"""Figure generation from evaluation artifacts."""

from __future__ import annotations

import csv

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .data import SUBTYPES


def read_sample_table(path) -> dict[str, np.ndarray]:
    rows = list(csv.DictReader(open(path)))
    return {
        "sample_id": np.array([r["sample_id"] for r in rows]),
        "label": np.array([int(r["label"]) for r in rows]),
        "prediction": np.array([int(r["prediction"]) for r in rows]),
        "confidence": np.array([float(r["confidence"]) for r in rows]),
        "uncertainty": np.array([float(r["uncertainty"]) for r in rows]),
        "entropy": np.array([float(r["entropy"]) for r in rows]),
        "flag": np.array([r["flag"] == "True" for r in rows]),
    }


def plot_uncertainty_hist(table, path) -> None:
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.hist(table["uncertainty"], bins=30, color="#4c72b0")
    ax.set_xlabel("predictive variance")
    ax.set_ylabel("samples")
    ax.set_title("Uncertainty distribution")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_confidence_hist(table, path) -> None:
    correct = table["prediction"] == table["label"]
    fig, ax = plt.subplots(figsize=(5, 4))
    bins = np.linspace(0.0, 1.0, 31)
    ax.hist(table["confidence"][correct], bins=bins, alpha=0.65, label="correct", color="#2a9d4e")
    ax.hist(table["confidence"][~correct], bins=bins, alpha=0.65, label="wrong", color="#c0392b")
    ax.set_xlabel("confidence")
    ax.set_ylabel("samples")
    ax.legend()
    ax.set_title("Confidence, correct vs wrong")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_uncertainty_vs_confidence(table, path) -> None:
    correct = table["prediction"] == table["label"]
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.scatter(table["uncertainty"][correct], table["confidence"][correct], s=12,
               c="#2a9d4e", label="correct", alpha=0.7)
    ax.scatter(table["uncertainty"][~correct], table["confidence"][~correct], s=12,
               c="#c0392b", label="wrong", alpha=0.7)
    ax.set_xlabel("predictive variance")
    ax.set_ylabel("confidence")
    ax.legend()
    ax.set_title("Uncertainty vs confidence")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_confusion(confusion, path, class_names=None) -> None:
    confusion = np.asarray(confusion)
    n = confusion.shape[0]
    names = class_names or [SUBTYPES[i] if n == len(SUBTYPES) else str(i) for i in range(n)]
    fig, ax = plt.subplots(figsize=(6, 5))
    im = ax.imshow(confusion, cmap="Blues")
    for i in range(n):
        for j in range(n):
            ax.text(j, i, str(confusion[i, j]), ha="center", va="center", fontsize=7)
    ax.set_xticks(range(n), names, rotation=60, ha="right", fontsize=7)
    ax.set_yticks(range(n), names, fontsize=7)
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    fig.colorbar(im, ax=ax, shrink=0.8)
    ax.set_title("Confusion matrix")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_embedding_scatter(embeddings_csv, path, seed=0) -> None:
    """2-D neighbor embedding of exported fused features, colored by class."""
    rows = list(csv.DictReader(open(embeddings_csv)))
    labels = np.array([int(r["label"]) for r in rows])
    feat_cols = [k for k in rows[0] if k.startswith("f")]
    feats = np.array([[float(r[k]) for k in feat_cols] for r in rows])

    from sklearn.manifold import TSNE

    n = feats.shape[0]
    perplexity = float(min(30, max(2, (n - 1) // 3)))
    coords = TSNE(n_components=2, random_state=seed, perplexity=perplexity, init="pca").fit_transform(feats)

    fig, ax = plt.subplots(figsize=(5.5, 5))
    cmap = plt.get_cmap("tab10")
    for c in sorted(set(labels.tolist())):
        pick = labels == c
        name = SUBTYPES[c] if c < len(SUBTYPES) else str(c)
        ax.scatter(coords[pick, 0], coords[pick, 1], s=14, color=cmap(c % 10), label=name, alpha=0.8)
    ax.legend(fontsize=6, markerscale=0.8)
    ax.set_title("2-D embedding of fused features")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_occlusion_overlay(image_rgb, sensitivity_map, path, title="") -> None:
    """Input image with an upsampled sensitivity heatmap on top."""
    fig, axes = plt.subplots(1, 2, figsize=(6, 3))
    axes[0].imshow(np.clip(np.transpose(image_rgb, (1, 2, 0)), 0, 1))
    axes[0].set_title("input", fontsize=8)
    axes[0].axis("off")
    axes[1].imshow(np.clip(np.transpose(image_rgb, (1, 2, 0)), 0, 1))
    h, w = image_rgb.shape[1:]
    m = np.asarray(sensitivity_map)
    upsampled = np.kron(m, np.ones((max(h // m.shape[0], 1), max(w // m.shape[1], 1))))
    axes[1].imshow(upsampled[:h, :w], cmap="jet", alpha=0.45, extent=(0, w, h, 0))
    axes[1].set_title(title or "occlusion sensitivity", fontsize=8)
    axes[1].axis("off")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
