"""Monte Carlo Dropout sampling and per-sample uncertainty summaries."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch


def derive_generator(seed: int, stream: int = 0, device="cpu") -> torch.Generator:
    """Independent torch RNG stream for (seed, stream index)."""
    g = torch.Generator(device=device)
    words = np.random.SeedSequence([seed, stream]).generate_state(1, dtype=np.uint64)
    g.manual_seed(int(words[0] >> 1))
    return g


def mc_forward(model, x, n_passes: int, seed: int = 0, mag_index=None) -> np.ndarray:
    """T stochastic softmax passes with dropout active; (T, N, C) float64.

    Each pass draws from its own RNG substream derived from (seed, pass), so
    the sample matrix is reproducible and passes could run concurrently.
    """
    if n_passes < 1:
        raise ValueError("need at least one stochastic pass")
    if not torch.is_tensor(x):
        x = torch.as_tensor(np.asarray(x, dtype=np.float32))
    was_training = model.training
    model.eval()
    rows = []
    try:
        with torch.no_grad():
            for t in range(n_passes):
                g = derive_generator(seed, t)
                out = model(x, dropout_active=True, generator=g, mag_index=mag_index)
                rows.append(torch.softmax(out.final_logits, dim=-1).double().cpu().numpy())
    finally:
        model.train(was_training)
    return np.stack(rows)


def summarize(samples: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(mean_probs, uncertainty, confidence) from a (T, N, C) or (T, C) sample stack.

    Uncertainty is the mean over classes of the per-class variance across
    passes; confidence is the max of the mean distribution.
    """
    arr = np.asarray(samples, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[:, None, :]
    mean_probs = arr.mean(axis=0)
    uncertainty = arr.var(axis=0, ddof=0).mean(axis=-1)
    confidence = mean_probs.max(axis=-1)
    return mean_probs, uncertainty, confidence


def predictive_entropy(mean_probs: np.ndarray) -> np.ndarray:
    """Auxiliary entropy column: -sum p log p (natural log)."""
    p = np.clip(np.asarray(mean_probs, dtype=np.float64), 1e-12, 1.0)
    return -(p * np.log(p)).sum(axis=-1)


@dataclass
class CalibrationStats:
    avg_confidence: float
    correct_confidence: float | None  # None when no sample is correct/wrong
    wrong_confidence: float | None
    n_correct: int
    n_wrong: int


def calibration(mean_probs: np.ndarray, labels: np.ndarray) -> CalibrationStats:
    """Mean top-probability overall and over the correct / wrong subsets."""
    probs = np.asarray(mean_probs, dtype=np.float64)
    labels = np.asarray(labels)
    if probs.shape[0] == 0:
        raise ValueError("calibration needs at least one sample")
    conf = probs.max(axis=-1)
    preds = probs.argmax(axis=-1)
    correct = preds == labels
    n_correct = int(correct.sum())
    n_wrong = int((~correct).sum())
    return CalibrationStats(
        avg_confidence=float(conf.mean()),
        correct_confidence=float(conf[correct].mean()) if n_correct else None,
        wrong_confidence=float(conf[~correct].mean()) if n_wrong else None,
        n_correct=n_correct,
        n_wrong=n_wrong,
    )


def triage(confidence: np.ndarray, threshold: float) -> np.ndarray:
    """Review flags: True where confidence falls below the operating threshold."""
    if not 0.0 < threshold <= 1.0:
        raise ValueError("threshold must lie in (0, 1]")
    return np.asarray(confidence) < threshold


@dataclass
class UncertaintyReport:
    """Per-sample MC summary over a batch."""

    mean_probs: np.ndarray  # (N, C)
    uncertainty: np.ndarray  # (N,)
    confidence: np.ndarray  # (N,)
    flags: np.ndarray  # (N,) bool

    @classmethod
    def from_samples(cls, samples: np.ndarray, threshold: float = 0.8) -> "UncertaintyReport":
        mean_probs, uncertainty, confidence = summarize(samples)
        return cls(mean_probs, uncertainty, confidence, triage(confidence, threshold))
