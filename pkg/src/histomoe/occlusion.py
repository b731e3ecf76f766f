"""Occlusion-sensitivity maps, their summary metrics and XAI cohort selection."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

DEFAULT_PATCH = 32
DEFAULT_STRIDE = 16
DEFAULT_COVERAGE_FRACTION = 0.2  # theta_cov = fraction * s_max


@dataclass
class OcclusionResult:
    sensitivity_map: np.ndarray  # (rows, cols), one value per window position
    s_max: float
    mean_sensitivity: float
    coverage_pct: float
    base_confidence: float
    predicted_class: int
    row_positions: list[int]
    col_positions: list[int]


def occlusion_metrics(sensitivity_map: np.ndarray, theta_cov: float) -> tuple[float, float, float]:
    """(s_max, mean, coverage %) with coverage counting cells >= theta_cov."""
    m = np.asarray(sensitivity_map, dtype=np.float64)
    if m.size == 0:
        raise ValueError("sensitivity map is empty")
    s_max = float(m.max())
    mean = float(m.mean())
    coverage = 100.0 * float((m >= theta_cov).sum()) / m.size
    return s_max, mean, coverage


def result_from_map(
    sensitivity_map: np.ndarray,
    base_confidence: float,
    predicted_class: int,
    row_positions,
    col_positions,
    coverage_fraction: float = DEFAULT_COVERAGE_FRACTION,
) -> OcclusionResult:
    """Summarize a map with a relative coverage threshold theta = fraction * s_max.

    A degenerate all-zero map has no critical cells, so coverage is 0 even
    though the literal >=0 rule would count everything.
    """
    m = np.asarray(sensitivity_map, dtype=np.float64)
    s_max = float(m.max()) if m.size else 0.0
    if s_max <= 0.0:
        mean = float(m.mean()) if m.size else 0.0
        return OcclusionResult(m, s_max, mean, 0.0, base_confidence, predicted_class,
                               list(row_positions), list(col_positions))
    s_max, mean, coverage = occlusion_metrics(m, coverage_fraction * s_max)
    return OcclusionResult(m, s_max, mean, coverage, base_confidence, predicted_class,
                           list(row_positions), list(col_positions))


def _window_positions(extent: int, patch: int, stride: int) -> list[int]:
    positions = list(range(0, extent - patch + 1, stride))
    if positions[-1] != extent - patch:
        positions.append(extent - patch)  # cover the trailing edge
    return positions


def occlusion_map(
    predict_fn,
    image: np.ndarray,
    patch_size: int = DEFAULT_PATCH,
    stride: int = DEFAULT_STRIDE,
    baseline_value: float = 0.0,
    coverage_fraction: float = DEFAULT_COVERAGE_FRACTION,
    batch_size: int = 64,
) -> OcclusionResult:
    """Probability drop per occluded window, clamped at zero.

    `predict_fn` maps a float32 batch (M, 3, H, W) to probabilities (M, C)
    and must be deterministic (dropout off). The occluder replaces each
    window with `baseline_value` (the z-scored training mean is 0).
    """
    image = np.asarray(image, dtype=np.float32)
    if image.ndim != 3:
        raise ValueError("expected a single (3, H, W) image")
    _, h, w = image.shape
    if patch_size > min(h, w):
        raise ValueError("patch size exceeds the image extent")
    if stride < 1:
        raise ValueError("stride must be >= 1")

    base_probs = np.asarray(predict_fn(image[None]))[0]
    predicted = int(base_probs.argmax())
    base_conf = float(base_probs[predicted])

    rows = _window_positions(h, patch_size, stride)
    cols = _window_positions(w, patch_size, stride)
    occluded = []
    for r in rows:
        for c in cols:
            variant = image.copy()
            variant[:, r : r + patch_size, c : c + patch_size] = baseline_value
            occluded.append(variant)
    occluded = np.stack(occluded)

    drops = np.empty(occluded.shape[0], dtype=np.float64)
    for start in range(0, occluded.shape[0], batch_size):
        probs = np.asarray(predict_fn(occluded[start : start + batch_size]))
        drops[start : start + probs.shape[0]] = base_conf - probs[:, predicted]
    sens = np.maximum(drops, 0.0).reshape(len(rows), len(cols))
    return result_from_map(sens, base_conf, predicted, rows, cols, coverage_fraction)


def select_xai_cohort(
    sample_ids,
    labels,
    magnifications,
    confidences,
    n_per_cell: int,
    conf_threshold: float,
    seed: int = 0,
) -> list[int]:
    """Stratified random pick of n_per_cell indices per (class, magnification)
    cell among samples with confidence strictly above the threshold."""
    labels = np.asarray(labels)
    magnifications = np.asarray(magnifications)
    confidences = np.asarray(confidences)
    eligible = confidences > conf_threshold
    rng = np.random.default_rng(seed)
    cells: dict[tuple[int, int], list[int]] = {}
    for i in range(len(labels)):
        if eligible[i]:
            cells.setdefault((int(labels[i]), int(magnifications[i])), []).append(i)

    chosen: list[int] = []
    shortfalls = []
    for key in sorted(cells):
        members = cells[key]
        if len(members) < n_per_cell:
            shortfalls.append((key, len(members)))
            chosen.extend(members)
        else:
            picks = rng.choice(len(members), size=n_per_cell, replace=False)
            chosen.extend(members[i] for i in sorted(picks))
    all_cells = {(int(l), int(m)) for l, m in zip(labels, magnifications)}
    empty = sorted(all_cells - set(cells))
    if shortfalls or empty:
        warnings.warn(
            f"XAI cohort shortfall: {len(shortfalls)} cells under quota, "
            f"{len(empty)} cells with no eligible samples"
        )
    return sorted(chosen)
