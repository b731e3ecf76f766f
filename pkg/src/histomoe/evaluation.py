"""Classification metrics, evaluation protocols and report serialization."""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


@dataclass
class Metrics:
    accuracy: float
    weighted_precision: float
    weighted_recall: float
    weighted_f1: float
    confusion: np.ndarray  # (C, C) int64, rows = true class
    per_class_precision: list[float]
    per_class_recall: list[float]
    per_class_f1: list[float]
    zero_support_classes: list[int]  # classes never predicted (precision set to 0)


def compute_metrics(preds, labels, n_classes: int) -> Metrics:
    """Accuracy, support-weighted P/R/F1 and the confusion matrix.

    Counting is integer-exact; only the final divisions are floating point.
    A class that is never predicted gets precision 0 and is flagged.
    """
    preds = np.asarray(preds, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    n = preds.shape[0]
    if n == 0:
        raise ValueError("cannot compute metrics on an empty evaluation set")
    if preds.shape != labels.shape:
        raise ValueError("preds and labels must have the same length")
    if labels.min() < 0 or labels.max() >= n_classes or preds.min() < 0 or preds.max() >= n_classes:
        raise ValueError("labels/preds out of class range")

    confusion = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(confusion, (labels, preds), 1)

    precision, recall, f1 = [], [], []
    zero_support = []
    for c in range(n_classes):
        tp = int(confusion[c, c])
        pred_c = int(confusion[:, c].sum())
        true_c = int(confusion[c, :].sum())
        if pred_c == 0:
            p = 0.0
            if true_c > 0:
                zero_support.append(c)
        else:
            p = tp / pred_c
        r = tp / true_c if true_c > 0 else 0.0
        f = 2.0 * p * r / (p + r) if (p + r) > 0 else 0.0
        precision.append(p)
        recall.append(r)
        f1.append(f)
    if zero_support:
        warnings.warn(f"classes never predicted (precision set to 0): {zero_support}")

    supports = [int(confusion[c, :].sum()) for c in range(n_classes)]
    w_p = sum(supports[c] * precision[c] for c in range(n_classes)) / n
    w_r = sum(supports[c] * recall[c] for c in range(n_classes)) / n
    w_f = sum(supports[c] * f1[c] for c in range(n_classes)) / n
    accuracy = int(np.trace(confusion)) / n
    return Metrics(accuracy, w_p, w_r, w_f, confusion, precision, recall, f1, zero_support)


@dataclass
class EvalReport:
    """One protocol leg's metrics plus calibration and uncertainty summaries."""

    protocol: str
    train_magnifications: list[int]
    test_magnifications: list[int]
    n_samples: int
    accuracy: float
    weighted_precision: float
    weighted_recall: float
    weighted_f1: float
    confusion: list[list[int]]
    avg_uncertainty: float
    avg_confidence: float
    correct_confidence: float | None
    wrong_confidence: float | None
    seed: int
    config_digest: str = ""
    checkpoint_digest: str = ""
    per_sample_table: str = ""
    extras: dict = field(default_factory=dict)

    def to_json(self) -> str:
        payload = {
            "protocol": self.protocol,
            "train_magnifications": self.train_magnifications,
            "test_magnifications": self.test_magnifications,
            "n_samples": self.n_samples,
            "accuracy": self.accuracy,
            "weighted_precision": self.weighted_precision,
            "weighted_recall": self.weighted_recall,
            "weighted_f1": self.weighted_f1,
            "confusion": self.confusion,
            "avg_uncertainty": self.avg_uncertainty,
            "avg_confidence": self.avg_confidence,
            "correct_confidence": self.correct_confidence,
            "wrong_confidence": self.wrong_confidence,
            "seed": self.seed,
            "config_digest": self.config_digest,
            "checkpoint_digest": self.checkpoint_digest,
            "per_sample_table": self.per_sample_table,
            "extras": self.extras,
        }
        return json.dumps(payload, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        return cls(**json.loads(text))

    def save(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n")

    @classmethod
    def load(cls, path) -> "EvalReport":
        return cls.from_json(Path(path).read_text())


@dataclass
class EvalJob:
    report_name: str
    test_index: "object"  # DatasetIndex
    test_magnifications: list[int]


@dataclass
class TrainJob:
    name: str
    train_index: "object"  # DatasetIndex
    train_magnifications: list[int]
    eval_jobs: list[EvalJob]


def protocol_plan(protocol: str, index, test_fraction: float, seed: int,
                  train_magnification: int = 100, patient_disjoint: bool = False) -> list[TrainJob]:
    """Expand a protocol into train jobs with attached evaluation legs.

    type1: per magnification, train and test on that magnification's split.
    type2: train on the train portion of the chosen magnification, test on
           every other magnification's full subset.
    type3: one mixed-magnification stratified split.
    """
    from .data import stratified_split

    mags = index.present_magnifications()
    if protocol == "type3":
        train, test = stratified_split(index, test_fraction, seed, patient_disjoint)
        return [TrainJob("type3_all", train, mags, [EvalJob("type3_all", test, mags)])]
    if protocol == "type1":
        jobs = []
        for mag in mags:
            sub = index.filter_magnification(mag)
            train, test = stratified_split(sub, test_fraction, seed, patient_disjoint)
            jobs.append(TrainJob(f"type1_{mag}x", train, [mag], [EvalJob(f"type1_{mag}x", test, [mag])]))
        return jobs
    if protocol == "type2":
        if train_magnification not in mags:
            raise ValueError(f"training magnification {train_magnification} not present in dataset")
        held_out = [m for m in mags if m != train_magnification]
        if not held_out:
            raise ValueError("type2 needs at least one magnification besides the training one")
        sub = index.filter_magnification(train_magnification)
        train, _ = stratified_split(sub, test_fraction, seed, patient_disjoint)
        evals = [
            EvalJob(f"type2_{m}x", index.filter_magnification(m), [m]) for m in held_out
        ]
        return [TrainJob(f"type2_train{train_magnification}x", train, [train_magnification], evals)]
    raise ValueError(f"unknown protocol {protocol!r}; expected type1, type2 or type3")


def run_protocol(protocol, index, config, ensemble=None, mc_passes: int = 20,
                 test_fraction: float = 0.2, seed: int = 0,
                 train_magnification: int = 100) -> list[EvalReport]:
    """Execute one experiment protocol end to end and return its reports.

    type1 yields one report per magnification, type2 one per held-out
    magnification, type3 a single mixed report. A pre-trained ensemble may be
    supplied only when the protocol has a single train job (type2/type3);
    otherwise ensembles are trained here with the given config.
    """
    from .data import compute_normalization_stats, materialize
    from .training import ensemble_predict, train_ensemble

    plan = protocol_plan(protocol, index, test_fraction, seed, train_magnification)
    if ensemble is not None and len(plan) > 1:
        raise ValueError(f"{protocol} trains {len(plan)} models; cannot reuse one ensemble")
    reports = []
    for job in plan:
        stats = compute_normalization_stats(job.train_index)
        ens = ensemble if ensemble is not None else train_ensemble(job.train_index, config, stats)
        for ej in job.eval_jobs:
            x, y = materialize(ej.test_index, stats)
            mean, unc, _conf = ensemble_predict(ens, x, mc_passes, seed, ej.test_index.magnifications())
            report = evaluate_probabilities(
                protocol, job.train_magnifications, ej.test_magnifications,
                mean, unc, y, ens.n_classes, seed,
            )
            report.extras["report_name"] = ej.report_name
            reports.append(report)
    return reports


def evaluate_probabilities(protocol, train_mags, test_mags, mean_probs, uncertainty,
                           labels, n_classes, seed) -> EvalReport:
    """Build a report from ensemble mean probabilities and MC uncertainties."""
    from .uncertainty import calibration

    preds = np.asarray(mean_probs).argmax(axis=-1)
    m = compute_metrics(preds, labels, n_classes)
    cal = calibration(mean_probs, labels)
    return EvalReport(
        protocol=protocol,
        train_magnifications=[int(v) for v in train_mags],
        test_magnifications=[int(v) for v in test_mags],
        n_samples=int(len(labels)),
        accuracy=m.accuracy,
        weighted_precision=m.weighted_precision,
        weighted_recall=m.weighted_recall,
        weighted_f1=m.weighted_f1,
        confusion=m.confusion.tolist(),
        avg_uncertainty=float(np.asarray(uncertainty).mean()),
        avg_confidence=cal.avg_confidence,
        correct_confidence=cal.correct_confidence,
        wrong_confidence=cal.wrong_confidence,
        seed=seed,
    )


def export_embeddings(model, x, labels, magnifications, sample_ids) -> list[dict]:
    """Rows of (id, label, magnification, f_global...) under frozen weights."""
    import torch

    if not torch.is_tensor(x):
        x = torch.as_tensor(np.asarray(x, dtype=np.float32))
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            f_global = model.extract_global(x)[0].cpu().numpy()
    finally:
        model.train(was_training)
    rows = []
    for i in range(f_global.shape[0]):
        rows.append(
            {
                "sample_id": sample_ids[i],
                "label": int(labels[i]),
                "magnification": int(magnifications[i]),
                "embedding": f_global[i],
            }
        )
    return rows


def write_embeddings_csv(rows, path) -> None:
    import csv

    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        dim = len(rows[0]["embedding"]) if rows else 0
        writer.writerow(["sample_id", "label", "magnification"] + [f"f{i}" for i in range(dim)])
        for row in rows:
            writer.writerow(
                [row["sample_id"], row["label"], row["magnification"]]
                + [f"{float(v):.8g}" for v in row["embedding"]]
            )
