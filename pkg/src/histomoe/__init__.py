"""Gated multi-expert, prototype-guided histopathology image classifier.

Fuses attention-refined CNN backbone features, routes them through softly
gated expert heads plus distance-based prototype logits, trains on a
six-component composite objective, and reports MC-dropout uncertainty,
calibration statistics and occlusion-sensitivity explanations.
"""

from .config import ExperimentConfig
from .data import (
    DatasetIndex,
    ImageSample,
    SampleRef,
    compute_normalization_stats,
    generate_synthetic_dataset,
    kfold_split,
    preprocess,
    scan_breakhis,
    stratified_split,
)
from .estimator import HistoMoEClassifier
from .evaluation import EvalReport, compute_metrics, protocol_plan, run_protocol
from .losses import LossWeights, build_relation_matrix
from .model import MultiExpertNet
from .occlusion import OcclusionResult, occlusion_map, occlusion_metrics, select_xai_cohort
from .training import (
    Ensemble,
    TrainConfig,
    ensemble_predict,
    load_ensemble,
    save_ensemble,
    train_ensemble,
    train_fold,
)
from .uncertainty import UncertaintyReport, calibration, mc_forward, summarize, triage

__version__ = "0.1.0"

__all__ = [
    "DatasetIndex",
    "EvalReport",
    "Ensemble",
    "ExperimentConfig",
    "HistoMoEClassifier",
    "ImageSample",
    "LossWeights",
    "MultiExpertNet",
    "OcclusionResult",
    "SampleRef",
    "TrainConfig",
    "UncertaintyReport",
    "__version__",
    "build_relation_matrix",
    "calibration",
    "compute_metrics",
    "compute_normalization_stats",
    "ensemble_predict",
    "generate_synthetic_dataset",
    "kfold_split",
    "load_ensemble",
    "mc_forward",
    "occlusion_map",
    "occlusion_metrics",
    "preprocess",
    "protocol_plan",
    "run_protocol",
    "save_ensemble",
    "scan_breakhis",
    "select_xai_cohort",
    "stratified_split",
    "summarize",
    "train_ensemble",
    "train_fold",
    "triage",
]
