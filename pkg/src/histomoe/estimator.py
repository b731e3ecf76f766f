"""sklearn-style estimator wrapping the gated multi-expert classifier.

The estimator follows the fit/predict/predict_proba/transform contract with
get_params/set_params from BaseEstimator, so it composes with sklearn
pipelines and model-selection utilities while the heavy lifting stays in the
torch modules.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin

from .losses import LossWeights
from .training import (
    FoldData,
    TrainConfig,
    aggregate_members,
    ensemble_predict,
    train_fold,
)
from .data import make_stratum_key, stratified_kfold_indices
from .uncertainty import UncertaintyReport
from .validation import check_images, check_labels, check_magnifications, check_is_fitted


class HistoMoEClassifier(ClassifierMixin, BaseEstimator):
    """Gated multi-expert image classifier with prototype logits and
    MC-dropout uncertainty.

    Parameters
    ----------
    backbones : tuple of str
        Feature extractors to fuse, by registry name. The default tiny
        backbone keeps CPU fits cheap; the three full-scale backbones are
        ("densenet201", "convnext_tiny", "efficientnetv2_s").
    n_experts : int
        Number of specialized expert heads (a general head is always added).
    n_prototypes : int
        Learnable prototypes per class.
    proto_margin, proto_push_weight : float
        Margin and push weight of the prototype push-pull objective.
    dropout_rate : float
        Dropout in the expert heads, also used for MC sampling.
    loss_weights : LossWeights or None
        Component weights of the composite objective (defaults used if None).
    epochs, batch_size, learning_rate, weight_decay : standard optimizer knobs.
    n_folds : int
        Stratified folds; fitted members form a validation-F1-weighted ensemble.
    ablation : str
        One of full/A1/A2/A3/A4 (ensemble/loss/attention/prototype presets).
    mc_passes : int
        Stochastic passes per member for predict_proba/predict_uncertainty.
    random_state : int
        Seed for splits, initialization and MC sampling.

    Attributes
    ----------
    classes_ : ndarray of original class labels.
    members_ : fitted fold models.
    member_weights_ : simplex weights over members.
    """

    def __init__(
        self,
        backbones=("tiny_test",),
        n_experts=3,
        n_prototypes=3,
        proto_margin=0.5,
        proto_push_weight=1.0,
        proto_init="random_unit",
        dropout_rate=0.3,
        loss_weights=None,
        epochs=12,
        batch_size=16,
        learning_rate=3e-3,
        weight_decay=1e-4,
        n_folds=5,
        ablation="full",
        patience=10,
        mc_passes=20,
        triage_threshold=0.8,
        pretrained=False,
        tiny_dim=32,
        tiny_stem=4,
        route_by_magnification=False,
        random_state=0,
    ):
        self.backbones = backbones
        self.n_experts = n_experts
        self.n_prototypes = n_prototypes
        self.proto_margin = proto_margin
        self.proto_push_weight = proto_push_weight
        self.proto_init = proto_init
        self.dropout_rate = dropout_rate
        self.loss_weights = loss_weights
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.n_folds = n_folds
        self.ablation = ablation
        self.patience = patience
        self.mc_passes = mc_passes
        self.triage_threshold = triage_threshold
        self.pretrained = pretrained
        self.tiny_dim = tiny_dim
        self.tiny_stem = tiny_stem
        self.route_by_magnification = route_by_magnification
        self.random_state = random_state

    def _train_config(self, n_classes: int) -> TrainConfig:
        return TrainConfig(
            backbones=tuple(self.backbones),
            n_classes=n_classes,
            n_experts=self.n_experts,
            n_prototypes=self.n_prototypes,
            proto_margin=self.proto_margin,
            proto_push_weight=self.proto_push_weight,
            proto_init=self.proto_init,
            dropout_rate=self.dropout_rate,
            loss_weights=self.loss_weights if self.loss_weights is not None else LossWeights(),
            epochs=self.epochs,
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            weight_decay=self.weight_decay,
            n_folds=self.n_folds,
            seed=self.random_state,
            ablation=self.ablation,
            patience=self.patience,
            pretrained=self.pretrained,
            tiny_dim=self.tiny_dim,
            tiny_stem=self.tiny_stem,
            route_by_magnification=self.route_by_magnification,
        )

    def fit(self, X, y, magnifications=None):
        """Fit the k-fold ensemble on images X (N, 3, H, W) and labels y.

        Folds are stratified on (label, magnification) when magnifications
        are given, on the label otherwise.
        """
        X = check_images(X)
        y_enc, classes = check_labels(y, X.shape[0])
        mags = check_magnifications(magnifications, X.shape[0])
        config = self._train_config(len(classes))

        if mags is not None:
            strata = [make_stratum_key(int(c), int(m)) for c, m in zip(y_enc, mags)]
        else:
            strata = [str(int(c)) for c in y_enc]
        counts = min(strata.count(s) for s in set(strata))
        if counts < config.n_folds:
            strata = [str(int(c)) for c in y_enc]
        pairs = stratified_kfold_indices(strata, config.n_folds, config.seed)

        members, val_f1s, metadata = [], [], []
        for fold_id, (tr, va) in enumerate(pairs):
            model, val_metrics, _ = train_fold(
                FoldData(X[tr], y_enc[tr], mags[tr] if mags is not None else None),
                FoldData(X[va], y_enc[va], mags[va] if mags is not None else None),
                config,
                fold_id,
            )
            members.append(model)
            val_f1s.append(val_metrics.weighted_f1)
            metadata.append({"fold": fold_id, "val_weighted_f1": val_metrics.weighted_f1})

        ensemble = aggregate_members(members, val_f1s, config.ablation, metadata, config)
        self.classes_ = classes
        self.members_ = ensemble.members
        self.member_weights_ = ensemble.member_weights
        self.val_f1s_ = ensemble.val_f1s
        self.ensemble_ = ensemble
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        return self

    def predict_proba(self, X, magnifications=None):
        """Ensemble mean of MC-dropout class probabilities (seeded, so
        deterministic for a fixed random_state)."""
        check_is_fitted(self)
        X = check_images(X)
        mags = check_magnifications(magnifications, X.shape[0])
        if self.mc_passes > 0:
            mean, _, _ = ensemble_predict(self.ensemble_, X, self.mc_passes, self.random_state, mags)
            return mean
        return self.ensemble_.predict_proba(X, mags=mags)

    def predict(self, X, magnifications=None):
        proba = self.predict_proba(X, magnifications)
        return self.classes_[proba.argmax(axis=-1)]

    def predict_uncertainty(self, X, magnifications=None) -> UncertaintyReport:
        """Per-sample MC summary: mean probabilities, variance-based
        uncertainty, confidence and review flags."""
        check_is_fitted(self)
        X = check_images(X)
        mags = check_magnifications(magnifications, X.shape[0])
        passes = max(self.mc_passes, 1)
        mean, unc, conf = ensemble_predict(self.ensemble_, X, passes, self.random_state, mags)
        from .uncertainty import triage

        return UncertaintyReport(mean, unc, conf, triage(conf, self.triage_threshold))

    def transform(self, X):
        """Fused global feature vectors from the highest-weighted member."""
        check_is_fitted(self)
        X = check_images(X)
        import torch

        best = int(np.argmax(self.member_weights_))
        member = self.members_[best]
        member.eval()
        outs = []
        with torch.no_grad():
            for start in range(0, X.shape[0], 128):
                xb = torch.as_tensor(X[start : start + 128])
                outs.append(member.extract_global(xb)[0].cpu().numpy())
        return np.concatenate(outs)
