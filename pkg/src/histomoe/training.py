"""Fold training, k-fold ensembling and checkpoint round-trips."""

from __future__ import annotations

import copy
import json
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from .data import (
    DatasetIndex,
    N_CLASSES,
    compute_normalization_stats,
    materialize,
    stratified_kfold_indices,
    superclass_of,
)
from .evaluation import compute_metrics
from .losses import LossWeights, build_relation_matrix, composite_loss
from .model import MultiExpertNet
from .uncertainty import derive_generator, mc_forward, summarize

ABLATIONS = ("full", "A1", "A2", "A3", "A4")
ABLATION_DESCRIPTIONS = {
    "full": "ensemble + hybrid loss + attention + prototypes",
    "A1": "single best-performing fold instead of ensemble aggregation",
    "A2": "plain cross-entropy only (hybrid loss removed)",
    "A3": "attention module removed",
    "A4": "prototype module removed",
}


class TrainingDiverged(RuntimeError):
    def __init__(self, component: str, fold: int, epoch: int, step: int):
        super().__init__(
            f"NaN loss in component {component!r} at fold {fold}, epoch {epoch}, step {step}"
        )
        self.component = component


@dataclass
class TrainConfig:
    backbones: tuple[str, ...] = ("tiny_test",)
    n_classes: int = N_CLASSES
    n_experts: int = 3
    n_prototypes: int = 3
    proto_margin: float = 0.5
    proto_push_weight: float = 1.0
    proto_init: str = "random_unit"
    dropout_rate: float = 0.3
    loss_weights: LossWeights = field(default_factory=LossWeights)
    epochs: int = 12
    batch_size: int = 16
    learning_rate: float = 3e-3  # desk default for the tiny backbone; use ~1e-4 at full scale
    backbone_learning_rate: float | None = None  # defaults to lr, or 1e-5 when pretrained
    weight_decay: float = 1e-4
    n_folds: int = 5
    seed: int = 0
    ablation: str = "full"
    patience: int = 10
    pretrained: bool = False
    tiny_dim: int = 32
    tiny_stem: int = 4
    route_by_magnification: bool = False

    def __post_init__(self):
        if self.ablation not in ABLATIONS:
            raise ValueError(f"unknown ablation {self.ablation!r}; expected one of {ABLATIONS}")


def effective_loss_weights(config: TrainConfig) -> LossWeights:
    """Loss weights after applying the ablation preset (A2 = plain CE only)."""
    if config.ablation == "A2":
        return replace(
            config.loss_weights,
            focal=1.0, supcon=0.0, proto=0.0, morph=0.0, spatial=0.0, bio=0.0,
            gamma=0.0,
        )
    return config.loss_weights


def build_model(config: TrainConfig) -> MultiExpertNet:
    return MultiExpertNet(
        n_classes=config.n_classes,
        backbones=config.backbones,
        n_experts=config.n_experts,
        n_prototypes=config.n_prototypes,
        proto_margin=config.proto_margin,
        proto_push_weight=config.proto_push_weight,
        dropout_rate=config.dropout_rate,
        lambda_expert=config.loss_weights.lambda_expert,
        lambda_proto=config.loss_weights.lambda_proto,
        use_attention=config.ablation != "A3",
        use_prototypes=config.ablation != "A4",
        pretrained=config.pretrained,
        tiny_dim=config.tiny_dim,
        tiny_stem=config.tiny_stem,
        route_by_magnification=config.route_by_magnification,
    )


def derive_seed(*parts: int) -> int:
    words = np.random.SeedSequence(list(parts)).generate_state(1, dtype=np.uint64)
    return int(words[0] >> 1)


@dataclass
class FoldData:
    x: np.ndarray  # float32 (N, 3, H, W)
    y: np.ndarray  # int64 (N,)
    mags: np.ndarray | None = None

    def __len__(self):
        return self.x.shape[0]


class MetricsLogger:
    """Line-oriented JSONL metrics log; records are also kept in memory."""

    def __init__(self, path: str | Path | None = None):
        self.path = Path(path) if path is not None else None
        self.records: list[dict] = []
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("")

    def log(self, record: dict) -> None:
        record = {k: (float(v) if isinstance(v, (np.floating,)) else v) for k, v in record.items()}
        self.records.append(record)
        if self.path is not None:
            with open(self.path, "a") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")


def _class_relation(n_classes: int) -> np.ndarray:
    if n_classes == N_CLASSES:
        supers = [superclass_of(c) for c in range(n_classes)]
    else:  # tiny test models: first half benign, second half malignant
        half = max(n_classes // 2, 1)
        supers = ["benign" if c < half else "malignant" for c in range(n_classes)]
    return build_relation_matrix(supers)


def _predict_proba_batched(model, x: np.ndarray, mags=None, batch_size: int = 128) -> np.ndarray:
    probs = []
    for start in range(0, x.shape[0], batch_size):
        xb = torch.as_tensor(x[start : start + batch_size])
        mb = None
        if mags is not None and model.experts.route_by_magnification:
            mb = torch.as_tensor(mags[start : start + batch_size])
        probs.append(model.predict_proba(xb, mag_index=mb).cpu().numpy())
    return np.concatenate(probs) if probs else np.zeros((0, model.n_classes))


def _mag_indices(mags: np.ndarray | None) -> np.ndarray | None:
    if mags is None:
        return None
    uniq = sorted(set(int(m) for m in mags))
    lookup = {m: i for i, m in enumerate(uniq)}
    return np.array([lookup[int(m)] for m in mags], dtype=np.int64)


def train_fold(
    train_data: FoldData,
    val_data: FoldData,
    config: TrainConfig,
    fold_id: int = 0,
    logger: MetricsLogger | None = None,
):
    """Train one fold on the composite objective; keep the best-val-F1 weights.

    Per-epoch RNG streams are derived from (seed, fold, epoch) so runs are
    reproducible and resumable without replaying earlier epochs.
    """
    if len(train_data) == 0 or len(val_data) == 0:
        raise ValueError("train and validation folds must be non-empty")
    torch.manual_seed(derive_seed(config.seed, fold_id, 101))
    model = build_model(config)
    weights_eff = effective_loss_weights(config)
    relation = _class_relation(config.n_classes)

    if config.proto_init == "kmeans_per_class" and model.use_prototypes:
        from .prototypes import init_prototypes_kmeans

        feats = []
        with torch.no_grad():
            model.eval()
            for start in range(0, len(train_data), 128):
                xb = torch.as_tensor(train_data.x[start : start + 128])
                feats.append(model.extract_global(xb)[0].cpu().numpy())
            model.train()
        model.prototype_bank.set_values(
            init_prototypes_kmeans(
                np.concatenate(feats), train_data.y, config.n_classes,
                config.n_prototypes, derive_seed(config.seed, fold_id, 17),
            )
        )

    backbone_params = list(model.extractor.parameters())
    backbone_ids = {id(p) for p in backbone_params}
    other_params = [p for p in model.parameters() if id(p) not in backbone_ids]
    backbone_lr = config.backbone_learning_rate
    if backbone_lr is None:
        backbone_lr = 1e-5 if config.pretrained else config.learning_rate
    opt = torch.optim.Adam(
        [
            {"params": other_params, "lr": config.learning_rate},
            {"params": backbone_params, "lr": backbone_lr},
        ],
        weight_decay=config.weight_decay,
    )
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=max(config.epochs, 1))

    train_mag_idx = _mag_indices(train_data.mags) if config.route_by_magnification else None
    val_mag = val_data.mags if config.route_by_magnification else None

    def validate(m):
        probs = _predict_proba_batched(m, val_data.x, val_mag)
        metrics = compute_metrics(probs.argmax(axis=-1), val_data.y, config.n_classes)
        return metrics

    best_state = copy.deepcopy(model.state_dict())
    best_f1 = -1.0
    best_metrics = None
    best_epoch = -1
    history = []

    for epoch in range(config.epochs):
        rng = np.random.default_rng(np.random.SeedSequence([config.seed, fold_id, epoch, 23]))
        gen = derive_generator(derive_seed(config.seed, fold_id, epoch), 0)
        perm = rng.permutation(len(train_data))
        model.train()
        epoch_components: dict[str, float] = {}
        n_steps = 0
        for step, start in enumerate(range(0, len(perm), config.batch_size)):
            idx = perm[start : start + config.batch_size]
            if idx.shape[0] < 2:
                continue  # contrastive/bn terms need at least a pair
            xb = torch.as_tensor(train_data.x[idx])
            yb = torch.as_tensor(train_data.y[idx])
            mb = torch.as_tensor(train_mag_idx[idx]) if train_mag_idx is not None else None
            choice = int(rng.integers(0, 4))
            try:
                total, breakdown = composite_loss(
                    model, xb, yb, weights_eff, relation,
                    generator=gen, transform_choice=choice, dropout_active=True,
                    mag_index=mb,
                )
            except ValueError as exc:
                if "NaN" in str(exc):
                    name = str(exc).split("'")[1]
                    raise TrainingDiverged(name, fold_id, epoch, step) from exc
                raise
            opt.zero_grad()
            total.backward()
            opt.step()
            n_steps += 1
            for k, v in breakdown.as_dict().items():
                epoch_components[k] = epoch_components.get(k, 0.0) + v
            if logger is not None:
                logger.log({"kind": "step", "fold": fold_id, "epoch": epoch, "step": step,
                            **breakdown.as_dict()})
        sched.step()
        val_metrics = validate(model)
        record = {
            "kind": "epoch",
            "fold": fold_id,
            "epoch": epoch,
            "val_accuracy": val_metrics.accuracy,
            "val_weighted_f1": val_metrics.weighted_f1,
            **{f"loss_{k}": v / max(n_steps, 1) for k, v in epoch_components.items()},
        }
        history.append(record)
        if logger is not None:
            logger.log(record)
        if val_metrics.weighted_f1 > best_f1:
            best_f1 = val_metrics.weighted_f1
            best_state = copy.deepcopy(model.state_dict())
            best_metrics = val_metrics
            best_epoch = epoch
        elif epoch - best_epoch >= config.patience:
            break

    model.load_state_dict(best_state)
    if best_metrics is None:  # zero-epoch run: report the initialized model
        best_metrics = validate(model)
    return model, best_metrics, history


@dataclass
class Ensemble:
    members: list[MultiExpertNet]
    member_weights: np.ndarray
    val_f1s: list[float]
    config: TrainConfig
    stats: tuple[np.ndarray, np.ndarray] | None = None
    fold_metadata: list[dict] = field(default_factory=list)

    @property
    def n_classes(self) -> int:
        return self.config.n_classes

    def predict_proba(self, x, mc_passes: int = 0, seed: int = 0, mags=None) -> np.ndarray:
        """Weighted mean of member probabilities (deterministic when mc_passes=0)."""
        x = np.asarray(x, dtype=np.float32)
        if mc_passes > 0:
            mean, _, _ = ensemble_predict(self, x, mc_passes, seed, mags)
            return mean
        total = None
        mag_idx = _mag_indices(mags) if self.config.route_by_magnification else None
        for w, member in zip(self.member_weights, self.members):
            probs = _predict_proba_batched(member, x, mag_idx)
            total = w * probs if total is None else total + w * probs
        return total

    def predict(self, x, mc_passes: int = 0, seed: int = 0, mags=None) -> np.ndarray:
        return self.predict_proba(x, mc_passes, seed, mags).argmax(axis=-1)


def aggregate_members(members, val_f1s, ablation: str = "full", fold_metadata=None,
                      config: TrainConfig | None = None, stats=None) -> Ensemble:
    """Weight trained folds by validation weighted-F1 (A1 keeps the best fold only)."""
    val_f1s = [float(v) for v in val_f1s]
    if ablation == "A1":
        best = int(np.argmax(val_f1s))
        members = [members[best]]
        weights = np.array([1.0])
        kept_meta = [fold_metadata[best]] if fold_metadata else []
        val_kept = [val_f1s[best]]
    else:
        total = sum(val_f1s)
        if total <= 0:
            weights = np.full(len(members), 1.0 / len(members))
        else:
            weights = np.array(val_f1s) / total
        kept_meta = list(fold_metadata) if fold_metadata else []
        val_kept = val_f1s
    return Ensemble(list(members), weights, val_kept, config, stats, kept_meta)


def train_ensemble(
    train_index: DatasetIndex,
    config: TrainConfig,
    stats: tuple[np.ndarray, np.ndarray] | None = None,
    logger: MetricsLogger | None = None,
    fold_cache_dir: str | Path | None = None,
    resume: bool = False,
) -> Ensemble:
    """k-fold stratified training plus weighted aggregation of the folds."""
    if stats is None:
        stats = train_index.normalization_stats
    if stats is None:
        stats = compute_normalization_stats(train_index)

    x_all, y_all = materialize(train_index, stats)
    mags_all = train_index.magnifications()
    strata = train_index.strata()
    from .data import _group_by  # same fallback rule as kfold_split

    smallest = min(len(v) for v in _group_by(strata).values())
    if smallest < config.n_folds:
        warnings.warn(
            f"smallest stratum has {smallest} < k={config.n_folds} samples; "
            "falling back to subtype-only stratification"
        )
        strata = [str(s.subtype) for s in train_index.samples]
    pairs = stratified_kfold_indices(strata, config.n_folds, config.seed)

    cache = Path(fold_cache_dir) if fold_cache_dir is not None else None
    if cache is not None:
        cache.mkdir(parents=True, exist_ok=True)

    members, val_f1s, metadata = [], [], []
    for fold_id, (tr, va) in enumerate(pairs):
        fold_file = cache / f"fold_{fold_id}.pt" if cache is not None else None
        if resume and fold_file is not None and fold_file.exists():
            payload = torch.load(fold_file, weights_only=False)
            model = build_model(config)
            model.load_state_dict(payload["model_state"])
            val_metrics_f1 = payload["val_weighted_f1"]
            meta = payload["metadata"]
        else:
            model, val_metrics, _ = train_fold(
                FoldData(x_all[tr], y_all[tr], mags_all[tr]),
                FoldData(x_all[va], y_all[va], mags_all[va]),
                config,
                fold_id,
                logger,
            )
            val_metrics_f1 = val_metrics.weighted_f1
            meta = {
                "fold": fold_id,
                "n_train": len(tr),
                "n_val": len(va),
                "val_accuracy": val_metrics.accuracy,
                "val_weighted_f1": val_metrics.weighted_f1,
                "ablation": config.ablation,
                "use_attention": config.ablation != "A3",
                "use_prototypes": config.ablation != "A4",
                "trained_epochs": config.epochs,
            }
            if fold_file is not None:
                torch.save(
                    {"model_state": model.state_dict(), "val_weighted_f1": val_metrics_f1,
                     "metadata": meta},
                    fold_file,
                )
        members.append(model)
        val_f1s.append(val_metrics_f1)
        metadata.append(meta)
    return aggregate_members(members, val_f1s, config.ablation, metadata, config, stats)


def ensemble_predict(ensemble: Ensemble, x, n_passes: int, seed: int = 0, mags=None):
    """MC summaries per member, combined by member weights.

    Pooled uncertainty = weighted mean of member uncertainties plus the
    weighted inter-member variance of the member mean probabilities.
    """
    x = np.asarray(x, dtype=np.float32)
    mag_idx = _mag_indices(mags) if ensemble.config and ensemble.config.route_by_magnification else None
    mag_tensor = torch.as_tensor(mag_idx) if mag_idx is not None else None
    member_means, member_uncs = [], []
    for m_idx, member in enumerate(ensemble.members):
        samples = mc_forward(member, x, n_passes, derive_seed(seed, m_idx), mag_tensor)
        mean_m, unc_m, _ = summarize(samples)
        member_means.append(mean_m)
        member_uncs.append(unc_m)
    w = np.asarray(ensemble.member_weights, dtype=np.float64)
    means = np.stack(member_means)  # (M, N, C)
    uncs = np.stack(member_uncs)  # (M, N)
    combined_mean = np.einsum("m,mnc->nc", w, means)
    within = np.einsum("m,mn->n", w, uncs)
    between = np.einsum("m,mnc->nc", w, (means - combined_mean) ** 2).mean(axis=-1)
    uncertainty = within + between
    confidence = combined_mean.max(axis=-1)
    return combined_mean, uncertainty, confidence


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def _config_to_dict(config: TrainConfig) -> dict:
    from dataclasses import asdict

    d = asdict(config)
    d["backbones"] = list(config.backbones)
    return d


def _config_from_dict(d: dict) -> TrainConfig:
    d = dict(d)
    d["backbones"] = tuple(d["backbones"])
    d["loss_weights"] = LossWeights(**d["loss_weights"])
    return TrainConfig(**d)


def save_ensemble(ensemble: Ensemble, path: str | Path) -> None:
    """Single-file archive: member weights, prototypes, gate/heads, config, metadata."""
    payload = {
        "format": "histomoe-ensemble-v1",
        "member_states": [m.state_dict() for m in ensemble.members],
        "member_weights": np.asarray(ensemble.member_weights, dtype=np.float64),
        "val_f1s": list(ensemble.val_f1s),
        "config": _config_to_dict(ensemble.config),
        "backbone_order": list(ensemble.config.backbones),
        "stats": None
        if ensemble.stats is None
        else (np.asarray(ensemble.stats[0]), np.asarray(ensemble.stats[1])),
        "fold_metadata": ensemble.fold_metadata,
    }
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)


def load_ensemble(path: str | Path) -> Ensemble:
    payload = torch.load(path, weights_only=False)
    if payload.get("format") != "histomoe-ensemble-v1":
        raise ValueError(f"not an ensemble checkpoint: {path}")
    config = _config_from_dict(payload["config"])
    members = []
    for state in payload["member_states"]:
        model = build_model(config)
        model.load_state_dict(state)
        model.eval()
        members.append(model)
    stats = payload["stats"]
    if stats is not None:
        stats = (np.asarray(stats[0]), np.asarray(stats[1]))
    return Ensemble(
        members,
        np.asarray(payload["member_weights"]),
        list(payload["val_f1s"]),
        config,
        stats,
        payload["fold_metadata"],
    )
