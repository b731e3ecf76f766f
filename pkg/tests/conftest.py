import numpy as np
import pytest
import torch

from histomoe.data import (
    compute_normalization_stats,
    generate_synthetic_dataset,
    materialize,
    stratified_split,
)
from histomoe.training import FoldData, TrainConfig, train_fold


@pytest.fixture(scope="session")
def small_index():
    """64 synthetic samples: 8 classes x 2 magnifications x 4 per cell."""
    return generate_synthetic_dataset(4, (100, 400), seed=7)


@pytest.fixture(scope="session")
def small_data(small_index):
    stats = compute_normalization_stats(small_index)
    x, y = materialize(small_index, stats)
    return small_index, stats, x, y


@pytest.fixture(scope="session")
def trained_fold(small_data):
    """One quickly trained fold shared by inference-side tests."""
    index, stats, x, y = small_data
    train, test = stratified_split(index, 0.25, seed=3)
    xtr, ytr = materialize(train, stats)
    xte, yte = materialize(test, stats)
    perm = np.random.default_rng(11).permutation(len(ytr))
    xtr, ytr = xtr[perm], ytr[perm]
    config = TrainConfig(epochs=6, batch_size=16, seed=5)
    model, val_metrics, _ = train_fold(
        FoldData(xtr[: len(xtr) - 16], ytr[: len(ytr) - 16]),
        FoldData(xtr[len(xtr) - 16 :], ytr[len(ytr) - 16 :]),
        config,
    )
    model.eval()
    return model, config, (xte, yte), stats


@pytest.fixture()
def rng():
    return np.random.default_rng(0)


@pytest.fixture(autouse=True)
def _torch_threads():
    torch.set_num_threads(2)
