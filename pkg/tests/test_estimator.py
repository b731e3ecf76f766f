import numpy as np
import pytest
from sklearn.base import clone

from histomoe import HistoMoEClassifier
from histomoe.validation import check_images, check_labels, check_magnifications


@pytest.fixture(scope="module")
def fitted(small_data):
    index, stats, x, y = small_data
    mags = index.magnifications()
    clf = HistoMoEClassifier(epochs=2, n_folds=2, batch_size=16, random_state=0, mc_passes=3)
    clf.fit(x, y, magnifications=mags)
    return clf, x, y, mags


class TestSklearnContract:
    def test_get_set_params_round_trip(self):
        clf = HistoMoEClassifier(epochs=3, n_prototypes=2)
        params = clf.get_params()
        assert params["epochs"] == 3
        assert params["n_prototypes"] == 2
        clf2 = HistoMoEClassifier(**params)
        assert clf2.get_params() == params

    def test_clone(self):
        clf = HistoMoEClassifier(epochs=1, random_state=7)
        cloned = clone(clf)
        assert cloned.get_params() == clf.get_params()

    def test_unfitted_predict_raises(self):
        clf = HistoMoEClassifier()
        with pytest.raises(RuntimeError, match="not fitted"):
            clf.predict(np.zeros((1, 3, 224, 224), dtype=np.float32))

    def test_fit_returns_self_and_sets_attrs(self, fitted):
        clf, x, y, mags = fitted
        assert hasattr(clf, "classes_")
        assert hasattr(clf, "members_")
        assert len(clf.members_) == 2
        assert np.isclose(np.sum(clf.member_weights_), 1.0)


class TestPredict:
    def test_predict_labels_in_classes(self, fitted):
        clf, x, y, mags = fitted
        preds = clf.predict(x[:8])
        assert set(preds.tolist()) <= set(clf.classes_.tolist())

    def test_predict_proba_simplex(self, fitted):
        clf, x, y, mags = fitted
        probs = clf.predict_proba(x[:8])
        assert probs.shape == (8, len(clf.classes_))
        assert np.allclose(probs.sum(axis=1), 1.0, atol=1e-6)
        assert (probs >= 0).all()

    def test_predict_deterministic_given_state(self, fitted):
        clf, x, y, mags = fitted
        a = clf.predict_proba(x[:4])
        b = clf.predict_proba(x[:4])
        assert np.array_equal(a, b)

    def test_uncertainty_report_shapes(self, fitted):
        clf, x, y, mags = fitted
        report = clf.predict_uncertainty(x[:5])
        assert report.mean_probs.shape == (5, len(clf.classes_))
        assert report.uncertainty.shape == (5,)
        assert report.flags.dtype == bool

    def test_transform_returns_fused_features(self, fitted):
        clf, x, y, mags = fitted
        feats = clf.transform(x[:4])
        assert feats.shape == (4, clf.members_[0].feature_dim)

    def test_score_runs(self, fitted):
        clf, x, y, mags = fitted
        assert 0.0 <= clf.score(x[:16], y[:16]) <= 1.0

    def test_original_label_values_restored(self, small_data):
        index, stats, x, y = small_data
        shifted = y[:32] + 10  # arbitrary label values, not 0..C-1
        clf = HistoMoEClassifier(epochs=1, n_folds=2, batch_size=8, random_state=0, mc_passes=2)
        clf.fit(x[:32], shifted)
        preds = clf.predict(x[:4])
        assert set(preds.tolist()) <= set(shifted.tolist())


class TestValidation:
    def test_check_images_shape(self):
        with pytest.raises(ValueError, match="N, 3, H, W"):
            check_images(np.zeros((4, 224, 224)))

    def test_check_images_min_size(self):
        with pytest.raises(ValueError, match="at least"):
            check_images(np.zeros((1, 3, 16, 16)))

    def test_check_images_rejects_nan(self):
        x = np.zeros((1, 3, 64, 64), dtype=np.float32)
        x[0, 0, 0, 0] = np.nan
        with pytest.raises(ValueError, match="finite"):
            check_images(x)

    def test_check_images_exact_size(self):
        with pytest.raises(ValueError, match="224"):
            check_images(np.zeros((1, 3, 64, 64)), size=224)

    def test_check_labels_encoding(self):
        enc, classes = check_labels(np.array(["b", "a", "b"]), 3)
        assert classes.tolist() == ["a", "b"]
        assert enc.tolist() == [1, 0, 1]

    def test_check_labels_single_class_rejected(self):
        with pytest.raises(ValueError, match="two classes"):
            check_labels(np.zeros(4), 4)

    def test_check_magnifications_length(self):
        with pytest.raises(ValueError):
            check_magnifications([40, 100], 3)
        assert check_magnifications(None, 3) is None
