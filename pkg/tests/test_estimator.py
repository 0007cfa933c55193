import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError
from sklearn.model_selection import GridSearchCV
from sklearn.pipeline import make_pipeline
from sklearn.preprocessing import StandardScaler

from sharpmin.data import make_rotated_domains
from sharpmin.estimator import SharpnessAwareClassifier


@pytest.fixture(scope="module")
def blobs():
    ds = make_rotated_domains(3, 80, 20.0, 0.3, seed=0)
    batch = ds.as_batch()
    return batch.features, batch.labels, batch.domain_ids


class TestFitPredict:
    def test_learns_separable_blobs(self, blobs):
        X, y, _ = blobs
        clf = SharpnessAwareClassifier(rule="sagm", n_iterations=300, random_state=0)
        assert clf.fit(X, y).score(X, y) > 0.9

    @pytest.mark.parametrize("rule", ["erm", "sam", "gsam", "erm_sam", "sagm"])
    def test_every_rule_trains(self, blobs, rule):
        X, y, _ = blobs
        clf = SharpnessAwareClassifier(rule=rule, n_iterations=150, random_state=0)
        assert clf.fit(X, y).score(X, y) > 0.8

    def test_mlp_variant(self, blobs):
        X, y, _ = blobs
        clf = SharpnessAwareClassifier(
            hidden_layer_sizes=(4,), n_iterations=300, random_state=1
        )
        assert clf.fit(X, y).score(X, y) > 0.9

    def test_predict_proba_rows_sum_to_one(self, blobs):
        X, y, _ = blobs
        clf = SharpnessAwareClassifier(n_iterations=100, random_state=0).fit(X, y)
        proba = clf.predict_proba(X[:10])
        assert proba.shape == (10, 2)
        np.testing.assert_allclose(proba.sum(axis=1), np.ones(10), rtol=1e-12)

    def test_domain_balanced_batches(self, blobs):
        X, y, domains = blobs
        clf = SharpnessAwareClassifier(n_iterations=150, batch_size=8, random_state=0)
        assert clf.fit(X, y, domains=domains).score(X, y) > 0.85

    def test_string_labels(self, blobs):
        X, y, _ = blobs
        names = np.array(["neg", "pos"])[y]
        clf = SharpnessAwareClassifier(n_iterations=100, random_state=0).fit(X, names)
        assert set(clf.predict(X[:20])) <= {"neg", "pos"}

    def test_determinism(self, blobs):
        X, y, _ = blobs
        a = SharpnessAwareClassifier(n_iterations=120, random_state=7).fit(X, y)
        b = SharpnessAwareClassifier(n_iterations=120, random_state=7).fit(X, y)
        np.testing.assert_array_equal(a.theta_, b.theta_)
        np.testing.assert_array_equal(a.loss_history_, b.loss_history_)


class TestSklearnConventions:
    def test_get_set_params_round_trip(self):
        clf = SharpnessAwareClassifier(rho=0.2, alpha=0.0005)
        params = clf.get_params()
        assert params["rho"] == 0.2
        clone_ = clone(clf)
        assert clone_.get_params() == params
        clf.set_params(rho=0.3)
        assert clf.rho == 0.3

    def test_unfitted_predict_raises(self, blobs):
        X, _, _ = blobs
        with pytest.raises(NotFittedError):
            SharpnessAwareClassifier().predict(X)

    def test_unknown_rule_raises_on_fit(self, blobs):
        X, y, _ = blobs
        with pytest.raises(ValueError, match="unknown rule"):
            SharpnessAwareClassifier(rule="sharpness++").fit(X, y)

    def test_pipeline_composition(self, blobs):
        X, y, _ = blobs
        pipe = make_pipeline(
            StandardScaler(),
            SharpnessAwareClassifier(n_iterations=150, random_state=0),
        )
        assert pipe.fit(X, y).score(X, y) > 0.85

    def test_grid_search(self, blobs):
        X, y, _ = blobs
        grid = GridSearchCV(
            SharpnessAwareClassifier(n_iterations=80, random_state=0),
            {"alpha": [0.001, 0.0005]},
            cv=2,
        )
        grid.fit(X, y)
        assert grid.best_params_["alpha"] in (0.001, 0.0005)


class TestDiagnostics:
    def test_surrogate_gap_finite(self, blobs):
        X, y, _ = blobs
        clf = SharpnessAwareClassifier(n_iterations=150, random_state=0).fit(X, y)
        gap = clf.surrogate_gap(X, y)
        assert np.isfinite(gap)

    def test_sharpness_profile(self, blobs):
        X, y, _ = blobs
        clf = SharpnessAwareClassifier(n_iterations=150, random_state=0).fit(X, y)
        profile = clf.sharpness_profile(X, y, [0.01, 0.05, 0.1])
        assert profile.gaps.shape == (3,)
        assert np.all(np.isfinite(profile.gaps))
