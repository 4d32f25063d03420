import numpy as np
import pytest

from fedtl import baselines
from fedtl.errors import DimensionError
from fedtl.layers import DenseLayer

from conftest import random_spd, separable_set


class TestMdm:
    def test_single_sample_means(self, rng):
        covs = np.stack([random_spd(rng, 3), random_spd(rng, 3)])
        model = baselines.mdm_train(covs, [0, 1])
        np.testing.assert_allclose(model.means, covs, rtol=1e-12)

    def test_duplicates_do_not_move_mean(self, rng):
        covs = np.stack([random_spd(rng, 3) for _ in range(3)])
        a = baselines.mdm_train(covs, [0, 0, 0], 1).means
        b = baselines.mdm_train(np.concatenate([covs, covs]), [0] * 6, 1).means
        np.testing.assert_allclose(a, b, rtol=1e-9)

    def test_commuting_closed_form(self, rng):
        diag = rng.uniform(0.5, 3.0, (5, 3))
        covs = np.stack([np.diag(d) for d in diag])
        model = baselines.mdm_train(covs, np.zeros(5, int), 1)
        np.testing.assert_allclose(model.means[0], np.diag(np.exp(np.log(diag).mean(axis=0))), rtol=1e-10)

    def test_predict_exact_mean(self, rng):
        covs = np.stack([random_spd(rng, 3) for _ in range(4)])
        model = baselines.mdm_train(covs, [0, 0, 1, 1])
        for y in range(2):
            assert baselines.mdm_predict(model, model.means[y]) == y

    def test_tie_goes_to_lower_class(self):
        model = baselines.MdmModel(np.stack([np.eye(2), 4 * np.eye(2)]))
        d = baselines.mdm_distances(model, 2 * np.eye(2))
        assert d[0] == d[1]
        assert baselines.mdm_predict(model, 2 * np.eye(2)) == 0

    def test_errors(self, rng):
        with pytest.raises(ValueError, match="class 1"):
            baselines.mdm_train(np.stack([np.eye(2)] * 2), [0, 0], 2)
        model = baselines.mdm_train(np.stack([np.eye(2), 2 * np.eye(2)]), [0, 1])
        with pytest.raises(DimensionError):
            baselines.mdm_predict(model, np.eye(3))

    @pytest.mark.parametrize("seed", range(10))
    def test_affine_invariance(self, seed):
        rng = np.random.default_rng(seed)
        covs = np.stack([random_spd(rng, 4) for _ in range(10)])
        labels = np.arange(10) % 2
        queries = [random_spd(rng, 4) for _ in range(5)]
        A = rng.standard_normal((4, 4))
        moved = np.stack([A @ c @ A.T for c in covs])
        # default stopping tolerance: means are only good to ~1e-8, predictions must still agree
        m1, m2 = baselines.mdm_train(covs, labels), baselines.mdm_train(moved, labels)
        # means solved tightly (1e-10): distances agree to 1e-9
        t1, t2 = baselines.mdm_train(covs, labels, tol=1e-10), baselines.mdm_train(moved, labels, tol=1e-10)
        for q in queries:
            qa = A @ q @ A.T
            assert np.max(np.abs(baselines.mdm_distances(m1, q) - baselines.mdm_distances(m2, qa))) <= 1e-7
            assert baselines.mdm_predict(m1, q) == baselines.mdm_predict(m2, qa)
            assert np.max(np.abs(baselines.mdm_distances(t1, q) - baselines.mdm_distances(t2, qa))) <= 1e-9

    def test_separable_accuracy(self):
        train, test = separable_set(seed=3), separable_set(seed=3, trials_per_class=20)
        model = baselines.mdm_train(train.covariances(), train.labels)
        pred = [baselines.mdm_predict(model, c) for c in test.covariances()]
        assert np.mean(np.array(pred) == test.labels) >= 0.95


class TestTsm:
    def test_reference_features_exactly_zero(self, rng):
        covs = np.stack([random_spd(rng, 3) for _ in range(6)])
        model = baselines.tsm_train(covs, np.arange(6) % 2)
        assert not baselines.tangent_features(model.reference, model.reference).any()
        assert not baselines.tangent_features(np.eye(3), np.eye(3)).any()

    def test_separable_training_accuracy(self):
        trials = separable_set(seed=5, trials_per_class=20)
        covs = trials.covariances()
        model = baselines.tsm_train(covs, trials.labels)
        pred = np.array([baselines.tsm_predict(model, c) for c in covs])
        assert np.mean(pred == trials.labels) == 1.0

    def test_deterministic(self):
        trials = separable_set(seed=6, trials_per_class=10)
        covs = trials.covariances()
        a = baselines.tsm_train(covs, trials.labels)
        b = baselines.tsm_train(covs, trials.labels)
        assert a.classifier.weight.tobytes() == b.classifier.weight.tobytes()
        assert a.reference.tobytes() == b.reference.tobytes()

    def test_tie_goes_to_lower_class(self, rng):
        model = baselines.TsmModel(np.eye(3), DenseLayer(np.zeros((2, 9)), np.zeros(2)))
        assert baselines.tsm_predict(model, random_spd(rng, 3)) == 0

    def test_errors(self, rng):
        with pytest.raises(ValueError):
            baselines.tsm_train(np.stack([np.eye(2)] * 3), [0, 0, 0])
        model = baselines.tsm_train(np.stack([np.eye(2), 2 * np.eye(2)]), [0, 1])
        with pytest.raises(DimensionError):
            baselines.tsm_predict(model, np.eye(3))

    def test_logistic_gradient_norm(self, rng):
        X = rng.standard_normal((30, 3))
        y = (X[:, 0] + 0.5 * rng.standard_normal(30) > 0).astype(int)
        layer, iters = baselines.fit_logistic(X, y, 2, l2=0.1)
        assert iters < 10000
        from fedtl.layers import dense_softmax_backward, dense_softmax_forward
        dW, db, _ = dense_softmax_backward(layer, X, dense_softmax_forward(layer, X), y, np.full(30, 1 / 30))
        assert np.sqrt(np.sum((dW + 0.1 * layer.weight) ** 2) + np.sum(db ** 2)) < 1e-6
