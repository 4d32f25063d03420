import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fedtl import layers, objectives, optim
from fedtl.errors import DimensionError, DivergenceError
from fedtl.layers import BiMapLayer, DenseLayer, Gradients, ModelParams
from fedtl.optim import Schedule

from conftest import separable_set


def tiny_params(p=1.0):
    return ModelParams([BiMapLayer([[p]])], DenseLayer(np.array([[p], [p]]), np.array([p, p])))


def constant_grads(g):
    return Gradients([np.array([[g]])], np.array([[g], [g]]), np.array([g, g]))


def quadratic_objective(target):
    """0.5 * ||theta - target||^2 over every parameter; gradient is theta - target."""
    def objective(params):
        grads = Gradients([layer.weight - target for layer in params.bimaps],
                          params.dense.weight - target, params.dense.bias - target)
        loss = 0.5 * sum(float(np.sum(g * g)) for g in grads.arrays())
        return loss, grads, 0.0
    return objective


class TestSchedule:
    def test_examples(self):
        s = Schedule()
        assert optim.lr_at(s, 0) == 0.1
        assert optim.lr_at(s, 49) == 0.1
        assert optim.lr_at(s, 51) == pytest.approx(0.09604, rel=1e-12)

    def test_once_mode(self):
        s = Schedule(decay_mode="once")
        assert optim.lr_at(s, 50) == optim.lr_at(s, 500) == pytest.approx(0.098)

    @given(st.integers(0, 3000), st.integers(0, 3000))
    def test_monotone_non_increasing(self, a, b):
        s = Schedule()
        lo, hi = sorted((a, b))
        assert optim.lr_at(s, hi) <= optim.lr_at(s, lo)

    @pytest.mark.parametrize("kwargs", [dict(lr0=0.0), dict(decay_rate=1.0), dict(max_epochs=0),
                                        dict(stop_loss=-1.0), dict(decay_mode="cosine")])
    def test_invalid(self, kwargs):
        with pytest.raises(ValueError):
            Schedule(**kwargs)


class TestSgdStep:
    def test_example(self):
        params = optim.sgd_step(tiny_params(1.0), constant_grads(2.0), 0.1)
        for a in [params.bimaps[0].weight, params.dense.weight, params.dense.bias]:
            np.testing.assert_allclose(a, 0.8, rtol=1e-15)

    def test_zero_lr_unchanged(self):
        params = optim.sgd_step(tiny_params(1.0), constant_grads(2.0), 0.0)
        assert params.bimaps[0].weight[0, 0] == 1.0 and params.dense.bias[0] == 1.0

    def test_constant_gradient_linear(self):
        params = tiny_params(1.0)
        for _ in range(10):
            optim.sgd_step(params, constant_grads(0.5), 0.01)
        np.testing.assert_allclose(params.dense.weight, 1.0 - 10 * 0.01 * 0.5, rtol=1e-14)

    def test_non_finite_gradient(self):
        params = tiny_params(1.0)
        with pytest.raises(DivergenceError):
            optim.sgd_step(params, constant_grads(np.nan), 0.1)
        assert params.bimaps[0].weight[0, 0] == 1.0

    def test_shape_mismatch(self):
        bad = Gradients([np.zeros((2, 2))], np.zeros((2, 1)), np.zeros(2))
        with pytest.raises(DimensionError):
            optim.sgd_step(tiny_params(), bad, 0.1)

    def test_stiefel_projection_tangent(self, rng):
        W = BiMapLayer.orthonormal(6, 3, rng).weight
        xi = optim.stiefel_project(W, rng.standard_normal((3, 6)))
        A = xi @ W.T
        assert np.max(np.abs(A + A.T)) <= 1e-12


class TestTrain:
    def test_quadratic_converges(self):
        params = tiny_params(3.0)
        report = optim.train(params, quadratic_objective(1.0), Schedule(lr0=0.5, max_epochs=200, stop_loss=1e-12))
        assert report.stop_reason == "threshold"
        assert abs(params.dense.bias[0] - 1.0) <= 1e-6

    def test_infinite_stop_ends_after_one_epoch(self):
        report = optim.train(tiny_params(3.0), quadratic_objective(1.0), Schedule(stop_loss=float("inf")))
        assert report.epochs == [1]
        assert report.stop_reason == "threshold"

    def test_max_epochs(self):
        report = optim.train(tiny_params(3.0), quadratic_objective(1.0), Schedule(lr0=1e-4, max_epochs=5))
        assert report.stop_reason == "max_epochs" and len(report.losses) == 5
        assert report.lrs == [1e-4] * 5

    def test_divergence(self):
        def objective(params):
            w = params.dense.bias[0]
            return w * w * 1e300, constant_grads(w * 1e300), 0.0
        with np.errstate(over="ignore"), pytest.raises(DivergenceError) as info:
            optim.train(tiny_params(1.0), objective, Schedule(lr0=1.0, max_epochs=50, stop_loss=0.0))
        assert info.value.report.stop_reason == "diverged"

    def test_separable_set_reaches_threshold(self):
        trials = separable_set()
        covs = trials.covariances()
        params = layers.init_params([8, 4, 4, 4], 2, seed=0)
        report = optim.train(params, objectives.nontransfer_objective(covs, trials.labels),
                             Schedule(max_epochs=500))
        assert report.stop_reason == "threshold"
        assert report.final_loss < 0.1
        assert objectives.accuracy(layers.network_forward(params, covs)[0], trials.labels) >= 0.95

    def test_bitwise_deterministic(self):
        trials = separable_set(trials_per_class=10)
        covs = trials.covariances()
        runs = []
        for _ in range(2):
            params = layers.init_params([8, 4], 2, seed=3)
            report = optim.train(params, objectives.nontransfer_objective(covs, trials.labels),
                                 Schedule(max_epochs=20))
            runs.append((report.losses, [layer.weight.tobytes() for layer in params.bimaps],
                         [a.tobytes() for a in params.shared()]))
        assert runs[0] == runs[1]

    def test_stiefel_keeps_orthonormal_rows(self):
        trials = separable_set(trials_per_class=10)
        covs = trials.covariances()
        params = layers.init_params([8, 4, 2], 2, seed=1)
        optim.train(params, objectives.nontransfer_objective(covs, trials.labels), Schedule(max_epochs=30),
                    stiefel=True)
        for layer in params.bimaps:
            W = layer.weight
            assert np.linalg.norm(W @ W.T - np.eye(W.shape[0])) <= 1e-8
