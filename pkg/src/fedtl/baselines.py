"""Riemannian reference classifiers: minimum distance to mean (MDM) and tangent-space mapping (TSM)."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import spd
from .errors import DimensionError
from .layers import DenseLayer, dense_softmax_backward, dense_softmax_forward, flatten, predict_label


def _check_classes(covs, labels, n_classes):
    covs = np.asarray(covs, dtype=np.float64)
    labels = np.asarray(labels)
    if n_classes is None:
        n_classes = int(labels.max()) + 1
    counts = np.bincount(labels, minlength=n_classes)
    empty = np.flatnonzero(counts == 0)
    if empty.size:
        raise ValueError(f"class {int(empty[0])} has no training samples")
    return covs, labels, n_classes


@dataclass
class MdmModel:
    means: np.ndarray  # (K, n, n)


def mdm_train(covs, labels, n_classes: int | None = None, tol: float = 1e-8) -> MdmModel:
    """Per-class Fréchet means; ``tol`` is the stopping gradient norm of the mean iteration."""
    covs, labels, n_classes = _check_classes(covs, labels, n_classes)
    return MdmModel(np.stack([spd.frechet_mean(covs[labels == y], tol=tol, max_iter=100)
                              for y in range(n_classes)]))


def mdm_distances(model: MdmModel, cov) -> np.ndarray:
    cov = np.asarray(cov, dtype=np.float64)
    if cov.shape != model.means.shape[1:]:
        raise DimensionError(f"query shape {cov.shape} does not match class means {model.means.shape[1:]}")
    return np.array([spd.geodesic_distance(m, cov) for m in model.means])


def mdm_predict(model: MdmModel, cov) -> int:
    """Class whose Fréchet mean is geodesically closest; ties go to the lower index."""
    return int(np.argmin(mdm_distances(model, cov)))


@dataclass
class TsmModel:
    reference: np.ndarray
    classifier: DenseLayer
    iterations: int = 0


def tangent_features(reference, covs) -> np.ndarray:
    covs = np.asarray(covs, dtype=np.float64)
    if covs.shape[-1] != reference.shape[-1]:
        raise DimensionError(f"covariance dim {covs.shape[-1]} does not match reference {reference.shape[-1]}")
    if covs.ndim == 2:
        return flatten(spd.log_map(reference, covs))
    return np.stack([flatten(spd.log_map(reference, c)) for c in covs])


def fit_logistic(X, y, n_classes: int, tol: float = 1e-6, max_iter: int = 10000, l2: float = 0.0):
    """Multinomial logistic regression by full-batch gradient descent from zero weights.

    The step is ``1 / L`` with ``L`` an upper bound on the curvature of the
    mean cross-entropy, which guarantees monotone descent.
    """
    X = np.asarray(X, dtype=np.float64)
    n, f = X.shape
    layer = DenseLayer(np.zeros((n_classes, f)), np.zeros(n_classes))
    curvature = 0.5 * (np.max(np.linalg.eigvalsh(X.T @ X / n)) + 1.0) + l2
    lr = 1.0 / curvature
    weight = np.full(n, 1.0 / n)
    it = 0
    for it in range(1, max_iter + 1):
        probs = dense_softmax_forward(layer, X)
        dW, db, _ = dense_softmax_backward(layer, X, probs, y, weight)
        dW = dW + l2 * layer.weight
        if np.sqrt(np.sum(dW ** 2) + np.sum(db ** 2)) < tol:
            break
        layer.weight = layer.weight - lr * dW
        layer.bias = layer.bias - lr * db
    return layer, it


def tsm_train(covs, labels, n_classes: int | None = None, l2: float = 0.0) -> TsmModel:
    covs, labels, n_classes = _check_classes(covs, labels, n_classes)
    if n_classes < 2:
        raise ValueError("tangent-space classifier needs at least two classes")
    reference = spd.frechet_mean(covs, tol=1e-8, max_iter=100)
    X = tangent_features(reference, covs)
    layer, iterations = fit_logistic(X, labels, n_classes, l2=l2)
    return TsmModel(reference, layer, iterations)


def tsm_predict_proba(model: TsmModel, cov) -> np.ndarray:
    return dense_softmax_forward(model.classifier, tangent_features(model.reference, cov))


def tsm_predict(model: TsmModel, cov) -> int:
    return int(predict_label(tsm_predict_proba(model, cov)))
