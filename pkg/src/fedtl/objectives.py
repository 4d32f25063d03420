"""Objective closures binding a client's data to the network losses."""
from __future__ import annotations

from typing import Mapping, Sequence

import numpy as np

from . import layers
from .losses import DEFAULT_SIGMA, LossWeights, batch_cross_entropy, mmd2, mmd2_grad, partition_by_class


def accuracy(probs, labels) -> float:
    return float(np.mean(layers.predict_label(probs) == np.asarray(labels)))


def predict(params: layers.ModelParams, covs) -> np.ndarray:
    probs, _ = layers.network_forward(params, covs)
    return layers.predict_label(probs)


def nontransfer_objective(covs, labels):
    """Mean cross-entropy of one subject's batch."""
    covs = np.asarray(covs, dtype=np.float64)
    labels = np.asarray(labels)
    n = len(labels)
    if n == 0:
        raise ValueError("empty training batch")
    weight = np.full(n, 1.0 / n)

    def objective(params):
        probs, tape = layers.network_forward(params, covs)
        loss = float(np.mean(batch_cross_entropy(probs, labels)))
        grads = layers.network_backward(params, tape, labels, weight=weight)
        return loss, grads, accuracy(probs, labels)

    return objective


def transfer_objective(covs, labels, client_index: int, peers: Mapping[int, Sequence[np.ndarray]],
                       weights: LossWeights, sigma: float = DEFAULT_SIGMA):
    """Mean cross-entropy plus per-class MMD^2 against peers' cached common-space matrices.

    ``peers`` maps a peer's client index to its per-class stacks of reduced
    matrices; they are constants here, so only this client's matrices get a
    domain gradient.
    """
    covs = np.asarray(covs, dtype=np.float64)
    labels = np.asarray(labels)
    n = len(labels)
    weight = np.full(n, 1.0 / n)

    def objective(params):
        probs, tape = layers.network_forward(params, covs)
        loss = float(np.mean(batch_cross_entropy(probs, labels)))
        reduced = tape.reduced
        n_classes = params.n_classes
        own = partition_by_class(reduced, labels, n_classes)
        red_grad = np.zeros_like(reduced)
        for j in sorted(peers):
            for y in range(n_classes):
                lam = weights.get(client_index, j, y)
                other = peers[j][y]
                if lam == 0.0 or len(own[y]) == 0 or len(other) == 0:
                    continue
                loss += lam * mmd2(own[y], other, sigma)
                dA, _ = mmd2_grad(own[y], other, sigma)
                red_grad[labels == y] += lam * dA
        grads = layers.network_backward(params, tape, labels, weight=weight, reduced_grad=red_grad)
        return loss, grads, accuracy(probs, labels)

    return objective
