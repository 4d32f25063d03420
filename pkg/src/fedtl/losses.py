"""Classification and domain-adaptation losses."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .errors import DimensionError

PROB_FLOOR = 1e-12
DEFAULT_SIGMA = 2.0


def cross_entropy(probs, label) -> float:
    """``-log probs[label]`` with the probability floored at 1e-12."""
    probs = np.asarray(probs, dtype=np.float64)
    if not 0 <= label < probs.shape[-1]:
        raise ValueError(f"label {label} out of range [0, {probs.shape[-1]})")
    return float(-math.log(max(probs[label], PROB_FLOOR)))


def batch_cross_entropy(probs, labels) -> np.ndarray:
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    if np.any(labels < 0) or np.any(labels >= probs.shape[-1]):
        raise ValueError("label out of range")
    return -np.log(np.maximum(probs[np.arange(len(labels)), labels], PROB_FLOOR))


@njit(cache=True)
def _sqdist(a, b):
    s = 0.0
    n = a.shape[0]
    for i in range(n):
        for j in range(n):
            d = a[i, j] - b[i, j]
            s += d * d
    return s


@njit(cache=True)
def _mean_kernel(A, B, inv_two_sigma2):
    total = 0.0
    for i in range(A.shape[0]):
        for j in range(B.shape[0]):
            total += math.exp(-_sqdist(A[i], B[j]) * inv_two_sigma2)
    return total / (A.shape[0] * B.shape[0])


def _stack(mats, name):
    arr = np.ascontiguousarray(np.asarray(mats, dtype=np.float64))
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3 or arr.shape[0] == 0:
        raise ValueError(f"{name} must be a non-empty list of square matrices")
    return arr


def gaussian_kernel(A, B, sigma: float = DEFAULT_SIGMA) -> float:
    """``exp(-||A - B||_F^2 / (2 sigma^2))``."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    A = np.ascontiguousarray(A, dtype=np.float64)
    B = np.ascontiguousarray(B, dtype=np.float64)
    if A.shape != B.shape:
        raise DimensionError(f"kernel arguments differ in shape: {A.shape} vs {B.shape}")
    return math.exp(-_sqdist(A, B) * (1.0 / (2.0 * sigma * sigma)))


def mmd2(A, B, sigma: float = DEFAULT_SIGMA) -> float:
    """Biased (V-statistic) squared MMD between two sets of matrices.

    ``mean k(a, a') + mean k(b, b') - 2 mean k(a, b)``, each mean taken as a
    row-major double loop so the value is reproducible bit for bit.
    """
    A = _stack(A, "A")
    B = _stack(B, "B")
    if A.shape[1:] != B.shape[1:]:
        raise DimensionError(f"MMD sets differ in matrix shape: {A.shape[1:]} vs {B.shape[1:]}")
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    c = 1.0 / (2.0 * sigma * sigma)
    return _mean_kernel(A, A, c) + _mean_kernel(B, B, c) - 2.0 * _mean_kernel(A, B, c)


def _kernel_matrix(A, B, sigma):
    diff = A[:, None] - B[None, :]
    K = np.exp(-np.sum(diff * diff, axis=(-2, -1)) / (2.0 * sigma * sigma))
    return K, diff


def mmd2_grad(A, B, sigma: float = DEFAULT_SIGMA):
    """Gradients of :func:`mmd2` with respect to every matrix of ``A`` and of ``B``."""
    A = _stack(A, "A")
    B = _stack(B, "B")
    n, m = len(A), len(B)
    s2 = sigma * sigma
    Kaa, Daa = _kernel_matrix(A, A, sigma)
    Kbb, Dbb = _kernel_matrix(B, B, sigma)
    Kab, Dab = _kernel_matrix(A, B, sigma)
    # d k(x, y) / dx = -k (x - y) / sigma^2
    dA = (-2.0 / (n * n * s2)) * np.einsum("ij,ijkl->ikl", Kaa, Daa)
    dA += (2.0 / (n * m * s2)) * np.einsum("ij,ijkl->ikl", Kab, Dab)
    dB = (-2.0 / (m * m * s2)) * np.einsum("ij,ijkl->ikl", Kbb, Dbb)
    dB -= (2.0 / (n * m * s2)) * np.einsum("ij,ijkl->jkl", Kab, Dab)
    return dA, dB


@dataclass
class LossWeights:
    """Non-negative domain-loss weight per client pair ``i < j`` and class ``y``."""

    default: float = 0.1
    overrides: dict = field(default_factory=dict)

    def __post_init__(self):
        for key, value in [("default", self.default), *self.overrides.items()]:
            if not (value >= 0 and math.isfinite(value)):
                raise ValueError(f"loss weight {key} must be finite and non-negative, got {value}")

    def get(self, i: int, j: int, y: int) -> float:
        if i > j:
            i, j = j, i
        return self.overrides.get((i, j, y), self.default)


def partition_by_class(mats, labels, n_classes: int) -> list[np.ndarray]:
    mats = np.asarray(mats)
    labels = np.asarray(labels)
    return [mats[labels == y] for y in range(n_classes)]


def loss_nontransfer(batches) -> float:
    """Sum over subjects of the mean cross-entropy of each subject's batch.

    ``batches`` is an iterable of ``(probs, labels)`` pairs, one per subject.
    """
    total = 0.0
    for probs, labels in batches:
        labels = np.asarray(labels)
        if labels.size == 0:
            raise ValueError("empty batch")
        total += float(np.mean(batch_cross_entropy(probs, labels)))
    return total


def domain_loss(partitioned, weights: LossWeights, sigma: float = DEFAULT_SIGMA) -> float:
    """``sum_{i<j} sum_y lambda_ijy * MMD^2(Q_i^y, Q_j^y)``; empty classes are skipped."""
    total = 0.0
    m = len(partitioned)
    for i in range(m):
        for j in range(i + 1, m):
            for y, (a, b) in enumerate(zip(partitioned[i], partitioned[j])):
                lam = weights.get(i, j, y)
                if lam == 0.0 or len(a) == 0 or len(b) == 0:
                    continue
                total += lam * mmd2(a, b, sigma)
    return total


def loss_transfer(batches, partitioned, weights: LossWeights, sigma: float = DEFAULT_SIGMA) -> float:
    """Classification sum plus weighted per-class MMD^2 over all client pairs.

    ``partitioned[i][y]`` holds client ``i``'s reduced matrices of class ``y``.
    """
    return loss_nontransfer(batches) + domain_loss(partitioned, weights, sigma)
