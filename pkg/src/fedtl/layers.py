"""Forward and backward passes of the SPD network.

The network is ``BiMap* -> LogEig -> flatten -> dense softmax``. Every pass
works on a stack of trials ``(N, n, n)`` at once; gradients are derived by
hand and checked against finite differences in the test suite.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import spd
from .errors import DimensionError
from .spd import EigenDecomposition

NEAR_EQUAL_RTOL = 1e-10


@dataclass
class BiMapLayer:
    """Bilinear reduction ``S -> W S W^T`` with ``W`` of shape ``(d_out, d_in)``."""

    weight: np.ndarray

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        d_out, d_in = self.weight.shape
        if d_out > d_in:
            raise DimensionError(f"BiMap must reduce dimension, got {d_in} -> {d_out}")
        if not np.all(np.isfinite(self.weight)):
            raise ValueError("BiMap weight has non-finite entries")

    @property
    def d_in(self) -> int:
        return self.weight.shape[1]

    @property
    def d_out(self) -> int:
        return self.weight.shape[0]

    @classmethod
    def orthonormal(cls, d_in: int, d_out: int, rng: np.random.Generator) -> "BiMapLayer":
        """Top ``d_out`` rows of the orthogonal QR factor of a Gaussian matrix."""
        q, r = np.linalg.qr(rng.standard_normal((d_in, d_in)))
        q = q * np.where(np.diag(r) < 0, -1.0, 1.0)
        return cls(q.T[:d_out].copy())


@dataclass
class DenseLayer:
    """Affine map ``x -> W x + b`` followed by softmax; ``weight`` is ``(n_out, n_in)``."""

    weight: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.bias.shape != (self.weight.shape[0],):
            raise DimensionError("dense bias length must equal weight rows")

    @property
    def n_in(self) -> int:
        return self.weight.shape[1]

    @property
    def n_out(self) -> int:
        return self.weight.shape[0]

    @classmethod
    def small_uniform(cls, n_in: int, n_out: int, rng: np.random.Generator, scale: float = 0.01):
        return cls(rng.uniform(-scale, scale, size=(n_out, n_in)), np.zeros(n_out))


@dataclass
class ModelParams:
    """Client-local BiMap stack plus the shared (federated) dense classifier."""

    bimaps: list[BiMapLayer]
    dense: DenseLayer
    clamp_eps: float = spd.DEFAULT_CLAMP_EPS

    def __post_init__(self):
        dims = self.chain
        for a, b in zip(self.bimaps, self.bimaps[1:]):
            if a.d_out != b.d_in:
                raise DimensionError(f"BiMap chain broken: {a.d_out} feeds {b.d_in}")
        if self.dense.n_in != dims[-1] ** 2:
            raise DimensionError(
                f"dense input {self.dense.n_in} does not match flattened {dims[-1]}x{dims[-1]}"
            )

    @property
    def chain(self) -> list[int]:
        return [self.bimaps[0].d_in] + [layer.d_out for layer in self.bimaps]

    @property
    def n_classes(self) -> int:
        return self.dense.n_out

    def shared(self) -> list[np.ndarray]:
        return [self.dense.weight, self.dense.bias]

    def set_shared(self, arrays: Sequence[np.ndarray]) -> None:
        w, b = arrays
        if w.shape != self.dense.weight.shape or b.shape != self.dense.bias.shape:
            raise DimensionError("shared weight shapes differ from the local classifier")
        self.dense.weight = np.array(w, dtype=np.float64)
        self.dense.bias = np.array(b, dtype=np.float64)

    def copy(self) -> "ModelParams":
        return copy.deepcopy(self)


def init_params(chain: Sequence[int], n_classes: int, seed=None, clamp_eps=spd.DEFAULT_CLAMP_EPS) -> ModelParams:
    """Initialise a network for the dimension chain ``[d_in, d_1, ..., d]``."""
    chain = [int(c) for c in chain]
    if len(chain) < 2:
        raise DimensionError("layer chain needs at least an input and one reduced dimension")
    rng = np.random.default_rng(seed)
    bimaps = [BiMapLayer.orthonormal(a, b, rng) for a, b in zip(chain, chain[1:])]
    dense = DenseLayer.small_uniform(chain[-1] ** 2, n_classes, rng)
    return ModelParams(bimaps, dense, clamp_eps)


@dataclass
class Gradients:
    bimaps: list[np.ndarray]
    dense_weight: np.ndarray
    dense_bias: np.ndarray

    def arrays(self) -> list[np.ndarray]:
        return [*self.bimaps, self.dense_weight, self.dense_bias]


# --------------------------------------------------------------------------
# tape
# --------------------------------------------------------------------------


@dataclass
class BiMapEntry:
    inputs: np.ndarray
    # eigendecomposition of W S W^T before rectification
    decomp: EigenDecomposition


@dataclass
class LogEigEntry:
    decomp: EigenDecomposition  # eigenvalues already clamped
    reduced: np.ndarray


@dataclass
class FlattenEntry:
    dim: int


@dataclass
class DenseEntry:
    inputs: np.ndarray
    probs: np.ndarray


@dataclass
class ForwardTape:
    entries: list = field(default_factory=list)

    def __len__(self):
        return len(self.entries)

    @property
    def probs(self) -> np.ndarray:
        return self.entries[-1].probs

    @property
    def reduced(self) -> np.ndarray:
        """Matrices on the common space: last BiMap output, LogEig input."""
        return self.entries[-3].reduced


# --------------------------------------------------------------------------
# individual layers
# --------------------------------------------------------------------------


def loewner(lam, f_lam, df_lam, rtol: float = NEAR_EQUAL_RTOL) -> np.ndarray:
    """Divided-difference matrix of a spectral function.

    ``L[i, j] = (f(l_i) - f(l_j)) / (l_i - l_j)``, replaced by ``f'(l_i)`` when
    the relative gap is below ``rtol``.
    """
    diff = lam[..., :, None] - lam[..., None, :]
    fdiff = f_lam[..., :, None] - f_lam[..., None, :]
    scale = np.maximum(np.abs(lam[..., :, None]), np.abs(lam[..., None, :]))
    near = np.abs(diff) <= rtol * scale
    safe = np.where(near, 1.0, diff)
    deriv = np.broadcast_to(df_lam[..., :, None], diff.shape)
    return np.where(near, deriv, fdiff / safe)


def _spectral_backward(decomp: EigenDecomposition, L: np.ndarray, G: np.ndarray) -> np.ndarray:
    U = decomp.eigenvectors
    Ut = np.swapaxes(U, -1, -2)
    Gs = 0.5 * (G + np.swapaxes(G, -1, -2))
    return U @ (L * (Ut @ Gs @ U)) @ Ut


def _bilinear(W, S):
    out = W @ S @ W.T
    return 0.5 * (out + np.swapaxes(out, -1, -2))


def bimap_forward(layer: BiMapLayer, S, eps: float = spd.DEFAULT_CLAMP_EPS):
    """``eig_clamp(W S W^T, eps)``; returns the output and its tape entry."""
    S = np.asarray(S, dtype=np.float64)
    if S.shape[-1] != layer.d_in:
        raise DimensionError(f"BiMap expects {layer.d_in}x{layer.d_in} input, got {S.shape[-2:]}")
    Y = _bilinear(layer.weight, S)
    decomp = spd.sym_eig(Y)
    out = spd.eig_clamp(Y, eps, decomp=decomp)
    return out, BiMapEntry(S, decomp)


def bimap_backward(layer: BiMapLayer, S, G):
    """Gradients of ``W S W^T`` (no rectification): ``dW = (G + G^T) W S``, ``dS = W^T G W``.

    For a stack, ``dW`` is summed over the batch and ``dS`` keeps the batch axis.
    """
    W = layer.weight
    S = np.asarray(S, dtype=np.float64)
    G = np.asarray(G, dtype=np.float64)
    if G.shape[-1] != layer.d_out or S.shape[-1] != layer.d_in:
        raise DimensionError("BiMap backward shape mismatch")
    Gs = G + np.swapaxes(G, -1, -2)
    dW = Gs @ W @ S
    if dW.ndim == 3:
        dW = dW.sum(axis=0)
    dS = W.T @ G @ W
    return dW, 0.5 * (dS + np.swapaxes(dS, -1, -2))


def clamp_backward(decomp: EigenDecomposition, G, eps: float = spd.DEFAULT_CLAMP_EPS):
    """Gradient through ``eig_clamp`` at the matrix whose decomposition is ``decomp``."""
    lam = decomp.eigenvalues
    f = np.maximum(lam, eps)
    df = (lam > eps).astype(np.float64)
    return _spectral_backward(decomp, loewner(lam, f, df), G)


def logeig_forward(P, eps: float = spd.DEFAULT_CLAMP_EPS):
    """``spd_log(eig_clamp(P, eps))`` plus the tape entry holding the eigendecomposition."""
    P = np.asarray(P, dtype=np.float64)
    decomp = spd.sym_eig(P)
    clamped = EigenDecomposition(np.maximum(decomp.eigenvalues, eps), decomp.eigenvectors)
    return spd.spd_log(None, decomp=clamped), LogEigEntry(clamped, P)


def logeig_backward(entry: LogEigEntry, G):
    """Daleckii-Krein gradient ``U (L o U^T G U) U^T`` of the matrix logarithm."""
    if entry is None:
        raise ValueError("logeig_backward needs the forward tape entry")
    lam = entry.decomp.eigenvalues
    L = loewner(lam, np.log(lam), 1.0 / lam)
    return _spectral_backward(entry.decomp, L, np.asarray(G, dtype=np.float64))


def flatten(V) -> np.ndarray:
    """Row-major flattening of the trailing ``(d, d)`` axes."""
    V = np.asarray(V)
    return V.reshape(*V.shape[:-2], V.shape[-1] * V.shape[-2])


def unflatten(x, dim: int) -> np.ndarray:
    x = np.asarray(x)
    return x.reshape(*x.shape[:-1], dim, dim)


def softmax(logits) -> np.ndarray:
    z = logits - np.max(logits, axis=-1, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=-1, keepdims=True)


def dense_softmax_forward(layer: DenseLayer, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != layer.n_in:
        raise DimensionError(f"dense layer expects {layer.n_in} inputs, got {x.shape[-1]}")
    return softmax(x @ layer.weight.T + layer.bias)


def dense_softmax_backward(layer: DenseLayer, x, probs, label, weight=None):
    """Softmax cross-entropy gradients ``(dW, db, dx)`` with ``delta = probs - onehot``.

    ``x``/``probs``/``label`` may be batched, in which case ``dW`` and ``db``
    are summed over the batch (each trial scaled by ``weight`` if given).
    """
    x = np.asarray(x, dtype=np.float64)
    probs = np.asarray(probs, dtype=np.float64)
    label = np.asarray(label)
    K = layer.n_out
    if np.any(label < 0) or np.any(label >= K):
        raise ValueError(f"label out of range [0, {K})")
    delta = probs.copy()
    if delta.ndim == 1:
        delta[label] -= 1.0
    else:
        delta[np.arange(len(label)), label] -= 1.0
    if weight is not None:
        delta = delta * np.asarray(weight, dtype=np.float64)[..., None]
    if delta.ndim == 1:
        dW = np.outer(delta, x)
        db = delta
    else:
        dW = delta.T @ x
        db = delta.sum(axis=0)
    dx = delta @ layer.weight
    return dW, db, dx


def predict_label(probs) -> np.ndarray:
    """Argmax; ties go to the lower class index."""
    return np.argmax(probs, axis=-1)


# --------------------------------------------------------------------------
# whole network
# --------------------------------------------------------------------------


def reduce(params: ModelParams, S):
    """Run only the BiMap chain, returning the common-space matrices and their entries."""
    entries = []
    X = np.asarray(S, dtype=np.float64)
    if X.shape[-1] != params.chain[0]:
        raise DimensionError(f"network expects {params.chain[0]}x{params.chain[0]} input, got {X.shape[-2:]}")
    for layer in params.bimaps:
        X, entry = bimap_forward(layer, X, params.clamp_eps)
        entries.append(entry)
    return X, entries


def network_forward(params: ModelParams, S):
    """Class probabilities for SPD input(s) ``S`` and the tape for ``network_backward``."""
    reduced, entries = reduce(params, S)
    V, log_entry = logeig_forward(reduced, params.clamp_eps)
    x = flatten(V)
    probs = dense_softmax_forward(params.dense, x)
    tape = ForwardTape([*entries, log_entry, FlattenEntry(V.shape[-1]), DenseEntry(x, probs)])
    return probs, tape


def network_backward(params: ModelParams, tape: ForwardTape, labels, *, weight=None, reduced_grad=None) -> Gradients:
    """Reverse pass of ``sum_n weight_n * CE(probs_n, labels_n)``.

    ``reduced_grad`` is an extra gradient (e.g. from a domain loss) with
    respect to the common-space matrices, added before the BiMap chain.
    """
    n_bimaps = len(params.bimaps)
    if len(tape) != n_bimaps + 3:
        raise ValueError(f"tape has {len(tape)} entries, network has {n_bimaps + 3} layers")
    dense_entry: DenseEntry = tape.entries[-1]
    flat_entry: FlattenEntry = tape.entries[-2]
    log_entry: LogEigEntry = tape.entries[-3]

    dWd, dbd, dx = dense_softmax_backward(params.dense, dense_entry.inputs, dense_entry.probs, labels, weight)
    G = logeig_backward(log_entry, unflatten(dx, flat_entry.dim))
    if reduced_grad is not None:
        G = G + reduced_grad
    grads = [None] * n_bimaps
    for k in range(n_bimaps - 1, -1, -1):
        entry: BiMapEntry = tape.entries[k]
        layer = params.bimaps[k]
        if entry.inputs.shape[-1] != layer.d_in:
            raise ValueError("tape does not match parameters")
        G = clamp_backward(entry.decomp, G, params.clamp_eps)
        grads[k], G = bimap_backward(layer, entry.inputs, G)
    return Gradients(grads, dWd, dbd)
