"""Dense symmetric linear algebra on the SPD manifold.

Every function accepts a single ``(n, n)`` matrix or a stack ``(..., n, n)``
and is a pure function of its inputs. Eigendecompositions come from a
cyclic Jacobi solver with a fixed eigenvector sign convention, so results are
bit-reproducible for bit-identical inputs.
"""
from __future__ import annotations

import math
from typing import Callable, NamedTuple, Sequence

import numpy as np
from numba import njit

from .errors import ConvergenceError, DimensionError, DomainError, RangeError

JACOBI_MAX_SWEEPS = 100
JACOBI_TOL = 1e-12
DEFAULT_SHRINKAGE = 1e-3
DEFAULT_CLAMP_EPS = 1e-6
# relative magnitude under which two eigenvector entries count as tied
_SIGN_TIE_RTOL = 1e-12
# exp() overflows float64 above ~709.78
_EXP_MAX = 709.0


class EigenDecomposition(NamedTuple):
    """Eigenvalues ascending; column ``i`` of ``eigenvectors`` pairs with ``eigenvalues[i]``."""

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray


# --------------------------------------------------------------------------
# Jacobi kernel
# --------------------------------------------------------------------------


@njit(cache=True)
def _jacobi_single(a, tol, max_sweeps):
    n = a.shape[0]
    v = np.eye(n)
    fro = 0.0
    for i in range(n):
        for j in range(n):
            fro += a[i, j] * a[i, j]
    thresh = tol * math.sqrt(fro)
    off = 0.0
    for sweep in range(max_sweeps + 1):
        off = 0.0
        for p in range(n - 1):
            for q in range(p + 1, n):
                off += a[p, q] * a[p, q]
        off = math.sqrt(2.0 * off)
        if off <= thresh:
            return v, sweep, off, True
        if sweep == max_sweeps:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if apq == 0.0:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                if abs(theta) > 1e150:
                    t = 0.5 / theta
                else:
                    t = 1.0 / (abs(theta) + math.sqrt(theta * theta + 1.0))
                    if theta < 0.0:
                        t = -t
                c = 1.0 / math.sqrt(t * t + 1.0)
                s = t * c
                for k in range(n):
                    akp = a[k, p]
                    akq = a[k, q]
                    a[k, p] = c * akp - s * akq
                    a[k, q] = s * akp + c * akq
                for k in range(n):
                    apk = a[p, k]
                    aqk = a[q, k]
                    a[p, k] = c * apk - s * aqk
                    a[q, k] = s * apk + c * aqk
                a[p, q] = 0.0
                a[q, p] = 0.0
                for k in range(n):
                    vkp = v[k, p]
                    vkq = v[k, q]
                    v[k, p] = c * vkp - s * vkq
                    v[k, q] = s * vkp + c * vkq
    return v, max_sweeps, off, False


@njit(cache=True)
def _eigh_batch(stack, tol, max_sweeps, tie_rtol):
    m = stack.shape[0]
    n = stack.shape[1]
    w_out = np.empty((m, n))
    v_out = np.empty((m, n, n))
    ok = np.ones(m, dtype=np.bool_)
    residual = np.zeros(m)
    for b in range(m):
        a = stack[b].copy()
        v, _, off, conv = _jacobi_single(a, tol, max_sweeps)
        ok[b] = conv
        residual[b] = off
        w = np.empty(n)
        for i in range(n):
            w[i] = a[i, i]
        order = np.argsort(w, kind="mergesort")
        for jj in range(n):
            col = order[jj]
            w_out[b, jj] = w[col]
            big = 0.0
            for i in range(n):
                x = abs(v[i, col])
                if x > big:
                    big = x
            sign = 1.0
            for i in range(n):
                if abs(v[i, col]) >= big * (1.0 - tie_rtol):
                    if v[i, col] < 0.0:
                        sign = -1.0
                    break
            for i in range(n):
                v_out[b, i, jj] = sign * v[i, col]
    return w_out, v_out, ok, residual


# --------------------------------------------------------------------------
# construction / validation
# --------------------------------------------------------------------------


def _square(M, name="matrix"):
    M = np.asarray(M, dtype=np.float64)
    if M.ndim < 2 or M.shape[-1] != M.shape[-2]:
        raise DimensionError(f"{name} must be square, got shape {M.shape}")
    if not np.all(np.isfinite(M)):
        raise DomainError(f"{name} has non-finite entries")
    return M


def sym(M) -> np.ndarray:
    """Return ``(M + M^T) / 2`` after checking shape and finiteness."""
    M = _square(M)
    return 0.5 * (M + np.swapaxes(M, -1, -2))


def check_spd(P, name="matrix") -> np.ndarray:
    """Symmetrize ``P`` and verify its smallest eigenvalue is positive."""
    P = sym(P)
    lam = sym_eig(P).eigenvalues[..., 0]
    if np.any(lam <= 0.0):
        raise DomainError(f"{name} is not positive definite (min eigenvalue {np.min(lam):.3e})")
    return P


def _same_dim(A, B):
    if A.shape[-1] != B.shape[-1]:
        raise DimensionError(f"dimension mismatch: {A.shape[-1]} vs {B.shape[-1]}")


# --------------------------------------------------------------------------
# eigendecomposition and spectral functions
# --------------------------------------------------------------------------


def sym_eig(M, *, tol: float = JACOBI_TOL, max_sweeps: int = JACOBI_MAX_SWEEPS) -> EigenDecomposition:
    """Cyclic Jacobi eigendecomposition of a symmetric matrix (or stack).

    Eigenvalues are returned ascending. Each eigenvector is flipped so that
    its largest-magnitude entry is positive, ties going to the lowest index.

    Raises
    ------
    ConvergenceError
        If the off-diagonal norm does not fall below ``tol * ||M||_F``
        within ``max_sweeps`` sweeps.
    """
    M = sym(M)
    shape = M.shape
    n = shape[-1]
    flat = np.ascontiguousarray(M.reshape(-1, n, n))
    w, v, ok, res = _eigh_batch(flat, tol, max_sweeps, _SIGN_TIE_RTOL)
    if not np.all(ok):
        bad = int(np.argmin(ok))
        fro = float(np.linalg.norm(flat[bad]))
        diag = np.abs(np.diag(flat[bad]))
        raise ConvergenceError(
            f"Jacobi did not converge in {max_sweeps} sweeps: off-diagonal norm "
            f"{res[bad]:.3e}, ||M||_F {fro:.3e}, diag range [{diag.min():.3e}, {diag.max():.3e}]",
            residual=float(res[bad]),
            iterations=max_sweeps,
        )
    return EigenDecomposition(w.reshape(shape[:-1]), v.reshape(shape))


def eig_compose(eigenvalues, eigenvectors) -> np.ndarray:
    """``U diag(lam) U^T``, symmetrized."""
    U = eigenvectors
    out = (U * eigenvalues[..., None, :]) @ np.swapaxes(U, -1, -2)
    return 0.5 * (out + np.swapaxes(out, -1, -2))


def eig_apply(M, fn: Callable[[np.ndarray], np.ndarray], decomp: EigenDecomposition | None = None) -> np.ndarray:
    if decomp is None:
        decomp = sym_eig(M)
    return eig_compose(fn(decomp.eigenvalues), decomp.eigenvectors)


def _require_positive(lam, what):
    if np.any(lam <= 0.0):
        raise DomainError(f"{what} requires positive eigenvalues (min {np.min(lam):.3e})")


def spd_log(P, decomp: EigenDecomposition | None = None) -> np.ndarray:
    """Matrix logarithm ``U diag(log lam) U^T`` of an SPD matrix."""
    if decomp is None:
        decomp = sym_eig(P)
    _require_positive(decomp.eigenvalues, "spd_log")
    return eig_compose(np.log(decomp.eigenvalues), decomp.eigenvectors)


def spd_exp(V) -> np.ndarray:
    decomp = sym_eig(V)
    if np.any(decomp.eigenvalues > _EXP_MAX):
        raise RangeError(f"spd_exp overflow: eigenvalue {np.max(decomp.eigenvalues):.3e}")
    return eig_compose(np.exp(decomp.eigenvalues), decomp.eigenvectors)


def spd_sqrt_pair(P) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(P^{1/2}, P^{-1/2})`` from a single eigendecomposition."""
    decomp = sym_eig(P)
    _require_positive(decomp.eigenvalues, "spd_sqrt_pair")
    root = np.sqrt(decomp.eigenvalues)
    return eig_compose(root, decomp.eigenvectors), eig_compose(1.0 / root, decomp.eigenvectors)


def spd_inv(P) -> np.ndarray:
    decomp = sym_eig(P)
    _require_positive(decomp.eigenvalues, "spd_inv")
    return eig_compose(1.0 / decomp.eigenvalues, decomp.eigenvectors)


def eig_clamp(P, eps: float = DEFAULT_CLAMP_EPS, decomp: EigenDecomposition | None = None) -> np.ndarray:
    """Replace eigenvalues below ``eps`` with ``eps`` (ReEig rectification)."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    if decomp is None:
        decomp = sym_eig(P)
    return eig_compose(np.maximum(decomp.eigenvalues, eps), decomp.eigenvectors)


# --------------------------------------------------------------------------
# Riemannian geometry (affine-invariant metric)
# --------------------------------------------------------------------------


def _whiten(P, Q):
    """``P^{-1/2} Q P^{-1/2}`` together with ``P^{1/2}``."""
    root, inv_root = spd_sqrt_pair(P)
    W = inv_root @ Q @ inv_root
    return 0.5 * (W + np.swapaxes(W, -1, -2)), root


def log_map(P, Ptilde) -> np.ndarray:
    """Project ``Ptilde`` onto the tangent space at ``P``.

    ``V = P^{1/2} log(P^{-1/2} Ptilde P^{-1/2}) P^{1/2}``. When ``P`` is exactly
    the identity this is ``spd_log(Ptilde)``, computed without the detour;
    points equal to ``P`` map to an exact zero.
    """
    P = sym(P)
    Ptilde = sym(Ptilde)
    _same_dim(P, Ptilde)
    if P.ndim == 2 and np.array_equal(P, np.eye(P.shape[0])):
        return spd_log(Ptilde)
    W, root = _whiten(P, Ptilde)
    V = root @ spd_log(W) @ root
    V = 0.5 * (V + np.swapaxes(V, -1, -2))
    if P.ndim == 2:
        V[np.all(Ptilde == P, axis=(-2, -1))] = 0.0
    return V


def exp_map(P, V) -> np.ndarray:
    P = sym(P)
    V = sym(V)
    _same_dim(P, V)
    W, root = _whiten(P, V)
    out = root @ spd_exp(W) @ root
    return 0.5 * (out + np.swapaxes(out, -1, -2))


def tangent_inner(P, V1, V2) -> float:
    """``trace(V1 P^{-1} V2 P^{-1})``."""
    P, V1, V2 = sym(P), sym(V1), sym(V2)
    _same_dim(P, V1)
    _same_dim(P, V2)
    Pinv = spd_inv(P)
    return float(np.trace(V1 @ Pinv @ V2 @ Pinv))


def geodesic_distance(P, Q) -> float:
    """Affine-invariant distance ``||log(P^{-1/2} Q P^{-1/2})||_F``."""
    P, Q = sym(P), sym(Q)
    _same_dim(P, Q)
    W, _ = _whiten(P, Q)
    lam = sym_eig(W).eigenvalues
    _require_positive(lam, "geodesic_distance")
    return float(np.sqrt(np.sum(np.log(lam) ** 2, axis=-1)))


def log_euclidean_mean(mats: Sequence[np.ndarray] | np.ndarray) -> np.ndarray:
    stack = sym(np.asarray(mats, dtype=np.float64))
    return spd_exp(np.mean(spd_log(stack), axis=0))


def frechet_mean(mats, tol: float = 1e-10, max_iter: int = 100) -> np.ndarray:
    """Karcher mean under the affine-invariant metric.

    Fixed-point iteration ``M <- M^{1/2} exp(mean_i log(M^{-1/2} P_i M^{-1/2})) M^{1/2}``
    started from the log-Euclidean mean, stopped when the Frobenius norm of the
    averaged whitened log (the Riemannian gradient at ``M``) drops to ``tol``.
    """
    stack = sym(np.asarray(mats, dtype=np.float64))
    if stack.ndim != 3 or stack.shape[0] == 0:
        raise DimensionError("frechet_mean needs a non-empty stack of square matrices")
    if stack.shape[0] == 1:
        return stack[0].copy()
    M = log_euclidean_mean(stack)
    residual = math.inf
    for it in range(max_iter):
        root, inv_root = spd_sqrt_pair(M)
        W = inv_root @ stack @ inv_root
        step = np.mean(spd_log(0.5 * (W + np.swapaxes(W, -1, -2))), axis=0)
        residual = float(np.linalg.norm(step))
        if residual <= tol:
            return M
        M = root @ spd_exp(step) @ root
        M = 0.5 * (M + M.T)
    raise ConvergenceError(
        f"frechet_mean did not converge in {max_iter} iterations (gradient norm {residual:.3e})",
        residual=residual,
        iterations=max_iter,
    )


# --------------------------------------------------------------------------
# covariance estimation
# --------------------------------------------------------------------------


def covariance(X, shrinkage: float = DEFAULT_SHRINKAGE) -> np.ndarray:
    """Spatial covariance ``X X^T / (D - 1)`` of an ``(E, D)`` trial (or ``(N, E, D)`` stack).

    No mean is subtracted. The estimate is shrunk toward ``trace/E * I`` by
    ``shrinkage`` so the result is strictly positive definite.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim < 2:
        raise DimensionError(f"trial must be (channels, samples), got shape {X.shape}")
    D = X.shape[-1]
    if D < 2:
        raise DimensionError(f"covariance needs at least 2 samples, got {D}")
    if not np.all(np.isfinite(X)):
        raise DomainError("trial has non-finite samples")
    if not 0.0 <= shrinkage <= 1.0:
        raise ValueError("shrinkage must lie in [0, 1]")
    S = X @ np.swapaxes(X, -1, -2) / (D - 1)
    S = 0.5 * (S + np.swapaxes(S, -1, -2))
    if shrinkage > 0.0:
        E = S.shape[-1]
        scale = np.trace(S, axis1=-2, axis2=-1) / E
        S = (1.0 - shrinkage) * S + shrinkage * scale[..., None, None] * np.eye(E)
    return S
