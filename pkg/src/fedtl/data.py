"""Trial sets, the ``EEGTRIALS v1`` file format, folds and synthetic data.

File layout::

    EEGTRIALS v1\\n
    subject=<id> trials=<N> channels=<E> samples=<D> classes=<K>\\n
    N records of: u16 label (little-endian), E*D float64 little-endian, row-major

The subject id must not contain whitespace.
"""
from __future__ import annotations

import logging
import re
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from . import spd
from .errors import DimensionError, FormatError

log = logging.getLogger(__name__)

MAGIC = b"EEGTRIALS v1"
_HEADER_RE = re.compile(
    r"subject=(?P<subject>\S+) trials=(?P<trials>\d+) channels=(?P<channels>\d+) "
    r"samples=(?P<samples>\d+) classes=(?P<classes>\d+)"
)


@dataclass(frozen=True)
class EegTrial:
    signal: np.ndarray  # (E, D)
    label: int

    @property
    def channels(self) -> int:
        return self.signal.shape[0]

    @property
    def samples(self) -> int:
        return self.signal.shape[1]


@dataclass
class TrialSet:
    """All trials of one subject: ``signals`` is ``(N, E, D)``, ``labels`` is ``(N,)``."""

    subject: str
    signals: np.ndarray
    labels: np.ndarray
    n_classes: int

    def __post_init__(self):
        self.signals = np.asarray(self.signals, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.signals.ndim != 3:
            raise DimensionError(f"signals must be (trials, channels, samples), got {self.signals.shape}")
        n, E, D = self.signals.shape
        if n == 0:
            raise ValueError("trial set is empty")
        if E < 1 or D < 2:
            raise DimensionError(f"trials need >= 1 channel and >= 2 samples, got E={E}, D={D}")
        if self.labels.shape != (n,):
            raise DimensionError("one label per trial required")
        if np.any(self.labels < 0) or np.any(self.labels >= self.n_classes):
            raise ValueError(f"labels must lie in [0, {self.n_classes})")
        if not np.all(np.isfinite(self.signals)):
            raise ValueError("signals contain NaN or Inf")
        if re.search(r"\s", self.subject) or not self.subject:
            raise ValueError(f"subject id must be non-empty without whitespace: {self.subject!r}")

    def __len__(self) -> int:
        return len(self.labels)

    def __iter__(self) -> Iterator[EegTrial]:
        for x, y in zip(self.signals, self.labels):
            yield EegTrial(x, int(y))

    @property
    def channels(self) -> int:
        return self.signals.shape[1]

    @property
    def samples(self) -> int:
        return self.signals.shape[2]

    def subset(self, index) -> "TrialSet":
        return TrialSet(self.subject, self.signals[index], self.labels[index], self.n_classes)

    def covariances(self, shrinkage: float = spd.DEFAULT_SHRINKAGE) -> np.ndarray:
        return spd.covariance(self.signals, shrinkage)


# --------------------------------------------------------------------------
# file format
# --------------------------------------------------------------------------


def _record_dtype(E, D):
    return np.dtype([("label", "<u2"), ("signal", "<f8", (E, D))])


def save_trials(trials: TrialSet, path) -> None:
    n, E, D = trials.signals.shape
    header = (
        f"subject={trials.subject} trials={n} channels={E} samples={D} classes={trials.n_classes}\n"
    )
    records = np.empty(n, dtype=_record_dtype(E, D))
    records["label"] = trials.labels
    records["signal"] = trials.signals
    with open(path, "wb") as fh:
        fh.write(MAGIC + b"\n")
        fh.write(header.encode("ascii"))
        fh.write(records.tobytes())


def load_trials(path) -> TrialSet:
    """Read and validate an ``EEGTRIALS v1`` file."""
    with open(path, "rb") as fh:
        raw = fh.read()
    first, sep, rest = raw.partition(b"\n")
    if not sep or first != MAGIC:
        raise FormatError(f"{path}: line 1: expected {MAGIC.decode()!r}, got {first[:32]!r}")
    second, sep, payload = rest.partition(b"\n")
    if not sep:
        raise FormatError(f"{path}: line 2: missing header line")
    try:
        header = second.decode("ascii")
    except UnicodeDecodeError as exc:
        raise FormatError(f"{path}: line 2: header is not ASCII") from exc
    m = _HEADER_RE.fullmatch(header)
    if m is None:
        raise FormatError(f"{path}: line 2: malformed header {header!r}")
    n, E, D, K = (int(m[k]) for k in ("trials", "channels", "samples", "classes"))
    if n < 1 or E < 1 or D < 2 or K < 1:
        raise FormatError(f"{path}: line 2: invalid counts trials={n} channels={E} samples={D} classes={K}")
    offset = len(first) + len(second) + 2
    dtype = _record_dtype(E, D)
    if len(payload) != n * dtype.itemsize:
        raise FormatError(
            f"{path}: byte {offset}: payload is {len(payload)} bytes, expected {n} records x "
            f"{dtype.itemsize} bytes (dimension mismatch)"
        )
    records = np.frombuffer(payload, dtype=dtype)
    labels = records["label"].astype(np.int64)
    bad = np.flatnonzero(labels >= K)
    if bad.size:
        i = int(bad[0])
        raise FormatError(
            f"{path}: byte {offset + i * dtype.itemsize}: record {i} label {labels[i]} out of range [0, {K})"
        )
    signals = records["signal"].astype(np.float64)
    finite = np.isfinite(signals).reshape(n, -1).all(axis=1)
    if not finite.all():
        i = int(np.argmin(finite))
        raise FormatError(f"{path}: byte {offset + i * dtype.itemsize}: record {i} contains NaN/Inf")
    return TrialSet(m["subject"], signals, labels, K)


def select_channels(trials: TrialSet, indices: Sequence[int]) -> TrialSet:
    """Keep (and reorder) the channel rows given by ``indices``."""
    idx = [int(i) for i in indices]
    if len(set(idx)) != len(idx):
        raise ValueError(f"channel indices must be unique: {idx}")
    if not idx or min(idx) < 0 or max(idx) >= trials.channels:
        raise IndexError(f"channel index out of range [0, {trials.channels}): {idx}")
    return TrialSet(trials.subject, trials.signals[:, idx, :], trials.labels, trials.n_classes)


# --------------------------------------------------------------------------
# folds
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class FoldAssignment:
    folds: np.ndarray
    seed: int
    n_folds: int

    def train_test(self, k: int) -> tuple[np.ndarray, np.ndarray]:
        return np.flatnonzero(self.folds != k), np.flatnonzero(self.folds == k)

    def to_csv(self) -> str:
        lines = [f"# seed={self.seed} n_folds={self.n_folds}", "trial,fold"]
        lines += [f"{i},{f}" for i, f in enumerate(self.folds)]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_csv(cls, text: str) -> "FoldAssignment":
        lines = text.strip().splitlines()
        m = re.fullmatch(r"# seed=(-?\d+) n_folds=(\d+)", lines[0].strip()) if lines else None
        if m is None or len(lines) < 2 or lines[1].strip() != "trial,fold":
            raise FormatError("fold file: malformed header")
        folds = []
        for lineno, line in enumerate(lines[2:], start=3):
            i, f = line.split(",")
            if int(i) != len(folds):
                raise FormatError(f"fold file: line {lineno}: trials out of order")
            folds.append(int(f))
        return cls(np.array(folds, dtype=np.int64), int(m[1]), int(m[2]))


def make_folds(labels, n_folds: int = 5, seed: int = 0, stratified: bool = True) -> FoldAssignment:
    """Seeded shuffle, then round-robin assignment to folds.

    With ``stratified`` each class is shuffled separately and the round-robin
    counter carries over between classes, so fold sizes still differ by at
    most one.
    """
    labels = np.asarray(labels)
    n = len(labels)
    if n < n_folds:
        raise ValueError(f"need at least {n_folds} trials for {n_folds} folds, got {n}")
    rng = np.random.default_rng(seed)
    folds = np.empty(n, dtype=np.int64)
    if stratified:
        groups = [np.flatnonzero(labels == y) for y in np.unique(labels)]
    else:
        groups = [np.arange(n)]
    counter = 0
    for group in groups:
        for i in rng.permutation(group):
            folds[i] = counter % n_folds
            counter += 1
    return FoldAssignment(folds, seed, n_folds)


# --------------------------------------------------------------------------
# synthetic data
# --------------------------------------------------------------------------


def random_rotation(dim: int, rng: np.random.Generator) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((dim, dim)))
    return q * np.where(np.diag(r) < 0, -1.0, 1.0)


def synth_generate(bases: Sequence[np.ndarray], trials_per_class: int, samples: int, spread: float = 0.1,
                   seed: int = 0, subject: str = "synth") -> TrialSet:
    """Sample trials whose covariance scatters log-normally around a class base.

    For each trial ``C = exp(log(base_y) + spread * G)`` with ``G`` a symmetric
    Gaussian matrix, then ``samples`` zero-mean columns with covariance ``C``
    are drawn. Trials are ordered class by class.
    """
    bases = [spd.check_spd(b, "class base") for b in bases]
    E = bases[0].shape[0]
    if any(b.shape != (E, E) for b in bases):
        raise DimensionError("all class bases must share one dimension")
    rng = np.random.default_rng(seed)
    K = len(bases)
    signals = np.empty((K * trials_per_class, E, samples))
    labels = np.repeat(np.arange(K), trials_per_class)
    logs = spd.spd_log(np.stack(bases))
    for idx, y in enumerate(labels):
        G = rng.standard_normal((E, E))
        C = spd.spd_exp(logs[y] + spread * 0.5 * (G + G.T)) if spread > 0 else bases[y]
        L = np.linalg.cholesky(C)
        signals[idx] = L @ rng.standard_normal((E, samples))
    return TrialSet(subject, signals, labels, K)


def mixed_bases(latent: Sequence[np.ndarray], mixing: np.ndarray, noise: float = 0.0) -> list[np.ndarray]:
    """Observe latent source covariances through ``mixing``: ``A L A^T + noise * I``."""
    A = np.asarray(mixing, dtype=np.float64)
    return [A @ np.asarray(L) @ A.T + noise * np.eye(A.shape[0]) for L in latent]
