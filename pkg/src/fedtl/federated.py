"""In-process federated simulator: broadcast, local training, upload, FedAvg.

Only the dense classifier crosses the client boundary as model weights. BiMap
stacks stay on their client. For the MMD domain loss each client also
publishes its per-class common-space matrices in a ``domain`` message; this
is the one place derived features leave a client.

Wire format of a :class:`RoundMessage` (all integers little-endian)::

    4s   magic  b"FTLM"
    u16  schema version (1)
    u8   kind   (0 broadcast, 1 upload, 2 domain)
    u32  round
    u16  client id length, then that many UTF-8 bytes (empty for broadcast)
    u32  tensor count
    per tensor: u32 rank, rank x u32 dims, prod(dims) float64 little-endian
"""
from __future__ import annotations

import copy
import math
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import layers, objectives
from .errors import DimensionError, DivergenceError, FormatError, RoundAborted
from .layers import ModelParams
from .losses import DEFAULT_SIGMA, LossWeights, partition_by_class
from .optim import Schedule, TrainReport, run_epochs

MAGIC = b"FTLM"
SCHEMA_VERSION = 1
KINDS = ("broadcast", "upload", "domain")


# --------------------------------------------------------------------------
# messages
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class RoundMessage:
    kind: str
    round: int
    tensors: tuple
    client_id: str = ""

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown message kind {self.kind!r}")
        if self.kind == "broadcast" and self.client_id:
            raise ValueError("broadcast messages carry no client id")
        if self.kind != "broadcast" and not self.client_id:
            raise ValueError(f"{self.kind} messages need a client id")
        frozen = []
        for t in self.tensors:
            arr = np.array(t, dtype=np.float64)
            arr.setflags(write=False)
            frozen.append(arr)
        object.__setattr__(self, "tensors", tuple(frozen))

    @property
    def shapes(self) -> list[tuple[int, ...]]:
        return [t.shape for t in self.tensors]


def encode(msg: RoundMessage) -> bytes:
    cid = msg.client_id.encode("utf-8")
    parts = [
        MAGIC,
        struct.pack("<HBI", SCHEMA_VERSION, KINDS.index(msg.kind), msg.round),
        struct.pack("<H", len(cid)),
        cid,
        struct.pack("<I", len(msg.tensors)),
    ]
    for t in msg.tensors:
        parts.append(struct.pack(f"<I{t.ndim}I", t.ndim, *t.shape))
        parts.append(np.ascontiguousarray(t, dtype="<f8").tobytes())
    return b"".join(parts)


def decode(buf: bytes) -> RoundMessage:
    view = memoryview(buf)
    pos = 0

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(view):
            raise FormatError(f"round message truncated at byte {pos}")
        out = struct.unpack_from(fmt, view, pos)
        pos += size
        return out

    if bytes(view[:4]) != MAGIC:
        raise FormatError("round message: bad magic")
    pos = 4
    version, kind, rnd = take("<HBI")
    if version != SCHEMA_VERSION:
        raise FormatError(f"round message: unsupported schema version {version}")
    if kind >= len(KINDS):
        raise FormatError(f"round message: unknown kind {kind}")
    (n_cid,) = take("<H")
    cid = bytes(view[pos:pos + n_cid]).decode("utf-8")
    pos += n_cid
    (count,) = take("<I")
    tensors = []
    for _ in range(count):
        (rank,) = take("<I")
        dims = take(f"<{rank}I")
        n = math.prod(dims)
        if pos + 8 * n > len(view):
            raise FormatError(f"round message: payload shorter than declared shape {dims}")
        tensors.append(np.frombuffer(view, dtype="<f8", count=n, offset=pos).reshape(dims).astype(np.float64))
        pos += 8 * n
    if pos != len(view):
        raise FormatError(f"round message: {len(view) - pos} trailing bytes")
    return RoundMessage(KINDS[kind], rnd, tuple(tensors), cid)


def transmit(msg: RoundMessage) -> RoundMessage:
    """Pass a message through the wire format, as a transport would."""
    return decode(encode(msg))


# --------------------------------------------------------------------------
# aggregation
# --------------------------------------------------------------------------


def fedavg(uploads: Mapping[str, Sequence[np.ndarray]]) -> list[np.ndarray]:
    """Unweighted elementwise mean of per-client weight lists.

    Clients are visited in ascending id order and the mean is accumulated as an
    offset from the first upload, so arrival order never changes the bits and
    identical uploads average to themselves exactly.
    """
    if not uploads:
        raise ValueError("fedavg needs at least one upload")
    ids = sorted(uploads)
    ref = [np.asarray(a, dtype=np.float64) for a in uploads[ids[0]]]
    acc = [np.zeros_like(a) for a in ref]
    for cid in ids:
        arrays = uploads[cid]
        if len(arrays) != len(ref) or any(np.shape(a) != r.shape for a, r in zip(arrays, ref)):
            raise DimensionError(f"upload from {cid!r} has shapes {[np.shape(a) for a in arrays]}, "
                                 f"expected {[r.shape for r in ref]}")
        for s, a, r in zip(acc, arrays, ref):
            s += np.asarray(a, dtype=np.float64) - r
    m = len(ids)
    return [r + s / m for r, s in zip(ref, acc)]


# --------------------------------------------------------------------------
# participants
# --------------------------------------------------------------------------


@dataclass
class Client:
    """One data holder: private covariances and BiMap stack, shared classifier copy."""

    client_id: str
    covs: np.ndarray
    labels: np.ndarray
    params: ModelParams
    schedule: Schedule
    index: int = 0
    epoch: int = 0
    peer_domain: dict = field(default_factory=dict)
    report: TrainReport = field(default_factory=TrainReport)

    def __post_init__(self):
        self.covs = np.asarray(self.covs, dtype=np.float64)
        self.labels = np.asarray(self.labels)
        if len(self.labels) == 0:
            raise ValueError(f"client {self.client_id!r} has no data")
        if self.covs.shape[-1] != self.params.chain[0]:
            raise DimensionError(
                f"client {self.client_id!r}: data has {self.covs.shape[-1]} channels, "
                f"network expects {self.params.chain[0]}"
            )

    def receive(self, msg: RoundMessage) -> None:
        if msg.kind == "broadcast":
            self.params.set_shared(msg.tensors)
        elif msg.kind == "domain":
            if msg.client_id == self.client_id:
                return
            self.peer_domain[msg.client_id] = [t for t in msg.tensors]
        else:
            raise ValueError(f"client cannot receive a {msg.kind} message")

    def domain_message(self, rnd: int) -> RoundMessage:
        reduced, _ = layers.reduce(self.params, self.covs)
        per_class = partition_by_class(reduced, self.labels, self.params.n_classes)
        return RoundMessage("domain", rnd, tuple(per_class), self.client_id)

    def upload(self, rnd: int) -> RoundMessage:
        return RoundMessage("upload", rnd, tuple(self.params.shared()), self.client_id)

    def objective(self, weights: LossWeights | None, sigma: float, index_of: Mapping[str, int]):
        if weights is None or not self.peer_domain:
            return objectives.nontransfer_objective(self.covs, self.labels)
        peers = {index_of[cid]: stacks for cid, stacks in self.peer_domain.items()}
        return objectives.transfer_objective(self.covs, self.labels, self.index, peers, weights, sigma)

    def local_train(self, n_epochs: int, weights, sigma, index_of, stiefel=False) -> tuple[float, float]:
        """Train ``n_epochs`` full-batch epochs; returns the end-of-round (loss, accuracy)."""
        objective = self.objective(weights, sigma, index_of)
        if n_epochs == 0:
            loss, _, acc = objective(self.params)
            return loss, acc
        _, last = run_epochs(self.params, objective, self.schedule, n_epochs, start_epoch=self.epoch,
                             stiefel=stiefel, report=self.report)
        self.epoch += n_epochs
        return last[0], last[2]


@dataclass
class Server:
    shared: list
    client_ids: list
    round: int = 0

    def __post_init__(self):
        if not self.client_ids:
            raise ValueError("server needs at least one client")
        if len(set(self.client_ids)) != len(self.client_ids):
            raise ValueError("client ids must be unique")

    def broadcast(self) -> RoundMessage:
        return RoundMessage("broadcast", self.round, tuple(self.shared))

    def aggregate(self, uploads: Sequence[RoundMessage]) -> None:
        by_id = {}
        expected = [np.shape(a) for a in self.shared]
        for msg in uploads:
            if msg.kind != "upload" or msg.round != self.round:
                raise ValueError(f"unexpected {msg.kind} message for round {msg.round} (server at {self.round})")
            if msg.client_id not in self.client_ids:
                raise ValueError(f"upload from unregistered client {msg.client_id!r}")
            if msg.shapes != expected:
                raise DimensionError(
                    f"upload from {msg.client_id!r} carries shapes {msg.shapes}; only the shared "
                    f"classifier {expected} may leave a client"
                )
            by_id[msg.client_id] = msg.tensors
        if sorted(by_id) != sorted(self.client_ids):
            raise ValueError("missing uploads: " + ", ".join(sorted(set(self.client_ids) - set(by_id))))
        self.shared = fedavg(by_id)
        self.round += 1


@dataclass
class RoundReport:
    round: int
    losses: dict
    accuracies: dict


@dataclass
class FederatedConfig:
    local_epochs: int = 1
    max_rounds: int = 2000
    stop_loss: float = 1.5
    weights: LossWeights | None = field(default_factory=LossWeights)
    sigma: float = DEFAULT_SIGMA
    stiefel: bool = False
    workers: int = 1


def _index_of(clients):
    return {c.client_id: i for i, c in enumerate(sorted(clients, key=lambda c: c.client_id))}


def run_round(server: Server, clients: Sequence[Client], local_epochs: int = 1,
              weights: LossWeights | None = None, sigma: float = DEFAULT_SIGMA,
              stiefel: bool = False, workers: int = 1) -> RoundReport:
    """Broadcast, exchange domain summaries, train locally, upload, aggregate.

    On any client failure every participant is restored to its pre-round
    state and :class:`RoundAborted` is raised.
    """
    if sorted(c.client_id for c in clients) != sorted(server.client_ids):
        raise ValueError("client set does not match the server's registry")
    snapshot = copy.deepcopy((server.__dict__, [c.__dict__ for c in clients]))
    rnd = server.round
    index_of = _index_of(clients)
    for c in clients:
        c.index = index_of[c.client_id]
    try:
        bcast = transmit(server.broadcast())
        for c in clients:
            c.receive(bcast)
        if weights is not None and len(clients) > 1:
            domain = [transmit(c.domain_message(rnd)) for c in clients]
            for c in clients:
                for msg in domain:
                    c.receive(msg)

        def work(c):
            return c.local_train(local_epochs, weights, sigma, index_of, stiefel)

        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                results = list(pool.map(work, clients))
        else:
            results = [work(c) for c in clients]
        for c, (loss, _) in zip(clients, results):
            if not math.isfinite(loss):
                raise DivergenceError(f"client {c.client_id!r} loss is {loss}")
        server.aggregate([transmit(c.upload(rnd)) for c in clients])
    except Exception as exc:
        server.__dict__.update(snapshot[0])
        for c, state in zip(clients, snapshot[1]):
            c.__dict__.update(state)
        raise RoundAborted(f"round {rnd} aborted and rolled back: {exc}") from exc
    return RoundReport(
        server.round,
        {c.client_id: r[0] for c, r in zip(clients, results)},
        {c.client_id: r[1] for c, r in zip(clients, results)},
    )


def run_federated_training(server: Server, clients: Sequence[Client], config: FederatedConfig) -> list[RoundReport]:
    """Repeat rounds until every client's loss is below ``stop_loss`` or ``max_rounds``.

    A closing broadcast leaves every client holding the final global classifier.
    """
    history: list[RoundReport] = []
    for _ in range(config.max_rounds):
        try:
            report = run_round(server, clients, config.local_epochs, config.weights, config.sigma,
                               config.stiefel, config.workers)
        except RoundAborted as exc:
            if isinstance(exc.__cause__, DivergenceError):
                raise DivergenceError(str(exc), report=history) from exc
            raise
        history.append(report)
        if all(loss < config.stop_loss for loss in report.losses.values()):
            break
    final = transmit(server.broadcast())
    for c in clients:
        c.receive(final)
    return history


def make_server(clients: Sequence[Client], shared: Sequence[np.ndarray] | None = None) -> Server:
    """Create a server whose initial global classifier is ``shared`` or the lowest-id client's."""
    if shared is None:
        first = min(clients, key=lambda c: c.client_id)
        shared = [a.copy() for a in first.params.shared()]
    return Server([np.array(a, dtype=np.float64) for a in shared], sorted(c.client_id for c in clients))
