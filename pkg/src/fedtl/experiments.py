"""Cross-validation runs behind the CLI commands."""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import baselines, objectives, spd
from .data import FoldAssignment, TrialSet
from .federated import Client, FederatedConfig, make_server, run_federated_training
from .layers import DenseLayer, init_params
from .optim import Schedule, TrainReport, train


@dataclass
class FoldResult:
    fold: int
    accuracy: float
    wall_time: float
    # rows of (client, step, loss, accuracy)
    trajectory: list = field(default_factory=list)
    stop_reason: str = ""


def fold_seed(seed: int, fold: int, stream: int = 0) -> np.random.SeedSequence:
    return np.random.SeedSequence([seed, fold, stream])


def _report_rows(client: str, report: TrainReport):
    return [(client, e, l, a) for e, l, a in zip(report.epochs, report.losses, report.accuracies)]


def run_specific_cv(trials: TrialSet, folds: FoldAssignment, chain: Sequence[int], schedule: Schedule,
                    seed: int, shrinkage: float = spd.DEFAULT_SHRINKAGE,
                    clamp_eps: float = spd.DEFAULT_CLAMP_EPS, stiefel: bool = False) -> list[FoldResult]:
    """Non-transfer network trained per fold on the other folds, scored on the held-out one."""
    covs = trials.covariances(shrinkage)
    results = []
    for k in range(folds.n_folds):
        start = time.perf_counter()
        tr, te = folds.train_test(k)
        params = init_params(chain, trials.n_classes, fold_seed(seed, k), clamp_eps)
        report = train(params, objectives.nontransfer_objective(covs[tr], trials.labels[tr]), schedule, stiefel)
        acc = float(np.mean(objectives.predict(params, covs[te]) == trials.labels[te]))
        results.append(FoldResult(k, acc, time.perf_counter() - start,
                                  _report_rows(trials.subject, report), report.stop_reason))
    return results


def run_adaptive_cv(clients: Mapping[str, TrialSet], target: str, folds: FoldAssignment,
                    chains: Mapping[str, Sequence[int]], schedule: Schedule, fed: FederatedConfig, seed: int,
                    shrinkage: float = spd.DEFAULT_SHRINKAGE,
                    clamp_eps: float = spd.DEFAULT_CLAMP_EPS) -> list[FoldResult]:
    """Federated transfer run per target fold.

    Every non-target client trains on all of its data; the target trains on
    its training folds and is scored on the held-out fold with its own BiMap
    stack and the final global classifier.
    """
    if target not in clients:
        raise ValueError(f"target client {target!r} not among {sorted(clients)}")
    ids = sorted(clients)
    n_classes = {t.n_classes for t in clients.values()}
    if len(n_classes) != 1:
        raise ValueError("all clients must share the class count")
    K = n_classes.pop()
    common = {cid: chains[cid][-1] for cid in ids}
    if len(set(common.values())) != 1:
        raise ValueError(f"incompatible common-space dimensions across clients: {common}")
    d = common[ids[0]]
    covs = {cid: clients[cid].covariances(shrinkage) for cid in ids}
    results = []
    for k in range(folds.n_folds):
        start = time.perf_counter()
        tr, te = folds.train_test(k)
        members = []
        for i, cid in enumerate(ids):
            X, y = covs[cid], clients[cid].labels
            if cid == target:
                X, y = X[tr], y[tr]
            params = init_params(chains[cid], K, fold_seed(seed, k, i + 1), clamp_eps)
            members.append(Client(cid, X, y, params, schedule))
        shared = DenseLayer.small_uniform(d * d, K, np.random.default_rng(fold_seed(seed, k, 0)))
        server = make_server(members, [shared.weight, shared.bias])
        history = run_federated_training(server, members, fed)
        tgt = next(c for c in members if c.client_id == target)
        acc = float(np.mean(objectives.predict(tgt.params, covs[target][te]) == clients[target].labels[te]))
        rows = [(cid, h.round, h.losses[cid], h.accuracies[cid]) for h in history for cid in ids]
        stop = "threshold" if history and all(l < fed.stop_loss for l in history[-1].losses.values()) else "max_rounds"
        results.append(FoldResult(k, acc, time.perf_counter() - start, rows, stop))
    return results


def run_baseline_cv(trials: TrialSet, folds: FoldAssignment, algorithm: str,
                    shrinkage: float = spd.DEFAULT_SHRINKAGE) -> list[FoldResult]:
    covs = trials.covariances(shrinkage)
    if algorithm == "mdm":
        fit, pred = baselines.mdm_train, baselines.mdm_predict
    elif algorithm == "tsm":
        fit, pred = baselines.tsm_train, baselines.tsm_predict
    else:
        raise ValueError(f"unknown baseline {algorithm!r} (expected mdm or tsm)")
    results = []
    for k in range(folds.n_folds):
        start = time.perf_counter()
        tr, te = folds.train_test(k)
        try:
            model = fit(covs[tr], trials.labels[tr], trials.n_classes)
        except ValueError as exc:
            raise ValueError(f"fold {k}: {exc}") from exc
        predicted = np.array([pred(model, c) for c in covs[te]])
        acc = float(np.mean(predicted == trials.labels[te]))
        results.append(FoldResult(k, acc, time.perf_counter() - start, [], "fitted"))
    return results


def summarize(results: Sequence[FoldResult]) -> tuple[float, float]:
    accs = np.array([r.accuracy for r in results])
    return float(accs.mean()), float(accs.std())
