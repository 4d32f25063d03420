"""Command-line harness.

Commands: ``train-specific``, ``train-adaptive``, ``baseline``, ``synth``; each
takes ``--config``, ``--seed`` and ``--out``. Run outputs:

``metrics.csv``
    ``run_id,mode,client,fold,phase,step,loss,accuracy``; ``phase`` is
    ``train`` (one row per epoch or round, training loss/accuracy) or ``test``
    (one row per fold, held-out accuracy, empty step/loss).
``summary.csv``
    ``run_id,fold,accuracy`` per fold, then ``mean`` and ``std`` rows.
``folds.csv``
    The fold assignment used; point ``[run] fold_file`` at it to reuse it.
``timing.csv``
    ``run_id,fold,wall_time_s``. Wall time is kept out of the other files so
    they are byte-for-byte reproducible.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import data, experiments
from .config import RunConfig, load_config, load_synth_config
from .errors import ConfigError, FtlError
from .federated import FederatedConfig

log = logging.getLogger("fedtl")

METRICS_HEADER = "run_id,mode,client,fold,phase,step,loss,accuracy"


def _fmt(x) -> str:
    return repr(float(x))


def load_client_trials(client, expected_channels: int):
    try:
        trials = data.load_trials(client.path)
    except OSError as exc:
        raise ConfigError(f"cannot read data file {client.path}: {exc.strerror}") from exc
    if client.channels is not None:
        trials = data.select_channels(trials, client.channels)
    elif trials.channels > expected_channels:
        log.warning(
            "client %s: file has %d channels but the layer chain expects %d; using the first %d. "
            "Set 'channels' explicitly to choose others.",
            client.client_id, trials.channels, expected_channels, expected_channels,
        )
        trials = data.select_channels(trials, range(expected_channels))
    if trials.channels != expected_channels:
        raise ConfigError(
            f"client {client.client_id}: {trials.channels} selected channels, layer chain starts at "
            f"{expected_channels}"
        )
    return trials


def resolve_folds(cfg: RunConfig, trials: data.TrialSet) -> data.FoldAssignment:
    if cfg.fold_file is not None:
        try:
            folds = data.FoldAssignment.from_csv(cfg.fold_file.read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read fold file {cfg.fold_file}: {exc.strerror}") from exc
        if len(folds.folds) != len(trials):
            raise ConfigError(f"fold file covers {len(folds.folds)} trials, data has {len(trials)}")
        return folds
    return data.make_folds(trials.labels, cfg.n_folds, cfg.seed, cfg.stratified)


def write_outputs(out: Path, run_id: str, mode: str, folds, results, test_client: str) -> None:
    out.mkdir(parents=True, exist_ok=True)
    rows = [METRICS_HEADER]
    for r in results:
        for client, step, loss, acc in r.trajectory:
            rows.append(f"{run_id},{mode},{client},{r.fold},train,{step},{_fmt(loss)},{_fmt(acc)}")
        rows.append(f"{run_id},{mode},{test_client},{r.fold},test,,,{_fmt(r.accuracy)}")
    (out / "metrics.csv").write_text("\n".join(rows) + "\n")
    mean, std = experiments.summarize(results)
    summary = ["run_id,fold,accuracy"] + [f"{run_id},{r.fold},{_fmt(r.accuracy)}" for r in results]
    summary += [f"{run_id},mean,{_fmt(mean)}", f"{run_id},std,{_fmt(std)}"]
    (out / "summary.csv").write_text("\n".join(summary) + "\n")
    (out / "folds.csv").write_text(folds.to_csv())
    timing = ["run_id,fold,wall_time_s"] + [f"{run_id},{r.fold},{r.wall_time:.6f}" for r in results]
    (out / "timing.csv").write_text("\n".join(timing) + "\n")
    log.info("%s: mean accuracy %.4f (std %.4f) -> %s", run_id, mean, std, out)


def cmd_train_specific(cfg: RunConfig, out: Path):
    client = cfg.data
    trials = load_client_trials(client, client.layers[0])
    folds = resolve_folds(cfg, trials)
    results = experiments.run_specific_cv(trials, folds, client.layers, cfg.schedule, cfg.seed,
                                          cfg.shrinkage, cfg.clamp_eps, cfg.stiefel)
    write_outputs(out, f"specific-seed{cfg.seed}", "specific", folds, results, trials.subject)
    return results


def cmd_train_adaptive(cfg: RunConfig, out: Path):
    clients = {cid: load_client_trials(c, c.layers[0]) for cid, c in cfg.clients.items()}
    target = clients[cfg.target]
    folds = resolve_folds(cfg, target)
    fed = FederatedConfig(cfg.local_epochs, cfg.max_rounds, cfg.fed_stop_loss, cfg.weights, cfg.sigma,
                          cfg.stiefel)
    chains = {cid: c.layers for cid, c in cfg.clients.items()}
    results = experiments.run_adaptive_cv(clients, cfg.target, folds, chains, cfg.schedule, fed, cfg.seed,
                                          cfg.shrinkage, cfg.clamp_eps)
    write_outputs(out, f"adaptive-seed{cfg.seed}", "adaptive", folds, results, cfg.target)
    return results


def cmd_baseline(cfg: RunConfig, out: Path, algorithm: str | None = None):
    algorithm = algorithm or cfg.algorithm
    client = cfg.data
    trials = data.load_trials(client.path)
    if client.channels is not None:
        trials = data.select_channels(trials, client.channels)
    folds = resolve_folds(cfg, trials)
    results = experiments.run_baseline_cv(trials, folds, algorithm, cfg.shrinkage)
    write_outputs(out, f"{algorithm}-seed{cfg.seed}", algorithm, folds, results, trials.subject)
    return results


def synth_trials(cfg) -> data.TrialSet:
    rng = np.random.default_rng(cfg.mixing_seed if cfg.mixing_seed is not None else cfg.seed)
    if cfg.latent:
        mixing = rng.standard_normal((cfg.channels, len(cfg.bases[0])))
        bases = data.mixed_bases([np.diag(b) for b in cfg.bases], mixing, cfg.noise)
    else:
        bases = [np.diag(b) + cfg.noise * np.eye(cfg.channels) for b in cfg.bases]
        if cfg.rotate:
            R = data.random_rotation(cfg.channels, rng)
            bases = [R @ b @ R.T for b in bases]
    return data.synth_generate(bases, cfg.trials_per_class, cfg.samples, cfg.spread, cfg.seed, cfg.subject)


def cmd_synth(config_path, seed, out: Path) -> Path:
    cfg = load_synth_config(config_path, seed)
    trials = synth_trials(cfg)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"{cfg.subject}.eegt"
    data.save_trials(trials, path)
    log.info("wrote %d trials (%d channels x %d samples) to %s", len(trials), trials.channels, trials.samples, path)
    return path


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedtl", description="Federated transfer learning on EEG covariances")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_ in [
        ("train-specific", "subject-specific cross-validation of the non-transfer network"),
        ("train-adaptive", "federated transfer run evaluated on the target client's folds"),
        ("baseline", "MDM or TSM cross-validation"),
        ("synth", "write a synthetic EEGTRIALS v1 file"),
    ]:
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", required=True, type=Path)
        p.add_argument("--seed", type=int, default=None, help="overrides the seed in the config file")
        p.add_argument("--out", required=True, type=Path)
        if name == "baseline":
            p.add_argument("--algorithm", choices=("mdm", "tsm"), default=None)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    if args.seed is not None and args.seed < 0:
        print("error[config]: --seed must be a non-negative integer", file=sys.stderr)
        return 2
    try:
        if args.command == "synth":
            cmd_synth(args.config, args.seed, args.out)
        else:
            mode = {"train-specific": "specific", "train-adaptive": "adaptive", "baseline": "baseline"}[args.command]
            cfg = load_config(args.config, mode, args.seed)
            if mode == "specific":
                cmd_train_specific(cfg, args.out)
            elif mode == "adaptive":
                cmd_train_adaptive(cfg, args.out)
            else:
                cmd_baseline(cfg, args.out, args.algorithm)
    except FtlError as exc:
        print(f"error[{exc.kind}]: {exc}", file=sys.stderr)
        return 2
    except (ValueError, IndexError, OSError) as exc:
        print(f"error[{type(exc).__name__}]: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
