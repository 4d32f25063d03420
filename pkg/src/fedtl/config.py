"""INI run configuration. Every experiment hyperparameter has a key whose default is the published value."""
from __future__ import annotations

import configparser
import logging
import math
import re
from dataclasses import dataclass, field
from pathlib import Path

from . import spd
from .errors import ConfigError
from .losses import DEFAULT_SIGMA, LossWeights
from .optim import Schedule

log = logging.getLogger(__name__)

SPECIFIC_LAYERS = (32, 4, 4, 4)
SOURCE_LAYERS = (32, 16, 8, 4)
TARGET_LAYERS = (32, 8, 4)


@dataclass
class ClientConfig:
    client_id: str
    path: Path
    layers: tuple[int, ...]
    channels: tuple[int, ...] | None = None


@dataclass
class RunConfig:
    mode: str
    seed: int
    clients: dict[str, ClientConfig]
    target: str | None = None
    schedule: Schedule = field(default_factory=Schedule)
    n_folds: int = 5
    stratified: bool = True
    fold_file: Path | None = None
    shrinkage: float = spd.DEFAULT_SHRINKAGE
    clamp_eps: float = spd.DEFAULT_CLAMP_EPS
    stiefel: bool = False
    local_epochs: int = 1
    max_rounds: int = 2000
    fed_stop_loss: float = 1.5
    weights: LossWeights = field(default_factory=LossWeights)
    sigma: float = DEFAULT_SIGMA
    algorithm: str = "mdm"

    @property
    def data(self) -> ClientConfig:
        """The single subject of a specific/baseline run."""
        return next(iter(self.clients.values()))


def parse_ints(text: str) -> tuple[int, ...]:
    """``"0,1,5-7"`` -> ``(0, 1, 5, 6, 7)``."""
    out = []
    for part in text.replace(" ", "").split(","):
        if not part:
            continue
        m = re.fullmatch(r"(\d+)-(\d+)", part)
        if m:
            out.extend(range(int(m[1]), int(m[2]) + 1))
        else:
            try:
                out.append(int(part))
            except ValueError:
                raise ConfigError(f"expected integers, got {text!r}") from None
    return tuple(out)


def parse_floats(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(p) for p in text.replace(" ", "").split(",") if p)
    except ValueError:
        raise ConfigError(f"expected numbers, got {text!r}") from None


def _read(path) -> configparser.ConfigParser:
    cp = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    try:
        with open(path) as fh:
            cp.read_file(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return cp


def _get(cp, section, key, conv, default):
    if not cp.has_option(section, key) or cp.get(section, key).strip() == "":
        return default
    raw = cp.get(section, key).strip()
    try:
        if conv is bool:
            return cp.getboolean(section, key)
        return conv(raw)
    except ValueError:
        raise ConfigError(f"[{section}] {key} = {raw!r}: expected {conv.__name__}") from None


def validate_chain(chain, where):
    if len(chain) < 2:
        raise ConfigError(f"{where}: layer chain needs an input and at least one reduced dimension")
    for a, b in zip(chain, chain[1:]):
        if b > a or b < 1:
            raise ConfigError(f"{where}: layer {a} -> {b} does not reduce dimension")


def _schedule(cp, stop_default):
    s = "schedule"
    try:
        return Schedule(
            lr0=_get(cp, s, "lr0", float, 0.1),
            decay_rate=_get(cp, s, "decay_rate", float, 0.02),
            decay_start_epoch=_get(cp, s, "decay_start", int, 50),
            max_epochs=_get(cp, s, "max_epochs", int, 2000),
            stop_loss=_get(cp, s, "stop_loss", float, stop_default),
            decay_mode=_get(cp, s, "decay_mode", str, "per_epoch"),
        )
    except ValueError as exc:
        raise ConfigError(f"[schedule] {exc}") from None


def _client(cp, section, cid, base: Path, default_layers):
    path = _get(cp, section, "path", str, None)
    if path is None:
        raise ConfigError(f"[{section}] path is required")
    layers = _get(cp, section, "layers", parse_ints, tuple(default_layers))
    validate_chain(layers, f"[{section}] layers")
    channels = _get(cp, section, "channels", parse_ints, None)
    return ClientConfig(cid, (base / path).resolve(), layers, channels or None)


def _weights(cp) -> LossWeights:
    default = _get(cp, "adaptive", "lambda", float, 0.1)
    overrides = {}
    if cp.has_section("adaptive"):
        for key, raw in cp.items("adaptive"):
            m = re.fullmatch(r"lambda\.(\d+)\.(\d+)\.(\d+)", key)
            if m:
                i, j, y = int(m[1]), int(m[2]), int(m[3])
                overrides[(min(i, j), max(i, j), y)] = float(raw)
    try:
        return LossWeights(default, overrides)
    except ValueError as exc:
        raise ConfigError(f"[adaptive] {exc}") from None


def load_config(path, mode: str | None = None, seed: int | None = None) -> RunConfig:
    """Parse a run configuration; ``mode``/``seed`` from the command line win over the file."""
    path = Path(path)
    cp = _read(path)
    base = path.parent
    mode = mode or _get(cp, "run", "mode", str, None)
    if mode not in ("specific", "adaptive", "baseline"):
        raise ConfigError(f"[run] mode must be specific, adaptive or baseline, got {mode!r}")
    if seed is None:
        seed = _get(cp, "run", "seed", int, None)
    if seed is None:
        raise ConfigError("no seed: pass --seed or set [run] seed")

    cfg = RunConfig(mode=mode, seed=int(seed), clients={})
    cfg.n_folds = _get(cp, "run", "folds", int, 5)
    cfg.stratified = _get(cp, "run", "stratified", bool, True)
    fold_file = _get(cp, "run", "fold_file", str, None)
    cfg.fold_file = (base / fold_file).resolve() if fold_file else None
    cfg.shrinkage = _get(cp, "run", "shrinkage", float, spd.DEFAULT_SHRINKAGE)
    cfg.clamp_eps = _get(cp, "run", "clamp_eps", float, spd.DEFAULT_CLAMP_EPS)
    cfg.stiefel = _get(cp, "run", "stiefel", bool, False)
    if not cfg.clamp_eps > 0:
        raise ConfigError("[run] clamp_eps must be positive")
    if not 0 <= cfg.shrinkage <= 1:
        raise ConfigError("[run] shrinkage must lie in [0, 1]")
    if cfg.n_folds < 2:
        raise ConfigError("[run] folds must be at least 2")
    cfg.schedule = _schedule(cp, 0.1)
    cfg.algorithm = _get(cp, "baseline", "algorithm", str, "mdm")

    if mode in ("specific", "baseline"):
        if not cp.has_section("data"):
            raise ConfigError("[data] section required")
        cfg.clients = {"data": _client(cp, "data", "data", base, SPECIFIC_LAYERS)}
        return cfg

    client_sections = [s for s in cp.sections() if s.startswith("client.")]
    if len(client_sections) < 2:
        raise ConfigError("adaptive mode needs at least two [client.<id>] sections")
    cfg.target = _get(cp, "adaptive", "target", str, "target")
    for section in client_sections:
        cid = section.split(".", 1)[1]
        default = TARGET_LAYERS if cid == cfg.target else SOURCE_LAYERS
        cfg.clients[cid] = _client(cp, section, cid, base, default)
    if cfg.target not in cfg.clients:
        raise ConfigError(f"[adaptive] target {cfg.target!r} has no [client.{cfg.target}] section")
    dims = {cid: c.layers[-1] for cid, c in cfg.clients.items()}
    if len(set(dims.values())) != 1:
        raise ConfigError(f"incompatible common-space dimensions across clients: {dims}")
    cfg.local_epochs = _get(cp, "adaptive", "local_epochs", int, 1)
    cfg.max_rounds = _get(cp, "adaptive", "max_rounds", int, 2000)
    cfg.fed_stop_loss = _get(cp, "adaptive", "stop_loss", float, 1.5)
    cfg.sigma = _get(cp, "adaptive", "sigma", float, DEFAULT_SIGMA)
    cfg.weights = _weights(cp)
    if cfg.local_epochs < 0 or cfg.max_rounds < 1:
        raise ConfigError("[adaptive] local_epochs must be >= 0 and max_rounds >= 1")
    if not (cfg.sigma > 0 and math.isfinite(cfg.sigma)):
        raise ConfigError("[adaptive] sigma must be positive")
    return cfg


@dataclass
class SynthConfig:
    subject: str
    channels: int
    samples: int
    trials_per_class: int
    spread: float
    seed: int
    bases: list  # per-class diagonal entries (channels) or latent diagonals
    latent: bool = False
    noise: float = 0.0
    rotate: bool = True
    mixing_seed: int | None = None


def load_synth_config(path, seed: int | None = None) -> SynthConfig:
    cp = _read(path)
    s = "synth"
    if not cp.has_section(s):
        raise ConfigError("[synth] section required")
    if seed is None:
        seed = _get(cp, s, "seed", int, None)
    if seed is None:
        raise ConfigError("no seed: pass --seed or set [synth] seed")
    channels = _get(cp, s, "channels", int, None)
    if channels is None or channels < 1:
        raise ConfigError("[synth] channels is required")
    base_keys = sorted((int(k.split(".")[1]), k) for k, _ in cp.items(s) if re.fullmatch(r"base\.\d+", k))
    latent_keys = sorted((int(k.split(".")[1]), k) for k, _ in cp.items(s) if re.fullmatch(r"latent\.\d+", k))
    if bool(base_keys) == bool(latent_keys):
        raise ConfigError("[synth] give either base.<class> or latent.<class> entries")
    keys = base_keys or latent_keys
    if [y for y, _ in keys] != list(range(len(keys))):
        raise ConfigError("[synth] class indices must run 0..K-1")
    bases = [parse_floats(cp.get(s, k)) for _, k in keys]
    if base_keys and any(len(b) != channels for b in bases):
        raise ConfigError(f"[synth] every base.<class> needs {channels} diagonal entries")
    if latent_keys and len({len(b) for b in bases}) != 1:
        raise ConfigError("[synth] latent.<class> entries must share one length")
    if any(v <= 0 for b in bases for v in b):
        raise ConfigError("[synth] diagonal entries must be positive")
    return SynthConfig(
        subject=_get(cp, s, "subject", str, "synth"),
        channels=channels,
        samples=_get(cp, s, "samples", int, 128),
        trials_per_class=_get(cp, s, "trials_per_class", int, 40),
        spread=_get(cp, s, "spread", float, 0.1),
        seed=int(seed),
        bases=bases,
        latent=bool(latent_keys),
        noise=_get(cp, s, "noise", float, 0.0),
        rotate=_get(cp, s, "rotate", bool, True),
        mixing_seed=_get(cp, s, "mixing_seed", int, None),
    )
