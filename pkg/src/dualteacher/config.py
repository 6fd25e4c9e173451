"""Experiment configuration: INI file <-> frozen dataclasses.

Layout::

    [experiment]        domains, method, regime, seeds, tau, input/hidden/feature dims
    [selection]         delta, gamma, lambda
    [optimizer]         base_lr, weight_decay, beta1, beta2, eps
    [training]          epochs, task_batch, ref_batch
    [pretrain]          epochs, base_lr, batch, samples_per_class, noise_mult, center_jitter
    [pool]              size, domain_weights, background_weight, background_scale
    [domain_defaults]   any DomainSpec field, applied to every domain
    [domain.<id>]       per-domain overrides

Numbers may be written as fractions (``gamma = 1/6``).
"""
import configparser
import hashlib
import io
import json
from dataclasses import asdict, dataclass, field, fields, replace
from fractions import Fraction
from importlib import resources
from typing import Tuple

from .errors import ConfigError

METHODS = ("ours", "continual_ft", "distill_pre", "distill_prev", "lwf")
REGIMES = ("MTIL", "MCIL")


@dataclass(frozen=True)
class DomainConfig:
    domain_id: str
    num_classes: int = 4
    samples_per_class: int = 50
    center_scale: float = 1.0
    noise_sigma: float = 0.2


@dataclass(frozen=True)
class SelectionConfig:
    delta: float = 0.2
    gamma: float = 1 / 6
    lam: float = 9.0


@dataclass(frozen=True)
class OptimizerConfig:
    base_lr: float = 1e-3
    weight_decay: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass(frozen=True)
class TrainingConfig:
    epochs: int = 10
    task_batch: int = 64
    ref_batch: int = 64


@dataclass(frozen=True)
class PretrainConfig:
    epochs: int = 30
    base_lr: float = 3e-3
    batch: int = 64
    samples_per_class: int = 40
    noise_mult: float = 2.0
    center_jitter: float = 0.5
    coarse_group: int = 2


@dataclass(frozen=True)
class PoolConfig:
    size: int = 2000
    domain_weights: Tuple[float, ...] = ()
    background_weight: float = 1.0
    background_scale: float = 1.0


@dataclass(frozen=True)
class ExperimentConfig:
    domains: Tuple[DomainConfig, ...]
    method: str = "ours"
    regime: str = "MTIL"
    seeds: Tuple[int, ...] = (0,)
    tau: float = 0.01
    input_dim: int = 16
    hidden_dim: int = 32
    feature_dim: int = 8
    selection: SelectionConfig = field(default_factory=SelectionConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    pool: PoolConfig = field(default_factory=PoolConfig)

    def __post_init__(self):
        validate(self)

    @property
    def domain_ids(self):
        return tuple(d.domain_id for d in self.domains)

    @property
    def num_tasks(self):
        return len(self.domains)

    def with_(self, **changes):
        return replace(self, **changes)


def validate(cfg: ExperimentConfig):
    def bad(name, msg):
        raise ConfigError(f"{name}: {msg}")

    if not cfg.domains:
        bad("experiment.domains", "at least one domain required")
    ids = cfg.domain_ids
    if len(set(ids)) != len(ids):
        bad("experiment.domains", "domain ids must be unique")
    if cfg.method not in METHODS:
        bad("experiment.method", f"{cfg.method!r} not one of {', '.join(METHODS)}")
    if cfg.regime not in REGIMES:
        bad("experiment.regime", f"{cfg.regime!r} not one of {', '.join(REGIMES)}")
    if not cfg.seeds:
        bad("experiment.seeds", "at least one seed required")
    if not cfg.tau > 0:
        bad("experiment.tau", "must be positive")
    for name in ("input_dim", "hidden_dim", "feature_dim"):
        if getattr(cfg, name) < 1:
            bad(f"experiment.{name}", "must be >= 1")
    for d in cfg.domains:
        sec = f"domain.{d.domain_id}"
        if d.num_classes < 2:
            bad(f"{sec}.num_classes", "trainable domains need >= 2 classes")
        if d.samples_per_class < 2:
            bad(f"{sec}.samples_per_class", "must be >= 2")
        if not d.noise_sigma > 0:
            bad(f"{sec}.noise_sigma", "must be positive")
    if not cfg.selection.gamma > 0:
        bad("selection.gamma", "must be positive")
    if not cfg.selection.lam >= 0:
        bad("selection.lambda", "must be nonnegative")
    if not cfg.optimizer.base_lr > 0:
        bad("optimizer.base_lr", "must be positive")
    if cfg.optimizer.weight_decay < 0:
        bad("optimizer.weight_decay", "must be nonnegative")
    t = cfg.training
    if t.epochs < 0:
        bad("training.epochs", "must be >= 0")
    if t.task_batch < 1:
        bad("training.task_batch", "must be >= 1")
    if t.ref_batch < 0:
        bad("training.ref_batch", "must be >= 0")
    if cfg.pretrain.coarse_group < 1:
        bad("pretrain.coarse_group", "must be >= 1")
    p = cfg.pool
    if p.size < 1:
        bad("pool.size", "must be >= 1")
    if p.domain_weights and len(p.domain_weights) != len(cfg.domains):
        bad("pool.domain_weights", f"need {len(cfg.domains)} weights, got {len(p.domain_weights)}")
    weights = list(p.domain_weights or [1.0] * len(cfg.domains)) + [p.background_weight]
    if any(w < 0 for w in weights) or not sum(weights) > 0:
        bad("pool.domain_weights", "weights must be nonnegative with a positive sum")


# parsing ---------------------------------------------------------------


def _num(text):
    return float(Fraction(text.strip())) if "/" in text else float(text)


def _list(text):
    return [t.strip() for t in text.replace("\n", ",").split(",") if t.strip()]


def _coerce(section, key, text, typ):
    try:
        if typ is int:
            return int(text)
        if typ is float:
            return _num(text)
        if typ is str:
            return text.strip()
        if typ == Tuple[int, ...]:
            return tuple(int(t) for t in _list(text))
        if typ == Tuple[float, ...]:
            return tuple(_num(t) for t in _list(text))
    except (ValueError, ZeroDivisionError):
        raise ConfigError(f"{section}.{key}: cannot parse {text!r} as {getattr(typ, '__name__', typ)}") from None
    raise TypeError(typ)


def _section(parser, name, cls, rename=None, skip=()):
    rename = rename or {}
    if not parser.has_section(name):
        return {}
    types = {f.name: f.type for f in fields(cls)}
    out = {}
    for key, text in parser.items(name):
        attr = rename.get(key, key)
        if attr in skip or attr not in types:
            raise ConfigError(f"{name}.{key}: unknown key")
        out[attr] = _coerce(name, key, text, _resolve_type(types[attr]))
    return out


def _resolve_type(t):
    if isinstance(t, str):
        return {"int": int, "float": float, "str": str,
                "Tuple[int, ...]": Tuple[int, ...], "Tuple[float, ...]": Tuple[float, ...]}.get(t, t)
    return t


_KNOWN = {"experiment", "selection", "optimizer", "training", "pretrain", "pool", "domain_defaults"}


def parse_config(text: str) -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"config syntax: {exc}") from None
    for sec in parser.sections():
        if sec not in _KNOWN and not sec.startswith("domain."):
            raise ConfigError(f"{sec}: unknown section")
    if not parser.has_section("experiment") or not parser.has_option("experiment", "domains"):
        raise ConfigError("experiment.domains: required")
    exp = dict(parser.items("experiment"))
    domain_ids = _list(exp.pop("domains"))
    defaults = _section(parser, "domain_defaults", DomainConfig, skip=("domain_id",))
    defined = {s.split(".", 1)[1] for s in parser.sections() if s.startswith("domain.")}
    for did in domain_ids:
        if did not in defined:
            raise ConfigError(f"experiment.domains: domain_id {did!r} has no [domain.{did}] section")
    for did in sorted(defined - set(domain_ids)):
        raise ConfigError(f"domain.{did}: defined but not listed in experiment.domains")
    domains = tuple(
        DomainConfig(domain_id=did, **{**defaults, **_section(parser, f"domain.{did}", DomainConfig, skip=("domain_id",))})
        for did in domain_ids
    )
    types = {f.name: _resolve_type(f.type) for f in fields(ExperimentConfig)}
    top = {}
    for key, text in exp.items():
        if key not in types or key in ("domains", "selection", "optimizer", "training", "pretrain", "pool"):
            raise ConfigError(f"experiment.{key}: unknown key")
        top[key] = _coerce("experiment", key, text, types[key])
    return ExperimentConfig(
        domains=domains,
        selection=SelectionConfig(**_section(parser, "selection", SelectionConfig, rename={"lambda": "lam"})),
        optimizer=OptimizerConfig(**_section(parser, "optimizer", OptimizerConfig)),
        training=TrainingConfig(**_section(parser, "training", TrainingConfig)),
        pretrain=PretrainConfig(**_section(parser, "pretrain", PretrainConfig)),
        pool=PoolConfig(**_section(parser, "pool", PoolConfig)),
        **top,
    )


def load_config(path) -> ExperimentConfig:
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror}") from None
    return parse_config(text)


def standard_config() -> ExperimentConfig:
    """The 4-domain desk-scale experiment shipped with the package."""
    return parse_config(resources.files(__package__).joinpath("configs/standard.ini").read_text())


def to_dict(cfg: ExperimentConfig):
    return asdict(cfg)


def config_hash(cfg: ExperimentConfig) -> str:
    """SHA-256 of the resolved config; independent of key order and spelling in the file."""
    blob = json.dumps(to_dict(cfg), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


def to_ini(cfg: ExperimentConfig) -> str:
    """Render a config back to INI text that parses to an equal config."""
    parser = configparser.ConfigParser(interpolation=None)
    d = to_dict(cfg)
    fmt = lambda v: ", ".join(repr(x) for x in v) if isinstance(v, (list, tuple)) else repr(v) if isinstance(v, float) else str(v)
    exp = {"domains": ", ".join(cfg.domain_ids)}
    for k, v in d.items():
        if k in ("domains", "selection", "optimizer", "training", "pretrain", "pool"):
            continue
        exp[k] = fmt(v)
    parser["experiment"] = exp
    for sec in ("selection", "optimizer", "training", "pretrain", "pool"):
        vals = {("lambda" if k == "lam" else k): fmt(v) for k, v in d[sec].items()}
        if sec == "pool" and not d[sec]["domain_weights"]:
            vals.pop("domain_weights")
        parser[sec] = vals
    for dom in d["domains"]:
        parser[f"domain.{dom['domain_id']}"] = {k: fmt(v) for k, v in dom.items() if k != "domain_id"}
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()
