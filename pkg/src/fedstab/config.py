"""Declarative experiment configuration (YAML), strictly validated."""

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

import yaml

from .models import FAMILIES
from .topology import KINDS, TopologyError, build_topology

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DataConfig:
    d: int = 10
    C: int = 5
    m: int = 16
    S: int = None
    total: int = None
    beta: float = 0.1
    seed: int = 0
    noise: float = 0.5

    @property
    def samples(self):
        return self.total if self.total is not None else self.m * self.S


@dataclass(frozen=True)
class ModelConfig:
    family: str = "logistic"
    weight_decay: float = 0.01
    hidden: int = 16
    curvature: float = 1.0


@dataclass(frozen=True)
class TrainBlock:
    T: int = 50
    K: int = 5
    n: int = None
    topology: str = None
    batch: int = 1
    mu: object = "auto"
    schedule: str = "inverse_iteration"
    sampling: str = "with_replacement"
    seed: int = 0

    @property
    def algo(self):
        return "cfl" if self.topology is None else "dfl"


@dataclass(frozen=True)
class StabilityConfig:
    seeds: int = 20
    positions: int = 1
    probe_size: int = 256
    probe_count: int = 100
    zero_perturbation: bool = False
    alpha: object = "auto"
    min_traces: int = 10


@dataclass(frozen=True)
class OutputConfig:
    directory: str = "out"
    formats: tuple = ("csv", "json")


@dataclass(frozen=True)
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainBlock = field(default_factory=TrainBlock)
    stability: StabilityConfig = field(default_factory=StabilityConfig)
    output: OutputConfig = field(default_factory=OutputConfig)
    version: int = SCHEMA_VERSION

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["output"]["formats"] = list(d["output"]["formats"])
        return d

    def content_hash(self):
        """git blob hash of the canonical JSON form."""
        body = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha1(b"blob %d\0" % len(body) + body).hexdigest()

    def with_changes(self, **blocks):
        """Copy with some fields of some blocks replaced, e.g. train={"n": 4}."""
        out = self
        for block, changes in blocks.items():
            out = dataclasses.replace(out, **{block: dataclasses.replace(getattr(out, block), **changes)})
        return out


_BLOCKS = {
    "data": DataConfig,
    "model": ModelConfig,
    "train": TrainBlock,
    "stability": StabilityConfig,
    "output": OutputConfig,
}


def _block(cls, raw, name):
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"block {name!r} must be a mapping")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"unknown keys in {name!r}: {', '.join(unknown)}")
    if "formats" in raw:
        raw = {**raw, "formats": tuple(raw["formats"])}
    return cls(**raw)


def from_dict(raw):
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping")
    unknown = sorted(set(raw) - set(_BLOCKS) - {"version"})
    if unknown:
        raise ConfigError(f"unknown top-level keys: {', '.join(unknown)}")
    version = raw.get("version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ConfigError(f"unsupported schema version {version}, expected {SCHEMA_VERSION}")
    cfg = ExperimentConfig(**{k: _block(cls, raw.get(k), k) for k, cls in _BLOCKS.items()}, version=version)
    validate(cfg)
    return cfg


def load(path):
    with open(path) as fh:
        try:
            raw = yaml.safe_load(fh)
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from exc
    return from_dict(raw)


def validate(cfg):
    """Check every module precondition the config implies before anything runs."""
    d, mo, tr, sb = cfg.data, cfg.model, cfg.train, cfg.stability
    if (d.S is None) == (d.total is None):
        raise ConfigError("data needs exactly one of 'S' or 'total'")
    if d.d < 1 or d.C < 2 or d.m < 1:
        raise ConfigError("data needs d >= 1, C >= 2, m >= 1")
    if d.samples < max(d.C, d.m):
        raise ConfigError(f"{d.samples} samples cannot cover C={d.C} classes and m={d.m} clients")
    if d.beta <= 0:
        raise ConfigError("beta must be > 0")
    if mo.family not in FAMILIES:
        raise ConfigError(f"unknown model family {mo.family!r}")
    if (tr.n is None) == (tr.topology is None):
        raise ConfigError("train needs exactly one of 'n' (cfl) or 'topology' (dfl)")
    if tr.n is not None and not 1 <= tr.n <= d.m:
        raise ConfigError(f"n={tr.n} must lie in [1, m={d.m}]")
    if tr.topology is not None:
        if tr.topology not in KINDS or tr.topology == "custom":
            raise ConfigError(f"unknown topology {tr.topology!r}")
        try:
            build_topology(tr.topology, d.m)
        except TopologyError as exc:
            raise ConfigError(str(exc)) from exc
    if tr.T < 1 or tr.K < 1 or tr.batch < 1:
        raise ConfigError("T, K and batch must be >= 1")
    if tr.mu != "auto" and not (isinstance(tr.mu, (int, float)) and tr.mu >= 0):
        raise ConfigError("mu must be 'auto' or a non-negative number")
    if tr.schedule not in ("inverse_iteration", "constant"):
        raise ConfigError(f"unknown schedule {tr.schedule!r}")
    if tr.sampling not in ("with_replacement", "shuffle"):
        raise ConfigError(f"unknown sampling {tr.sampling!r}")
    if sb.seeds < 1 or sb.positions < 1 or sb.probe_size < 1 or sb.probe_count < 1:
        raise ConfigError("seeds, positions, probe_size and probe_count must be >= 1")
    if sb.alpha != "auto" and not (isinstance(sb.alpha, (int, float)) and 0 < sb.alpha < 1):
        raise ConfigError("alpha must be 'auto' or lie in (0, 1)")
    bad = set(cfg.output.formats) - {"csv", "json"}
    if bad:
        raise ConfigError(f"unknown output formats {sorted(bad)}")
    return cfg
