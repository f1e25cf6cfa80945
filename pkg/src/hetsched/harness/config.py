"""Experiment configuration: JSON files merged over defaults."""
from __future__ import annotations

import copy
import hashlib
import json
import os
from dataclasses import dataclass, field, fields

from ..agent import TrainConfig
from ..errors import ConfigError

SCHEDULERS = ("agent", "random", "sjf", "oracle")
GENERATORS = ("random", "wide", "template")


@dataclass
class InstanceSpec:
    """How evaluation/training instances are produced.

    ``generator="random"`` draws tiny heterogeneous instances, ``"wide"``
    fan-out instances on a large SMP machine, and ``"template"`` builds
    workloads from a named template on a topology file (or a shipped name).
    """
    generator: str = "random"
    count: int = 50
    seed: int = 0
    n_kernels: int = 4
    template: str = "genomics-like"
    sizes: list = field(default_factory=lambda: [4])
    topology: str = "m1_like"
    profiles: str = "default"

    def __post_init__(self):
        if self.generator not in GENERATORS:
            raise ConfigError("unknown instance generator %r" % self.generator)
        if self.count < 1:
            raise ConfigError("instance count must be positive")


@dataclass
class ExperimentConfig:
    name: str = "experiment"
    scheduler: str = "agent"
    seed: int = 0
    out: str = "runs/experiment"
    instances: InstanceSpec = field(default_factory=InstanceSpec)
    train_instances: InstanceSpec = field(default_factory=lambda: InstanceSpec(count=20, seed=1000))
    train: dict = field(default_factory=dict)
    iterations: int = 300
    batch_size: int = 1
    batch_sizes: list = field(default_factory=lambda: [1, 2, 4, 8, 16])
    checkpoint: str | None = None

    def __post_init__(self):
        if self.scheduler not in SCHEDULERS:
            raise ConfigError("unknown scheduler %r (choose from %s)" % (self.scheduler, ", ".join(SCHEDULERS)))
        if self.batch_size < 1 or any(int(b) < 1 for b in self.batch_sizes):
            raise ConfigError("batch sizes must be positive")
        if self.checkpoint is not None and not os.path.exists(self.checkpoint):
            raise ConfigError("checkpoint %r does not exist" % self.checkpoint)
        for key in self.train:
            if key not in {f.name for f in fields(TrainConfig)}:
                raise ConfigError("unknown train option %r" % key)
        if self.instances.generator == "template":
            _check_topology(self.instances.topology)

    def train_config(self):
        opts = {"seed": self.seed, "batch_size": self.batch_size}
        opts.update(self.train)
        return TrainConfig(**opts)

    def to_dict(self):
        d = {f.name: copy.deepcopy(getattr(self, f.name)) for f in fields(self)}
        d["instances"] = vars(self.instances).copy()
        d["train_instances"] = vars(self.train_instances).copy()
        return d

    def digest(self):
        """SHA-256 of the canonical JSON form, output directory excluded."""
        d = self.to_dict()
        d.pop("out")
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


def _check_topology(name):
    if name.endswith(".json") and not os.path.exists(name):
        raise ConfigError("topology file %r does not exist" % name)


def config_from_dict(d):
    d = dict(d)
    known = {f.name for f in fields(ExperimentConfig)}
    extra = set(d) - known
    if extra:
        raise ConfigError("unknown config keys: %s" % ", ".join(sorted(extra)))
    for key in ("instances", "train_instances"):
        if key in d:
            sub = d[key]
            if not isinstance(sub, dict):
                raise ConfigError("%s must be an object" % key)
            bad = set(sub) - {f.name for f in fields(InstanceSpec)}
            if bad:
                raise ConfigError("unknown %s keys: %s" % (key, ", ".join(sorted(bad))))
            d[key] = InstanceSpec(**sub)
    return ExperimentConfig(**d)


def load_config(path=None, overrides=None):
    """Config from a JSON file (or defaults) with ``overrides`` applied on top."""
    d = {}
    if path is not None:
        if not os.path.exists(path):
            raise ConfigError("config file %r does not exist" % path)
        with open(path) as fh:
            try:
                d = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError("config %r is not valid JSON: %s" % (path, exc)) from None
    for k, v in (overrides or {}).items():
        if v is None:
            continue
        if k in ("instances", "train_instances"):
            d[k] = {**d.get(k, {}), **v}
        else:
            d[k] = v
    return config_from_dict(d)
