"""Performance-counter measurement model and utilization relations.

Counters are read ``N`` times between scheduler invocations. Their unknown
true value follows a scaled and shifted Student-t around the sample mean.
Utilizations are algebraic functions of (window-normalized) counters or of
other utilizations, and define the structure of the utilization network:
measured counters are root nodes, every utilization node has its relation
inputs as parents, and its CPD is a sharply peaked softmax around the
relation's value.
"""
from __future__ import annotations

import json
import math
import pathlib
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .bayesnet import BayesNet, ConditionalNode
from .errors import (DegenerateDof, MissingInput, OutOfRange, UnknownCounter,
                     UnknownResource)

CATEGORIES = ("on-core", "uncore", "os-driver")
FORMS = ("identity", "ratio", "ratio-of-threshold-counts", "min", "max", "product", "mean")
DEFAULT_SAMPLES = 16
DEFAULT_TEMPERATURE = 0.05
DATA = pathlib.Path(__file__).parent / "data"


@dataclass(frozen=True)
class CounterSpec:
    name: str
    category: str = "uncore"

    def __post_init__(self):
        if self.category not in CATEGORIES:
            raise ValueError("unknown counter category %r" % self.category)


@dataclass
class MeasurementSummary:
    n: int
    mean: float
    variance: float
    counter: CounterSpec | None = None

    @property
    def dof(self):
        return self.n - 1

    @property
    def std(self):
        return math.sqrt(self.variance)

    @property
    def usable(self):
        return self.dof >= 1


@dataclass
class UtilizationRelation:
    output: str
    form: str
    inputs: list
    theta: float | None = None
    scale: float = 1.0

    def __post_init__(self):
        if self.form not in FORMS:
            raise ValueError("unknown relation form %r" % self.form)
        if self.form == "ratio-of-threshold-counts" and self.theta is not None and self.theta < 1:
            raise ValueError("threshold must be at least 1")


@dataclass
class UtilizationBins:
    bin_count: int = 10

    @property
    def edges(self):
        return np.linspace(0.0, 1.0, self.bin_count + 1)

    @property
    def centers(self):
        return (np.arange(self.bin_count) + 0.5) / self.bin_count


# ------------------------------------------------------------ statistics

def summarize(raw, counter=None):
    x = np.asarray(raw, dtype=float)
    if x.size < 1:
        raise ValueError("need at least one reading")
    var = float(x.var(ddof=1)) if x.size > 1 else 0.0
    return MeasurementSummary(int(x.size), float(x.mean()), var, counter)


def t_interval(s, confidence=0.95):
    """Central interval for the true counter value."""
    if s.dof < 1:
        raise DegenerateDof("need at least two readings for a t interval")
    if not 0.0 < confidence < 1.0:
        raise ValueError("confidence must lie in (0, 1)")
    half = stats.t.ppf(0.5 + confidence / 2.0, s.dof) * s.std / math.sqrt(s.n)
    return s.mean - half, s.mean + half


def sample_true_value(s, seed):
    """One draw of the true value: mean + (S / sqrt(N)) * t_(N-1)."""
    if s.dof < 1:
        raise DegenerateDof("need at least two readings")
    if s.variance == 0.0:
        return s.mean
    rng = np.random.default_rng(seed)
    return s.mean + s.std / math.sqrt(s.n) * float(rng.standard_t(s.dof))


# ------------------------------------------------------------- relations

def _threshold_counts(hist, theta):
    """Cycles with >= theta and >= 1 outstanding requests from a histogram.

    ``hist[k]`` counts cycles with exactly ``k`` outstanding requests; a
    fractional ``theta`` interpolates the boundary bucket.
    """
    hist = np.asarray(hist, dtype=float)
    ge1 = hist[1:].sum()
    lo = int(math.floor(theta))
    frac = theta - lo
    ge = hist[lo:].sum() - frac * (hist[lo] if lo < hist.size else 0.0)
    return ge, ge1


def apply_relation(rel, values):
    """Evaluate ``rel`` on ``values`` (name -> number, or histogram for thresholds)."""
    for name in rel.inputs:
        if name not in values:
            raise MissingInput("relation %r needs %r" % (rel.output, name))
    xs = [values[name] for name in rel.inputs]
    if rel.form == "identity":
        u = float(xs[0]) / rel.scale
    elif rel.form == "ratio":
        num, den = max(float(xs[0]), 0.0), max(float(xs[1]), 0.0)
        u = num / den if den > 0 else 0.0
    elif rel.form == "ratio-of-threshold-counts":
        if len(xs) == 1:
            num, den = _threshold_counts(xs[0], rel.theta if rel.theta is not None else 1.0)
        else:
            num, den = max(float(xs[0]), 0.0), max(float(xs[1]), 0.0)
        u = num / den if den > 0 else 0.0
    elif rel.form == "min":
        u = min(float(x) for x in xs)
    elif rel.form == "max":
        u = max(float(x) for x in xs)
    elif rel.form == "product":
        u = float(np.prod([float(x) for x in xs]))
    else:
        u = float(np.mean([float(x) for x in xs]))
    if not math.isfinite(u):
        u = 0.0
    return min(max(u, 0.0), 1.0)


def discretize(u, bins=None):
    bins = bins or UtilizationBins()
    if not 0.0 <= u <= 1.0:
        raise OutOfRange("utilization %r outside [0, 1]" % u)
    return min(int(u * bins.bin_count), bins.bin_count - 1)


def bin_center(i, bins=None):
    bins = bins or UtilizationBins()
    return (i + 0.5) / bins.bin_count


# ------------------------------------------------------------ model config

@dataclass
class CounterModel:
    counters: list
    relations: list
    resources: list = field(default_factory=list)
    window: float = 1.0e6
    samples: int = DEFAULT_SAMPLES

    @property
    def counter_names(self):
        return [c.name for c in self.counters]

    def relation_for(self, output):
        for rel in self.relations:
            if rel.output == output:
                return rel
        raise KeyError(output)

    def to_dict(self):
        return {"counters": [{"name": c.name, "category": c.category} for c in self.counters],
                "relations": [_rel_dict(r) for r in self.relations],
                "resources": list(self.resources), "window": self.window,
                "samples": self.samples}


def _rel_dict(r):
    d = {"output": r.output, "form": r.form, "inputs": list(r.inputs)}
    if r.theta is not None:
        d["theta"] = r.theta
    if r.scale != 1.0:
        d["scale"] = r.scale
    return d


def load_counter_model(cfg):
    """Parse ``{counters, relations, resources?, window?, samples?}``."""
    if isinstance(cfg, (str, pathlib.Path)):
        with open(cfg) as fh:
            cfg = json.load(fh)
    counters = [CounterSpec(c["name"], c.get("category", "uncore")) for c in cfg["counters"]]
    if len({c.name for c in counters}) != len(counters):
        raise ValueError("duplicate counter names")
    rels = [UtilizationRelation(r["output"], r["form"], list(r["inputs"]), r.get("theta"),
                                float(r.get("scale", 1.0))) for r in cfg["relations"]]
    resources = list(cfg.get("resources") or [r.output for r in rels])
    return CounterModel(counters, rels, resources, float(cfg.get("window", 1.0e6)),
                        int(cfg.get("samples", DEFAULT_SAMPLES)))


def shipped_model(name="xeon16"):
    return load_counter_model(DATA / ("%s_counters.json" % name))


def identity_model(resources, categories=None, window=1.0e6):
    """One busy-cycle counter per resource, each mapped through an identity relation."""
    categories = categories or {}
    counters, rels = [], []
    for r in resources:
        cname = "%s.busy" % r
        counters.append(CounterSpec(cname, categories.get(r, "uncore")))
        rels.append(UtilizationRelation(r, "identity", [cname]))
    return CounterModel(counters, rels, list(resources), window)


# ------------------------------------------------------------ network

def _topo_relations(model):
    counters = set(model.counter_names)
    outputs = {r.output for r in model.relations}
    done = set(counters)
    out = []
    pending = list(model.relations)
    while pending:
        progressed = False
        for rel in list(pending):
            for name in rel.inputs:
                if name not in counters and name not in outputs:
                    raise UnknownCounter("relation %r references unknown input %r"
                                         % (rel.output, name))
            if all(name in done for name in rel.inputs):
                out.append(rel)
                done.add(rel.output)
                pending.remove(rel)
                progressed = True
        if not progressed:
            raise ValueError("relations form a cycle")
    return out


def build_utilization_bn(topology, model, bins=None, temperature=DEFAULT_TEMPERATURE):
    """Utilization network for ``model`` restricted to ``topology``'s resources.

    ``topology`` may be a fabric topology (its resource names are used), a
    list of resource names, or ``None`` to take the model's own list.
    Counter values enter the network window-normalized: counter nodes hold
    the bin of ``reading / window``.
    """
    bins = bins or UtilizationBins()
    if topology is None:
        resources = list(model.resources)
    elif isinstance(topology, (list, tuple, set)):
        resources = list(topology)
    else:
        resources = list(topology.resource_names)
    rels = _topo_relations(model)
    for rel in rels:
        if rel.output not in resources:
            raise UnknownResource("relation output %r is not a topology resource" % rel.output)
    B = bins.bin_count
    centers = bins.centers
    used = set()
    for rel in rels:
        used.update(rel.inputs)
    nodes = []
    index = {}
    for c in model.counters:
        if c.name not in used:
            continue
        index[c.name] = len(nodes)
        nodes.append(ConditionalNode(len(nodes), c.name, (), tuple(centers), np.zeros((1, B)),
                                     trainable=False))
    for rel in rels:
        parents = tuple(index[name] for name in rel.inputs)
        n_cfg = B ** len(parents)
        logits = np.zeros((n_cfg, B))
        for cfg in range(n_cfg):
            vals, rem = [], cfg
            for _ in parents:
                vals.append(centers[rem % B])
                rem //= B
            vals.reverse()
            env = dict(zip(rel.inputs, vals))
            if rel.form == "identity":
                env = {rel.inputs[0]: vals[0] * rel.scale}
            if rel.form == "ratio-of-threshold-counts" and len(vals) == 1:
                target = vals[0]
            else:
                target = apply_relation(rel, env)
            logits[cfg] = -((centers - target) / temperature) ** 2
        index[rel.output] = len(nodes)
        nodes.append(ConditionalNode(len(nodes), rel.output, parents, tuple(centers), logits))
    net = BayesNet(nodes)
    net.counter_nodes = [index[c.name] for c in model.counters if c.name in index]
    net.utilization_nodes = [index[r] for r in resources if r in index]
    net.utilization_names = [r for r in resources if r in index]
    return net


# ------------------------------------------------------- observations

def synthesize_counters(model, utils, rng, sigma=0.02, samples=None):
    """Noisy counter readings consistent with true utilizations ``utils``.

    Returns ``{counter: array of readings}``. Readings are window counts with
    additive Gaussian noise of standard deviation ``sigma * window``.
    Utilizations that are not resources of ``utils`` read as 0.
    """
    W = model.window
    n = samples or model.samples
    truth = {}
    for rel in model.relations:
        u = float(utils.get(rel.output, 0.0))
        if rel.form == "identity":
            truth[rel.inputs[0]] = u * W
        elif rel.form in ("ratio", "ratio-of-threshold-counts") and len(rel.inputs) == 2:
            truth[rel.inputs[0]] = u * W
            truth[rel.inputs[1]] = W
    out = {}
    for c in model.counters:
        mu = truth.get(c.name, 0.0)
        out[c.name] = mu + sigma * W * rng.standard_normal(n)
    return out


def counter_evidence(model, net, readings, bins=None, correction="mean", seed=0):
    """Clamp values (node id -> bin) for counters present in ``readings``.

    ``correction="mean"`` uses the sample mean; ``"sample"`` draws the true
    value from its t posterior (falling back to the mean with one reading).
    """
    bins = bins or UtilizationBins()
    ev = {}
    for i, name in enumerate(model.counter_names):
        if name not in net.index or name not in readings:
            continue
        raw = readings[name]
        if raw is None or len(raw) == 0:
            continue
        s = summarize(raw)
        if correction == "sample" and s.usable:
            v = sample_true_value(s, seed * 1000 + i)
        else:
            v = s.mean
        u = min(max(v / model.window, 0.0), 1.0)
        ev[net.index[name]] = discretize(u, bins)
    return ev
