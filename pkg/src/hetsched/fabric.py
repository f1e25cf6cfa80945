"""Simulated machine: topology graph, kernel profiles, workloads, interference.

A topology is an undirected graph over processors, memories and links.
Shared resources (core pipelines, memory bandwidth, PCIe, ...) are attached
to graph nodes; a processor contends on every resource attached to a node of
its shortest path to the nearest memory.
"""
from __future__ import annotations

import json
import pathlib
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, Disconnected, NotAvailable, UnknownResource

KINDS = ("cpu", "gpu", "fpga")
RESOURCE_CLASSES = ("core", "memory", "interconnect", "pcie", "gpu", "fpga", "nic")
DATA = pathlib.Path(__file__).parent / "data"


@dataclass(frozen=True)
class Processor:
    name: str
    kind: str
    socket: int = 0
    smt_group: int | None = None


@dataclass(frozen=True)
class Resource:
    name: str
    cls: str
    nodes: tuple


class FabricTopology:
    def __init__(self, processors, memories, links, edges, resources, name="topology"):
        self.name = name
        self.processors = list(processors)
        self.memories = list(memories)
        self.links = list(links)
        self.resources = list(resources)
        names = [p.name for p in self.processors] + list(self.memories) + list(self.links)
        if len(set(names)) != len(names):
            raise ConfigError("duplicate topology node names")
        self.node_names = names
        self.adj = {n: [] for n in names}
        for a, b in edges:
            if a not in self.adj or b not in self.adj:
                raise ConfigError("edge %r-%r references an unknown node" % (a, b))
            self.adj[a].append(b)
            self.adj[b].append(a)
        self.edges = [tuple(e) for e in edges]
        for r in self.resources:
            if r.cls not in RESOURCE_CLASSES:
                raise UnknownResource("resource %r has unknown class %r" % (r.name, r.cls))
            for n in r.nodes:
                if n not in self.adj:
                    raise UnknownResource("resource %r attached to unknown node %r" % (r.name, n))
        self.paths = {p.name: self._path_to_memory(p.name) for p in self.processors}
        self.onpath = np.array([[bool(set(r.nodes) & set(self.paths[p.name]))
                                 for r in self.resources] for p in self.processors], dtype=bool)
        # everything must hang together
        seen = self._reach(names[0]) if names else set()
        if len(seen) != len(names):
            raise Disconnected("topology graph is not connected")

    def _reach(self, start):
        seen = {start}
        queue = deque([start])
        while queue:
            u = queue.popleft()
            for w in self.adj[u]:
                if w not in seen:
                    seen.add(w)
                    queue.append(w)
        return seen

    def _path_to_memory(self, src):
        prev = {src: None}
        queue = deque([src])
        mems = set(self.memories)
        while queue:
            u = queue.popleft()
            if u in mems:
                path = []
                while u is not None:
                    path.append(u)
                    u = prev[u]
                return tuple(reversed(path))
            for w in sorted(self.adj[u]):
                if w not in prev:
                    prev[w] = u
                    queue.append(w)
        raise Disconnected("processor %r has no path to a memory" % src)

    @property
    def resource_names(self):
        return [r.name for r in self.resources]

    @property
    def processor_names(self):
        return [p.name for p in self.processors]

    def resource_classes(self):
        return [r.cls for r in self.resources]

    def to_dict(self):
        return {"name": self.name,
                "processors": [{"name": p.name, "kind": p.kind, "socket": p.socket,
                                **({"smt_group": p.smt_group} if p.smt_group is not None else {})}
                               for p in self.processors],
                "memories": list(self.memories), "links": list(self.links),
                "edges": [list(e) for e in self.edges],
                "resources": [{"name": r.name, "class": r.cls, "nodes": list(r.nodes)}
                              for r in self.resources]}


def load_topology(config):
    """Build a :class:`FabricTopology` from a dict or JSON path."""
    if isinstance(config, FabricTopology):
        return config
    if isinstance(config, (str, pathlib.Path)):
        with open(config) as fh:
            config = json.load(fh)
    try:
        procs = []
        for p in config["processors"]:
            if p["kind"] not in KINDS:
                raise ConfigError("unknown processor kind %r" % p["kind"])
            procs.append(Processor(p["name"], p["kind"], int(p.get("socket", 0)),
                                   p.get("smt_group")))
        res = [Resource(r["name"], r["class"], tuple(r["nodes"])) for r in config.get("resources", [])]
        return FabricTopology(procs, config.get("memories", []), config.get("links", []),
                              config.get("edges", []), res, config.get("name", "topology"))
    except KeyError as exc:
        raise ConfigError("topology config missing field %s" % exc) from None


def shipped_topology(name="m1_like"):
    return load_topology(DATA / ("%s_topology.json" % name))


# --------------------------------------------------------------- profiles

@dataclass
class KernelProfile:
    name: str
    runtime: dict                     # kind -> seconds
    demand: dict = field(default_factory=dict)   # kind -> {resource class: fraction}

    def available(self, kind):
        return kind in self.runtime

    def base_runtime(self, kind):
        if kind not in self.runtime:
            raise NotAvailable("kernel %r has no %s implementation" % (self.name, kind))
        return self.runtime[kind]

    def demand_on(self, kind, cls):
        return float(self.demand.get(kind, {}).get(cls, 0.0))


def load_profiles(config):
    if isinstance(config, dict) and all(isinstance(v, KernelProfile) for v in config.values()):
        return config
    if isinstance(config, (str, pathlib.Path)):
        with open(config) as fh:
            config = json.load(fh)
    out = {}
    for k in config["kernels"]:
        rt = {kind: float(v) for kind, v in k["runtime"].items()}
        for kind, v in rt.items():
            if kind not in KINDS or not v > 0:
                raise ConfigError("bad runtime for kernel %r on %r" % (k["name"], kind))
        dem = {kind: {c: float(x) for c, x in d.items()} for kind, d in k.get("demand", {}).items()}
        for d in dem.values():
            for c, x in d.items():
                if c not in RESOURCE_CLASSES or not 0.0 <= x <= 1.0:
                    raise ConfigError("bad demand %r=%r for kernel %r" % (c, x, k["name"]))
        out[k["name"]] = KernelProfile(k["name"], rt, dem)
    return out


def profiles_to_dict(profiles):
    return {"kernels": [{"name": p.name, "runtime": dict(p.runtime), "demand": p.demand}
                        for p in profiles.values()]}


def shipped_profiles(name="default"):
    return load_profiles(DATA / ("%s_profiles.json" % name))


# ----------------------------------------------------------- interference

@dataclass
class InterferenceModel:
    knots: tuple = ((1.0, 1.0), (1.6, 1.67))
    cap: float = 1.67

    def __post_init__(self):
        xs = [k[0] for k in self.knots]
        ys = [k[1] for k in self.knots]
        if xs[0] != 1.0 or ys[0] != 1.0:
            raise ConfigError("penalty must start at (1, 1)")
        if any(b <= a for a, b in zip(xs, xs[1:])) or any(b < a for a, b in zip(ys, ys[1:])):
            raise ConfigError("penalty knots must increase")

    @property
    def xs(self):
        return [float(k[0]) for k in self.knots]

    @property
    def ys(self):
        return [float(k[1]) for k in self.knots]

    def multiplier(self, d):
        xs, ys = self.xs, self.ys
        if d <= xs[0]:
            return 1.0
        m = ys[-1]
        for i in range(1, len(xs)):
            if d <= xs[i]:
                m = ys[i - 1] + (d - xs[i - 1]) * (ys[i] - ys[i - 1]) / (xs[i] - xs[i - 1])
                break
        return min(m, self.cap)


def demand_vector(topo, profile, proc):
    """Per-resource demand of ``profile`` running on processor index ``proc``."""
    p = topo.processors[proc]
    return np.array([profile.demand_on(p.kind, r.cls) if topo.onpath[proc, j] else 0.0
                     for j, r in enumerate(topo.resources)])


def effective_runtime(topo, profile, proc, co_running=(), im=None):
    """Runtime of ``profile`` on processor ``proc`` next to ``co_running``.

    ``co_running`` holds ``(profile, processor index)`` pairs. Only resources
    on ``proc``'s path to memory slow it down.
    """
    im = im or InterferenceModel()
    kind = topo.processors[proc].kind
    base = profile.base_runtime(kind)
    total = demand_vector(topo, profile, proc)
    for prof, q in co_running:
        total = total + demand_vector(topo, prof, q)
    m = 1.0
    for j in range(len(topo.resources)):
        if topo.onpath[proc, j]:
            m *= im.multiplier(total[j])
    return base * m


def true_utilizations(topo, running):
    """Per-resource utilization from ``running`` ``(profile, proc)`` pairs."""
    total = np.zeros(len(topo.resources))
    for prof, q in running:
        total += demand_vector(topo, prof, q)
    return {r.name: float(min(max(total[j], 0.0), 1.0)) for j, r in enumerate(topo.resources)}


# ---------------------------------------------------------------- DFGs

@dataclass
class DataFlowGraph:
    kernels: list                    # kernel profile name per node
    edges: list                      # (src, dst) node indices
    data_sizes: list | None = None
    name: str = "dfg"

    def __post_init__(self):
        n = len(self.kernels)
        for a, b in self.edges:
            if not (0 <= a < n and 0 <= b < n) or a == b:
                raise ConfigError("bad DFG edge %r" % ((a, b),))
        if self.topo_order() is None:
            raise ConfigError("DFG has a cycle")

    def __len__(self):
        return len(self.kernels)

    def preds(self, i):
        return [a for a, b in self.edges if b == i]

    def succs(self, i):
        return [b for a, b in self.edges if a == i]

    def topo_order(self):
        n = len(self.kernels)
        indeg = [0] * n
        for _, b in self.edges:
            indeg[b] += 1
        queue = deque(i for i in range(n) if indeg[i] == 0)
        order = []
        while queue:
            u = queue.popleft()
            order.append(u)
            for b in sorted(self.succs(u)):
                indeg[b] -= 1
                if indeg[b] == 0:
                    queue.append(b)
        return order if len(order) == n else None

    def is_dag(self):
        return self.topo_order() is not None

    def to_dict(self):
        d = {"name": self.name, "nodes": [{"id": i, "kernel": k} for i, k in enumerate(self.kernels)],
             "edges": [list(e) for e in self.edges]}
        if self.data_sizes is not None:
            d["data_sizes"] = list(self.data_sizes)
        return d

    @classmethod
    def from_dict(cls, d):
        nodes = sorted(d["nodes"], key=lambda n: n["id"])
        if [n["id"] for n in nodes] != list(range(len(nodes))):
            raise ConfigError("DFG node ids must be 0..n-1")
        return cls([n["kernel"] for n in nodes], [tuple(e) for e in d["edges"]],
                   d.get("data_sizes"), d.get("name", "dfg"))


GENOMICS_STAGES = ("align", "indel_realign", "haplotype_call")


def generate_workload(template, size, seed, kernels=None):
    """Synthetic DFG of ``size`` nodes following a workload template."""
    if size < 1:
        raise ValueError("size must be at least 1")
    rng = np.random.default_rng(seed)
    if template == "genomics-like":
        ks = [GENOMICS_STAGES[i % 3] for i in range(size)]
        edges = [(i, i + 1) for i in range(size - 1)]
        # occasional second read group joining the pipeline
        if size >= 6 and rng.random() < 0.5:
            edges.append((0, 3))
        return DataFlowGraph(ks, edges, rng.integers(1, 100, size).tolist(), template)
    if template == "eeg-like":
        if size == 1:
            return DataFlowGraph(["ingest"], [], [1], template)
        if size == 2:
            return DataFlowGraph(["ingest", "classify"], [(0, 1)], [1, 1], template)
        mids = size - 2
        ks = ["ingest"] + [("fft", "filter")[int(rng.integers(2))] for _ in range(mids)] + ["classify"]
        edges = [(0, i) for i in range(1, size - 1)] + [(i, size - 1) for i in range(1, size - 1)]
        return DataFlowGraph(ks, edges, rng.integers(1, 100, size).tolist(), template)
    if template == "security-like":
        ks, edges = [], []
        prev_merge = None
        while len(ks) < size:
            left = size - len(ks)
            if left >= 4:
                s = len(ks)
                ks += ["split", "hash", "scan", "merge"]
                edges += [(s, s + 1), (s, s + 2), (s + 1, s + 3), (s + 2, s + 3)]
                if prev_merge is not None:
                    edges.append((prev_merge, s))
                prev_merge = s + 3
            else:
                s = len(ks)
                ks.append(("hash", "scan")[int(rng.integers(2))])
                if prev_merge is not None:
                    edges.append((prev_merge, s))
                prev_merge = s
        return DataFlowGraph(ks, edges, rng.integers(1, 100, size).tolist(), template)
    if template == "random":
        names = sorted(kernels) if kernels else sorted(
            GENOMICS_STAGES + ("ingest", "fft", "filter", "classify", "split", "hash", "scan", "merge"))
        ks = [names[int(rng.integers(len(names)))] for _ in range(size)]
        edges = [(a, b) for b in range(size) for a in range(b) if rng.random() < 0.35]
        return DataFlowGraph(ks, edges, rng.integers(1, 100, size).tolist(), template)
    raise ValueError("unknown workload template %r" % template)


def profile_diversity(profiles):
    """Largest best-to-worst runtime ratio over kernels."""
    best = 0.0
    for p in profiles.values():
        vals = list(p.runtime.values())
        if len(vals) > 1:
            best = max(best, max(vals) / min(vals))
    return best


def smp_topology(sockets=2, cores=2, smt=2, gpus=1, name="smp"):
    """Multi-socket CPU machine with SMT siblings sharing a core and PCIe GPUs."""
    procs, links, edges, res, mems = [], [], [], [], []
    for s in range(sockets):
        l3, dram = "s%d.l3" % s, "dram%d" % s
        mems.append(dram)
        links.append(l3)
        edges.append([l3, dram])
        res.append({"name": "mem_bw%d" % s, "class": "memory", "nodes": [dram]})
        for c in range(cores):
            core = "s%d.core%d" % (s, c)
            links.append(core)
            edges.append([core, l3])
            res.append({"name": "core%d" % (s * cores + c), "class": "core", "nodes": [core]})
            for t in range(smt):
                p = "s%d.c%d.t%d" % (s, c, t)
                procs.append({"name": p, "kind": "cpu", "socket": s, "smt_group": s * cores + c})
                edges.append([p, core])
    for s in range(1, sockets):
        links.append("qpi%d" % s)
        edges += [["s%d.l3" % (s - 1), "qpi%d" % s], ["qpi%d" % s, "s%d.l3" % s]]
        res.append({"name": "qpi%d" % s, "class": "interconnect", "nodes": ["qpi%d" % s]})
    for g in range(gpus):
        bus, gpu = "pcie%d" % g, "gpu%d" % g
        links.append(bus)
        edges += [[bus, "s%d.l3" % (g % sockets)], [gpu, bus]]
        procs.append({"name": gpu, "kind": "gpu", "socket": g % sockets})
        res += [{"name": bus, "class": "pcie", "nodes": [bus]},
                {"name": gpu, "class": "gpu", "nodes": [gpu]}]
    return load_topology({"name": name, "processors": procs, "memories": mems, "links": links,
                          "edges": edges, "resources": res})


def minimal_topology():
    return load_topology({"processors": [{"name": "cpu0", "kind": "cpu"}],
                          "memories": ["dram0"], "edges": [["cpu0", "dram0"]],
                          "resources": [{"name": "mem_bw", "class": "memory", "nodes": ["dram0"]}]})


def dump_json(obj, path):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)
