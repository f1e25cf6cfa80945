"""Discrete-event scheduling environment over a simulated fabric.

The scheduler is invoked at decision points: whenever some Execute or
Reconfigure action is valid. A valid Execute starts the kernel immediately
(non-preemptive, runtime fixed at start from the kernels already running) and
leaves the clock in place if further actions are possible. NoOp advances the
clock to the next completion. Invalid actions leave the state untouched and
return a penalty.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import _pycore, core
from .errors import ConfigError, EpisodeDone, TooLarge
from .fabric import (DataFlowGraph, InterferenceModel, demand_vector, load_profiles, shipped_profiles,
                     smp_topology,
                     load_topology, profiles_to_dict, true_utilizations)
from .perfmodel import identity_model, synthesize_counters

INF = math.inf
REWARD_MODES = ("makespan-delta", "running-reciprocal")


@dataclass(frozen=True)
class Execute:
    kernel: int
    proc: int

    def __str__(self):
        return "execute(%d,%d)" % (self.kernel, self.proc)


@dataclass(frozen=True)
class Reconfigure:
    proc: int
    ktype: int

    def __str__(self):
        return "reconfigure(%d,%d)" % (self.proc, self.ktype)


@dataclass(frozen=True)
class NoOp:
    def __str__(self):
        return "noop"


@dataclass
class StepOutcome:
    observation: dict
    reward: float
    done: bool
    info: dict = field(default_factory=dict)


# ------------------------------------------------------------- instances

@dataclass
class Workload:
    """Kernels of one or more DFGs flattened into one topological order."""

    kernels: list            # profile name per global kernel index
    preds: list              # list of predecessor index lists
    owner: list              # (dfg index, node id) per kernel
    types: list              # distinct kernel names; ktype indexes this

    @property
    def K(self):
        return len(self.kernels)


def flatten_workloads(dfgs):
    kernels, preds, owner = [], [], []
    for w, g in enumerate(dfgs):
        order = g.topo_order()
        local = {}
        for node in order:
            local[node] = len(kernels)
            kernels.append(g.kernels[node])
            owner.append((w, node))
            preds.append(sorted(local[a] for a in g.preds(node)))
    types = sorted(set(kernels))
    return Workload(kernels, preds, owner, types)


def build_instance(topo, profiles, dfgs, im=None, reconfig_time=0.5):
    """Flattened :class:`SchedInstance` plus the workload index."""
    im = im or InterferenceModel()
    wl = flatten_workloads(dfgs)
    for name in wl.kernels:
        if name not in profiles:
            raise ConfigError("no profile for kernel %r" % name)
    runtime, demand = [], []
    for name in wl.kernels:
        prof = profiles[name]
        runtime.append([prof.runtime.get(p.kind, INF) for p in topo.processors])
        demand.append([demand_vector(topo, prof, q).tolist() for q in range(len(topo.processors))])
    for k, row in enumerate(runtime):
        if all(r == INF for r in row):
            raise ConfigError("kernel %r cannot run on any processor" % wl.kernels[k])
    ktype = [wl.types.index(name) for name in wl.kernels]
    preds = [sum(1 << j for j in ps) for ps in wl.preds]
    R = len(topo.resources)
    onpath = topo.onpath.tolist() if R else [[False] for _ in topo.processors]
    if not R:
        demand = [[[0.0] for _ in topo.processors] for _ in wl.kernels]
    inst = _pycore.SchedInstance(ktype, preds, runtime, demand, onpath,
                                 [p.kind == "fpga" for p in topo.processors],
                                 im.xs, im.ys, im.cap, reconfig_time)
    return inst, wl


@dataclass
class Bundle:
    topology: object
    profiles: dict
    workloads: list
    interference: InterferenceModel = field(default_factory=InterferenceModel)
    reconfig_time: float = 0.5
    name: str = "instance"

    def to_dict(self):
        return {"name": self.name, "topology": self.topology.to_dict(),
                "profiles": profiles_to_dict(self.profiles),
                "workloads": [g.to_dict() for g in self.workloads],
                "interference": {"knots": [list(k) for k in self.interference.knots],
                                 "cap": self.interference.cap},
                "reconfig_time": self.reconfig_time}

    @classmethod
    def from_dict(cls, d):
        im = d.get("interference", {})
        return cls(load_topology(d["topology"]), load_profiles(d["profiles"]),
                   [DataFlowGraph.from_dict(g) for g in d["workloads"]],
                   InterferenceModel(tuple(tuple(k) for k in im.get("knots", ((1.0, 1.0), (1.6, 1.67)))),
                                     float(im.get("cap", 1.67))),
                   float(d.get("reconfig_time", 0.5)), d.get("name", "instance"))

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1, sort_keys=True)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def instance(self):
        return build_instance(self.topology, self.profiles, self.workloads,
                              self.interference, self.reconfig_time)


# --------------------------------------------------------------- environment

class SchedEnv:
    """POMDP environment for one bundle (one or more DFGs on one fabric)."""

    def __init__(self, bundle, seed=0, reward_mode="makespan-delta", noise_sigma=0.02,
                 counter_model=None, invalid_penalty=None, reward_scale=1.0, max_steps=None,
                 samples=16):
        if reward_mode not in REWARD_MODES:
            raise ConfigError("unknown reward mode %r" % reward_mode)
        self.bundle = bundle
        self.topo = bundle.topology
        self.inst, self.workload = bundle.instance()
        self.reward_mode = reward_mode
        self.noise_sigma = noise_sigma
        self.counter_model = counter_model or identity_model(self.topo.resource_names)
        self.samples = samples
        max_base = max(r for row in self.inst.runtime for r in row if r < INF)
        self.invalid_penalty = -10.0 * max_base if invalid_penalty is None else invalid_penalty
        self.reward_scale = reward_scale
        self.max_steps = max_steps or 50 * (self.inst.K + 1) * (self.inst.P + 1)
        self.seed = seed
        self.state = None
        self.done = True
        self.trace = []

    # ---- action codes
    @property
    def n_actions(self):
        return self.inst.noop + 1

    def encode(self, a):
        if isinstance(a, (int, np.integer)):
            return int(a)
        if isinstance(a, Execute):
            return a.kernel * self.inst.P + a.proc
        if isinstance(a, Reconfigure):
            return self.inst.n_exec + a.proc * self.inst.T + a.ktype
        if isinstance(a, NoOp):
            return self.inst.noop
        raise TypeError("not an action: %r" % (a,))

    def decode(self, code):
        inst = self.inst
        if code == inst.noop:
            return NoOp()
        if code < inst.n_exec:
            return Execute(*divmod(code, inst.P))
        return Reconfigure(*divmod(code - inst.n_exec, inst.T))

    def valid_actions(self):
        return _pycore.valid_actions(self.inst, self.state)

    def valid_mask(self):
        m = np.zeros(self.n_actions, dtype=bool)
        m[self.valid_actions()] = True
        return m

    # ---- dynamics
    def reset(self, seed=None):
        if seed is not None:
            self.seed = seed
        self.rng = np.random.default_rng(self.seed)
        self.state, _ = _pycore.advance(self.inst, _pycore.initial_state(self.inst))
        self.done = self.state[2] == self.inst.full
        self.steps = 0
        self.trace = []
        self.runtimes = {}
        self.placement = {}
        self.start_times = {}
        return StepOutcome(self.observe(), 0.0, self.done, self._info([], False))

    @property
    def clock(self):
        return self.state[0]

    def running(self):
        """``(kernel, proc)`` pairs currently executing."""
        return [(k, p) for p, k in enumerate(self.state[3]) if k >= 0]

    def utilizations(self):
        prof = self.bundle.profiles
        return true_utilizations(self.topo, [(prof[self.workload.kernels[k]], p)
                                             for k, p in self.running()])

    def observe(self):
        return synthesize_counters(self.counter_model, self.utilizations(), self.rng,
                                   self.noise_sigma, self.samples)

    def _info(self, completed, invalid):
        return {"sim_time": self.state[0], "completed": completed, "invalid": invalid}

    def step(self, action):
        if self.done:
            raise EpisodeDone("episode already finished")
        code = self.encode(action)
        inst = self.inst
        self.steps += 1
        if code not in _pycore.valid_actions(inst, self.state):
            reward = self.invalid_penalty / self.reward_scale
            truncated = self.steps >= self.max_steps
            if truncated:
                self.done = True
            self._record(code, reward, True)
            info = self._info([], True)
            info["truncated"] = truncated
            return StepOutcome(self.observe(), reward, self.done, info)
        t0 = self.state[0]
        st, rt = _pycore.apply_action(inst, self.state, code)
        if code < inst.n_exec:
            k, p = divmod(code, inst.P)
            self.runtimes[k] = rt
            self.placement[k] = p
            self.start_times[k] = t0
        st, finished = _pycore.advance(inst, st, force=(code == inst.noop))
        self.state = st
        completed = [k for _, k in finished if k >= 0]
        if self.reward_mode == "makespan-delta":
            reward = -(st[0] - t0)
        else:
            reward = -sum(1.0 / (st[4][p] - self.start_times[k]) for k, p in self.running()
                          if st[4][p] > self.start_times[k])
        reward /= self.reward_scale
        self.done = st[2] == inst.full
        if not self.done and self.steps >= self.max_steps:
            self.done = True
        self._record(code, reward, False)
        return StepOutcome(self.observe(), reward, self.done, self._info(completed, False))

    def _record(self, code, reward, invalid):
        self.trace.append({"t": len(self.trace), "action": str(self.decode(code)),
                           "reward": float(reward), "sim_time": float(self.state[0]),
                           "invalid": bool(invalid)})

    @property
    def makespan(self):
        return self.state[0] if self.state[2] == self.inst.full else INF

    def kernel_times(self):
        """Per-kernel ``(start, finish)`` for kernels that have started."""
        return {k: (self.start_times[k], self.start_times[k] + self.runtimes[k])
                for k in self.start_times}


def reward(mode, transition):
    """Reward of a transition ``{"dt": elapsed, "running_runtimes": [T_i, ...]}``."""
    if mode == "makespan-delta":
        return -float(transition["dt"])
    if mode == "running-reciprocal":
        return -sum(1.0 / T for T in transition["running_runtimes"])
    raise ConfigError("unknown reward mode %r" % mode)


def write_trace(path, records):
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")


# ------------------------------------------------------------- schedulers

@dataclass
class EpisodeResult:
    makespan: float
    actions: list
    trace: list
    invocations: int
    kernel_times: dict
    invalid: int = 0


def run_episode(env, choose, seed=None):
    """Drive ``env`` with ``choose(env) -> action code`` until done."""
    env.reset(seed)
    actions = []
    invalid = 0
    calls = 0
    while not env.done:
        code = choose(env)
        calls += 1
        out = env.step(code)
        invalid += out.info["invalid"]
        actions.append(code)
    return EpisodeResult(env.makespan, actions, list(env.trace), calls, env.kernel_times(), invalid)


def baseline_random(env, seed):
    rng = np.random.default_rng(seed)

    def choose(e):
        acts = e.valid_actions()
        return acts[int(rng.integers(len(acts)))]
    return run_episode(env, choose)


def sjf_choice(env):
    inst, st = env.inst, env.state
    acts = _pycore.valid_actions(inst, st)
    best, key = None, None
    for code in acts:
        if code < inst.n_exec:
            k, p = divmod(code, inst.P)
            kk = (inst.runtime[k][p], k, p)
            if key is None or kk < key:
                best, key = code, kk
    if best is not None:
        return best
    for code in acts:
        if code != inst.noop:
            return code
    return inst.noop


def baseline_sjf(env):
    """Shortest ready kernel first, on its fastest idle processor."""
    return run_episode(env, sjf_choice)


def oracle_schedule(bundle, max_kernels=6, max_procs=4, max_expansions=10_000_000,
                    backend=None):
    """Minimum-makespan schedule by exhaustive search of the decision tree.

    Returns ``(makespan, actions)``; among optima the lexicographically
    smallest action-code sequence is returned.
    """
    inst, _ = bundle.instance()
    if inst.K > max_kernels or inst.P > max_procs:
        raise TooLarge("oracle limited to %d kernels and %d processors" % (max_kernels, max_procs))
    kern = core.get_backend(backend) if backend else core.backend
    return kern.oracle_search(inst, max_expansions)


def replay(env, actions):
    env.reset()
    for a in actions:
        env.step(a)
    return env.makespan


# ----------------------------------------------------- random instances

def random_bundle(seed, n_kernels=4, n_procs=None, fpga=False, edge_prob=0.35):
    """Small heterogeneous instance with its own synthetic kernel profiles.

    Processors are drawn from two SMT siblings, a second core and a GPU (and
    optionally an FPGA); every kernel runs on a CPU, and each kernel is either
    accelerator-friendly or accelerator-hostile.
    """
    rng = np.random.default_rng(seed)
    if n_procs is None:
        n_procs = int(rng.integers(2, 4))
    pool = [("t0", "cpu", "core0"), ("gpu0", "gpu", None), ("t1", "cpu", "core0"),
            ("t2", "cpu", "core1")]
    if fpga:
        pool.append(("fpga0", "fpga", None))
    chosen = pool[:n_procs] if n_procs <= len(pool) else pool
    procs, edges, links = [], [["l3", "dram0"]], ["l3"]
    res = [{"name": "mem_bw", "class": "memory", "nodes": ["dram0"]}]
    cores = sorted({c for _, _, c in chosen if c})
    for c in cores:
        links.append(c)
        edges.append([c, "l3"])
        res.append({"name": c, "class": "core", "nodes": [c]})
    accel = [n for n, kind, _ in chosen if kind != "cpu"]
    if accel:
        links.append("pcie0")
        edges.append(["pcie0", "l3"])
        res.append({"name": "pcie0", "class": "pcie", "nodes": ["pcie0"]})
    for name, kind, c in chosen:
        if kind == "cpu":
            procs.append({"name": name, "kind": "cpu", "smt_group": int(c[-1])})
            edges.append([name, c])
        else:
            procs.append({"name": name, "kind": kind})
            edges.append([name, "pcie0"])
            res.append({"name": name, "class": kind, "nodes": [name]})
    topo = load_topology({"name": "random-%d" % seed, "processors": procs, "memories": ["dram0"],
                          "links": links, "edges": edges, "resources": res})
    kernels = []
    for i in range(n_kernels):
        cpu = float(np.round(rng.uniform(1.0, 10.0), 2))
        rt = {"cpu": cpu}
        dem = {"cpu": {"core": float(np.round(rng.uniform(0.5, 0.95), 2)),
                       "memory": float(np.round(rng.uniform(0.1, 0.6), 2))}}
        if rng.random() < 0.75:
            friendly = rng.random() < 0.6
            factor = rng.uniform(0.08, 0.3) if friendly else rng.uniform(1.3, 2.5)
            for kind in ("gpu", "fpga"):
                rt[kind] = float(np.round(cpu * factor, 2))
                dem[kind] = {kind: 0.9, "pcie": float(np.round(rng.uniform(0.2, 0.7), 2)),
                             "memory": float(np.round(rng.uniform(0.1, 0.5), 2))}
        kernels.append({"name": "k%d" % i, "runtime": rt, "demand": dem})
    profiles = load_profiles({"kernels": kernels})
    dag_edges = [(a, b) for b in range(n_kernels) for a in range(b) if rng.random() < edge_prob]
    dfg = DataFlowGraph(["k%d" % i for i in range(n_kernels)], dag_edges, name="random")
    return Bundle(topo, profiles, [dfg], name="random-%d" % seed)


def serial_runtime(bundle):
    """Sum over kernels of the best isolated runtime (a reward scale)."""
    total = 0.0
    for g in bundle.workloads:
        for name in g.kernels:
            prof = bundle.profiles[name]
            total += min(prof.runtime.get(p.kind, INF) for p in bundle.topology.processors)
    return total


def wide_bundle(seed, width=None, sockets=4, cores=4, smt=2, gpus=4):
    """Fan-out workload: a split, ``width`` parallel kernels (16-24 by default), a merge.

    Runs on a multi-socket SMP machine with the shipped kernel profiles, so a
    single decision point offers at least ``width`` ready kernels.
    """
    rng = np.random.default_rng(seed)
    width = int(rng.integers(16, 25)) if width is None else width
    prof = shipped_profiles()
    names = sorted(prof)
    ks = ["split"] + [names[int(rng.integers(len(names)))] for _ in range(width)] + ["merge"]
    edges = [(0, i) for i in range(1, width + 1)] + [(i, width + 1) for i in range(1, width + 1)]
    return Bundle(smp_topology(sockets, cores, smt, gpus), prof, [DataFlowGraph(ks, edges, name="fan-out")],
                  name="wide-%d" % seed)
