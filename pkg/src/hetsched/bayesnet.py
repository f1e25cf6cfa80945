"""Discrete Bayesian networks with softmax CPDs.

Nodes are identified by dense integer ids. Conditional nodes hold a logit
table of shape ``(n_parent_configs, card)``; parent configurations are
encoded mixed-radix over the parents in declaration order (first parent most
significant). Deterministic nodes apply an invertible affine map to a single
parent and share its value index.

Assignments map node id to a value *index* into the node's domain; use
:meth:`BayesNet.assignment` to build one from names and domain values.
"""
from __future__ import annotations

import itertools
import json
import math
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import core
from .errors import (CycleDetected, EmptyDomain, TooLarge, UnknownNode,
                     UnknownParent, ZeroEvidence)

MAX_JOINT_STATES = 10_000_000


def softmax(logits, axis=-1):
    z = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


@dataclass
class ConditionalNode:
    id: int
    name: str
    parents: tuple
    domain: tuple
    logits: np.ndarray
    trainable: bool = True

    @property
    def card(self):
        return len(self.domain)

    def probs(self):
        return softmax(self.logits, axis=1)

    def f(self, x, y_cfg):
        """Pr(X = x | parents = configuration index ``y_cfg``)."""
        return self.probs()[y_cfg, x]

    def dprob_dlogits(self, x, y_cfg):
        """Gradient of ``f(x, y_cfg)`` w.r.t. the logit row ``y_cfg``."""
        p = softmax(self.logits[y_cfg])
        g = -p[x] * p
        g[x] += p[x]
        return g


@dataclass
class DeterministicNode:
    """``Y = a * X + b`` for a single parent ``X`` (``a != 0``)."""

    id: int
    name: str
    parent: int
    a: float
    b: float
    domain: tuple = ()

    @property
    def parents(self):
        return (self.parent,)

    @property
    def card(self):
        return len(self.domain)

    def forward(self, x):
        return self.a * x + self.b

    def inverse(self, y):
        return (y - self.b) / self.a

    def inverse_jacobian_logdet(self, y):
        # |d F^-1 / dy| is constant for an affine map
        return -math.log(abs(self.a))

    def density(self, y, parent_density):
        """Change of variables: p_Y(y) = p_X(F^-1(y)) |DF^-1(y)|."""
        return parent_density(self.inverse(y)) * math.exp(self.inverse_jacobian_logdet(y))


@dataclass
class SampleBatch:
    values: np.ndarray          # (S, V) value indices
    seed: int
    clamp: dict = field(default_factory=dict)

    @property
    def S(self):
        return self.values.shape[0]

    def __len__(self):
        return self.values.shape[0]


class BayesNet:
    """A validated DAG of conditional and deterministic nodes."""

    def __init__(self, nodes):
        self.nodes = list(nodes)
        n = len(self.nodes)
        for i, node in enumerate(self.nodes):
            if node.id != i:
                raise ValueError("node ids must be dense and ordered")
            if node.card < 2:
                raise EmptyDomain("node %r needs at least two domain values" % node.name)
            for p in node.parents:
                if not 0 <= p < n:
                    raise UnknownParent("node %r references unknown parent %r" % (node.name, p))
        self.names = [node.name for node in self.nodes]
        self.index = {name: i for i, name in enumerate(self.names)}
        self.children = [[] for _ in range(n)]
        for node in self.nodes:
            for p in node.parents:
                self.children[p].append(node.id)
        self.topo_order = self._toposort()
        self.rank = {v: i for i, v in enumerate(self.topo_order)}
        self._anc = [self._closure(v, up=True) for v in range(n)]
        self._desc = [self._closure(v, up=False) for v in range(n)]
        self._layout()

    # ---- structure
    def _toposort(self):
        n = len(self.nodes)
        indeg = [len(node.parents) for node in self.nodes]
        queue = deque(i for i in range(n) if indeg[i] == 0)
        order = []
        while queue:
            v = queue.popleft()
            order.append(v)
            for c in self.children[v]:
                indeg[c] -= 1
                if indeg[c] == 0:
                    queue.append(c)
        if len(order) != n:
            cyc = [self.names[i] for i in range(n) if indeg[i] > 0]
            raise CycleDetected("cycle among nodes %s" % cyc)
        return order

    def _closure(self, v, up):
        seen = set()
        stack = list(self.nodes[v].parents if up else self.children[v])
        while stack:
            u = stack.pop()
            if u in seen:
                continue
            seen.add(u)
            stack.extend(self.nodes[u].parents if up else self.children[u])
        return frozenset(seen)

    def _layout(self):
        """Flat parameter layout over trainable conditional nodes."""
        self.param_slices = {}
        off = 0
        for node in self.nodes:
            if isinstance(node, ConditionalNode) and node.trainable:
                size = node.logits.size
                self.param_slices[node.id] = slice(off, off + size)
                off += size
        self.n_params = off

    def __len__(self):
        return len(self.nodes)

    def __repr__(self):
        return "BayesNet(%d nodes, %d params)" % (len(self.nodes), self.n_params)

    def node(self, x):
        if isinstance(x, str):
            if x not in self.index:
                raise UnknownNode(x)
            x = self.index[x]
        if not 0 <= x < len(self.nodes):
            raise UnknownNode(x)
        return self.nodes[x]

    def id_of(self, x):
        return self.node(x).id

    def parents(self, x):
        return list(self.node(x).parents)

    def all_ancestors(self, x):
        return set(self._anc[self.id_of(x)])

    def ancestors(self, x):
        """Ancestors that are not parents (the candidate pool for decoupling sets)."""
        node = self.node(x)
        return set(self._anc[node.id]) - set(node.parents)

    def descendants(self, x):
        return set(self._desc[self.id_of(x)])

    def cards(self):
        return [node.card for node in self.nodes]

    def parent_config(self, node, values):
        """Mixed-radix parent configuration index for rows of ``values``."""
        cfg = np.zeros(values.shape[0], dtype=np.int64)
        for p in node.parents:
            cfg = cfg * self.nodes[p].card + values[:, p]
        return cfg

    def config_of(self, node, assignment):
        cfg = 0
        for p in node.parents:
            cfg = cfg * self.nodes[p].card + assignment[p]
        return cfg

    def config_values(self, node, cfg):
        """Inverse of :meth:`config_of`: parent value indices for ``cfg``."""
        out = []
        for p in reversed(node.parents):
            c = self.nodes[p].card
            out.append(cfg % c)
            cfg //= c
        return tuple(reversed(out))

    def assignment(self, mapping):
        """Translate ``{name_or_id: domain value}`` into ``{id: value index}``."""
        out = {}
        for k, val in mapping.items():
            node = self.node(k)
            if val not in node.domain:
                raise ValueError("%r not in domain of %r" % (val, node.name))
            out[node.id] = node.domain.index(val)
        return out

    # ---- parameters
    def get_params(self):
        flat = np.zeros(self.n_params)
        for v, sl in self.param_slices.items():
            flat[sl] = self.nodes[v].logits.ravel()
        return flat

    def set_params(self, flat):
        flat = np.asarray(flat, dtype=float)
        for v, sl in self.param_slices.items():
            node = self.nodes[v]
            node.logits = flat[sl].reshape(node.logits.shape).copy()

    def copy(self):
        nodes = []
        for node in self.nodes:
            if isinstance(node, ConditionalNode):
                nodes.append(ConditionalNode(node.id, node.name, node.parents, node.domain,
                                             node.logits.copy(), node.trainable))
            else:
                nodes.append(DeterministicNode(node.id, node.name, node.parent, node.a,
                                               node.b, node.domain))
        return BayesNet(nodes)

    def to_spec(self):
        out = []
        for node in self.nodes:
            if isinstance(node, ConditionalNode):
                out.append({"name": node.name,
                            "parents": [self.names[p] for p in node.parents],
                            "domain": list(node.domain),
                            "logits": node.logits.tolist()})
            else:
                out.append({"name": node.name, "parent": self.names[node.parent],
                            "map": "affine", "a": node.a, "b": node.b})
        return {"nodes": out}

    # ---- sampling tables
    def _kernel_tables(self, clamp=None, root_probs=None):
        clamp = clamp or {}
        root_probs = root_probs or {}
        V = len(self.nodes)
        kind = np.zeros(V, dtype=np.int64)
        clamp_val = np.zeros(V, dtype=np.int64)
        par_ptr = np.zeros(V + 1, dtype=np.int64)
        par_idx, par_stride, tabs = [], [], []
        tab_ptr = np.zeros(V, dtype=np.int64)
        off = 0
        for node in self.nodes:
            v = node.id
            if v in clamp:
                kind[v] = 2
                clamp_val[v] = clamp[v]
            elif isinstance(node, DeterministicNode):
                kind[v] = 1
            strides = []
            s = 1
            for p in reversed(node.parents):
                strides.append(s)
                s *= self.nodes[p].card
            par_idx.extend(node.parents)
            par_stride.extend(reversed(strides))
            par_ptr[v + 1] = len(par_idx)
            if kind[v] == 0:
                if v in root_probs:
                    probs = np.asarray(root_probs[v], dtype=float).reshape(1, -1)
                else:
                    probs = node.probs()
                cum = np.cumsum(probs, axis=1)
                cum[:, -1] = 1.0
                tab_ptr[v] = off
                tabs.append(cum.ravel())
                off += cum.size
        cum_flat = np.concatenate(tabs) if tabs else np.zeros(0)
        card = np.asarray(self.cards(), dtype=np.int64)
        return (np.asarray(self.topo_order, dtype=np.int64), kind, clamp_val, par_ptr,
                np.asarray(par_idx, dtype=np.int64), np.asarray(par_stride, dtype=np.int64),
                tab_ptr, card, cum_flat)

    # ---- JSON I/O
    @classmethod
    def from_spec(cls, spec):
        """Build from ``{"nodes": [...]}`` (see the network-file format)."""
        entries = spec["nodes"]
        names = [e["name"] for e in entries]
        if len(set(names)) != len(names):
            raise ValueError("duplicate node names")
        index = {name: i for i, name in enumerate(names)}

        def pid(name, child):
            if name not in index:
                raise UnknownParent("node %r references unknown parent %r" % (child, name))
            return index[name]

        # deterministic domains depend on their parent's domain
        resolved = {}
        by_name = {e["name"]: e for e in entries}

        def domain_of(name, stack=()):
            if name in resolved:
                return resolved[name]
            if name in stack:
                raise CycleDetected("cycle through deterministic node %r" % name)
            e = by_name[name]
            if "map" in e:
                parent = e["parent"]
                pid(parent, name)
                base = domain_of(parent, stack + (name,))
                a, b = float(e.get("a", 1.0)), float(e.get("b", 0.0))
                if a == 0:
                    raise ValueError("affine map of %r is not invertible" % name)
                dom = tuple(a * float(x) + b for x in base)
            else:
                dom = tuple(e.get("domain", ()))
            if len(dom) == 0:
                raise EmptyDomain("node %r has an empty domain" % name)
            resolved[name] = dom
            return dom

        nodes = []
        for i, e in enumerate(entries):
            dom = domain_of(e["name"])
            if "map" in e:
                if e["map"] != "affine":
                    raise ValueError("unsupported map %r" % e["map"])
                nodes.append(DeterministicNode(i, e["name"], pid(e["parent"], e["name"]),
                                               float(e.get("a", 1.0)), float(e.get("b", 0.0)), dom))
                continue
            parents = tuple(pid(p, e["name"]) for p in e.get("parents", []))
            n_cfg = 1
            for p in parents:
                n_cfg *= len(domain_of(names[p]))
            logits = e.get("logits")
            if logits is None:
                logits = np.zeros((n_cfg, len(dom)))
            logits = np.asarray(logits, dtype=float).reshape(n_cfg, len(dom))
            nodes.append(ConditionalNode(i, e["name"], parents, dom, logits,
                                         bool(e.get("trainable", True))))
        return cls(nodes)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_spec(json.load(fh))

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_spec(), fh, indent=1)


def build_network(spec):
    """Validate a network description and return a :class:`BayesNet`."""
    if isinstance(spec, BayesNet):
        return spec
    return BayesNet.from_spec(spec)


# ---------------------------------------------------------------- sampling

def _is_ancestral(net, clamp):
    return all(set(net.nodes[v].parents) <= set(clamp) for v in clamp)


def forward_sample(net, n, seed, clamp=None, root_probs=None, workers=1, backend=None):
    """Draw ``n`` ancestral samples; deterministic given ``seed``.

    ``clamp`` fixes an ancestrally closed set of nodes (exact conditioning).
    ``root_probs`` replaces the distribution of selected root nodes.
    With ``workers > 1`` each chunk draws from its own stream spawned from
    ``seed``; ``workers == 1`` is the serial deterministic mode.
    """
    if n <= 0:
        raise ValueError("n must be positive")
    clamp = dict(clamp or {})
    if clamp and not _is_ancestral(net, clamp):
        raise ValueError("clamped nodes must form an ancestrally closed set")
    for v in (root_probs or {}):
        if net.nodes[v].parents:
            raise ValueError("root_probs given for non-root node %r" % net.names[v])
    kern = core.get_backend(backend) if backend else core.backend
    tables = net._kernel_tables(clamp, root_probs)
    V = len(net.nodes)

    def draw(rng, m):
        u = rng.random((m, V))
        vals = np.zeros((m, V), dtype=np.int64)
        kern.sample_into(vals, u, *tables)
        return vals

    if workers <= 1:
        values = draw(np.random.default_rng(seed), n)
    else:
        children = np.random.SeedSequence(seed).spawn(workers)
        sizes = [n // workers + (1 if i < n % workers else 0) for i in range(workers)]
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(lambda a: draw(np.random.default_rng(a[0]), a[1]),
                                  zip(children, sizes)))
        values = np.concatenate([p for p in parts if len(p)])
    return SampleBatch(values, seed, clamp)


def match_mask(batch, query):
    values = batch.values if isinstance(batch, SampleBatch) else batch
    mask = np.ones(values.shape[0], dtype=bool)
    for v, x in query.items():
        mask &= values[:, v] == x
    return mask


def count(batch, query):
    """Number of samples consistent with the partial assignment ``query``."""
    if not query:
        return len(batch)
    return int(match_mask(batch, query).sum())


def likelihood_weighting(net, evidence, n, seed, root_probs=None):
    """Likelihood-weighted samples: evidence clamped, weights from its CPDs.

    Returns ``(batch, weights)``.
    """
    evidence = dict(evidence or {})
    batch = _clamped_any(net, evidence, n, seed, root_probs)
    w = np.ones(n)
    probs_cache = {}
    for v, x in evidence.items():
        node = net.nodes[v]
        if isinstance(node, DeterministicNode):
            # consistency with the parent's value
            w *= (batch.values[:, node.parent] == x)
            continue
        if v in (root_probs or {}):
            w *= np.asarray(root_probs[v])[x]
            continue
        if v not in probs_cache:
            probs_cache[v] = node.probs()
        cfg = net.parent_config(node, batch.values)
        w *= probs_cache[v][cfg, x]
    return batch, w


def _clamped_any(net, evidence, n, seed, root_probs):
    # clamp arbitrary evidence: sample everything, overriding evidence nodes
    V = len(net.nodes)
    kern = core.backend
    order = np.asarray(net.topo_order, dtype=np.int64)
    tables = list(net._kernel_tables({}, root_probs))
    kind = tables[1].copy()
    clamp_val = tables[2].copy()
    for v, x in evidence.items():
        kind[v] = 2
        clamp_val[v] = x
    tables[1], tables[2] = kind, clamp_val
    rng = np.random.default_rng(seed)
    u = rng.random((n, V))
    vals = np.zeros((n, V), dtype=np.int64)
    kern.sample_into(vals, u, order, *tables[1:])
    return SampleBatch(vals, seed, {})


# ------------------------------------------------------------ enumeration

def joint_table(net, max_states=MAX_JOINT_STATES):
    """Enumerate all joint states; returns ``(states, probs)``."""
    free = [node.id for node in net.nodes if isinstance(node, ConditionalNode)]
    size = 1
    for v in free:
        size *= net.nodes[v].card
        if size > max_states:
            raise TooLarge("joint state space exceeds %d" % max_states)
    V = len(net.nodes)
    grids = np.indices([net.nodes[v].card for v in free]).reshape(len(free), -1).T
    states = np.zeros((grids.shape[0], V), dtype=np.int64)
    states[:, free] = grids
    for v in net.topo_order:
        node = net.nodes[v]
        if isinstance(node, DeterministicNode):
            states[:, v] = states[:, node.parent]
    logp = np.zeros(states.shape[0])
    for v in free:
        node = net.nodes[v]
        cfg = net.parent_config(node, states)
        with np.errstate(divide="ignore"):
            logp += np.log(node.probs()[cfg, states[:, v]])
    return states, np.exp(logp)


def exact_marginal(net, query, evidence=None, table=None):
    """Exact Pr(query | evidence) by full enumeration."""
    states, probs = table if table is not None else joint_table(net)
    ev = match_mask(states, evidence or {})
    pe = probs[ev].sum()
    if pe <= 0.0:
        raise ZeroEvidence("evidence has probability zero")
    both = ev & match_mask(states, query)
    return float(probs[both].sum() / pe)


# -------------------------------------------------------- d-separation

def ancestors(net, x):
    return net.ancestors(x)


def parents(net, x):
    return net.parents(x)


def reachable(net, source, given):
    """Nodes reachable from ``source`` by an active trail given ``given``."""
    given = set(given)
    anc_given = set(given)
    for z in given:
        anc_given |= net._anc[z]
    visited = set()
    out = set()
    stack = [(source, "up")]
    while stack:
        y, d = stack.pop()
        if (y, d) in visited:
            continue
        visited.add((y, d))
        if y not in given:
            out.add(y)
        if d == "up" and y not in given:
            for p in net.nodes[y].parents:
                stack.append((p, "up"))
            for c in net.children[y]:
                stack.append((c, "down"))
        elif d == "down":
            if y not in given:
                for c in net.children[y]:
                    stack.append((c, "down"))
            if y in anc_given:
                for p in net.nodes[y].parents:
                    stack.append((p, "up"))
    out.discard(source)
    return out


def conditionally_independent(net, i, j, given=()):
    """d-separation verdict for ``i`` and ``j`` given ``given`` (Bayes ball)."""
    i, j = net.id_of(i), net.id_of(j)
    given = {net.id_of(z) for z in given}
    if i == j:
        raise ValueError("i and j must differ")
    if i in given or j in given:
        raise ValueError("conditioning set must exclude i and j")
    return j not in reachable(net, i, given)


def random_dag(rng, n_nodes, edge_prob=0.4, max_parents=3, card_range=(2, 2),
               logit_scale=1.0):
    """A random network with a random topological labelling."""
    perm = rng.permutation(n_nodes)
    names = ["n%d" % i for i in range(n_nodes)]
    entries = []
    cards = [int(rng.integers(card_range[0], card_range[1] + 1)) for _ in range(n_nodes)]
    for pos in range(n_nodes):
        v = int(perm[pos])
        cand = [int(perm[q]) for q in range(pos) if rng.random() < edge_prob]
        rng.shuffle(cand)
        par = sorted(cand[:max_parents])
        n_cfg = int(np.prod([cards[p] for p in par])) if par else 1
        entries.append((v, {"name": names[v], "parents": [names[p] for p in par],
                            "domain": list(range(cards[v])),
                            "logits": (rng.normal(size=(n_cfg, cards[v])) * logit_scale).tolist()}))
    entries.sort(key=lambda t: t[0])
    return BayesNet.from_spec({"nodes": [e for _, e in entries]})


def iter_assignments(net, nodes):
    """All value-index tuples over ``nodes``."""
    return itertools.product(*[range(net.nodes[v].card) for v in nodes])
