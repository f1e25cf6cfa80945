"""Sampling-based gradients of conditional probabilities in a Bayesian network.

The estimator differentiates ``Pr(X = x | evidence)`` with respect to every
CPD logit using only counts over one shared sample batch:

* the node's own parameters are weighted by the empirical parent posterior;
* every other parameter reaches ``X`` through its parents, so the gradient of
  the parent posterior is expanded recursively. Parents that are dependent
  given the evidence are decoupled by conditioning on an extra node set ``N``
  (found with Bayes-ball queries) so that the posterior factorizes.

Where the local decomposition does not apply (evidence below the target in
the graph, or parents that no conditioning set can separate) the quotient
``Pr(z, e) / Pr(e)`` is differentiated instead, with each joint expanded by
the chain rule in topological order.

``exact_grad_oracle`` differentiates the enumerated joint in closed form and
is the reference the estimator is tested against.
"""
from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field

import numpy as np

from .bayesnet import (ConditionalNode, DeterministicNode, SampleBatch,
                       conditionally_independent, forward_sample, joint_table,
                       match_mask)
from .errors import (EstimatorStarved, NoDecouplingSet, RecursionDepthExceeded,
                     ZeroEvidence)

MIN_COUNT = 25


@dataclass
class GradQuery:
    target: int
    value: int
    evidence: dict = field(default_factory=dict)
    S: int = 100_000

    def __post_init__(self):
        if self.S < 100:
            raise ValueError("sample budget must be at least 100")
        if self.target in self.evidence:
            raise ValueError("target may not be part of the evidence")


@dataclass
class DecouplingSet:
    nodes: frozenset

    def __iter__(self):
        return iter(sorted(self.nodes))

    def __len__(self):
        return len(self.nodes)


@dataclass
class GradResult:
    """Gradients stacked per query, in the network's flat parameter layout."""

    grad: np.ndarray                 # (n_queries, n_params)
    param_slices: dict
    diagnostics: list

    def block(self, q, node):
        return self.grad[q, self.param_slices[node]]

    def diagnostics_json(self):
        return json.dumps(self.diagnostics, sort_keys=True)


# ------------------------------------------------------------- helpers

def _cpd(net, v):
    """Probability table ``(n_cfg, card)``; deterministic nodes are identity maps."""
    node = net.nodes[v]
    if isinstance(node, DeterministicNode):
        return np.eye(node.card)
    return node.probs()


def _dprob_block(probs, w, x):
    """``sum_cfg w[cfg] * d p[cfg, x] / d logits[cfg, :]`` as a full block."""
    px = probs[:, x]
    block = -(w * px)[:, None] * probs
    block[:, x] += w * px
    return block


def _add(acc, g, a=1.0):
    if a == 0.0:
        return
    for v, b in g.items():
        if v in acc:
            acc[v] = acc[v] + a * b
        else:
            acc[v] = a * b


def _key(ev):
    return tuple(sorted(ev.items()))


def _flatten(net, g):
    flat = np.zeros(net.n_params)
    for v, b in g.items():
        sl = net.param_slices.get(v)
        if sl is not None:
            flat[sl] += b.ravel()
    return flat


# ----------------------------------------------------- decoupling sets

def _connected_pairs(net, nodes, given):
    out = 0
    for i, j in itertools.combinations(nodes, 2):
        if not conditionally_independent(net, i, j, given):
            out += 1
    return out


def _search_decoupling(net, members, given, candidates, exhaustive_limit=14):
    members = list(members)
    given = set(given)
    if _connected_pairs(net, members, given) == 0:
        return frozenset()
    # adjacent members can never be separated
    for i, j in itertools.combinations(members, 2):
        if i in net.nodes[j].parents or j in net.nodes[i].parents:
            return None
    cands = sorted(set(candidates) - given - set(members), key=lambda v: net.rank[v])

    def prune(chosen):
        for v in sorted(chosen, key=lambda v: -net.rank[v]):
            trial = chosen - {v}
            if _connected_pairs(net, members, given | trial) == 0:
                chosen = trial
        return chosen

    chosen = set()
    bad = _connected_pairs(net, members, given)
    for v in cands:
        b = _connected_pairs(net, members, given | chosen | {v})
        if b < bad:
            chosen.add(v)
            bad = b
            if bad == 0:
                break
    if bad == 0:
        return frozenset(prune(chosen))
    if _connected_pairs(net, members, given | set(cands)) == 0:
        return frozenset(prune(set(cands)))
    if len(cands) <= exhaustive_limit:
        for size in range(1, len(cands) + 1):
            for combo in itertools.combinations(cands, size):
                if _connected_pairs(net, members, given | set(combo)) == 0:
                    return frozenset(combo)
    return None


def find_decoupling_set(net, x, given=None, candidates=None):
    """A node set ``N`` making the parents of ``x`` pairwise d-separated.

    Separation is checked given ``given`` (default: the non-parent
    ancestors of ``x``) together with ``N``. Candidates default to every node
    that is neither ``x``, a parent, a descendant of ``x`` nor already given.
    Candidates are added greedily in topological order when they reduce the
    number of d-connected parent pairs, then pruned in reverse order.
    """
    x = net.id_of(x)
    pa = net.nodes[x].parents
    if len(pa) <= 1:
        return DecouplingSet(frozenset())
    given = net.ancestors(x) if given is None else {net.id_of(g) for g in given}
    if candidates is None:
        candidates = set(range(len(net))) - {x} - set(pa) - net.descendants(x) - set(given)
    found = _search_decoupling(net, pa, given, candidates)
    if found is None:
        raise NoDecouplingSet("parents of %r cannot be separated" % net.names[x])
    return DecouplingSet(found)


def is_decoupling_set(net, x, n_nodes, given=None):
    x = net.id_of(x)
    given = net.ancestors(x) if given is None else set(given)
    return _connected_pairs(net, net.nodes[x].parents, set(given) | set(n_nodes)) == 0


# ----------------------------------------------------------- estimator

class _Estimator:
    """Shared state for one gradient computation over one sample batch."""

    def __init__(self, net, batch, base=None, weighting="unit", min_count=MIN_COUNT,
                 max_depth=None):
        if weighting not in ("unit", "frequency"):
            raise ValueError("weighting must be 'unit' or 'frequency'")
        self.net = net
        self.values = batch.values if isinstance(batch, SampleBatch) else np.asarray(batch)
        self.S = self.values.shape[0]
        self.base = dict(base or {})
        self.weighting = weighting
        self.min_count = min_count
        self.max_depth = len(net) if max_depth is None else max_depth
        self.probs = {v: _cpd(net, v) for v in range(len(net))}
        self._masks = {}
        self._memo = {}
        self.counts = {}
        self.starved = []
        self.calls = 0

    # ---- counting
    def mask(self, ev):
        k = _key(ev)
        m = self._masks.get(k)
        if m is None:
            if not ev:
                m = np.ones(self.S, dtype=bool)
            else:
                items = sorted(ev.items())
                parent = self.mask(dict(items[:-1]))
                v, x = items[-1]
                m = parent & (self.values[:, v] == x)
            self._masks[k] = m
        return m

    def n(self, ev):
        return int(self.mask(ev).sum())

    def config_counts(self, nodes, ev):
        """Counts of joint configurations of ``nodes`` among rows matching ``ev``."""
        rows = self.values[self.mask(ev)]
        code = np.zeros(rows.shape[0], dtype=np.int64)
        size = 1
        for v in nodes:
            c = self.net.nodes[v].card
            code = code * c + rows[:, v]
            size *= c
        return np.bincount(code, minlength=size)

    def decode(self, nodes, code):
        out = []
        for v in reversed(nodes):
            c = self.net.nodes[v].card
            out.append(code % c)
            code //= c
        return tuple(reversed(out))

    def _starve(self, what, ev, count, depth):
        if depth == 0:
            raise EstimatorStarved("only %d samples match the evidence for %s" % (count, what),
                                   count)
        self.starved.append({"term": what, "evidence": {str(k): int(v) for k, v in ev.items()},
                             "count": count})

    def _enter(self, depth):
        self.calls += 1
        if depth > self.max_depth:
            raise RecursionDepthExceeded("gradient recursion deeper than %d" % self.max_depth)

    # ---- single-node target, evidence among its non-descendants
    def own(self, x, xv, ev, depth=0):
        net = self.net
        node = net.nodes[x]
        if not isinstance(node, ConditionalNode) or not node.trainable:
            return {}
        n_ev = self.n(ev)
        if n_ev < self.min_count:
            self._starve("own:%s" % net.names[x], ev, n_ev, depth)
            return {}
        counts = self._parent_counts(x, ev)
        return {x: _dprob_block(self.probs[x], counts / n_ev, xv)}

    def _parent_counts(self, x, ev):
        pa = self.net.nodes[x].parents
        rows = self.values[self.mask(ev)]
        n_cfg = self.probs[x].shape[0]
        if not pa:
            return np.array([float(rows.shape[0])])
        cfg = self.net.parent_config(self.net.nodes[x], rows) if isinstance(
            self.net.nodes[x], ConditionalNode) else rows[:, pa[0]]
        return np.bincount(cfg, minlength=n_cfg).astype(float)

    def other(self, x, xv, ev, depth=0):
        net = self.net
        node = net.nodes[x]
        pa = list(node.parents)
        free = [p for p in pa if p not in ev]
        if not free:
            return {}
        n_ev = self.n(ev)
        if n_ev < self.min_count:
            self._starve("other:%s" % net.names[x], ev, n_ev, depth)
            return {}
        counts = self._parent_counts(x, ev)
        if self.weighting == "frequency":
            all_counts = self._parent_counts(x, {})
        acc = {}
        probs = self.probs[x]
        for cfg in np.nonzero(counts)[0]:
            vals = net.config_values(node, int(cfg)) if isinstance(node, ConditionalNode) else (int(cfg),)
            yfree = {p: int(vals[pa.index(p)]) for p in free}
            g = self.grad_set(yfree, ev, depth + 1)
            w = probs[cfg, xv]
            if self.weighting == "frequency":
                w *= all_counts[cfg] / self.S
            _add(acc, g, w)
        return acc

    def grad_single(self, x, xv, ev, depth=0):
        """Gradient of Pr(x | ev) where ``ev`` holds no descendant of ``x``."""
        key = ("single", x, xv, _key(ev))
        hit = self._memo.get(key)
        if hit is not None:
            return hit
        self._enter(depth)
        n_ev = self.n(ev)
        self.counts[str(key)] = n_ev
        g = self.own(x, xv, ev, depth)
        _add(g, self.other(x, xv, ev, depth))
        self._memo[key] = g
        return g

    # ---- set targets
    def grad_set(self, z, ev, depth=0):
        """Gradient of Pr(Z = z | ev) for an assignment ``z``."""
        net = self.net
        z = dict(z)
        for v in list(z):
            if v in ev:
                if ev[v] != z[v]:
                    return {}
                del z[v]
        if not z:
            return {}
        key = ("set", _key(z), _key(ev))
        hit = self._memo.get(key)
        if hit is not None:
            return hit
        self._enter(depth)
        nodes = sorted(z, key=lambda v: net.rank[v])
        if len(nodes) == 1:
            v = nodes[0]
            if not (set(ev) & net._desc[v]):
                g = self.grad_single(v, z[v], ev, depth)
            else:
                g = self.grad_ratio(z, ev, depth)
            self._memo[key] = g
            return g
        N = self.decoupling(nodes, ev)
        if N is None:
            g = self.grad_ratio(z, ev, depth)
        else:
            g = self.grad_factored(z, nodes, sorted(N, key=lambda v: net.rank[v]), ev, depth)
        self._memo[key] = g
        return g

    def decoupling(self, nodes, ev):
        net = self.net
        cands = set()
        for v in nodes:
            cands |= net._anc[v]
        for v in nodes:
            cands -= net._desc[v]
        cands -= set(nodes)
        cands -= set(ev)
        return _search_decoupling(net, nodes, set(ev), cands)

    def factor(self, z, nodes, N, ev):
        """Decoupled estimate of Pr(Z = z | ev) and its per-configuration terms."""
        n_ev = self.n(ev)
        if n_ev == 0:
            return 0.0, []
        terms = []
        total = 0.0
        if N:
            ncounts = self.config_counts(N, ev)
            codes = np.nonzero(ncounts)[0]
        else:
            codes = [None]
        for code in codes:
            if code is None:
                nev, pn = dict(ev), 1.0
            else:
                nvals = self.decode(N, int(code))
                nev = dict(ev)
                nev.update({v: int(a) for v, a in zip(N, nvals)})
                pn = ncounts[code] / n_ev
            cnt = self.n(nev)
            cond = [self.n({**nev, v: z[v]}) / cnt for v in nodes]
            total += pn * float(np.prod(cond))
            terms.append((nev, pn, cond, cnt))
        return total, terms

    def grad_factored(self, z, nodes, N, ev, depth):
        acc = {}
        n_ev = self.n(ev)
        if n_ev < self.min_count:
            self._starve("set:%s" % [self.net.names[v] for v in nodes], ev, n_ev, depth)
            return acc
        _, terms = self.factor(z, nodes, N, ev)
        for nev, pn, cond, cnt in terms:
            if cnt < self.min_count:
                self._starve("set-cond", nev, cnt, depth + 1)
                continue
            if N:
                # the decoupling set's own posterior also depends on the parameters
                gN = self.grad_set({v: nev[v] for v in N}, ev, depth + 1)
                _add(acc, gN, float(np.prod(cond)))
            for li, v in enumerate(nodes):
                rest = float(np.prod([c for j, c in enumerate(cond) if j != li]))
                if rest == 0.0:
                    continue
                gl = self.grad_set({v: z[v]}, nev, depth + 1)
                _add(acc, gl, pn * rest)
        return acc

    def joint(self, w, depth):
        """Gradient and estimate of Pr(W = w) (relative to the batch base)."""
        net = self.net
        order = sorted(w, key=lambda v: net.rank[v])
        acc = {}
        prefix = dict(self.base)
        factors = []
        for v in order:
            if v in prefix:
                if prefix[v] != w[v]:
                    return {}, 0.0
                continue
            n_pre = self.n(prefix)
            p = self.n({**prefix, v: w[v]}) / n_pre if n_pre else 0.0
            factors.append((v, dict(prefix), p))
            prefix[v] = w[v]
        for i, (v, pre, p) in enumerate(factors):
            rest = float(np.prod([f[2] for j, f in enumerate(factors) if j != i]))
            if rest == 0.0:
                continue
            _add(acc, self.grad_single(v, w[v], pre, depth + 1), rest)
        total = float(np.prod([f[2] for f in factors])) if factors else 1.0
        return acc, total

    def grad_ratio(self, z, ev, depth):
        """Quotient rule on Pr(z, ev) / Pr(ev)."""
        n_ev = self.n(ev)
        if n_ev < self.min_count:
            self._starve("ratio:%s" % sorted(z), ev, n_ev, depth)
            return {}
        g_joint, p_joint = self.joint({**ev, **z}, depth)
        g_ev, p_ev = self.joint(dict(ev), depth)
        if p_ev == 0.0:
            return {}
        p_cond = p_joint / p_ev
        acc = {}
        _add(acc, g_joint, 1.0 / p_ev)
        _add(acc, g_ev, -p_cond / p_ev)
        return acc

    # ---- entry point
    def query(self, x, xv, ev):
        ev = {**self.base, **ev}
        if x in ev:
            return {}
        n_ev = self.n(ev)
        if n_ev < self.min_count:
            raise EstimatorStarved("only %d samples match the evidence" % n_ev, n_ev)
        return self.grad_set({x: xv}, ev, 0)

    def belief(self, x, xv, ev):
        """Estimate of Pr(x | ev) consistent with the gradient decomposition."""
        ev = {**self.base, **ev}
        n_ev = self.n(ev)
        if n_ev == 0:
            raise ZeroEvidence("no samples match the evidence")
        if set(ev) & self.net._desc[x]:
            return self.n({**ev, x: xv}) / n_ev
        counts = self._parent_counts(x, ev)
        return float(counts @ self.probs[x][:, xv]) / n_ev


def _batch_for(net, q, batch, seed, clamp=None):
    if batch is not None:
        return batch
    return forward_sample(net, q.S, seed, clamp=clamp)


def grad_own_param(net, q, batch=None, seed=0):
    """Gradient block for the target's own logits (shape of its logit table)."""
    est = _Estimator(net, _batch_for(net, q, batch, seed))
    ev = dict(q.evidence)
    n_ev = est.n(ev)
    if n_ev < est.min_count:
        raise EstimatorStarved("only %d samples match the evidence" % n_ev, n_ev)
    g = est.own(q.target, q.value, ev, 0)
    node = net.nodes[q.target]
    if q.target in g:
        return g[q.target]
    return np.zeros_like(node.logits) if isinstance(node, ConditionalNode) else np.zeros(0)


def grad_other_params(net, q, batch=None, seed=0, weighting="unit"):
    """Flat gradient over every parameter except the target's own block.

    ``weighting="frequency"`` multiplies each parent configuration's term by its
    unconditional batch frequency; ``"unit"`` (default) sums the terms
    unweighted, which is what the exact decomposition requires.
    """
    est = _Estimator(net, _batch_for(net, q, batch, seed), weighting=weighting)
    ev = dict(q.evidence)
    n_ev = est.n(ev)
    if n_ev < est.min_count:
        raise EstimatorStarved("only %d samples match the evidence" % n_ev, n_ev)
    if set(ev) & net._desc[q.target]:
        g = est.grad_set({q.target: q.value}, ev)
        g.pop(q.target, None)
    else:
        g = est.other(q.target, q.value, ev, 0)
    return _flatten(net, g)


def factor_parent_posterior(net, x, y, evidence, N, batch):
    """Decoupled estimate of Pr(parents(x) = y | evidence).

    ``y`` lists values for the parents in declaration order; ``N`` is a
    decoupling set. Raises :class:`EstimatorStarved` when no sample matches.
    """
    est = _Estimator(net, batch)
    pa = list(net.nodes[x].parents)
    z = {p: int(v) for p, v in zip(pa, y)}
    ev = dict(evidence)
    n_ev = est.n(ev)
    if n_ev == 0:
        raise EstimatorStarved("no samples match the evidence", 0)
    for v in list(z):
        if v in ev:
            if ev[v] != z[v]:
                return 0.0
            del z[v]
    if not z:
        return 1.0
    nodes = sorted(z, key=lambda v: net.rank[v])
    N = sorted(set(N) - set(ev), key=lambda v: net.rank[v])
    total, _ = est.factor(z, nodes, N, ev)
    return total


def grad_parent_posterior(net, x, y, evidence, N, batch, weighting="unit"):
    """Flat gradient of Pr(parents(x) = y | evidence) using decoupling set ``N``."""
    est = _Estimator(net, batch, weighting=weighting)
    pa = list(net.nodes[x].parents)
    z = {p: int(v) for p, v in zip(pa, y)}
    ev = dict(evidence)
    n_ev = est.n(ev)
    if n_ev < est.min_count:
        raise EstimatorStarved("only %d samples match the evidence" % n_ev, n_ev)
    for v in list(z):
        if v in ev:
            if ev[v] != z[v]:
                return np.zeros(net.n_params)
            del z[v]
    if not z:
        return np.zeros(net.n_params)
    nodes = sorted(z, key=lambda v: net.rank[v])
    if len(nodes) == 1:
        return _flatten(net, est.grad_set(z, ev))
    N = sorted(set(N) - set(ev), key=lambda v: net.rank[v])
    return _flatten(net, est.grad_factored(z, nodes, N, ev, 0))


def grad_query(net, q, batch=None, seed=0, weighting="unit"):
    """Full flat gradient of Pr(q.target = q.value | q.evidence)."""
    est = _Estimator(net, _batch_for(net, q, batch, seed), weighting=weighting)
    return _flatten(net, est.query(q.target, q.value, dict(q.evidence)))


def grad_belief(net, queries, batch=None, seed=0, clamp=None, weighting="unit",
                on_starved="raise"):
    """Gradients for a list of queries over one shared sample batch.

    ``clamp`` fixes an ancestrally closed node set while sampling; it is
    merged into every query's evidence. With ``on_starved="zero"`` a starved
    query yields a zero row and a diagnostics entry instead of raising.
    """
    if not queries:
        raise ValueError("queries must be nonempty")
    if batch is None:
        S = max(q.S for q in queries)
        batch = forward_sample(net, S, seed, clamp=clamp)
    est = _Estimator(net, batch, base=clamp, weighting=weighting)
    grad = np.zeros((len(queries), net.n_params))
    diags = []
    for i, q in enumerate(queries):
        d = {"target": net.names[q.target], "value": int(q.value),
             "evidence_count": est.n({**est.base, **q.evidence})}
        before = len(est.starved)
        try:
            grad[i] = _flatten(net, est.query(q.target, q.value, dict(q.evidence)))
        except EstimatorStarved as exc:
            if on_starved == "raise":
                raise
            d["starved"] = exc.count
        d["dropped_terms"] = len(est.starved) - before
        diags.append(d)
    return GradResult(grad, dict(net.param_slices), diags)


def belief_and_grad(net, nodes, centers, batch, clamp=None, evidence=None,
                    with_grad=True):
    """Posterior means of ``nodes`` (value index -> ``centers``) and their gradients.

    Returns ``(means, jac)`` with ``jac`` of shape ``(len(nodes), n_params)``
    (``None`` when ``with_grad`` is false). Starved terms contribute zero.
    """
    est = _Estimator(net, batch, base=clamp)
    ev = dict(evidence or {})
    means = np.zeros(len(nodes))
    jac = np.zeros((len(nodes), net.n_params)) if with_grad else None
    for i, v in enumerate(nodes):
        c = np.asarray(centers[i] if np.ndim(centers[0]) else centers, dtype=float)
        full = {**est.base, **ev}
        if v in full:
            means[i] = c[full[v]]
            continue
        for xv in range(net.nodes[v].card):
            p = est.belief(v, xv, ev)
            means[i] += c[xv] * p
            if with_grad:
                try:
                    g = est.query(v, xv, ev)
                except EstimatorStarved:
                    continue
                jac[i] += c[xv] * _flatten(net, g)
    return means, jac


# ---------------------------------------------------------------- oracle

def exact_probability(net, q, table=None):
    states, probs = table if table is not None else joint_table(net)
    ev = match_mask(states, q.evidence)
    pe = probs[ev].sum()
    if pe <= 0:
        raise ZeroEvidence("evidence has probability zero")
    return float(probs[ev & (states[:, q.target] == q.value)].sum() / pe)


def exact_grad_oracle(net, q, table=None):
    """Exact flat gradient of Pr(q.target = q.value | q.evidence) by enumeration."""
    states, probs = table if table is not None else joint_table(net)
    ev = match_mask(states, q.evidence)
    num = ev & (states[:, q.target] == q.value)
    A = probs[num].sum()
    B = probs[ev].sum()
    if B <= 0:
        raise ZeroEvidence("evidence has probability zero")
    out = np.zeros(net.n_params)
    for v, sl in net.param_slices.items():
        node = net.nodes[v]
        p = node.probs()
        n_cfg, card = p.shape
        cfg = net.parent_config(node, states)

        def dsum(mask):
            w = probs[mask]
            c = cfg[mask]
            M = np.bincount(c * card + states[mask, v], weights=w,
                            minlength=n_cfg * card).reshape(n_cfg, card)
            m = np.bincount(c, weights=w, minlength=n_cfg)
            return M - p * m[:, None]

        dA, dB = dsum(num), dsum(ev)
        out[sl] = ((dA * B - A * dB) / (B * B)).ravel()
    return out


def fd_grad(net, q, step=1e-5):
    """Central finite differences of the enumerated probability."""
    theta = net.get_params()
    out = np.zeros_like(theta)
    work = net.copy()
    for i in range(theta.size):
        t = theta.copy()
        t[i] += step
        work.set_params(t)
        hi = exact_probability(work, q)
        t[i] -= 2 * step
        work.set_params(t)
        lo = exact_probability(work, q)
        out[i] = (hi - lo) / (2 * step)
    return out


# ----------------------------------------------------------------- suite

def load_suite(directory=None):
    """Shipped small networks with one query each: list of ``(name, net, query)``."""
    import pathlib

    from .bayesnet import BayesNet
    base = pathlib.Path(directory) if directory else pathlib.Path(__file__).parent / "data" / "small_bns"
    out = []
    for path in sorted(base.glob("*.json")):
        with open(path) as fh:
            spec = json.load(fh)
        net = BayesNet.from_spec(spec)
        qs = spec["query"]
        ev = {net.index[k]: int(v) for k, v in qs["evidence"].items()}
        out.append((spec.get("name", path.stem), net,
                    GradQuery(net.index[qs["target"]], int(qs["value"]), ev)))
    return out


def suite_errors(suite, seeds=10, S=100_000, rtol=0.05, atol=1e-3):
    """Seed-averaged estimator vs oracle on each suite entry.

    Returns a list of dicts with the worst error-to-tolerance ratio and the
    max relative error over coordinates with ``|oracle| > atol``.
    """
    rows = []
    for name, net, q in suite:
        q = GradQuery(q.target, q.value, q.evidence, S)
        exact = exact_grad_oracle(net, q)
        est = np.mean([grad_query(net, q, seed=s) for s in range(seeds)], axis=0)
        err = np.abs(est - exact)
        tol = np.maximum(rtol * np.abs(exact), atol)
        big = np.abs(exact) > atol
        rel = float(np.max(err[big] / np.abs(exact[big]))) if big.any() else 0.0
        rows.append({"name": name, "worst_ratio": float(np.max(err / tol)),
                     "max_rel_error": rel, "passed": bool(np.all(err <= tol)),
                     "n_params": int(net.n_params)})
    return rows
