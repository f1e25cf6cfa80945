"""Small reverse-mode autodiff over numpy arrays, plus the policy's layers.

Only the operations the scheduler model needs are provided. A :class:`Tape`
records every operation on :class:`Var` values created under it; calling
:meth:`Tape.backward` accumulates gradients into the :class:`Param` objects
that were read on that tape. Ops on vars without a tape run forward only.
"""
from __future__ import annotations

import json

import numpy as np

from .errors import NonFiniteLoss, ShapeMismatch, StaleTape

CHECKPOINT_FORMAT = "hetsched-params"
CHECKPOINT_VERSION = 1


# ---------------------------------------------------------------- params

class Param:
    def __init__(self, pid, value):
        self.id = pid
        self.value = np.asarray(value, dtype=float)
        self.grad = np.zeros_like(self.value)

    @property
    def shape(self):
        return self.value.shape


class ParameterSet:
    """Ordered collection of parameters with a shared update counter."""

    def __init__(self):
        self.params = {}
        self.version = 0

    def add(self, pid, value):
        if pid in self.params:
            raise ValueError("duplicate parameter id %r" % pid)
        p = Param(pid, value)
        self.params[pid] = p
        return p

    def __getitem__(self, pid):
        return self.params[pid]

    def __iter__(self):
        return iter(self.params.values())

    def __len__(self):
        return len(self.params)

    @property
    def size(self):
        return sum(p.value.size for p in self)

    def zero_grad(self):
        for p in self:
            p.grad[...] = 0.0

    def sgd_step(self, lr, clip=None):
        g = self.flat_grad()
        if not np.all(np.isfinite(g)):
            raise NonFiniteLoss("non-finite gradient")
        scale = 1.0
        if clip is not None:
            norm = float(np.linalg.norm(g))
            if norm > clip:
                scale = clip / norm
        for p in self:
            p.value -= lr * scale * p.grad
        self.version += 1

    def flat(self):
        return np.concatenate([p.value.ravel() for p in self]) if self.params else np.zeros(0)

    def flat_grad(self):
        return np.concatenate([p.grad.ravel() for p in self]) if self.params else np.zeros(0)

    def set_flat(self, flat):
        off = 0
        for p in self:
            n = p.value.size
            p.value = np.asarray(flat[off:off + n], dtype=float).reshape(p.shape).copy()
            off += n
        self.version += 1

    def to_checkpoint(self):
        return {"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION,
                "params": [{"id": p.id, "shape": list(p.shape), "values": p.value.ravel().tolist()}
                           for p in self]}

    def load_checkpoint(self, data):
        if data.get("format") != CHECKPOINT_FORMAT or data.get("version") != CHECKPOINT_VERSION:
            raise ValueError("unsupported checkpoint format")
        for entry in data["params"]:
            p = self.params[entry["id"]]
            if list(p.shape) != list(entry["shape"]):
                raise ShapeMismatch("checkpoint shape mismatch for %r" % entry["id"])
            p.value = np.asarray(entry["values"], dtype=float).reshape(p.shape)
        self.version += 1

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_checkpoint(), fh, sort_keys=True)

    def load(self, path):
        with open(path) as fh:
            self.load_checkpoint(json.load(fh))


def glorot(rng, fan_in, fan_out):
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=(fan_in, fan_out))


# ------------------------------------------------------------------ tape

class Var:
    __slots__ = ("value", "tape", "parents", "backward_fn", "param", "idx")

    def __init__(self, value, tape=None, parents=(), backward_fn=None, param=None):
        self.value = value
        self.tape = tape
        self.parents = parents
        self.backward_fn = backward_fn
        self.param = param
        self.idx = -1
        if tape is not None:
            self.idx = len(tape.nodes)
            tape.nodes.append(self)

    @property
    def shape(self):
        return self.value.shape

    def __add__(self, o):
        return add(self, o)

    def __sub__(self, o):
        return sub(self, o)

    def __mul__(self, o):
        return mul(self, o)

    def __matmul__(self, o):
        return matmul(self, o)


class Tape:
    def __init__(self, params=None):
        self.nodes = []
        self.params = params
        self.version = params.version if params is not None else None

    def param(self, p):
        return Var(p.value, self, (), None, p)

    def const(self, x):
        return Var(np.asarray(x, dtype=float))

    def backward(self, out, seed=None):
        """Accumulate d(out)/d(param) * seed into every parameter's ``grad``."""
        if self.params is not None and self.params.version != self.version:
            raise StaleTape("parameters changed since this tape was recorded")
        if out.tape is not self:
            raise StaleTape("output was not recorded on this tape")
        grads = [None] * len(self.nodes)
        g0 = np.ones_like(out.value) if seed is None else np.asarray(seed, dtype=float)
        if g0.shape != out.value.shape:
            raise ShapeMismatch("seed gradient shape %s != %s" % (g0.shape, out.value.shape))
        grads[out.idx] = g0
        for i in range(out.idx, -1, -1):
            g = grads[i]
            if g is None:
                continue
            node = self.nodes[i]
            if node.param is not None:
                node.param.grad += g
                continue
            if node.backward_fn is None:
                continue
            pg = node.backward_fn(g)
            for par, gp in zip(node.parents, pg):
                if gp is None or par.tape is not self:
                    continue
                j = par.idx
                grads[j] = gp if grads[j] is None else grads[j] + gp
        return grads


def _tape_of(*xs):
    for x in xs:
        if isinstance(x, Var) and x.tape is not None:
            return x.tape
    return None


def _v(x):
    return x if isinstance(x, Var) else Var(np.asarray(x, dtype=float))


def _op(value, parents, fn):
    tape = _tape_of(*parents)
    if tape is None:
        return Var(value)
    return Var(value, tape, parents, fn)


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# ------------------------------------------------------------------- ops

def add(a, b):
    a, b = _v(a), _v(b)
    return _op(a.value + b.value, (a, b),
               lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b):
    a, b = _v(a), _v(b)
    return _op(a.value - b.value, (a, b),
               lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def mul(a, b):
    a, b = _v(a), _v(b)
    av, bv = a.value, b.value
    return _op(av * bv, (a, b),
               lambda g: (_unbroadcast(g * bv, a.shape), _unbroadcast(g * av, b.shape)))


def matmul(a, b):
    a, b = _v(a), _v(b)
    if a.value.shape[-1] != b.value.shape[0]:
        raise ShapeMismatch("matmul %s @ %s" % (a.shape, b.shape))
    av, bv = a.value, b.value
    return _op(av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g))


def relu(a):
    a = _v(a)
    m = a.value > 0
    return _op(a.value * m, (a,), lambda g: (g * m,))


def sigmoid(a):
    a = _v(a)
    s = 1.0 / (1.0 + np.exp(-a.value))
    return _op(s, (a,), lambda g: (g * s * (1 - s),))


def tanh(a):
    a = _v(a)
    t = np.tanh(a.value)
    return _op(t, (a,), lambda g: (g * (1 - t * t),))


def square(a):
    a = _v(a)
    av = a.value
    return _op(av * av, (a,), lambda g: (2 * g * av,))


def sum_(a, axis=None):
    a = _v(a)
    shape = a.shape
    if axis is None:
        return _op(np.asarray(a.value.sum()), (a,), lambda g: (np.broadcast_to(g, shape).copy(),))
    return _op(a.value.sum(axis=axis), (a,),
               lambda g: (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),))


def mean(a):
    a = _v(a)
    n = a.value.size
    shape = a.shape
    return _op(np.asarray(a.value.mean()), (a,), lambda g: (np.full(shape, g / n),))


def scale(a, c):
    a = _v(a)
    return _op(a.value * c, (a,), lambda g: (g * c,))


def concat(xs, axis=-1):
    xs = [_v(x) for x in xs]
    ax = axis if axis >= 0 else xs[0].value.ndim + axis
    sizes = [x.value.shape[ax] for x in xs]
    try:
        val = np.concatenate([x.value for x in xs], axis=ax)
    except ValueError as exc:
        raise ShapeMismatch(str(exc)) from None
    cuts = np.cumsum(sizes)[:-1]
    return _op(val, tuple(xs), lambda g: tuple(np.split(g, cuts, axis=ax)))


def _row_sums(idx, x, n):
    """``out[i] = sum of x[j] over j with idx[j] == i`` (deterministic order)."""
    out = np.zeros((n,) + x.shape[1:])
    if idx.size == 0:
        return out
    order = np.argsort(idx, kind="stable")
    si = idx[order]
    starts = np.concatenate(([0], np.nonzero(np.diff(si))[0] + 1))
    out[si[starts]] = np.add.reduceat(x[order], starts, axis=0)
    return out


def gather_rows(a, idx):
    a = _v(a)
    idx = np.asarray(idx, dtype=np.int64)
    n = a.shape[0]
    return _op(a.value[idx], (a,), lambda g: (_row_sums(idx, g, n),))


def segment_sum(a, seg, n):
    """Rows of ``a`` summed into ``n`` buckets by ``seg``; empty buckets are zero."""
    a = _v(a)
    seg = np.asarray(seg, dtype=np.int64)
    out = _row_sums(seg, a.value, n)
    return _op(out, (a,), lambda g: (g[seg] if seg.size else np.zeros(a.shape),))


def scatter(a, idx, size, fill=0.0):
    """Flat vector of length ``size`` holding ``a``'s entries at ``idx``."""
    a = _v(a)
    idx = np.asarray(idx, dtype=np.int64)
    out = np.full(size, fill, dtype=float)
    out[idx] = a.value.ravel()
    shape = a.shape
    return _op(out, (a,), lambda g: (g[idx].reshape(shape),))


def reshape(a, shape):
    a = _v(a)
    old = a.shape
    return _op(a.value.reshape(shape), (a,), lambda g: (g.reshape(old),))


def cols(a, lo, hi):
    a = _v(a)
    shape = a.shape

    def back(g):
        out = np.zeros(shape)
        out[..., lo:hi] = g
        return (out,)
    return _op(a.value[..., lo:hi], (a,), back)


def masked_log_softmax(logits, mask):
    """Row-wise log-softmax with masked entries at ``-inf`` (probability 0)."""
    logits = _v(logits)
    mask = np.asarray(mask, dtype=bool)
    x = np.where(mask, logits.value, -np.inf)
    mx = np.max(x, axis=-1, keepdims=True)
    mx = np.where(np.isfinite(mx), mx, 0.0)
    e = np.where(mask, np.exp(x - mx), 0.0)
    z = e.sum(axis=-1, keepdims=True)
    z = np.where(z > 0, z, 1.0)
    p = e / z
    out = np.where(mask, x - mx - np.log(z), -np.inf)

    def back(g):
        g = np.where(mask, g, 0.0)
        return (g - p * g.sum(axis=-1, keepdims=True),)
    return _op(out, (logits,), back)


def pick(a, rows, colsel):
    """``a[rows, colsel]`` as a vector."""
    a = _v(a)
    rows = np.asarray(rows, dtype=np.int64)
    colsel = np.asarray(colsel, dtype=np.int64)
    shape = a.shape

    def back(g):
        out = np.zeros(shape)
        np.add.at(out, (rows, colsel), g)
        return (out,)
    return _op(a.value[rows, colsel], (a,), back)


# ---------------------------------------------------------------- layers

class Linear:
    def __init__(self, ps, name, n_in, n_out, rng):
        self.n_in, self.n_out = n_in, n_out
        self.W = ps.add(name + ".W", glorot(rng, n_in, n_out))
        self.b = ps.add(name + ".b", np.zeros(n_out))

    def __call__(self, tape, x):
        x = _v(x)
        if x.value.shape[-1] != self.n_in:
            raise ShapeMismatch("%s expects %d inputs, got %d" % (self.W.id, self.n_in, x.value.shape[-1]))
        W = tape.param(self.W) if tape else Var(self.W.value)
        b = tape.param(self.b) if tape else Var(self.b.value)
        return add(matmul(x, W), b)


class FCNN:
    """Two ReLU hidden layers of sizes ``(a, b)`` followed by a linear output."""

    def __init__(self, ps, name, n_in, a, b, n_out, rng):
        self.l1 = Linear(ps, name + ".h1", n_in, a, rng)
        self.l2 = Linear(ps, name + ".h2", a, b, rng)
        self.l3 = Linear(ps, name + ".out", b, n_out, rng)
        self.n_in, self.n_out = n_in, n_out

    def __call__(self, tape, x):
        return self.l3(tape, relu(self.l2(tape, relu(self.l1(tape, x)))))


def fcnn_forward(net, tape, x):
    return net(tape, x)


class LSTMCell:
    """Gates ordered input, forget, candidate, output."""

    def __init__(self, ps, name, n_in, hidden, rng):
        self.n_in, self.hidden = n_in, hidden
        self.W = ps.add(name + ".W", glorot(rng, n_in + hidden, 4 * hidden))
        self.b = ps.add(name + ".b", np.zeros(4 * hidden))

    def __call__(self, tape, x, state):
        h, c = state
        x, h, c = _v(x), _v(h), _v(c)
        if x.value.shape[-1] != self.n_in or h.value.shape[-1] != self.hidden:
            raise ShapeMismatch("LSTM input/hidden size mismatch")
        W = tape.param(self.W) if tape else Var(self.W.value)
        b = tape.param(self.b) if tape else Var(self.b.value)
        z = add(matmul(concat([x, h], axis=-1), W), b)
        H = self.hidden
        i = sigmoid(cols(z, 0, H))
        f = sigmoid(cols(z, H, 2 * H))
        g = tanh(cols(z, 2 * H, 3 * H))
        o = sigmoid(cols(z, 3 * H, 4 * H))
        c2 = add(mul(f, c), mul(i, g))
        h2 = mul(o, tanh(c2))
        return h2, (h2, c2)


def lstm_step(cell, tape, state, x):
    return cell(tape, x, state)


class GNBlock:
    """Graph-network block: edge update, optional node update, global update.

    ``node_fn`` absent leaves node features unchanged. With a node function,
    edges aggregate into receiving nodes and nodes into the global; without
    it, ReLU'd edge outputs aggregate straight into the global.
    """

    def __init__(self, ps, name, dims, rng, edge_hidden=(64, 32), node_hidden=(32, 16),
                 global_hidden=(16, 16), with_node_fn=True):
        de, dv, du = dims
        self.dims = dims
        eo = edge_hidden[1]
        self.edge_out = eo
        self.phi_e = FCNN(ps, name + ".phi_e", de + 2 * dv + du, edge_hidden[0], edge_hidden[1], eo, rng)
        self.with_node_fn = with_node_fn
        if with_node_fn:
            vo = node_hidden[1]
            self.node_out = vo
            self.phi_v = FCNN(ps, name + ".phi_v", eo + dv + du, node_hidden[0], node_hidden[1], vo, rng)
            self.phi_u = FCNN(ps, name + ".phi_u", vo + du, global_hidden[0], global_hidden[1],
                              global_hidden[1], rng)
            self.global_out = global_hidden[1]
        else:
            self.node_out = dv
            self.phi_u = FCNN(ps, name + ".phi_u", eo + du, global_hidden[0], global_hidden[1],
                              global_hidden[1], rng)
            self.global_out = global_hidden[1]

    def __call__(self, tape, V, E, U, senders, receivers, edge_graph, node_graph, n_graphs):
        """Batched over a disjoint union of ``n_graphs`` graphs.

        ``V`` (n_nodes, dv), ``E`` (n_edges, de), ``U`` (n_graphs, du);
        ``edge_graph``/``node_graph`` give each edge's/node's graph index.
        Returns ``(V', E', U')``.
        """
        de, dv, du = self.dims
        V, E, U = _v(V), _v(E), _v(U)
        if V.value.shape[-1] != dv or E.value.shape[-1] != de or U.value.shape[-1] != du:
            raise ShapeMismatch("GN block feature sizes do not match %s" % (self.dims,))
        n_nodes = V.value.shape[0]
        if len(senders):
            ein = concat([E, gather_rows(V, senders), gather_rows(V, receivers),
                          gather_rows(U, edge_graph)], axis=-1)
            E2 = self.phi_e(tape, ein)
        else:
            E2 = Var(np.zeros((0, self.edge_out)))
        if self.with_node_fn:
            agg = segment_sum(E2, receivers, n_nodes)
            V2 = self.phi_v(tape, concat([agg, V, gather_rows(U, node_graph)], axis=-1))
            U2 = self.phi_u(tape, concat([segment_sum(V2, node_graph, n_graphs), U], axis=-1))
            return V2, E2, U2
        U2 = self.phi_u(tape, concat([segment_sum(relu(E2), edge_graph, n_graphs), U], axis=-1))
        return V, E2, U2


def gn_forward(block, tape, graph):
    return block(tape, graph["V"], graph["E"], graph["U"], graph["senders"], graph["receivers"],
                 graph["edge_graph"], graph["node_graph"], graph["n_graphs"])


# ---------------------------------------------------------------- checks

def fd_check(loss_fn, params, ids=None, eps=1e-5, rng=None, n=None):
    """Compare tape gradients with central differences.

    ``loss_fn(tape)`` must build a scalar on ``tape``. Returns
    ``(max_rel_error, max_abs_error)`` over the checked coordinates, where the
    relative error uses ``max(|analytic|, |numeric|, 1e-6)`` as denominator.
    """
    params.zero_grad()
    tape = Tape(params)
    out = loss_fn(tape)
    tape.backward(out)
    coords = []
    for p in params:
        if ids is not None and p.id not in ids:
            continue
        for j in range(p.value.size):
            coords.append((p, j))
    if n is not None and len(coords) > n:
        rng = rng or np.random.default_rng(0)
        sel = rng.choice(len(coords), size=n, replace=False)
        coords = [coords[i] for i in sorted(sel)]
    worst_rel, worst_abs = 0.0, 0.0
    for p, j in coords:
        analytic = p.grad.ravel()[j]
        flat = p.value.reshape(-1)
        orig = flat[j]
        flat[j] = orig + eps
        hi = float(loss_fn(None).value)
        flat[j] = orig - eps
        lo = float(loss_fn(None).value)
        flat[j] = orig
        numeric = (hi - lo) / (2 * eps)
        err = abs(analytic - numeric)
        worst_abs = max(worst_abs, err)
        worst_rel = max(worst_rel, err / max(abs(analytic), abs(numeric), 1e-6))
    params.zero_grad()
    return worst_rel, worst_abs
