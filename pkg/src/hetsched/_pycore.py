"""Pure-Python implementations of the hot kernels.

These are the reference semantics. ``_core.pyx`` mirrors them operation for
operation so that both backends return bit-identical results; the scheduling
environment always uses the functions here directly.
"""
import math

import numpy as np

from .errors import TooLarge

BACKEND = "python"

IDLE = -1
INF = math.inf


# ---------------------------------------------------------------- sampling

def sample_into(vals, u, order, kind, clamp_val, par_ptr, par_idx, par_stride,
                tab_ptr, card, cum_flat):
    """Ancestral inverse-CDF sampling into ``vals`` (shape ``(n, V)``).

    ``kind`` is 0 for a CPD node, 1 for a deterministic copy of its single
    parent, 2 for a clamped node. The drawn index is the number of cumulative
    entries (excluding the last) that are ``<= u``.
    """
    n = vals.shape[0]
    for v in order:
        k = kind[v]
        if k == 2:
            vals[:, v] = clamp_val[v]
            continue
        lo, hi = par_ptr[v], par_ptr[v + 1]
        if k == 1:
            vals[:, v] = vals[:, par_idx[lo]]
            continue
        c = card[v]
        cfg = np.zeros(n, dtype=np.int64)
        for j in range(lo, hi):
            cfg += vals[:, par_idx[j]] * par_stride[j]
        rows = tab_ptr[v] + cfg[:, None] * c + np.arange(c - 1)[None, :]
        cum = cum_flat[rows]
        vals[:, v] = (cum <= u[:, v:v + 1]).sum(axis=1)
    return vals


# ------------------------------------------------------- scheduling core

class SchedInstance:
    """Flattened scheduling instance shared by the environment and the oracle.

    Kernels are indexed in a topological order of the combined data-flow
    graphs; ``preds[k]`` is a bitmask over lower kernel indices.
    """

    def __init__(self, ktype, preds, runtime, demand, onpath, is_fpga,
                 knots_x, knots_y, cap, reconfig_time):
        self.K = len(ktype)
        self.P = len(is_fpga)
        self.R = len(onpath[0]) if onpath else 0
        self.T = (max(ktype) + 1) if ktype else 0
        self.ktype = list(ktype)
        self.preds = list(preds)
        self.runtime = [list(map(float, row)) for row in runtime]  # [K][P]
        self.demand = [[list(map(float, d)) for d in row] for row in demand]  # [K][P][R]
        self.onpath = [list(map(bool, row)) for row in onpath]  # [P][R]
        self.is_fpga = list(map(bool, is_fpga))
        self.knots_x = list(map(float, knots_x))
        self.knots_y = list(map(float, knots_y))
        self.cap = float(cap)
        self.reconfig_time = float(reconfig_time)
        self.full = (1 << self.K) - 1
        self.minrt = [min(r for r in row if r < INF) for row in self.runtime]
        self.n_exec = self.K * self.P
        self.noop = self.n_exec + self.P * self.T

    def arrays(self):
        """Numpy views for the compiled backend."""
        return dict(
            ktype=np.asarray(self.ktype, dtype=np.int64),
            preds=np.asarray(self.preds, dtype=np.int64),
            runtime=np.asarray(self.runtime, dtype=np.float64).reshape(-1),
            demand=np.asarray(self.demand, dtype=np.float64).reshape(-1),
            onpath=np.asarray(self.onpath, dtype=np.int64).reshape(-1),
            is_fpga=np.asarray(self.is_fpga, dtype=np.int64),
            knots_x=np.asarray(self.knots_x, dtype=np.float64),
            knots_y=np.asarray(self.knots_y, dtype=np.float64),
            minrt=np.asarray(self.minrt, dtype=np.float64),
        )


def initial_state(inst):
    P = inst.P
    return (0.0, 0, 0, (IDLE,) * P, (0.0,) * P, (IDLE,) * P)


def penalty(inst, d):
    """Piecewise-linear slowdown multiplier for total demand ``d``."""
    xs, ys = inst.knots_x, inst.knots_y
    if d <= xs[0]:
        return 1.0
    n = len(xs)
    m = ys[n - 1]
    for i in range(1, n):
        if d <= xs[i]:
            m = ys[i - 1] + (d - xs[i - 1]) * (ys[i] - ys[i - 1]) / (xs[i] - xs[i - 1])
            break
    if m > inst.cap:
        m = inst.cap
    return m


def multiplier(inst, pk, k, p):
    m = 1.0
    onp = inst.onpath[p]
    dk = inst.demand[k][p]
    for r in range(inst.R):
        if not onp[r]:
            continue
        d = 0.0
        for q in range(inst.P):
            j = pk[q]
            if j >= 0:
                d += inst.demand[j][q][r]
        d += dk[r]
        m *= penalty(inst, d)
    return m


def _ready(inst, started, done, k):
    return not (started >> k) & 1 and (inst.preds[k] & done) == inst.preds[k]


def _reconf_ok(inst, st, p, ty):
    t, started, done, pk, pf, cfg = st
    if not inst.is_fpga[p] or pk[p] != IDLE or cfg[p] == ty:
        return False
    for k in range(inst.K):
        if inst.ktype[k] == ty and not (started >> k) & 1 and inst.runtime[k][p] < INF:
            return True
    return False


def _ready_idle(inst, st):
    t, started, done, pk, pf, cfg = st
    ready = [k for k in range(inst.K) if _ready(inst, started, done, k)]
    idle = [p for p in range(inst.P) if pk[p] == IDLE]
    return ready, idle


def valid_actions(inst, st):
    """Valid action codes in canonical (ascending) order."""
    out = []
    ready, idle = _ready_idle(inst, st)
    cfg = st[5]
    for k in ready:
        row = inst.runtime[k]
        for p in idle:
            if row[p] < INF and (not inst.is_fpga[p] or cfg[p] == inst.ktype[k]):
                out.append(k * inst.P + p)
    for p in idle:
        if inst.is_fpga[p]:
            for ty in range(inst.T):
                if _reconf_ok(inst, st, p, ty):
                    out.append(inst.n_exec + p * inst.T + ty)
    if any(j != IDLE for j in st[3]):
        out.append(inst.noop)
    return out


def actionable(inst, st):
    ready, idle = _ready_idle(inst, st)
    cfg = st[5]
    for k in ready:
        row = inst.runtime[k]
        for p in idle:
            if row[p] < INF and (not inst.is_fpga[p] or cfg[p] == inst.ktype[k]):
                return True
    for p in idle:
        if inst.is_fpga[p]:
            for ty in range(inst.T):
                if _reconf_ok(inst, st, p, ty):
                    return True
    return False


def apply_action(inst, st, code):
    """Apply a valid action at the current clock; returns ``(state, runtime)``.

    ``runtime`` is the effective duration of an Execute, the reconfiguration
    time for a Reconfigure, and 0 for NoOp. Validity is the caller's job.
    """
    t, started, done, pk, pf, cfg = st
    if code == inst.noop:
        return st, 0.0
    if code < inst.n_exec:
        k, p = divmod(code, inst.P)
        rt = inst.runtime[k][p] * multiplier(inst, pk, k, p)
        pk = pk[:p] + (k,) + pk[p + 1:]
        pf = pf[:p] + (t + rt,) + pf[p + 1:]
        return (t, started | (1 << k), done, pk, pf, cfg), rt
    p, ty = divmod(code - inst.n_exec, inst.T)
    pk = pk[:p] + (-2 - ty,) + pk[p + 1:]
    pf = pf[:p] + (t + inst.reconfig_time,) + pf[p + 1:]
    return (t, started, done, pk, pf, cfg), inst.reconfig_time


def advance(inst, st, force=False):
    """Move the clock to the next decision point (or to completion).

    Returns ``(state, finished)`` where ``finished`` lists ``(proc, kernel)``
    completions in event order; reconfiguration completions use a negative
    kernel code.
    """
    finished = []
    while True:
        t, started, done, pk, pf, cfg = st
        if done == inst.full:
            return st, finished
        if not force and actionable(inst, st):
            return st, finished
        tn = INF
        for p in range(inst.P):
            if pk[p] != IDLE and pf[p] < tn:
                tn = pf[p]
        if tn == INF:
            raise RuntimeError("deadlock: nothing running and no valid action")
        pk, pf, cfg = list(pk), list(pf), list(cfg)
        for p in range(inst.P):
            if pk[p] != IDLE and pf[p] == tn:
                j = pk[p]
                if j >= 0:
                    done |= 1 << j
                else:
                    cfg[p] = -2 - j
                finished.append((p, j))
                pk[p] = IDLE
        st = (tn, started, done, tuple(pk), tuple(pf), tuple(cfg))
        force = False


def lower_bound(inst, st):
    t, started, done, pk, pf, cfg = st
    lb = t
    running_fin = {}
    for p in range(inst.P):
        if pk[p] != IDLE:
            if pf[p] > lb:
                lb = pf[p]
            if pk[p] >= 0:
                running_fin[pk[p]] = pf[p]
    est = [0.0] * inst.K
    work = 0.0
    for k in range(inst.K):
        if (started >> k) & 1:
            continue
        e = t
        pr = inst.preds[k]
        for j in range(k):
            if (pr >> j) & 1 and not (done >> j) & 1:
                if (started >> j) & 1:
                    f = running_fin[j]
                else:
                    f = est[j] + inst.minrt[j]
                if f > e:
                    e = f
        est[k] = e
        work += inst.minrt[k]
        if e + inst.minrt[k] > lb:
            lb = e + inst.minrt[k]
    wb = t + work / inst.P
    if wb > lb:
        lb = wb
    return lb


def oracle_search(inst, max_expansions=10_000_000):
    """Exhaustive branch-and-bound over the environment's decision tree.

    Returns ``(makespan, actions)``; among optimal action sequences the
    lexicographically smallest (by action code) is returned.
    """
    memo = {}
    best_code = {}
    count = [0]

    def solve(st, bound):
        if st[2] == inst.full:
            return st[0]
        hit = memo.get(st)
        if hit is not None:
            val, exact = hit
            if exact or val >= bound:
                return val
        lb = lower_bound(inst, st)
        if lb >= bound:
            memo[st] = (lb, False)
            return lb
        cur = bound
        found = -1
        for code in valid_actions(inst, st):
            count[0] += 1
            if count[0] > max_expansions:
                raise TooLarge("oracle search exceeded %d expansions" % max_expansions)
            nst, _ = apply_action(inst, st, code)
            nst, _ = advance(inst, nst, force=(code == inst.noop))
            v = solve(nst, cur)
            if v < cur:
                cur = v
                found = code
        if found >= 0:
            memo[st] = (cur, True)
            best_code[st] = found
            return cur
        memo[st] = (bound, False)
        return bound

    st0, _ = advance(inst, initial_state(inst))
    makespan = solve(st0, INF)
    actions = []
    st = st0
    while st[2] != inst.full:
        code = best_code[st]
        actions.append(code)
        nst, _ = apply_action(inst, st, code)
        st, _ = advance(inst, nst, force=(code == inst.noop))
    return makespan, actions
