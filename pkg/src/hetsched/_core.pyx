# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels; mirrors ``_pycore`` operation for operation."""
import numpy as np

from .errors import TooLarge

BACKEND = "cython"

cdef double INF = float("inf")


def sample_into(long[:, ::1] vals, double[:, ::1] u, long[::1] order, long[::1] kind,
                long[::1] clamp_val, long[::1] par_ptr, long[::1] par_idx,
                long[::1] par_stride, long[::1] tab_ptr, long[::1] card,
                double[::1] cum_flat):
    cdef Py_ssize_t n = vals.shape[0]
    cdef Py_ssize_t i, oi, j, kk, v, lo, hi, c, base
    cdef long cfg, cnt
    cdef double uu
    for oi in range(order.shape[0]):
        v = order[oi]
        if kind[v] == 2:
            for i in range(n):
                vals[i, v] = clamp_val[v]
            continue
        lo = par_ptr[v]
        hi = par_ptr[v + 1]
        if kind[v] == 1:
            for i in range(n):
                vals[i, v] = vals[i, par_idx[lo]]
            continue
        c = card[v]
        for i in range(n):
            cfg = 0
            for j in range(lo, hi):
                cfg += vals[i, par_idx[j]] * par_stride[j]
            base = tab_ptr[v] + cfg * c
            uu = u[i, v]
            cnt = 0
            for kk in range(c - 1):
                if cum_flat[base + kk] <= uu:
                    cnt += 1
            vals[i, v] = cnt
    return np.asarray(vals)


cdef class _Inst:
    cdef public int K, P, R, T, n_exec, noop, nk
    cdef public long full
    cdef long[::1] ktype, preds, onpath, is_fpga
    cdef double[::1] runtime, demand, knots_x, knots_y, minrt
    cdef double cap, reconfig_time

    def __init__(self, inst):
        a = inst.arrays()
        self.K = inst.K
        self.P = inst.P
        self.R = inst.R
        self.T = inst.T
        self.n_exec = inst.n_exec
        self.noop = inst.noop
        self.full = inst.full
        self.ktype = a["ktype"]
        self.preds = a["preds"]
        self.runtime = a["runtime"]
        self.demand = a["demand"]
        self.onpath = a["onpath"]
        self.is_fpga = a["is_fpga"]
        self.knots_x = a["knots_x"]
        self.knots_y = a["knots_y"]
        self.nk = len(a["knots_x"])
        self.minrt = a["minrt"]
        self.cap = inst.cap
        self.reconfig_time = inst.reconfig_time


cdef double _penalty(_Inst I, double d):
    cdef int i, n = I.nk
    cdef double m
    if d <= I.knots_x[0]:
        return 1.0
    m = I.knots_y[n - 1]
    for i in range(1, n):
        if d <= I.knots_x[i]:
            m = I.knots_y[i - 1] + (d - I.knots_x[i - 1]) * (I.knots_y[i] - I.knots_y[i - 1]) / (I.knots_x[i] - I.knots_x[i - 1])
            break
    if m > I.cap:
        m = I.cap
    return m


cdef double _multiplier(_Inst I, long* pk, int k, int p):
    cdef double m = 1.0, d
    cdef int r, q
    cdef long j
    for r in range(I.R):
        if not I.onpath[p * I.R + r]:
            continue
        d = 0.0
        for q in range(I.P):
            j = pk[q]
            if j >= 0:
                d += I.demand[(j * I.P + q) * I.R + r]
        d += I.demand[(k * I.P + p) * I.R + r]
        m *= _penalty(I, d)
    return m


cdef inline bint _ready(_Inst I, long started, long done, int k):
    return not ((started >> k) & 1) and (I.preds[k] & done) == I.preds[k]


cdef bint _exec_ok(_Inst I, long started, long done, long* pk, long* cfg, int k, int p):
    if pk[p] != -1 or not _ready(I, started, done, k):
        return False
    if I.runtime[k * I.P + p] == INF:
        return False
    if I.is_fpga[p] and cfg[p] != I.ktype[k]:
        return False
    return True


cdef bint _reconf_ok(_Inst I, long started, long* pk, long* cfg, int p, int ty):
    cdef int k
    if not I.is_fpga[p] or pk[p] != -1 or cfg[p] == ty:
        return False
    for k in range(I.K):
        if I.ktype[k] == ty and not ((started >> k) & 1) and I.runtime[k * I.P + p] < INF:
            return True
    return False


cdef bint _actionable(_Inst I, long started, long done, long* pk, long* cfg):
    cdef int k, p, ty
    for k in range(I.K):
        for p in range(I.P):
            if _exec_ok(I, started, done, pk, cfg, k, p):
                return True
    for p in range(I.P):
        if I.is_fpga[p]:
            for ty in range(I.T):
                if _reconf_ok(I, started, pk, cfg, p, ty):
                    return True
    return False


cdef class _Search:
    cdef _Inst I
    cdef dict memo
    cdef dict best
    cdef long count, max_exp
    cdef long pk[64]
    cdef long cfg[64]
    cdef double pf[64]

    def __init__(self, _Inst I, long max_exp):
        self.I = I
        self.memo = {}
        self.best = {}
        self.count = 0
        self.max_exp = max_exp

    cdef void _load(self, tuple st):
        cdef int p
        cdef tuple a = st[3], b = st[4], c = st[5]
        for p in range(self.I.P):
            self.pk[p] = a[p]
            self.pf[p] = b[p]
            self.cfg[p] = c[p]

    cdef tuple _pack(self, double t, long started, long done):
        cdef int p
        return (t, started, done,
                tuple([self.pk[p] for p in range(self.I.P)]),
                tuple([self.pf[p] for p in range(self.I.P)]),
                tuple([self.cfg[p] for p in range(self.I.P)]))

    cdef list _actions(self, long started, long done):
        cdef _Inst I = self.I
        cdef int k, p, ty
        cdef list out = []
        cdef bint busy = False
        for k in range(I.K):
            for p in range(I.P):
                if _exec_ok(I, started, done, self.pk, self.cfg, k, p):
                    out.append(k * I.P + p)
        for p in range(I.P):
            if I.is_fpga[p]:
                for ty in range(I.T):
                    if _reconf_ok(I, started, self.pk, self.cfg, p, ty):
                        out.append(I.n_exec + p * I.T + ty)
        for p in range(I.P):
            if self.pk[p] != -1:
                busy = True
        if busy:
            out.append(I.noop)
        return out

    cpdef tuple step(self, tuple st, int code):
        """Apply ``code`` (or nothing when negative) and advance."""
        cdef _Inst I = self.I
        cdef double t = st[0], tn, rt
        cdef long started = st[1], done = st[2], j
        cdef int k, p, ty
        cdef bint force = code == I.noop
        self._load(st)
        if 0 <= code < I.n_exec:
            k = code // I.P
            p = code % I.P
            rt = I.runtime[k * I.P + p] * _multiplier(I, self.pk, k, p)
            self.pk[p] = k
            self.pf[p] = t + rt
            started |= (<long>1) << k
        elif code >= I.n_exec and code != I.noop:
            p = (code - I.n_exec) // I.T
            ty = (code - I.n_exec) % I.T
            self.pk[p] = -2 - ty
            self.pf[p] = t + I.reconfig_time
        while True:
            if done == I.full:
                break
            if not force and _actionable(I, started, done, self.pk, self.cfg):
                break
            tn = INF
            for p in range(I.P):
                if self.pk[p] != -1 and self.pf[p] < tn:
                    tn = self.pf[p]
            if tn == INF:
                raise RuntimeError("deadlock: nothing running and no valid action")
            for p in range(I.P):
                if self.pk[p] != -1 and self.pf[p] == tn:
                    j = self.pk[p]
                    if j >= 0:
                        done |= (<long>1) << j
                    else:
                        self.cfg[p] = -2 - j
                    self.pk[p] = -1
            t = tn
            force = False
        return self._pack(t, started, done)

    cdef double _lower_bound(self, tuple st):
        cdef _Inst I = self.I
        cdef double t = st[0], lb, e, f, work = 0.0, wb
        cdef long started = st[1], done = st[2], pr
        cdef int p, k, j
        cdef double est[64]
        cdef double rfin[64]
        self._load(st)
        lb = t
        for p in range(I.P):
            if self.pk[p] != -1:
                if self.pf[p] > lb:
                    lb = self.pf[p]
                if self.pk[p] >= 0:
                    rfin[self.pk[p]] = self.pf[p]
        for k in range(I.K):
            if (started >> k) & 1:
                continue
            e = t
            pr = I.preds[k]
            for j in range(k):
                if (pr >> j) & 1 and not ((done >> j) & 1):
                    if (started >> j) & 1:
                        f = rfin[j]
                    else:
                        f = est[j] + I.minrt[j]
                    if f > e:
                        e = f
            est[k] = e
            work += I.minrt[k]
            if e + I.minrt[k] > lb:
                lb = e + I.minrt[k]
        wb = t + work / I.P
        if wb > lb:
            lb = wb
        return lb

    cdef double solve(self, tuple st, double bound) except? -1:
        cdef double lb, cur, v
        cdef int found = -1, code
        cdef object hit
        if st[2] == self.I.full:
            return st[0]
        hit = self.memo.get(st)
        if hit is not None:
            if hit[1] or hit[0] >= bound:
                return hit[0]
        lb = self._lower_bound(st)
        if lb >= bound:
            self.memo[st] = (lb, False)
            return lb
        cur = bound
        self._load(st)
        for code in self._actions(st[1], st[2]):
            self.count += 1
            if self.count > self.max_exp:
                raise TooLarge("oracle search exceeded %d expansions" % self.max_exp)
            v = self.solve(self.step(st, code), cur)
            if v < cur:
                cur = v
                found = code
        if found >= 0:
            self.memo[st] = (cur, True)
            self.best[st] = found
            return cur
        self.memo[st] = (bound, False)
        return bound


def oracle_search(inst, max_expansions=10_000_000):
    if inst.K > 62 or inst.P > 64:
        raise TooLarge("compiled search supports at most 62 kernels and 64 processors")
    cdef _Inst I = _Inst(inst)
    cdef _Search S = _Search(I, max_expansions)
    P = inst.P
    st0 = (0.0, 0, 0, (-1,) * P, (0.0,) * P, (-1,) * P)
    st0 = S.step(st0, -1)
    makespan = S.solve(st0, INF)
    actions = []
    st = st0
    while st[2] != I.full:
        code = S.best[st]
        actions.append(code)
        st = S.step(st, code)
    return makespan, actions

