"""Belief-state actor-critic scheduler.

Each scheduler invocation turns raw counter readings into a utilization
belief (through the utilization network), embeds the machine topology (with
the belief attached to its nodes) and the workload DFG with graph-network
blocks, feeds both global embeddings through an LSTM, and scores every
action of the fixed kernel x processor grid plus reconfiguration and no-op
entries. Training is synchronous n-step advantage actor-critic; the loss
gradient with respect to the belief is pushed into the utilization
network's logits with the sampling-based estimator.
"""
from __future__ import annotations

import hashlib
import json
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import _pycore
from .bayesnet import exact_marginal, forward_sample, joint_table, likelihood_weighting
from .bngrad import belief_and_grad
from .errors import NonFiniteLoss, TooLarge
from .neural import (FCNN, GNBlock, Linear, LSTMCell, ParameterSet, Tape, Var, concat, gather_rows,
                     masked_log_softmax, matmul, mul, pick, reshape, scale, scatter,
                     square, sum_)
from .perfmodel import (UtilizationBins, build_utilization_bn, counter_evidence,
                        identity_model)
from .simenv import SchedEnv, oracle_schedule, serial_runtime

INF = math.inf

TOPO_NODE_DIM = 9
DFG_NODE_DIM = 7
GLOBAL_DIM = 3
PAIR_DIM = 8
RECONF_DIM = 3
NOOP_DIM = 2


@dataclass
class TrainConfig:
    lr: float = 0.005
    n_s: int = 20
    n_e: int = 2
    unroll: int = 20
    gamma: float = 0.99
    value_coef: float = 1.0
    clip: float | None = 1.0
    belief_samples: int = 256
    bn_samples: int = 2000
    train_bn: bool = True
    bn_update_every: int = 10
    bn_grad_states: int = 4
    batch_size: int = 128
    noise_sigma: float = 0.02
    normalize_reward: bool = True
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must lie in [0, 1)")
        if self.n_s < 1 or self.n_e < 1 or self.batch_size < 1:
            raise ValueError("n_s, n_e and batch_size must be positive")


@dataclass
class BeliefState:
    values: np.ndarray
    names: list
    provenance: str = "inferred"


# ------------------------------------------------------------ belief

def structure_key(topo, model):
    """Digest of a topology's structure and its counter model."""
    blob = json.dumps([{k: v for k, v in topo.to_dict().items() if k != "name"}, model.to_dict()],
                      sort_keys=True, default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


class BeliefModel:
    """Utilization network for one topology plus its counter model."""

    def __init__(self, topo, model=None):
        self.topo = topo
        self.model = model or identity_model(topo.resource_names)
        self.net = build_utilization_bn(topo, self.model)
        self.bins = UtilizationBins()
        self.centers = self.bins.centers
        order = {name: i for i, name in enumerate(self.net.utilization_names)}
        self.slot = [order.get(r) for r in topo.resource_names]


def estimate_belief(bm, observation, S=1000, seed=0):
    """Posterior-mean utilizations per topology resource.

    Counters absent from ``observation`` stay unobserved. Means come from
    likelihood-weighted samples and are mapped to [0, 1] via bin centers.
    """
    net = bm.net
    ev = counter_evidence(bm.model, net, observation, bm.bins)
    batch, w = likelihood_weighting(net, ev, S, seed)
    tw = w.sum()
    out = np.zeros(len(bm.topo.resources))
    for j, slot in enumerate(bm.slot):
        if slot is None:
            continue
        v = net.utilization_nodes[slot]
        vals = bm.centers[batch.values[:, v]]
        out[j] = float(vals @ w / tw) if tw > 0 else float(vals.mean())
    return BeliefState(np.clip(out, 0.0, 1.0), list(bm.topo.resource_names)), ev


def belief_param_grad(bm, evidence, dloss_dbelief, S=2000, seed=0):
    """Chain rule dL/dTheta = sum_r dL/db_r * db_r/dTheta with sampled db/dTheta."""
    net = bm.net
    batch = forward_sample(net, S, seed, clamp=evidence)
    _, jac = belief_and_grad(net, net.utilization_nodes, bm.centers, batch, clamp=evidence)
    g = np.zeros(net.n_params)
    for j, slot in enumerate(bm.slot):
        if slot is not None:
            g += dloss_dbelief[j] * jac[slot]
    return g


def exact_belief(bm, evidence):
    """Posterior-mean utilizations by enumeration (small networks only)."""
    net = bm.net
    table = joint_table(net)
    out = np.zeros(len(bm.slot))
    for j, slot in enumerate(bm.slot):
        if slot is None:
            continue
        v = net.utilization_nodes[slot]
        out[j] = sum(bm.centers[x] * exact_marginal(net, {v: x}, evidence, table)
                     for x in range(net.nodes[v].card))
    return out


# ----------------------------------------------------------- features

@dataclass
class StateFeatures:
    tV: np.ndarray
    tE: np.ndarray
    t_send: np.ndarray
    t_recv: np.ndarray
    proc_nodes: np.ndarray
    attach: np.ndarray          # (R, n_topo_nodes) averaging matrix
    belief: np.ndarray
    dV: np.ndarray
    dE: np.ndarray
    d_send: np.ndarray
    d_recv: np.ndarray
    glob: np.ndarray
    pair: np.ndarray            # (K*P, PAIR_DIM)
    reconf: np.ndarray          # (P*T, RECONF_DIM)
    noop: np.ndarray
    mask: np.ndarray
    K: int
    P: int
    T: int
    evidence: dict = field(default_factory=dict)
    bm: object = None


class _Static:
    """Per-bundle quantities reused at every decision point."""

    def __init__(self, env):
        inst, topo = env.inst, env.topo
        if inst.K > 62:
            raise TooLarge("scheduler features support at most 62 kernels")
        self.inst = inst
        names = topo.node_names
        idx = {n: i for i, n in enumerate(names)}
        send, recv = [], []
        for a, b in topo.edges:
            send += [idx[a], idx[b]]
            recv += [idx[b], idx[a]]
        self.t_send = np.array(send, dtype=np.int64)
        self.t_recv = np.array(recv, dtype=np.int64)
        self.proc_nodes = np.array([idx[p.name] for p in topo.processors], dtype=np.int64)
        R = len(topo.resources)
        att = np.zeros((R, len(names)))
        for j, r in enumerate(topo.resources):
            for n in r.nodes:
                att[j, idx[n]] = 1.0
        cnt = att.sum(axis=0)
        self.attach = att / np.where(cnt > 0, cnt, 1.0)
        kinds = np.zeros((len(names), 5))
        for p in topo.processors:
            kinds[idx[p.name], ("cpu", "gpu", "fpga").index(p.kind)] = 1.0
        for m in topo.memories:
            kinds[idx[m], 3] = 1.0
        for lk in topo.links:
            kinds[idx[lk], 4] = 1.0
        self.kinds = kinds
        K, P = inst.K, inst.P
        self.minrt = np.array(inst.minrt)
        self.rt = np.array(inst.runtime)                      # (K, P), inf where unavailable
        self.T0 = float(self.minrt.mean()) if K else 1.0
        preds = [[j for j in range(K) if (inst.preds[k] >> j) & 1] for k in range(K)]
        succs = [[k for k in range(K) if j in preds[k]] for j in range(K)]
        self.succs = succs
        bl = np.zeros(K)
        for k in reversed(range(K)):
            bl[k] = self.minrt[k] + max((bl[s] for s in succs[k]), default=0.0)
        self.bottom = bl
        e = [(j, k) for k in range(K) for j in preds[k]]
        self.d_send = np.array([a for a, _ in e], dtype=np.int64)
        self.d_recv = np.array([b for _, b in e], dtype=np.int64)
        # processors sharing a resource
        on = np.asarray(topo.onpath, dtype=bool) if R else np.zeros((P, 1), dtype=bool)
        self.shares = ((on.astype(int) @ on.T.astype(int)) > 0).astype(float)
        self.onpath = on
        self.best_kind = (self.rt <= self.minrt[:, None] + 1e-12).astype(float)
        self.finite = np.isfinite(self.rt)
        self.rt0 = np.where(self.finite, self.rt, 0.0)
        self.logratio = np.where(self.finite, np.log(np.where(self.finite, self.rt, 1.0) /
                                                     self.minrt[:, None]), 0.0)
        self.preds = np.array(inst.preds, dtype=np.int64)
        self.n_succ = np.array([len(s) for s in succs], dtype=float)
        self.ktype = np.array(inst.ktype, dtype=np.int64)
        self.is_fpga = np.array(inst.is_fpga, dtype=float)


def build_features(env, static, belief, mask=None, state=None):
    """Raw features of ``state`` (default: the env's current state)."""
    inst = env.inst
    st = env.state if state is None else state
    t, started, done, pk, pf, cfg = st
    K, P, T = inst.K, inst.P, inst.T
    T0 = static.T0
    pk = np.asarray(pk)
    cfg = np.asarray(cfg)
    busy = (pk != -1).astype(float)
    remaining = np.where(busy > 0, np.asarray(pf, dtype=float) - t, 0.0)
    n_nodes = len(static.kinds)
    belief = np.asarray(belief, dtype=float)
    tV = np.zeros((n_nodes, TOPO_NODE_DIM))
    tV[:, :5] = static.kinds
    tV[static.proc_nodes, 5] = busy
    tV[static.proc_nodes, 6] = remaining / T0
    tV[:, 7] = belief @ static.attach if belief.size else 0.0
    tV[static.proc_nodes, 8] = static.is_fpga * (cfg >= 0)
    tE = np.ones((len(static.t_send), 1))
    bits = np.arange(K)
    st_b = ((started >> bits) & 1).astype(float)
    dn_b = ((done >> bits) & 1).astype(float)
    ready = (1 - st_b) * ((static.preds & done) == static.preds)
    dV = np.stack([dn_b, st_b * (1 - dn_b), ready, (1 - st_b) * (1 - ready),
                   static.bottom / T0, static.minrt / T0, static.n_succ / max(K, 1)], axis=1)
    dE = np.ones((len(static.d_send), 1))
    glob = np.array([t / (T0 * max(K, 1)), dn_b.mean(), st_b.mean()])
    # earliest finish on each processor counting the wait for it to free up
    wait = remaining[None, :] + static.rt
    if static.is_fpga.any():
        wait = wait + inst.reconfig_time * (static.is_fpga[None, :] *
                                            (cfg[None, :] != static.ktype[:, None]))
    eft_best = wait.min(axis=1)
    if static.onpath.shape[1] and belief.size:
        path_b = np.max(np.where(static.onpath, belief[None, :], 0.0), axis=1)
    else:
        path_b = np.zeros(P)
    co_busy = (static.shares @ busy - busy) / max(P - 1, 1)
    fin = static.finite
    pair = np.stack([static.logratio, static.rt0 / T0, np.where(fin, (static.rt0 - eft_best[:, None]) / T0, 0.0),
                     np.repeat(static.bottom[:, None] / T0, P, axis=1),
                     np.repeat(static.n_succ[:, None] / max(K, 1), P, axis=1),
                     np.repeat(path_b[None, :], K, axis=0), np.repeat(co_busy[None, :], K, axis=0),
                     static.best_kind], axis=2)
    pair = np.where(fin[:, :, None], pair, 0.0).reshape(K * P, PAIR_DIM)
    if mask is None:
        mask = env.valid_mask()
    reconf = np.zeros((P * T, RECONF_DIM))
    for p in np.nonzero(static.is_fpga)[0]:
        for ty in range(T):
            ks = [k for k in range(K) if inst.ktype[k] == ty and not st_b[k]]
            if ks:
                reconf[p * T + ty] = [len(ks) / K, min(static.rt[k, p] for k in ks) / T0,
                                      1.0 if cfg[p] == ty else 0.0]
    nxt = remaining[busy > 0].min() / T0 if busy.any() else 0.0
    noop = np.array([nxt, busy.mean()])
    return StateFeatures(tV, tE, static.t_send, static.t_recv, static.proc_nodes, static.attach,
                         belief, dV, dE, static.d_send, static.d_recv,
                         glob, pair, reconf, noop, mask, K, P, T)


# ------------------------------------------------------------- model

class PolicyModel:
    """GN blocks + LSTM + pair-scoring policy head + linear value head."""

    def __init__(self, seed=0, hidden=16, dv=16, de=8, du=8):
        rng = np.random.default_rng(seed)
        ps = ParameterSet()
        self.params = ps
        self.hidden = hidden
        self.t_node = Linear(ps, "topo.proj_v", TOPO_NODE_DIM, dv, rng)
        self.t_edge = Linear(ps, "topo.proj_e", 1, de, rng)
        self.t_glob = Linear(ps, "topo.proj_u", GLOBAL_DIM, du, rng)
        self.d_node = Linear(ps, "dfg.proj_v", DFG_NODE_DIM, dv, rng)
        self.d_edge = Linear(ps, "dfg.proj_e", 1, de, rng)
        self.d_glob = Linear(ps, "dfg.proj_u", GLOBAL_DIM, du, rng)
        # block 1 embeds topology + belief, block 2 the DFG
        self.gn1 = GNBlock(ps, "gn1", (de, dv, du), rng, (64, 32), (32, 16), (16, 16), True)
        self.gn2 = GNBlock(ps, "gn2", (de, dv, du), rng, (64, 32), None, (32, 16), False)
        self.lstm = LSTMCell(ps, "lstm", self.gn1.global_out + self.gn2.global_out, hidden, rng)
        self.pair = FCNN(ps, "pi.pair", dv + self.gn1.node_out + PAIR_DIM + hidden, 32, 16, 1, rng)
        self.reconf = Linear(ps, "pi.reconf", self.gn1.node_out + RECONF_DIM + hidden, 1, rng)
        self.noop = Linear(ps, "pi.noop", hidden + NOOP_DIM, 1, rng)
        self.value = Linear(ps, "v.head", hidden + GLOBAL_DIM, 1, rng)

    def zero_state(self, n=1):
        return np.zeros((n, self.hidden)), np.zeros((n, self.hidden))

    # ---- batched embedding of many states
    def embed(self, tape, feats, belief_var=None):
        """Per-state quantities for a list of feature sets.

        Returns ``(proc_emb, kern, lstm_in, offsets)`` as vars plus numpy
        index maps. ``belief_var`` (n_states, R_max) lets gradients reach the
        belief values.
        """
        B = len(feats)
        tV, tE, ts, tr, eg, ng = [], [], [], [], [], []
        dV, dE, ds, dr, deg, dng = [], [], [], [], [], []
        glob = []
        att_rows, att_cols, att_vals, att_state = [], [], [], []
        t_off = d_off = 0
        proc_idx, kern_idx = [], []
        for b, f in enumerate(feats):
            nt, nd = f.tV.shape[0], f.dV.shape[0]
            tV.append(f.tV)
            tE.append(f.tE)
            ts.append(f.t_send + t_off)
            tr.append(f.t_recv + t_off)
            eg.append(np.full(len(f.t_send), b))
            ng.append(np.full(nt, b))
            proc_idx.append(f.proc_nodes + t_off)
            R = f.attach.shape[0]
            for r in range(R):
                for n in np.nonzero(f.attach[r])[0]:
                    att_rows.append(t_off + n)
                    att_cols.append(b * self._rmax(feats) + r)
                    att_vals.append(f.attach[r, n])
            dV.append(f.dV)
            dE.append(f.dE)
            ds.append(f.d_send + d_off)
            dr.append(f.d_recv + d_off)
            deg.append(np.full(len(f.d_send), b))
            dng.append(np.full(nd, b))
            kern_idx.append(np.arange(nd) + d_off)
            glob.append(f.glob)
            t_off += nt
            d_off += nd
        tVv = np.concatenate(tV)
        rmax = self._rmax(feats)
        if belief_var is not None and rmax:
            # replace the belief column with a differentiable copy
            M = np.zeros((t_off, B * rmax))
            M[att_rows, att_cols] = att_vals
            base = tVv.copy()
            base[:, 7] = 0.0
            col = np.zeros((1, TOPO_NODE_DIM))
            col[0, 7] = 1.0
            bflat = reshape(belief_var, (B * rmax, 1))
            node_b = matmul(Var(M), bflat)
            tVin = Var(base) + matmul(node_b, Var(col))
        else:
            tVin = Var(tVv)
        G = Var(np.stack(glob))
        V1 = self.t_node(tape, tVin)
        E1 = self.t_edge(tape, Var(np.concatenate(tE)))
        U1 = self.t_glob(tape, G)
        V1o, _, U1o = self.gn1(tape, V1, E1, U1, np.concatenate(ts), np.concatenate(tr),
                               np.concatenate(eg), np.concatenate(ng), B)
        V2 = self.d_node(tape, Var(np.concatenate(dV)))
        E2 = self.d_edge(tape, Var(np.concatenate(dE)) if d_off else Var(np.zeros((0, 1))))
        U2 = self.d_glob(tape, G)
        dsc = np.concatenate(ds) if ds else np.zeros(0, dtype=np.int64)
        _, _, U2o = self.gn2(tape, V2, E2, U2, dsc, np.concatenate(dr), np.concatenate(deg),
                             np.concatenate(dng), B)
        lstm_in = concat([U1o, U2o], axis=-1)
        return V1o, V2, lstm_in, G, proc_idx, kern_idx

    @staticmethod
    def _rmax(feats):
        return max(f.attach.shape[0] for f in feats)

    def heads(self, tape, feats, V1o, V2, H, G, proc_idx, kern_idx, rows=None, emb_rows=None):
        """Padded logits for each feature set and values for each LSTM row.

        ``rows[i]`` is the LSTM output row that ``feats[i]`` is scored against
        and ``emb_rows[i]`` its graph-embedding row; both default to ``i``.
        """
        B = len(feats)
        rows = np.arange(B) if rows is None else np.asarray(rows, dtype=np.int64)
        emb_rows = rows if emb_rows is None else np.asarray(emb_rows, dtype=np.int64)
        A_max = max(len(f.mask) for f in feats)
        kp_k, kp_p, kp_h, kp_raw, kp_pos = [], [], [], [], []
        rc_p, rc_h, rc_raw, rc_pos = [], [], [], []
        for b, f in enumerate(feats):
            K, P, T = f.K, f.P, f.T
            r, m = rows[b], emb_rows[b]
            ks = np.repeat(np.arange(K), P)
            pp = np.tile(np.arange(P), K)
            kp_k.append(kern_idx[m][ks])
            kp_p.append(proc_idx[m][pp])
            kp_h.append(np.full(K * P, r))
            kp_raw.append(f.pair)
            kp_pos.append(b * A_max + np.arange(K * P))
            fp = [p for p in range(P) for _ in range(T)]
            if P * T:
                rc_p.append(proc_idx[m][np.array(fp, dtype=np.int64)])
                rc_h.append(np.full(P * T, r))
                rc_raw.append(f.reconf)
                rc_pos.append(b * A_max + K * P + np.arange(P * T))
        kp_k = np.concatenate(kp_k)
        pair_in = concat([gather_rows(V2, kp_k), gather_rows(V1o, np.concatenate(kp_p)),
                          Var(np.concatenate(kp_raw)), gather_rows(H, np.concatenate(kp_h))], axis=-1)
        s_pair = self.pair(tape, pair_in)
        rc_in = concat([gather_rows(V1o, np.concatenate(rc_p)), Var(np.concatenate(rc_raw)),
                        gather_rows(H, np.concatenate(rc_h))], axis=-1)
        s_rc = self.reconf(tape, rc_in)
        noop_raw = np.stack([f.noop for f in feats])
        s_noop = self.noop(tape, concat([gather_rows(H, rows), Var(noop_raw)], axis=-1))
        noop_pos = np.array([b * A_max + len(f.mask) - 1 for b, f in enumerate(feats)])
        idx = np.concatenate([np.concatenate(kp_pos), np.concatenate(rc_pos), noop_pos])
        flat = scatter(concat([s_pair, s_rc, s_noop], axis=0), idx, B * A_max)
        logits = reshape(flat, (B, A_max))
        values = self.value(tape, concat([gather_rows(H, rows), gather_rows(G, emb_rows)], axis=-1))
        masks = np.zeros((B, A_max), dtype=bool)
        for b, f in enumerate(feats):
            masks[b, :len(f.mask)] = f.mask
        return logits, values, masks

    def trunk(self, feats, state):
        """Graph embeddings and one LSTM step without a tape.

        Returns ``(cache, value, new_state)``; ``cache`` feeds :meth:`score`.
        """
        V1o, V2, lstm_in, G, pi, ki = self.embed(None, [feats])
        h, c = state
        H, (h2, c2) = self.lstm(None, lstm_in, (Var(h), Var(c)))
        value = float(self.value(None, concat([H, G], axis=-1)).value[0, 0])
        return (V1o, V2, H, G, pi, ki), value, (h2.value, c2.value)

    def score(self, cache, feats):
        """Action logits for ``feats`` against a cached trunk output."""
        V1o, V2, H, G, pi, ki = cache
        logits, _, _ = self.heads(None, [feats], V1o, V2, H, G, pi, ki, rows=[0])
        return logits.value[0, :len(feats.mask)]

    def step(self, feats, state):
        """Forward one state without a tape; returns ``(logits, value, new_state)``."""
        cache, value, new_state = self.trunk(feats, state)
        return self.score(cache, feats), value, new_state


def value_and_belief_grad(model, feats, belief, state=None):
    """Value head output for ``feats`` with ``belief`` substituted, and dV/dbelief."""
    state = state or model.zero_state()
    tape = Tape(model.params)
    bvar = Var(np.asarray(belief, dtype=float)[None, :], tape)
    V1o, V2, lstm_in, G, pi, ki = model.embed(tape, [feats], bvar)
    H, _ = model.lstm(tape, lstm_in, (Var(state[0]), Var(state[1])))
    _, values, _ = model.heads(tape, [feats], V1o, V2, H, G, pi, ki)
    out = sum_(values)
    grads = tape.backward(out)
    model.params.zero_grad()
    g = grads[bvar.idx]
    return float(out.value), (np.zeros(len(belief)) if g is None else g[0])


def toy_bundle():
    """One CPU, one memory-bandwidth resource, two dependent kernels."""
    from .fabric import DataFlowGraph, KernelProfile, minimal_topology
    from .simenv import Bundle
    prof = {"load": KernelProfile("load", {"cpu": 2.0}, {"cpu": {"memory": 0.6}}),
            "reduce": KernelProfile("reduce", {"cpu": 1.0}, {"cpu": {"memory": 0.2}})}
    return Bundle(minimal_topology(), prof, [DataFlowGraph(["load", "reduce"], [(0, 1)])], name="toy")


def chain_rule_trials(trials=100, S=20000, sample_seed=0, eps=1e-5, seed=0):
    """Sampled dL/dTheta_BN against central differences on the two-node toy.

    Each trial draws fresh network logits, a counter reading and policy
    weights, takes L as the value head, and compares signs on one logit of the
    active utilization row. Returns the list of ``(sampled, numeric)`` pairs.
    """
    bundle = toy_bundle()
    env = SchedEnv(bundle, seed=seed)
    env.reset()
    static = _Static(env)
    bm = BeliefModel(bundle.topology)
    net = bm.net
    c_node = net.counter_nodes[0]
    u_node = net.utilization_nodes[0]
    lo = net.param_slices[u_node].start
    base = net.get_params()
    out = []
    for t in range(trials):
        rng = np.random.default_rng([seed, t])
        theta = rng.normal(0.0, 1.0, size=base.size)
        net.set_params(theta)
        ev = {c_node: int(rng.integers(net.nodes[c_node].card))}
        model = PolicyModel(seed=int(rng.integers(2**31)))
        b = exact_belief(bm, ev)
        feats = build_features(env, static, b)
        _, g = value_and_belief_grad(model, feats, b)
        sampled = belief_param_grad(bm, ev, g, S, sample_seed)
        card = net.nodes[u_node].card
        j = lo + ev[c_node] * card + int(rng.integers(card))
        vals = []
        for d in (eps, -eps):
            th = theta.copy()
            th[j] += d
            net.set_params(th)
            vals.append(value_and_belief_grad(model, build_features(env, static, exact_belief(bm, ev)),
                                              exact_belief(bm, ev))[0])
        net.set_params(theta)
        out.append((float(sampled[j]), (vals[0] - vals[1]) / (2 * eps)))
    net.set_params(base)
    return out


def policy_value_heads(model, feats, state=None):
    """Action logits over the full action space and the scalar value."""
    state = state or model.zero_state()
    logits, value, _ = model.step(feats, state)
    return logits, value


def masked_probs(logits, mask):
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        return np.zeros_like(logits, dtype=float)
    x = np.where(mask, logits, -np.inf)
    x = x - x[mask].max()
    e = np.where(mask, np.exp(x), 0.0)
    return e / e.sum()


def batch_tasks(logits, mask, K, P, T, batch_size, greedy=True, rng=None, rescore=None):
    """Greedy sequential decoding of up to ``batch_size`` actions in one invocation.

    After each pick, actions touching the same kernel or processor are masked
    out; ``rescore(picks, mask)``, when given, returns fresh logits for the
    next pick. A no-op pick ends the batch. Returns ``[(mask_before_pick, action)]``.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    mask = np.array(mask, dtype=bool)
    noop = len(mask) - 1
    picks = []
    while mask.any() and len(picks) < batch_size:
        p = masked_probs(logits, mask)
        a = int(np.argmax(p)) if greedy else int(rng.choice(len(p), p=p))
        picks.append((mask.copy(), a))
        if a == noop:
            break
        if a < K * P:
            k, q = divmod(a, P)
            mask[k * P:(k + 1) * P] = False
        else:
            q = (a - K * P) // T
        mask[np.arange(K) * P + q] = False
        mask[K * P + q * T:K * P + (q + 1) * T] = False
        if rescore is not None and mask.any() and len(picks) < batch_size:
            logits = rescore(picks, mask)
    return picks


# ------------------------------------------------------------ advantages

def compute_advantages(rewards, values, bootstrap, dones, gamma):
    """n-step advantages for one env: returns ``(advantages, returns)``.

    ``values[i] = V(s_i)``; ``bootstrap = V(s_n)`` (ignored past a terminal
    step); ``dones[i]`` marks that the episode ended at step ``i``.
    """
    n = len(rewards)
    ret = np.zeros(n)
    R = float(bootstrap)
    for i in reversed(range(n)):
        if dones[i]:
            R = 0.0
        R = rewards[i] + gamma * R
        ret[i] = R
    return ret - np.asarray(values, dtype=float), ret


# --------------------------------------------------------------- agent

@dataclass
class Decision:
    feats: StateFeatures
    picks: list                    # (features, action) per pick of the invocation
    reward: float = 0.0
    done: bool = False
    value: float = 0.0


def act(model, feats, state=None, greedy=True, rng=None):
    """One action: ``(code, logits, value, new_state)``.

    Samples from the masked softmax unless ``greedy``; an all-false mask
    yields the no-op code.
    """
    state = state or model.zero_state()
    logits, value, new_state = model.step(feats, state)
    if not feats.mask.any():
        return len(feats.mask) - 1, logits, value, new_state
    (_, a), = batch_tasks(logits, feats.mask, feats.K, feats.P, feats.T, 1, greedy, rng)
    return a, logits, value, new_state


class _EnvSlot:
    def __init__(self, agent, bundles, rng, cfg):
        self.agent = agent
        self.bundles = bundles
        self.rng = rng
        self.cfg = cfg
        self.episodes = []
        self.new_episode()

    def new_episode(self):
        i = int(self.rng.integers(len(self.bundles)))
        self.bundle_index = i
        b = self.bundles[i]
        scale = serial_runtime(b) if self.cfg.normalize_reward else 1.0
        self.env = SchedEnv(b, seed=int(self.rng.integers(2**31)), noise_sigma=self.cfg.noise_sigma,
                            reward_scale=scale)
        self.static = _Static(self.env)
        self.obs = self.env.reset().observation
        self.state = self.agent.model.zero_state()
        self.invalid = 0
        self.steps = 0


class Agent:
    """Policy/value model plus one utilization network per topology."""

    def __init__(self, cfg=None, seed=None):
        self.cfg = cfg or TrainConfig()
        seed = self.cfg.seed if seed is None else seed
        self.model = PolicyModel(seed)
        self.params = self.model.params
        self.beliefs = {}
        self._pending_bn = {}
        self._keys = {}
        self.counter = 0
        self.rng = np.random.default_rng(seed + 1)

    def belief_model(self, topo, model=None):
        """Utilization network shared by every topology with the same structure."""
        memo = self._keys.get(id(topo))
        if memo is None or memo[0] is not topo or memo[1] is not model:
            m = model or identity_model(topo.resource_names)
            memo = (topo, model, structure_key(topo, m), m)
            self._keys[id(topo)] = memo
        key, model = memo[2], memo[3]
        bm = self.beliefs.get(key)
        if bm is None:
            bm = BeliefModel(topo, model)
            if key in self._pending_bn:
                bm.net.set_params(np.asarray(self._pending_bn.pop(key), dtype=float))
            self.beliefs[key] = bm
        return bm

    def observe(self, env, static, observation):
        bm = self.belief_model(env.topo, env.counter_model)
        self.counter += 1
        b, ev = estimate_belief(bm, observation, self.cfg.belief_samples, self.counter)
        f = build_features(env, static, b.values)
        f.evidence = ev
        f.bm = bm
        return f

    # ---- acting
    def decide(self, env, static, feats, state, greedy, batch_size, rng):
        """One invocation: counters are read and the belief inferred once, then
        actions are decoded one at a time, each pick re-embedding the
        hypothetical state and stepping the LSTM.

        Returns ``([(feats_j, action_j)], value, new_state)``.
        """
        cache, value, st = self.model.trunk(feats, state)
        carry = [st]
        seen = [feats]
        hyp = [env.state]
        load = [np.asarray(feats.belief, dtype=float)]

        def rescore(picks, mask):
            a = picks[-1][1]
            st, _ = _pycore.apply_action(env.inst, hyp[-1], a)
            hyp.append(st)
            # later picks see the load the earlier picks of this batch will add
            b = load[-1]
            if a < feats.K * feats.P and b.size:
                k, q = divmod(a, feats.P)
                b = np.clip(b + np.asarray(env.inst.demand[k][q])[:b.size], 0.0, 1.0)
            load.append(b)
            f = build_features(env, static, b, mask.copy(), st)
            seen.append(f)
            c, _, nxt = self.model.trunk(f, carry[-1])
            carry.append(nxt)
            return self.model.score(c, f)

        picks = batch_tasks(self.model.score(cache, feats), feats.mask, feats.K, feats.P,
                            feats.T, batch_size, greedy, rng, rescore)
        return [(seen[j], a) for j, (_, a) in enumerate(picks)], value, carry[-1]

    def act(self, feats, state, greedy=True, rng=None):
        return act(self.model, feats, state, greedy, rng or self.rng)

    def run(self, slot, greedy, batch_size, rng):
        """One invocation on ``slot``: returns a :class:`Decision`."""
        env = slot.env
        feats = self.observe(env, slot.static, slot.obs)
        picks, value, slot.state = self.decide(env, slot.static, feats, slot.state, greedy,
                                               batch_size, rng)
        total = 0.0
        done = False
        for _, a in picks:
            if a not in env.valid_actions():
                break
            out = env.step(a)
            total += out.reward
            slot.obs = out.observation
            slot.invalid += out.info["invalid"]
            slot.steps += 1
            if out.done:
                done = True
                break
        return Decision(feats, picks, total, done, value)

    # ---- learning
    def update(self, decisions, bootstrap, init_states, update_bn=False):
        """One A2C step on ``decisions[e][i]``; returns ``(loss_A, loss_V)``."""
        cfg = self.cfg
        n_e = len(decisions)
        n_s = len(decisions[0])
        feats = [decisions[e][i].feats for i in range(n_s) for e in range(n_e)]
        N = n_e * n_s
        # picks after the first of a batch carry their own embedding rows
        extra = []
        for e in range(n_e):
            for i in range(n_s):
                extra.extend(f for f, _ in decisions[e][i].picks[1:])
        feats = feats + extra
        rmax = max(f.attach.shape[0] for f in feats)
        bel = np.zeros((len(feats), rmax))
        for j, f in enumerate(feats):
            bel[j, :f.belief.size] = f.belief
        tape = Tape(self.params)
        bvar = Var(bel, tape)
        V1o, V2, lstm_in, G, pi, ki = self.model.embed(tape, feats, bvar)
        # the LSTM steps once per pick, as in decoding; a decision without
        # picks still takes its first step
        Hs, vrows = [], np.zeros(N, dtype=np.int64)
        rows, emb_rows, pfeats, acts, owners = [], [], [], [], []
        nxt = N
        for e in range(n_e):
            h, c = Var(init_states[e][0]), Var(init_states[e][1])
            for i in range(n_s):
                d = decisions[e][i]
                seq = [i * n_e + e] + list(range(nxt, nxt + max(len(d.picks) - 1, 0)))
                nxt += len(seq) - 1
                for j, m in enumerate(seq):
                    out, (h, c) = self.model.lstm(tape, gather_rows(lstm_in, [m]), (h, c))
                    Hs.append(out)
                    if j == 0:
                        vrows[i * n_e + e] = len(Hs) - 1
                    if j < len(d.picks):
                        rows.append(len(Hs) - 1)
                        emb_rows.append(m)
                        pfeats.append(d.picks[j][0])
                        acts.append(d.picks[j][1])
                        owners.append(i * n_e + e)
                if d.done:
                    h, c = Var(np.zeros_like(h.value)), Var(np.zeros_like(c.value))
        H = concat(Hs, axis=0)
        values = self.model.value(tape, concat([gather_rows(H, vrows), gather_rows(G, np.arange(N))],
                                               axis=-1))
        if pfeats:
            logits, _, masks = self.model.heads(tape, pfeats, V1o, V2, H, G, pi, ki, rows, emb_rows)
        # advantages use the values from this forward pass
        vals = values.value[:, 0].reshape(n_s, n_e)
        adv = np.zeros((n_s, n_e))
        for e in range(n_e):
            a, _ = compute_advantages([d.reward for d in decisions[e]], vals[:, e], bootstrap[e],
                                      [d.done for d in decisions[e]], cfg.gamma)
            adv[:, e] = a
        advs = [adv[r // n_e, r % n_e] for r in owners]
        if acts:
            lp = masked_log_softmax(logits, masks)
            chosen = pick(lp, np.arange(len(acts)), acts)
            loss_a = scale(sum_(mul(chosen, Var(np.array(advs)))), -1.0 / N)
        else:
            loss_a = Var(np.asarray(0.0))
        # A = R - V(s) with R fixed: gradient of A^2 flows through V only
        ret = (adv + vals).reshape(-1)
        diff = Var(ret[:, None]) - values
        loss_v = scale(sum_(square(diff)), 1.0 / N)
        total = loss_a + scale(loss_v, cfg.value_coef)
        la, lv = float(loss_a.value), float(loss_v.value)
        if not (math.isfinite(la) and math.isfinite(lv)):
            raise NonFiniteLoss("loss is not finite")
        self.params.zero_grad()
        grads = tape.backward(total)
        dbel = grads[bvar.idx] if grads[bvar.idx] is not None else np.zeros_like(bel)
        self.params.sgd_step(cfg.lr, cfg.clip)
        if update_bn and cfg.train_bn:
            # predicted-load rows of later picks have no evidence behind them
            self._update_bn(feats[:N], dbel[:N])
        return la, lv

    def _update_bn(self, feats, dbel):
        cfg = self.cfg
        order = np.argsort(-np.abs(dbel).sum(axis=1), kind="stable")[:cfg.bn_grad_states]
        grads = {}
        for j in order:
            bm = feats[j].bm
            self.counter += 1
            g = belief_param_grad(bm, feats[j].evidence, dbel[j, :len(bm.slot)],
                                  cfg.bn_samples, self.counter)
            prev = grads.get(id(bm), (bm, 0.0))[1]
            grads[id(bm)] = (bm, prev + g * (len(feats) / len(order)))
        for bm, g in grads.values():
            if np.all(np.isfinite(g)):
                bm.net.set_params(bm.net.get_params() - cfg.lr * g)

    def checkpoint(self):
        """Policy parameters plus the utilization-network logits per topology structure."""
        out = self.params.to_checkpoint()
        bn = dict(self._pending_bn)
        bn.update({k: bm.net.get_params().tolist() for k, bm in self.beliefs.items()})
        out["bn"] = {k: bn[k] for k in sorted(bn)}
        return out

    def load_checkpoint(self, data):
        self.params.load_checkpoint(data)
        self._pending_bn = dict(data.get("bn", {}))
        for key, bm in self.beliefs.items():
            if key in self._pending_bn:
                bm.net.set_params(np.asarray(self._pending_bn.pop(key), dtype=float))

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.checkpoint(), fh, sort_keys=True)
            fh.write("\n")

    def load(self, path):
        with open(path) as fh:
            self.load_checkpoint(json.load(fh))


def actor_critic_update(agent, decisions, bootstrap, init_states, update_bn=False):
    """``(loss_A, loss_V)`` after one SGD step; see :meth:`Agent.update`."""
    return agent.update(decisions, bootstrap, init_states, update_bn)


# ---------------------------------------------------------------- loops

def reference_makespan(bundle):
    """Oracle makespan, or the critical-path lower bound when the oracle is out of reach."""
    try:
        return oracle_schedule(bundle)[0]
    except TooLarge:
        inst, _ = bundle.instance()
        return _pycore.lower_bound(inst, _pycore.initial_state(inst))


def train(agent, bundles, iterations, log=None, on_iteration=None, timer=time.perf_counter):
    """Synchronous advantage actor-critic over ``n_e`` environment slots.

    Returns a list of per-iteration records (iteration, mean normalized
    makespan of episodes finished in that iteration, losses, invalid-action
    rate, wall_ms). ``timer=None`` records wall_ms as 0 for byte-stable logs.
    """
    cfg = agent.cfg
    log = [] if log is None else log
    if iterations <= 0:
        return log
    rng = np.random.default_rng(cfg.seed + 7)
    refs = {}
    slots = [_EnvSlot(agent, bundles, np.random.default_rng(cfg.seed * 1000 + e), cfg)
             for e in range(cfg.n_e)]
    for it in range(iterations):
        t0 = timer() if timer else 0.0
        init = [(s.state[0].copy(), s.state[1].copy()) for s in slots]
        decisions = [[] for _ in slots]
        finished = []
        inval = steps = 0
        for e, s in enumerate(slots):
            for i in range(cfg.n_s):
                d = agent.run(s, False, cfg.batch_size, rng)
                decisions[e].append(d)
                if d.done:
                    b = s.bundles[s.bundle_index]
                    if s.bundle_index not in refs:
                        refs[s.bundle_index] = reference_makespan(b)
                    finished.append(s.env.makespan / refs[s.bundle_index])
                    inval += s.invalid
                    steps += s.steps
                    s.new_episode()
        boot = []
        for s in slots:
            f = agent.observe(s.env, s.static, s.obs)
            _, v, _ = agent.model.step(f, s.state)
            boot.append(v)
        la, lv = agent.update(decisions, boot, init,
                              update_bn=(cfg.bn_update_every > 0 and (it + 1) % cfg.bn_update_every == 0))
        rec = {"iteration": it, "mean_normalized_makespan": float(np.mean(finished)) if finished else float("nan"),
               "loss_A": la, "loss_V": lv,
               "invalid_rate": (inval / steps) if steps else 0.0,
               "wall_ms": ((timer() - t0) * 1000.0) if timer else 0.0}
        log.append(rec)
        if on_iteration:
            on_iteration(rec)
    return log


def evaluate(agent, bundles, batch_size=1, greedy=True, seed=0):
    """Run one episode per bundle; returns ``[(makespan, invocations, env)]``."""
    rng = np.random.default_rng(seed)
    out = []
    cfg = agent.cfg
    for i, b in enumerate(bundles):
        slot = _EnvSlot.__new__(_EnvSlot)
        slot.agent, slot.bundles, slot.cfg, slot.rng = agent, [b], cfg, np.random.default_rng(seed + i)
        slot.episodes = []
        slot.new_episode()
        calls = 0
        while not slot.env.done:
            agent.run(slot, greedy, batch_size, rng)
            calls += 1
        out.append((slot.env.makespan, calls, slot.env))
    return out


def write_log_csv(path, log):
    cols = ["iteration", "mean_normalized_makespan", "loss_A", "loss_V", "invalid_rate", "wall_ms"]
    with open(path, "w") as fh:
        fh.write(",".join(cols) + "\n")
        for r in log:
            fh.write(",".join(repr(float(r[c])) if c != "iteration" else str(r[c]) for c in cols) + "\n")


def config_dict(cfg):
    return asdict(cfg)
