"""Compiled vs pure-Python kernels: ancestral sampling and oracle search.

Run ``python benchmarks/bench_core.py``; prints one line per workload with the
best-of-N wall time for each backend and the speedup. Results are checked for
equality so a faster backend that drifts is reported as a failure.
"""
import argparse
import sys
import time

import numpy as np

from hetsched import core
from hetsched.bayesnet import forward_sample, random_dag
from hetsched.perfmodel import build_utilization_bn, shipped_model
from hetsched.simenv import oracle_schedule, random_bundle


def best_of(fn, repeat):
    times = []
    out = None
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return min(times), out


def sampling(backend, S):
    net = build_utilization_bn(None, shipped_model())
    return lambda: forward_sample(net, S, 0, backend=backend).values


def sampling_random(backend, S):
    net = random_dag(np.random.default_rng(0), 10, edge_prob=0.4, card_range=(2, 4))
    return lambda: forward_sample(net, S, 1, backend=backend).values


def oracle(backend, n):
    bundles = [random_bundle(s, n_kernels=5) for s in range(n)]
    return lambda: [oracle_schedule(b, backend=backend)[0] for b in bundles]


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--samples", type=int, default=20_000)
    ap.add_argument("--instances", type=int, default=20)
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args(argv)
    backends = core.available_backends()
    print("backends: %s (active: %s)" % (", ".join(backends), core.BACKEND))
    cases = [("sample xeon16 BN, S=%d" % args.samples, sampling, args.samples),
             ("sample random 10-node BN, S=%d" % args.samples, sampling_random, args.samples),
             ("oracle search, %d 5-kernel instances" % args.instances, oracle, args.instances)]
    ok = True
    for label, make, size in cases:
        res = {}
        for b in backends:
            res[b] = best_of(make(b, size), args.repeat)
        line = "%-42s" % label + "".join("  %s %8.3fs" % (b, res[b][0]) for b in backends)
        if "cython" in res:
            same = all(np.array_equal(np.asarray(res["python"][1]), np.asarray(res[b][1])) for b in res)
            ok &= same
            line += "  speedup %6.1fx%s" % (res["python"][0] / res["cython"][0], "" if same else "  MISMATCH")
        print(line)
    return 0 if ok else 1


if __name__ == "__main__":
    sys.exit(main())
