"""Experiment orchestration shared by the CLI subcommands."""
from __future__ import annotations

import hashlib
import json
import os
import platform
import time

import numpy as np
import scipy

from .. import __version__, _pycore, core
from ..agent import Agent, evaluate, reference_makespan, train, write_log_csv
from ..errors import TooLarge
from ..fabric import generate_workload, load_profiles, load_topology, shipped_profiles, shipped_topology
from ..simenv import (Bundle, SchedEnv, baseline_random, baseline_sjf, oracle_schedule,
                      random_bundle, replay, wide_bundle, write_trace)
from .report import EpisodeRecord, emit_report


def _topology(name):
    if name.endswith(".json"):
        with open(name) as fh:
            return load_topology(json.load(fh))
    return shipped_topology(name)


def _profiles(name):
    if name.endswith(".json"):
        with open(name) as fh:
            return load_profiles(json.load(fh))
    return shipped_profiles(name)


def make_instances(spec):
    """Bundles described by an :class:`InstanceSpec`, seeded ``spec.seed + i``."""
    if spec.generator == "random":
        return [random_bundle(spec.seed + i, n_kernels=spec.n_kernels) for i in range(spec.count)]
    if spec.generator == "wide":
        return [wide_bundle(spec.seed + i) for i in range(spec.count)]
    topo, prof = _topology(spec.topology), _profiles(spec.profiles)
    out = []
    for i in range(spec.count):
        size = int(spec.sizes[i % len(spec.sizes)])
        dfg = generate_workload(spec.template, size, spec.seed + i, kernels=sorted(prof))
        out.append(Bundle(topo, prof, [dfg], name="%s-%d" % (spec.template, spec.seed + i)))
    return out


def reference_schedule(bundle):
    """``(makespan, kind, kernel finish times or None)`` for the normalizing reference."""
    try:
        ms, actions = oracle_schedule(bundle)
    except TooLarge:
        return reference_makespan(bundle), "lower_bound", None
    env = SchedEnv(bundle, noise_sigma=0.0)
    replay(env, actions)
    return ms, "oracle", {k: f for k, (_, f) in env.kernel_times().items()}


def _finish(env):
    return {k: f for k, (_, f) in env.kernel_times().items()}


def run_scheduler(bundle, scheduler, seed, agent=None, batch_size=1, reference=None):
    """Schedule one bundle; returns ``(EpisodeRecord, trace)``."""
    env = SchedEnv(bundle, seed=seed)
    if scheduler == "random":
        res = baseline_random(env, seed)
        invocations, invalid = res.invocations, res.invalid
    elif scheduler == "sjf":
        res = baseline_sjf(env)
        invocations, invalid = res.invocations, res.invalid
    elif scheduler == "oracle":
        _, actions = oracle_schedule(bundle)
        env.reset()
        replay(env, actions)
        invocations, invalid = len(actions), 0
    elif scheduler == "agent":
        (_, invocations, env), = evaluate(agent, [bundle], batch_size=batch_size, seed=seed)
        invalid = sum(1 for r in env.trace if r["invalid"])
    else:
        raise ValueError("unknown scheduler %r" % scheduler)
    ref = reference or reference_schedule(bundle)
    inst, wl = bundle.instance()
    rec = EpisodeRecord(bundle.name, scheduler, env.makespan, ref[0], ref[1], _finish(env),
                        [w for w, _ in wl.owner], ref[2], invocations, invalid)
    trace = [dict(r, instance=bundle.name, scheduler=scheduler) for r in env.trace]
    return rec, trace


def versions():
    return {"hetsched": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
            "python": platform.python_version(), "backend": core.BACKEND}


def file_digest(path):
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


def write_manifest(out_dir, command, cfg, seeds, extra=None):
    """Config, its SHA-256, seeds, versions and artifact digests; no timestamps."""
    files = sorted(f for f in os.listdir(out_dir) if f != "manifest.json")
    if isinstance(cfg, dict):
        conf = cfg
        digest = hashlib.sha256(json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode()).hexdigest()
    else:
        conf, digest = cfg.to_dict(), cfg.digest()
        conf.pop("out")
    man = {"command": command, "config": conf, "config_sha256": digest,
           "seeds": seeds, "versions": versions(),
           "artifacts": {f: file_digest(os.path.join(out_dir, f)) for f in files
                         if os.path.isfile(os.path.join(out_dir, f))}}
    if extra:
        man.update(extra)
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(man, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return man


def build_agent(cfg, serial=True, log_path=None):
    """Agent from ``cfg.checkpoint`` or trained for ``cfg.iterations`` on the training instances."""
    agent = Agent(cfg.train_config())
    if cfg.checkpoint:
        agent.load(cfg.checkpoint)
        return agent, []
    log = train(agent, make_instances(cfg.train_instances), cfg.iterations,
                timer=None if serial else time.perf_counter)
    if log_path:
        write_log_csv(log_path, log)
    return agent, log


def run_evaluate(cfg, serial=True):
    out = cfg.out
    os.makedirs(out, exist_ok=True)
    agent = None
    if cfg.scheduler == "agent":
        agent, _ = build_agent(cfg, serial, os.path.join(out, "train_log.csv"))
        agent.save(os.path.join(out, "checkpoint.json"))
    records, traces = [], []
    for i, b in enumerate(make_instances(cfg.instances)):
        rec, tr = run_scheduler(b, cfg.scheduler, cfg.seed + i, agent, cfg.batch_size)
        records.append(rec)
        traces.extend(tr)
    write_trace(os.path.join(out, "trace.jsonl"), traces)
    summary = emit_report(records, out)
    write_manifest(out, "evaluate", cfg, {"seed": cfg.seed, "instances": cfg.instances.seed,
                                          "train_instances": cfg.train_instances.seed})
    return records, summary


def run_train(cfg, serial=True):
    out = cfg.out
    os.makedirs(out, exist_ok=True)
    agent, log = build_agent(cfg, serial, os.path.join(out, "train_log.csv"))
    agent.save(os.path.join(out, "checkpoint.json"))
    write_manifest(out, "train", cfg, {"seed": cfg.seed, "train_instances": cfg.train_instances.seed})
    return agent, log


def run_sweep(cfg, serial=True):
    """Invocation count and makespan per batch size for one agent; writes ``sweep.csv``."""
    out = cfg.out
    os.makedirs(out, exist_ok=True)
    agent, _ = build_agent(cfg, serial, os.path.join(out, "train_log.csv"))
    bundles = make_instances(cfg.instances)
    rows = []
    for bs in cfg.batch_sizes:
        res = evaluate(agent, bundles, batch_size=int(bs), seed=cfg.seed)
        for b, (ms, calls, _) in zip(bundles, res):
            rows.append((int(bs), b.name, ms, calls))
    with open(os.path.join(out, "sweep.csv"), "w") as fh:
        fh.write("batch_size,instance,makespan,invocations\n")
        for bs, name, ms, calls in rows:
            fh.write("%d,%s,%r,%d\n" % (bs, name, float(ms), calls))
    write_manifest(out, "sweep-batch", cfg, {"seed": cfg.seed, "instances": cfg.instances.seed})
    return rows


def run_simulate(bundle, scheduler, seed, out, agent=None, batch_size=1):
    os.makedirs(out, exist_ok=True)
    rec, trace = run_scheduler(bundle, scheduler, seed, agent, batch_size)
    write_trace(os.path.join(out, "trace.jsonl"), trace)
    return rec


def oracle_for(bundle):
    ms, actions = oracle_schedule(bundle)
    inst, _ = bundle.instance()
    return ms, actions, _pycore.lower_bound(inst, _pycore.initial_state(inst))
