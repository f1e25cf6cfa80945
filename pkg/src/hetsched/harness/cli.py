"""``hetsched`` command line: gradcheck, simulate, train, evaluate, sweep-batch, oracle."""
from __future__ import annotations

import argparse
import json
import os
import sys

from ..errors import HetschedError
from ..simenv import Bundle, random_bundle
from .config import SCHEDULERS, load_config
from . import runner


class CliError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(message)


def _common(p, scheduler=False):
    p.add_argument("--config", help="experiment config JSON")
    p.add_argument("--seed", type=int, help="experiment and instance seed")
    p.add_argument("--out", help="output directory")
    p.add_argument("--serial", action="store_true",
                   help="deterministic single-process run (no wall-clock fields)")
    if scheduler:
        p.add_argument("--scheduler", choices=SCHEDULERS)
        p.add_argument("--batch-size", type=int)


def build_parser():
    ap = _Parser(prog="hetsched", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gradcheck", help="bn-grad estimator against the exact oracle")
    p.add_argument("--suite", default="small-bns", help="'small-bns' or a directory of network JSON files")
    p.add_argument("--seeds", type=int, default=10)
    p.add_argument("--samples", type=int, default=100_000)
    p.add_argument("--out")

    p = sub.add_parser("simulate", help="run one scheduler on one instance and write its trace")
    _common(p, scheduler=True)
    p.add_argument("--instance", help="bundle JSON (default: random tiny instance from --seed)")
    p.add_argument("--checkpoint", help="agent checkpoint for --scheduler agent")

    p = sub.add_parser("train", help="train the agent; writes train_log.csv and checkpoint.json")
    _common(p)
    p.add_argument("--iterations", type=int)
    p.add_argument("--batch-size", type=int)

    p = sub.add_parser("evaluate", help="oracle-normalized evaluation report")
    _common(p, scheduler=True)
    p.add_argument("--instances", type=int, help="number of evaluation instances")
    p.add_argument("--checkpoint")
    p.add_argument("--iterations", type=int)

    p = sub.add_parser("sweep-batch", help="invocations and makespan across batch sizes")
    _common(p)
    p.add_argument("--instances", type=int)
    p.add_argument("--batch-sizes", help="comma-separated, e.g. 1,2,4,8,16")
    p.add_argument("--checkpoint")
    p.add_argument("--iterations", type=int)

    p = sub.add_parser("oracle", help="exhaustive minimum makespan of a tiny instance")
    p.add_argument("--instance", required=True, help="bundle JSON")
    p.add_argument("--out")
    return ap


def _config(args, **extra):
    over = {"seed": args.seed, "out": args.out}
    if args.seed is not None:
        over["instances"] = {"seed": args.seed}
    for key in ("scheduler", "batch_size", "iterations", "checkpoint"):
        if getattr(args, key, None) is not None:
            over[key] = getattr(args, key)
    if getattr(args, "instances", None) is not None:
        over.setdefault("instances", {})["count"] = args.instances
    if getattr(args, "batch_sizes", None):
        over["batch_sizes"] = [int(b) for b in args.batch_sizes.split(",")]
    over.update(extra)
    cfg = load_config(args.config, over)
    if args.out is None and args.config is None:
        cfg.out = os.path.join("runs", args.command)
    return cfg


def _emit(obj):
    print(json.dumps(obj, sort_keys=True))


def cmd_gradcheck(args):
    from ..bngrad import load_suite, suite_errors
    suite = load_suite(None if args.suite == "small-bns" else args.suite)
    rows = suite_errors(suite, seeds=args.seeds, S=args.samples)
    for r in rows:
        print("%-20s max_rel_error=%.4f worst_ratio=%.3f %s"
              % (r["name"], r["max_rel_error"], r["worst_ratio"], "ok" if r["passed"] else "FAIL"))
    worst = max(r["max_rel_error"] for r in rows)
    ok = all(r["passed"] for r in rows)
    print("max relative error %.4f over %d networks: %s" % (worst, len(rows), "PASS" if ok else "FAIL"))
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "gradcheck.json"), "w") as fh:
            json.dump(rows, fh, indent=1, sort_keys=True)
            fh.write("\n")
        runner.write_manifest(args.out, "gradcheck",
                              {"suite": args.suite, "seeds": args.seeds, "samples": args.samples},
                              {"seeds": list(range(args.seeds))})
    return 0 if ok else 1


def _load_bundle(path):
    if not os.path.exists(path):
        raise CliError("instance file %r does not exist" % path)
    return Bundle.load(path)


def cmd_simulate(args):
    cfg = _config(args)
    bundle = _load_bundle(args.instance) if args.instance else random_bundle(cfg.seed)
    agent = runner.build_agent(cfg, args.serial)[0] if cfg.scheduler == "agent" else None
    rec = runner.run_simulate(bundle, cfg.scheduler, cfg.seed, cfg.out, agent, cfg.batch_size)
    runner.write_manifest(cfg.out, "simulate", cfg, {"seed": cfg.seed},
                          {"instance": args.instance or "random_bundle(%d)" % cfg.seed})
    _emit({"instance": rec.instance, "scheduler": rec.scheduler, "makespan": rec.makespan,
           "reference": rec.reference, "invocations": rec.invocations})
    return 0


def cmd_train(args):
    cfg = _config(args)
    _, log = runner.run_train(cfg, args.serial)
    last = log[-1] if log else {}
    _emit({"iterations": len(log), "out": cfg.out,
           "final_normalized_makespan": last.get("mean_normalized_makespan")})
    return 0


def cmd_evaluate(args):
    cfg = _config(args)
    records, summary = runner.run_evaluate(cfg, args.serial)
    s = summary[cfg.scheduler]
    _emit({"scheduler": cfg.scheduler, "episodes": len(records), "out": cfg.out,
           "median_normalized_makespan": s["normalized_makespan"]["median"],
           "p99_normalized_makespan": s["normalized_makespan"]["p99"]})
    return 0


def cmd_sweep(args):
    cfg = _config(args)
    rows = runner.run_sweep(cfg, args.serial)
    base = {}
    for bs, _, ms, calls in rows:
        m, c = base.get(bs, (0.0, 0))
        base[bs] = (m + ms, c + calls)
    for bs in sorted(base):
        print("batch_size=%d invocations=%d total_makespan=%.4f" % (bs, base[bs][1], base[bs][0]))
    return 0


def cmd_oracle(args):
    bundle = _load_bundle(args.instance)
    ms, actions, lb = runner.oracle_for(bundle)
    _emit({"instance": bundle.name, "makespan": ms, "actions": [int(a) for a in actions],
           "lower_bound": lb})
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "oracle.json"), "w") as fh:
            json.dump({"makespan": ms, "actions": [int(a) for a in actions]}, fh, sort_keys=True)
            fh.write("\n")
        runner.write_manifest(args.out, "oracle", {"instance": args.instance}, {})
    return 0


COMMANDS = {"gradcheck": cmd_gradcheck, "simulate": cmd_simulate, "train": cmd_train,
            "evaluate": cmd_evaluate, "sweep-batch": cmd_sweep, "oracle": cmd_oracle}


def main(argv=None):
    """Entry point; returns the process exit code. Errors go to stderr as JSON, exit 2."""
    try:
        args = build_parser().parse_args(argv)
        return COMMANDS[args.command](args)
    except (CliError, HetschedError, OSError, ValueError, json.JSONDecodeError) as exc:
        sys.stderr.write(json.dumps({"error": type(exc).__name__, "message": str(exc)}) + "\n")
        return 2


if __name__ == "__main__":
    sys.exit(main())
