"""Oracle-normalized evaluation reports: per-workload CSV, per-kernel CSV, JSON summary."""
from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from ..errors import EmptyResults

NO_LOSS_TOL = 1e-9
BUCKETS = ("no_loss", "0-20%", ">20%")


@dataclass
class EpisodeRecord:
    """One scheduled instance and its reference schedule.

    ``finish``/``reference_finish`` map kernel index to completion time;
    ``owner`` maps kernel index to its workload index. ``reference_kind`` is
    ``"oracle"`` or ``"lower_bound"`` (no reference kernel times then).
    """
    instance: str
    scheduler: str
    makespan: float
    reference: float
    reference_kind: str
    finish: dict
    owner: list
    reference_finish: dict | None = None
    invocations: int = 0
    invalid: int = 0
    extra: dict = field(default_factory=dict)


def bucket_of(loss):
    if loss <= NO_LOSS_TOL:
        return "no_loss"
    return "0-20%" if loss <= 0.2 else ">20%"


def workload_rows(rec):
    """Per-workload rows: loss is sum(t_s) / sum(t_ref) - 1 over kernel finish times."""
    rows = []
    for w in sorted(set(rec.owner)):
        ks = [k for k, o in enumerate(rec.owner) if o == w]
        ts = sum(rec.finish[k] for k in ks)
        if rec.reference_finish is not None:
            tr = sum(rec.reference_finish[k] for k in ks)
            loss = ts / tr - 1.0 if tr > 0 else 0.0
        else:
            loss = rec.makespan / rec.reference - 1.0 if rec.reference > 0 else 0.0
        rows.append({"instance": rec.instance, "workload": w, "scheduler": rec.scheduler,
                     "makespan": rec.makespan, "reference_makespan": rec.reference,
                     "reference_kind": rec.reference_kind,
                     "normalized_makespan": rec.makespan / rec.reference if rec.reference > 0 else 1.0,
                     "loss": loss, "bucket": bucket_of(loss), "invocations": rec.invocations,
                     "invalid_actions": rec.invalid})
    return rows


def kernel_rows(rec):
    rows = []
    for k in sorted(rec.finish):
        ref = rec.reference_finish.get(k) if rec.reference_finish is not None else None
        rows.append({"instance": rec.instance, "workload": rec.owner[k], "kernel": k,
                     "scheduler": rec.scheduler, "finish": rec.finish[k],
                     "reference_finish": "" if ref is None else ref,
                     "ratio": "" if not ref else rec.finish[k] / ref})
    return rows


def _pct(values):
    v = np.asarray(values, dtype=float)
    return {"median": float(np.median(v)), "p99": float(np.percentile(v, 99)),
            "mean": float(v.mean()), "min": float(v.min()), "max": float(v.max())}


def summarize(records):
    """Per-scheduler percentile table and loss-bucket histogram (percent)."""
    if not records:
        raise EmptyResults("no completed episodes to report")
    out = {}
    for s in sorted({r.scheduler for r in records}):
        recs = [r for r in records if r.scheduler == s]
        wl = [row for r in recs for row in workload_rows(r)]
        kr = [row["ratio"] for r in recs for row in kernel_rows(r) if row["ratio"] != ""]
        counts = {b: 0 for b in BUCKETS}
        for row in wl:
            counts[row["bucket"]] += 1
        entry = {"episodes": len(recs), "workloads": len(wl),
                 "normalized_makespan": _pct([r.makespan / r.reference for r in recs]),
                 "loss": _pct([row["loss"] for row in wl]),
                 "buckets": {b: 100.0 * counts[b] / len(wl) for b in BUCKETS},
                 "invocations": _pct([r.invocations for r in recs])}
        if kr:
            entry["kernel_ratio"] = _pct(kr)
        out[s] = entry
    return out


def _write_csv(path, rows, cols):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({c: _fmt(r[c]) for c in cols})


def _fmt(x):
    if isinstance(x, float):
        return repr(x) if math.isfinite(x) else str(x)
    return x


REPORT_COLS = ["instance", "workload", "scheduler", "makespan", "reference_makespan", "reference_kind",
               "normalized_makespan", "loss", "bucket", "invocations", "invalid_actions"]
KERNEL_COLS = ["instance", "workload", "kernel", "scheduler", "finish", "reference_finish", "ratio"]


def emit_report(records, out_dir):
    """Write ``report.csv``, ``kernels.csv`` and ``summary.json``; returns the summary."""
    summary = summarize(records)
    os.makedirs(out_dir, exist_ok=True)
    _write_csv(os.path.join(out_dir, "report.csv"),
               [row for r in records for row in workload_rows(r)], REPORT_COLS)
    _write_csv(os.path.join(out_dir, "kernels.csv"),
               [row for r in records for row in kernel_rows(r)], KERNEL_COLS)
    with open(os.path.join(out_dir, "summary.json"), "w") as fh:
        json.dump(summary, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return summary
