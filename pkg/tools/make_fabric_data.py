"""Regenerate the shipped dual-socket topology and synthetic kernel profiles."""
import json
import pathlib

DATA = pathlib.Path(__file__).resolve().parents[1] / "src" / "hetsched" / "data"


def topology():
    procs, links, edges, res = [], [], [], []
    memories = ["dram0", "dram1"]
    for s in range(2):
        l3 = "s%d.l3" % s
        links.append(l3)
        edges.append([l3, "dram%d" % s])
        res.append({"name": "mem_bw%d" % s, "class": "memory", "nodes": ["dram%d" % s]})
        for c in range(2):
            core = "s%d.core%d" % (s, c)
            links.append(core)
            edges.append([core, l3])
            res.append({"name": "core%d" % (2 * s + c), "class": "core", "nodes": [core]})
            for t in range(2):
                name = "s%d.c%d.t%d" % (s, c, t)
                procs.append({"name": name, "kind": "cpu", "socket": s, "smt_group": 2 * s + c})
                edges.append([name, core])
    links += ["qpi", "pcie0", "pcie1", "nic"]
    edges += [["s0.l3", "qpi"], ["qpi", "s1.l3"], ["pcie0", "s0.l3"], ["pcie1", "s1.l3"],
              ["nic", "pcie0"], ["gpu0", "pcie0"], ["fpga0", "pcie1"]]
    procs += [{"name": "gpu0", "kind": "gpu", "socket": 0},
              {"name": "fpga0", "kind": "fpga", "socket": 1}]
    res += [{"name": "qpi", "class": "interconnect", "nodes": ["qpi"]},
            {"name": "pcie0", "class": "pcie", "nodes": ["pcie0"]},
            {"name": "pcie1", "class": "pcie", "nodes": ["pcie1"]},
            {"name": "gpu0", "class": "gpu", "nodes": ["gpu0"]},
            {"name": "fpga0", "class": "fpga", "nodes": ["fpga0"]},
            {"name": "nic", "class": "nic", "nodes": ["nic"]}]
    return {"name": "m1-like", "processors": procs, "memories": memories, "links": links,
            "edges": edges, "resources": res}


def k(name, runtime, cpu=None, gpu=None, fpga=None):
    demand = {}
    for kind, d in (("cpu", cpu), ("gpu", gpu), ("fpga", fpga)):
        if d and kind in runtime:
            demand[kind] = d
    return {"name": name, "runtime": runtime, "demand": demand}


def profiles():
    # synthetic; shaped so that one kernel spans a ~80x best-to-worst ratio
    return {"kernels": [
        k("align", {"cpu": 12.0, "gpu": 1.5, "fpga": 0.8},
          cpu={"core": 0.7, "memory": 0.5}, gpu={"gpu": 0.9, "pcie": 0.6, "memory": 0.3},
          fpga={"fpga": 1.0, "pcie": 0.5, "memory": 0.3}),
        k("indel_realign", {"cpu": 6.0}, cpu={"core": 0.8, "memory": 0.6}),
        k("haplotype_call", {"cpu": 40.0, "gpu": 2.0, "fpga": 0.5},
          cpu={"core": 0.9, "memory": 0.4}, gpu={"gpu": 0.8, "pcie": 0.4, "memory": 0.2},
          fpga={"fpga": 1.0, "pcie": 0.3, "memory": 0.2}),
        k("ingest", {"cpu": 2.0}, cpu={"core": 0.3, "memory": 0.7, "nic": 0.5}),
        k("fft", {"cpu": 8.0, "gpu": 0.6, "fpga": 1.0},
          cpu={"core": 0.9, "memory": 0.3}, gpu={"gpu": 0.7, "pcie": 0.5, "memory": 0.2},
          fpga={"fpga": 1.0, "pcie": 0.4, "memory": 0.2}),
        k("filter", {"cpu": 3.0, "gpu": 0.8},
          cpu={"core": 0.6, "memory": 0.4}, gpu={"gpu": 0.6, "pcie": 0.5, "memory": 0.3}),
        k("classify", {"cpu": 5.0, "gpu": 0.5},
          cpu={"core": 0.8, "memory": 0.3}, gpu={"gpu": 0.9, "pcie": 0.3, "memory": 0.2}),
        k("split", {"cpu": 1.0}, cpu={"core": 0.2, "memory": 0.6}),
        k("hash", {"cpu": 4.0, "fpga": 0.4}, cpu={"core": 0.9, "memory": 0.2},
          fpga={"fpga": 1.0, "pcie": 0.3, "memory": 0.1}),
        k("scan", {"cpu": 6.0, "gpu": 1.2, "fpga": 0.6},
          cpu={"core": 0.7, "memory": 0.6}, gpu={"gpu": 0.8, "pcie": 0.7, "memory": 0.4},
          fpga={"fpga": 1.0, "pcie": 0.6, "memory": 0.3}),
        k("merge", {"cpu": 1.5}, cpu={"core": 0.4, "memory": 0.5}),
    ]}


def main():
    with open(DATA / "m1_like_topology.json", "w") as fh:
        json.dump(topology(), fh, indent=1)
    with open(DATA / "default_profiles.json", "w") as fh:
        json.dump(profiles(), fh, indent=1)


if __name__ == "__main__":
    main()
