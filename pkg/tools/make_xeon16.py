"""Regenerate the shipped 16-core counter model (32 counters, 36 utilizations)."""
import json
import pathlib

OUT = pathlib.Path(__file__).resolve().parents[1] / "src" / "hetsched" / "data" / "xeon16_counters.json"


def main():
    counters, rels = [], []
    for i in range(16):
        counters.append({"name": "core%d.retired_slots" % i, "category": "on-core"})
        rels.append({"output": "core%d" % i, "form": "identity", "inputs": ["core%d.retired_slots" % i]})
    for ch in range(4):
        counters.append({"name": "imc.ch%d.cas_cycles" % ch, "category": "uncore"})
        rels.append({"output": "dram_ch%d" % ch, "form": "identity", "inputs": ["imc.ch%d.cas_cycles" % ch]})
    uncore = ["imc.or_ge_theta", "imc.or_ge_1", "numa.remote_reads", "numa.local_reads",
              "qpi.flits", "pcie.read_bytes", "pcie.write_bytes", "io.dram_requests"]
    counters += [{"name": n, "category": "uncore"} for n in uncore]
    counters += [{"name": n, "category": "os-driver"}
                 for n in ["gpu.busy", "fpga.busy", "nic.tx_bytes", "mem.used_pages"]]
    rels += [
        # theta starts at the midpoint of [1, 10] outstanding requests
        {"output": "mem_bw", "form": "ratio-of-threshold-counts",
         "inputs": ["imc.or_ge_theta", "imc.or_ge_1"], "theta": 5.5},
        {"output": "numa_remote", "form": "ratio", "inputs": ["numa.remote_reads", "numa.local_reads"]},
        {"output": "qpi", "form": "identity", "inputs": ["qpi.flits"]},
        {"output": "pcie_read", "form": "identity", "inputs": ["pcie.read_bytes"]},
        {"output": "pcie_write", "form": "identity", "inputs": ["pcie.write_bytes"]},
        {"output": "io_mem", "form": "identity", "inputs": ["io.dram_requests"]},
        {"output": "gpu", "form": "identity", "inputs": ["gpu.busy"]},
        {"output": "fpga", "form": "identity", "inputs": ["fpga.busy"]},
        {"output": "nic", "form": "identity", "inputs": ["nic.tx_bytes"]},
        {"output": "mem_capacity", "form": "identity", "inputs": ["mem.used_pages"]},
        # latent utilizations with no counter of their own
        {"output": "imc", "form": "max", "inputs": ["mem_bw", "io_mem"]},
        {"output": "pcie", "form": "max", "inputs": ["pcie_read", "pcie_write"]},
        {"output": "uncore", "form": "max", "inputs": ["imc", "qpi"]},
        {"output": "accel", "form": "max", "inputs": ["gpu", "fpga"]},
        {"output": "nic_link", "form": "min", "inputs": ["pcie", "nic"]},
        {"output": "memory_pressure", "form": "product", "inputs": ["mem_bw", "mem_capacity"]},
    ]
    cfg = {"counters": counters, "relations": rels,
           "resources": [r["output"] for r in rels], "window": 1.0e6, "samples": 16}
    assert len(counters) == 32 and len(rels) == 36
    with open(OUT, "w") as fh:
        json.dump(cfg, fh, indent=1)


if __name__ == "__main__":
    main()
