import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hetsched.errors import ConfigError, Disconnected, NotAvailable
from hetsched.fabric import (DataFlowGraph, InterferenceModel, KernelProfile, effective_runtime,
                             generate_workload, load_topology, minimal_topology, profile_diversity,
                             shipped_profiles, shipped_topology, smp_topology, true_utilizations)

TEMPLATES = ["genomics-like", "eeg-like", "security-like", "random"]


def shared_bus():
    """Two CPU threads behind one link to memory; the link carries a memory resource."""
    return load_topology({
        "processors": [{"name": "c0", "kind": "cpu"}, {"name": "c1", "kind": "cpu"},
                       {"name": "g0", "kind": "gpu"}],
        "memories": ["dram"], "links": ["bus", "pcie"],
        "edges": [["c0", "bus"], ["c1", "bus"], ["bus", "dram"], ["g0", "pcie"], ["pcie", "dram"]],
        "resources": [{"name": "mem", "class": "memory", "nodes": ["bus"]},
                      {"name": "pcie", "class": "pcie", "nodes": ["pcie"]}]})


def hog(demand=0.8, rt=2.0):
    return KernelProfile("hog", {"cpu": rt}, {"cpu": {"memory": demand}})


class TestTopology:
    def test_shipped(self):
        t = shipped_topology("m1_like")
        kinds = {p.kind for p in t.processors}
        assert kinds == {"cpu", "gpu", "fpga"}
        assert len({p.socket for p in t.processors if p.kind == "cpu"}) == 2

    def test_minimal(self):
        t = minimal_topology()
        assert t.processor_names == ["cpu0"] and t.resource_names == ["mem_bw"]

    def test_no_memory_path(self):
        with pytest.raises(Disconnected):
            load_topology({"processors": [{"name": "c0", "kind": "cpu"}], "memories": [], "edges": []})

    def test_disconnected_component(self):
        with pytest.raises(Disconnected):
            load_topology({"processors": [{"name": "c0", "kind": "cpu"}, {"name": "c1", "kind": "cpu"}],
                           "memories": ["m0", "m1"], "edges": [["c0", "m0"], ["c1", "m1"]]})

    def test_round_trip(self):
        t = shipped_topology()
        again = load_topology(t.to_dict())
        assert again.to_dict() == t.to_dict()
        assert np.array_equal(again.onpath, t.onpath)

    def test_smp_shape(self):
        t = smp_topology(sockets=2, cores=2, smt=2, gpus=1)
        assert len(t.processors) == 9
        groups = [p.smt_group for p in t.processors if p.kind == "cpu"]
        assert sorted(set(groups)) == [0, 1, 2, 3] and groups.count(0) == 2


class TestInterference:
    def test_isolated_runtime(self):
        assert effective_runtime(shared_bus(), hog(), 0) == 2.0

    def test_full_slowdown(self):
        t = shared_bus()
        assert effective_runtime(t, hog(), 0, [(hog(), 1)]) == pytest.approx(2.0 * 1.67)

    def test_under_capacity(self):
        t = shared_bus()
        assert effective_runtime(t, hog(0.5), 0, [(hog(0.5), 1)]) == 2.0

    def test_off_path_resources_ignored(self):
        t = shared_bus()
        gk = KernelProfile("g", {"gpu": 1.0}, {"gpu": {"memory": 0.9}})
        assert effective_runtime(t, hog(), 0, [(gk, 2)]) == 2.0

    def test_not_available(self):
        with pytest.raises(NotAvailable):
            effective_runtime(shared_bus(), hog(), 2)

    def test_multiplier_shape(self):
        im = InterferenceModel()
        assert im.multiplier(1.0) == 1.0
        assert im.multiplier(1.3) == pytest.approx(1.335)
        assert im.multiplier(5.0) == 1.67

    def test_bad_knots(self):
        with pytest.raises(ConfigError):
            InterferenceModel(knots=((1.0, 1.0), (0.5, 2.0)))

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.floats(0, 1), min_size=1, max_size=5), st.floats(0, 1))
    def test_monotone(self, demands, extra):
        t = shared_bus()
        co = [(hog(d), 1) for d in demands]
        before = effective_runtime(t, hog(0.3), 0, co)
        after = effective_runtime(t, hog(0.3), 0, co + [(hog(extra), 1)])
        assert after >= before


class TestUtilizations:
    def test_idle(self):
        assert set(true_utilizations(shared_bus(), []).values()) == {0.0}

    def test_single(self):
        assert true_utilizations(shared_bus(), [(hog(0.3), 0)])["mem"] == pytest.approx(0.3)

    def test_clamped(self):
        assert true_utilizations(shared_bus(), [(hog(), 0), (hog(), 1)])["mem"] == 1.0


class TestWorkloads:
    def test_size_one(self):
        for tpl in TEMPLATES:
            assert len(generate_workload(tpl, 1, 0)) == 1

    def test_genomics_pipeline(self):
        g = generate_workload("genomics-like", 5, 3)
        assert g.kernels == ["align", "indel_realign", "haplotype_call", "align", "indel_realign"]
        assert g.edges == [(0, 1), (1, 2), (2, 3), (3, 4)]
        prof = shipped_profiles()
        assert prof["indel_realign"].runtime.keys() == {"cpu"}

    @pytest.mark.parametrize("tpl", TEMPLATES)
    def test_deterministic(self, tpl):
        assert generate_workload(tpl, 9, 4).to_dict() == generate_workload(tpl, 9, 4).to_dict()

    @settings(max_examples=80, deadline=None)
    @given(st.sampled_from(TEMPLATES), st.integers(1, 30), st.integers(0, 10_000))
    def test_always_dag(self, tpl, size, seed):
        g = generate_workload(tpl, size, seed)
        assert g.is_dag() and len(g) == size
        assert set(g.kernels) <= set(shipped_profiles())

    def test_cycle_rejected(self):
        with pytest.raises(ConfigError):
            DataFlowGraph(["a", "b"], [(0, 1), (1, 0)])

    def test_json_round_trip(self):
        g = generate_workload("security-like", 10, 2)
        assert DataFlowGraph.from_dict(g.to_dict()) == g

    def test_unknown_template(self):
        with pytest.raises(ValueError):
            generate_workload("weather", 3, 0)


def test_profile_diversity():
    assert profile_diversity(shipped_profiles()) >= 50
