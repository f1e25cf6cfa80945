import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hetsched import core
from hetsched.bayesnet import (BayesNet, ancestors, build_network, conditionally_independent, count,
                               exact_marginal, forward_sample, joint_table, likelihood_weighting,
                               parents, random_dag)
from hetsched.errors import CycleDetected, EmptyDomain, UnknownNode, UnknownParent, ZeroEvidence
from hetsched.perfmodel import build_utilization_bn, shipped_model

from oracles import ci_residual, moral_dsep


def logit(p):
    return [0.0, float(np.log(p / (1 - p)))]


def chain(names=("A", "B", "C")):
    nodes = [{"name": names[0], "domain": [0, 1]}]
    for prev, cur in zip(names, names[1:]):
        nodes.append({"name": cur, "parents": [prev], "domain": [0, 1]})
    return build_network({"nodes": nodes})


def two_node(pa=0.3, pb1=0.9, pb0=0.2):
    return build_network({"nodes": [
        {"name": "A", "domain": [0, 1], "logits": [logit(pa)]},
        {"name": "B", "parents": ["A"], "domain": [0, 1], "logits": [logit(pb0), logit(pb1)]}]})


def diamond():
    return build_network({"nodes": [
        {"name": "A", "domain": [0, 1]},
        {"name": "B", "parents": ["A"], "domain": [0, 1]},
        {"name": "C", "parents": ["A"], "domain": [0, 1]},
        {"name": "D", "parents": ["B", "C"], "domain": [0, 1]}]})


class TestBuild:
    def test_chain_topo_order(self):
        net = chain()
        assert [net.names[v] for v in net.topo_order] == ["A", "B", "C"]

    def test_cycle_rejected(self):
        spec = {"nodes": [{"name": "A", "parents": ["C"], "domain": [0, 1]},
                          {"name": "B", "parents": ["A"], "domain": [0, 1]},
                          {"name": "C", "parents": ["B"], "domain": [0, 1]}]}
        with pytest.raises(CycleDetected):
            build_network(spec)

    def test_unknown_parent(self):
        with pytest.raises(UnknownParent):
            build_network({"nodes": [{"name": "A", "parents": ["Z"], "domain": [0, 1]}]})

    def test_empty_domain(self):
        with pytest.raises(EmptyDomain):
            build_network({"nodes": [{"name": "A", "domain": []}]})

    def test_shipped_utilization_network_size(self):
        net = build_utilization_bn(None, shipped_model())
        assert len(net) == 68
        assert len(net.counter_nodes) == 32

    def test_spec_round_trip(self, tmp_path):
        net = two_node()
        net.save(tmp_path / "n.json")
        again = BayesNet.load(tmp_path / "n.json")
        assert np.array_equal(again.get_params(), net.get_params())
        assert exact_marginal(again, {1: 1}) == pytest.approx(0.41, abs=1e-12)

    def test_cpd_rows_normalized(self):
        net = random_dag(np.random.default_rng(0), 6, card_range=(2, 4), logit_scale=3.0)
        for node in net.nodes:
            assert np.allclose(node.probs().sum(axis=1), 1.0, atol=1e-9)


class TestSampling:
    def test_degenerate_node(self):
        net = build_network({"nodes": [{"name": "X", "domain": [0, 1], "logits": [[0.0, 30.0]]}]})
        b = forward_sample(net, 100, seed=1)
        assert (b.values[:, 0] == 1).all()

    def test_fair_coin_frequency(self):
        net = build_network({"nodes": [{"name": "X", "domain": [0, 1]}]})
        b = forward_sample(net, 100_000, seed=7)
        assert 0.49 <= count(b, {0: 1}) / b.S <= 0.51

    def test_seed_determinism(self):
        net = random_dag(np.random.default_rng(3), 7)
        a = forward_sample(net, 5000, seed=7)
        b = forward_sample(net, 5000, seed=7)
        assert np.array_equal(a.values, b.values)

    def test_empty_query_counts_all(self):
        b = forward_sample(chain(), 321, seed=0)
        assert count(b, {}) == 321

    def test_impossible_query(self):
        net = build_network({"nodes": [
            {"name": "A", "domain": [0, 1], "logits": [[0.0, 30.0]]},
            {"name": "B", "parents": ["A"], "domain": [0, 1], "logits": [[0, 0], [30.0, 0.0]]}]})
        b = forward_sample(net, 1000, seed=0)
        assert count(b, {0: 1, 1: 1}) == 0

    @pytest.mark.parametrize("seed", range(5))
    def test_marginals_converge(self, seed):
        net = random_dag(np.random.default_rng(seed), 6, card_range=(2, 3))
        S = 40_000
        b = forward_sample(net, S, seed=seed)
        table = joint_table(net)
        for v in range(len(net)):
            for x in range(net.nodes[v].card):
                p = exact_marginal(net, {v: x}, table=table)
                assert abs(count(b, {v: x}) / S - p) <= 3 * np.sqrt(p * (1 - p) / S) + 1e-3

    def test_backends_agree(self):
        if "cython" not in core.available_backends():
            pytest.skip("compiled backend not built")
        net = random_dag(np.random.default_rng(4), 8, card_range=(2, 4))
        a = forward_sample(net, 2000, seed=11, backend="python")
        b = forward_sample(net, 2000, seed=11, backend="cython")
        assert np.array_equal(a.values, b.values)

    def test_parallel_workers_deterministic(self):
        net = random_dag(np.random.default_rng(5), 6)
        a = forward_sample(net, 3001, seed=2, workers=3)
        b = forward_sample(net, 3001, seed=2, workers=3)
        assert a.S == 3001 and np.array_equal(a.values, b.values)

    def test_likelihood_weighting_posterior(self):
        net = random_dag(np.random.default_rng(8), 4, card_range=(2, 3))
        leaf = net.topo_order[-1]
        root = net.topo_order[0]
        ev = {leaf: 1}
        batch, w = likelihood_weighting(net, ev, 100_000, seed=3)
        vals = np.arange(net.nodes[root].card)
        est = (w * batch.values[:, root]).sum() / w.sum()
        exact = sum(x * exact_marginal(net, {root: x}, ev) for x in vals)
        assert abs(est - exact) <= 0.02


class TestExact:
    def test_two_node_marginal(self):
        assert exact_marginal(two_node(), {1: 1}) == pytest.approx(0.41, abs=1e-12)

    def test_self_evidence(self):
        net = two_node()
        assert exact_marginal(net, {0: 1}, {0: 1}) == pytest.approx(1.0)

    def test_zero_evidence(self):
        net = build_network({"nodes": [{"name": "A", "domain": [0, 1], "logits": [[0.0, -800.0]]}]})
        with pytest.raises(ZeroEvidence):
            exact_marginal(net, {0: 0}, {0: 1})


class TestStructure:
    def test_chain_relatives(self):
        net = chain()
        assert parents(net, "C") == [1]
        assert ancestors(net, "C") == {0}
        assert parents(net, "A") == [] and ancestors(net, "A") == set()

    def test_diamond_relatives(self):
        net = diamond()
        assert ancestors(net, "D") == {0}
        assert parents(net, "D") == [1, 2]

    def test_unknown_node(self):
        with pytest.raises(UnknownNode):
            parents(chain(), "Z")

    def test_chain_blocking(self):
        assert conditionally_independent(chain(), "A", "C", {"B"})
        assert not conditionally_independent(chain(), "A", "C")

    def test_collider(self):
        net = build_network({"nodes": [{"name": "A", "domain": [0, 1]}, {"name": "B", "domain": [0, 1]},
                                       {"name": "C", "parents": ["A", "B"], "domain": [0, 1]}]})
        assert conditionally_independent(net, "A", "B")
        assert not conditionally_independent(net, "A", "B", {"C"})

    def test_collider_descendant_opens(self):
        net = build_network({"nodes": [{"name": "A", "domain": [0, 1]}, {"name": "B", "domain": [0, 1]},
                                       {"name": "C", "parents": ["A", "B"], "domain": [0, 1]},
                                       {"name": "D", "parents": ["C"], "domain": [0, 1]}]})
        assert not conditionally_independent(net, "A", "B", {"D"})

    @pytest.mark.parametrize("seed", range(20))
    def test_bayes_ball_matches_enumeration(self, seed):
        rng = np.random.default_rng(100 + seed)
        net = random_dag(rng, 8, logit_scale=2.0)
        table = joint_table(net)
        for _ in range(6):
            i, j = (int(v) for v in rng.choice(8, 2, replace=False))
            rest = [v for v in range(8) if v not in (i, j)]
            z = {int(v) for v in rest if rng.random() < 0.3}
            verdict = conditionally_independent(net, i, j, z)
            assert verdict == moral_dsep(net, i, j, z)
            res = ci_residual(net, i, j, z, table)
            if verdict:
                assert res <= 1e-9
            else:
                # generic random logits are faithful
                assert res > 1e-9


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000), st.integers(3, 9))
def test_bayes_ball_equals_moral_graph(seed, n):
    rng = np.random.default_rng(seed)
    net = random_dag(rng, n, edge_prob=0.5)
    i, j = (int(v) for v in rng.choice(n, 2, replace=False))
    z = {v for v in range(n) if v not in (i, j) and rng.random() < 0.4}
    assert conditionally_independent(net, i, j, z) == moral_dsep(net, i, j, z)


def test_affine_node_mass_conservation():
    net = build_network({"nodes": [
        {"name": "X", "domain": [0, 1, 2, 3], "logits": [[0.1, 0.5, -0.3, 0.2]]},
        {"name": "Y", "parent": "X", "map": "affine", "a": 2.0, "b": 0.0}]})
    y = net.nodes[1]
    assert y.domain == (0.0, 2.0, 4.0, 6.0)
    for x in y.domain:
        assert y.forward(y.inverse(x)) == pytest.approx(x, abs=1e-9)
    push = [exact_marginal(net, {1: k}) for k in range(4)]
    pull = [exact_marginal(net, {0: k}) for k in range(4)]
    assert push == pull
    assert abs(sum(push) - 1.0) <= 1e-12
    assert y.inverse_jacobian_logdet(3.0) == pytest.approx(-np.log(2.0))
