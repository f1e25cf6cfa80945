"""Regenerate the small-network gradient suite under src/hetsched/data/small_bns."""
import json
import pathlib

import numpy as np

OUT = pathlib.Path(__file__).resolve().parents[1] / "src" / "hetsched" / "data" / "small_bns"

# name: (edges, cards, target, evidence {node: value index})
SUITE = {
    "chain3": ([("A", "B"), ("B", "C")], dict(A=2, B=2, C=2), "C", {}),
    "chain5_card3": ([("A", "B"), ("B", "C"), ("C", "D"), ("D", "E")],
                     dict(A=3, B=3, C=2, D=3, E=2), "E", {"A": 1}),
    "diamond": ([("A", "B"), ("A", "C"), ("B", "D"), ("C", "D")],
                dict(A=2, B=2, C=2, D=2), "D", {}),
    "diamond_evidence": ([("A", "B"), ("A", "C"), ("B", "D"), ("C", "D")],
                         dict(A=3, B=2, C=3, D=2), "D", {"A": 0}),
    "collider": ([("A", "C"), ("B", "C")], dict(A=2, B=3, C=2), "C", {}),
    "collider_below": ([("A", "C"), ("B", "C")], dict(A=2, B=2, C=3), "A", {"C": 1}),
    "vstruct_chain": ([("A", "C"), ("B", "C"), ("C", "D"), ("D", "E")],
                      dict(A=2, B=2, C=3, D=2, E=2), "E", {"B": 1}),
    "polytree6": ([("A", "C"), ("B", "C"), ("C", "E"), ("D", "E"), ("E", "F")],
                  dict(A=2, B=3, C=2, D=2, E=3, F=2), "F", {}),
    "shared_root7": ([("R", "A"), ("R", "B"), ("A", "C"), ("B", "D"), ("C", "T"), ("D", "T"), ("S", "T")],
                     dict(R=2, A=2, B=2, C=2, D=2, S=2, T=2), "T", {}),
    "double_diamond8": ([("A", "B"), ("A", "C"), ("B", "D"), ("C", "D"), ("D", "E"), ("D", "F"),
                         ("E", "G"), ("F", "G"), ("H", "G")],
                        dict(A=2, B=2, C=2, D=2, E=2, F=2, G=2, H=2), "G", {"A": 1}),
    "card4_fork": ([("A", "B"), ("A", "C"), ("B", "D"), ("C", "D")],
                   dict(A=4, B=2, C=2, D=3), "D", {}),
    "mixed8": ([("A", "C"), ("B", "C"), ("B", "D"), ("C", "E"), ("D", "E"), ("E", "F"),
                ("F", "H"), ("G", "H")],
               dict(A=2, B=2, C=2, D=3, E=2, F=2, G=2, H=2), "H", {"D": 0}),
}


def build(name, edges, cards, target, evidence, rng):
    order = []
    for a, b in edges:
        for v in (a, b):
            if v not in order:
                order.append(v)
    for v in cards:
        if v not in order:
            order.append(v)
    parents = {v: [a for a, b in edges if b == v] for v in order}
    # topological order of declaration
    done, topo = set(), []
    while len(topo) < len(order):
        for v in order:
            if v not in done and all(p in done for p in parents[v]):
                topo.append(v)
                done.add(v)
    nodes = []
    for v in topo:
        n_cfg = int(np.prod([cards[p] for p in parents[v]])) if parents[v] else 1
        logits = np.round(rng.normal(scale=0.8, size=(n_cfg, cards[v])), 3)
        nodes.append({"name": v, "parents": parents[v], "domain": list(range(cards[v])),
                      "logits": logits.tolist()})
    return {"name": name, "nodes": nodes,
            "query": {"target": target, "value": 1, "evidence": evidence}}


def main():
    OUT.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(2024)
    for name, (edges, cards, target, ev) in SUITE.items():
        spec = build(name, edges, cards, target, ev, rng)
        with open(OUT / ("%s.json" % name), "w") as fh:
            json.dump(spec, fh, indent=1)


if __name__ == "__main__":
    main()
