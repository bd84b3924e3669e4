"""Build a small convnet, attach early exits and dropout samplers, inspect it.

Walks through the graph layer: load a reference network from assets/,
look at its shapes and cost, then let the transform passes rewrite it into
a multi-exit stochastic network. Everything is printed, nothing is trained.
"""

from pathlib import Path

from bayonet.flops import count_flops
from bayonet.graph import graph_hash, load_graph, save_graph
from bayonet.transform import (
    AFTER_EACH_POOL,
    ExitPolicy,
    McdPolicy,
    boundary_elements,
    insert_exits,
    insert_mcd,
    split_components,
)

ROOT = Path(__file__).resolve().parents[1]


def show(graph, title):
    print(f"\n== {title} ==")
    print(f"{'node':>18}  {'kind':<10} {'output shape':<14} flops")
    report = count_flops(graph)
    for node in graph.nodes:
        shape = "x".join(str(d) for d in node.output_shape.as_list())
        print(f"{node.id:>18}  {node.kind:<10} {shape:<14} {report.per_layer[node.id]}")
    print(f"total {report.total} flops, exits: {list(graph.exits)}")


def main():
    base = load_graph((ROOT / "assets" / "lenet_like.json").read_text())
    show(base, f"base network '{base.name}'")

    # one intermediary classifier after every pooling stage
    multi = insert_exits(base, ExitPolicy(AFTER_EACH_POOL))
    show(multi, "with early exits")
    for exit_id, branch in multi.exit_branches().items():
        print(f"  exit {exit_id}: path {' -> '.join(branch)}")

    # one dropout sampler feeding each exit classifier
    stochastic = insert_mcd(multi, McdPolicy(layers_per_exit=1, keep_rate=0.75))
    show(stochastic, "with dropout samplers (keep_rate 0.75)")

    det, bay = split_components(stochastic)
    print(f"\ndeterministic prefix ({len(det)} nodes): {det}")
    print(f"stochastic remainder ({len(bay)} nodes): {bay}")
    print(f"boundary to clone per pass: {boundary_elements(stochastic)} activations")

    # the serialization is canonical, so the hash pins the exact network
    text = save_graph(stochastic)
    again = load_graph(text)
    print(f"\nserialized {len(text)} bytes, hash {graph_hash(stochastic)[:16]}...")
    print(f"round trip preserves the hash: {graph_hash(again) == graph_hash(stochastic)}")


if __name__ == "__main__":
    main()
