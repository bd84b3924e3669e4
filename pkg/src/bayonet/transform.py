"""Graph rewrites: exit insertion, MC-dropout insertion, scaling, quantization.

Every transform takes a NetworkGraph and returns a new NetworkGraph; the input
is never mutated.  Exit and dropout insertion are purely additive, so the
original nodes keep their ids and parameters and downstream tooling can diff
a transformed graph against its source.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from .errors import PolicyError, SchemaError
from .graph import (
    CHANNEL_WISE,
    CONV,
    DENSE,
    ELEMENT_WISE,
    EXIT,
    GAP,
    MAXPOOL,
    MCDROPOUT,
    SOFTMAX,
    WEIGHTED,
    FixedPointFormat,
    LayerNode,
    NetworkGraph,
    infer_shapes,
    topological_order,
)

AFTER_EACH_POOL = "after_each_pool"
EXPLICIT = "explicit"


@dataclass(frozen=True)
class ExitPolicy:
    """Where side exits are attached.

    ``after_each_pool`` branches after every max-pool node and keeps the
    original final exit.  ``explicit`` branches after each listed node id.
    """

    kind: str = AFTER_EACH_POOL
    attach_after: tuple = ()

    def __post_init__(self):
        if self.kind not in (AFTER_EACH_POOL, EXPLICIT):
            raise PolicyError(f"unknown exit policy kind {self.kind!r}")
        if self.kind == EXPLICIT and not self.attach_after:
            raise PolicyError("explicit exit policy needs at least one node id")


@dataclass(frozen=True)
class McdPolicy:
    """How many trailing weighted layers per exit get a dropout sampler."""

    layers_per_exit: int = 1
    keep_rate: float = 0.875
    granularity: str = ELEMENT_WISE

    def __post_init__(self):
        if self.layers_per_exit < 0:
            raise PolicyError("layers_per_exit must be >= 0")
        if not 0.0 < self.keep_rate <= 1.0:
            raise PolicyError(f"keep_rate must be in (0, 1], got {self.keep_rate}")
        if self.granularity not in (ELEMENT_WISE, CHANNEL_WISE):
            raise PolicyError(f"unknown granularity {self.granularity!r}")


def _rebuild(src: NetworkGraph, nodes, edges, exits) -> NetworkGraph:
    # Exits must be listed in topological depth order for validation to pass.
    pos = {nid: i for i, nid in enumerate(topological_order([n.id for n in nodes], edges))}
    g = NetworkGraph(
        name=src.name,
        num_classes=src.num_classes,
        input_shape=src.input_shape,
        nodes=nodes,
        edges=sorted(edges),
        exits=sorted(exits, key=lambda e: pos[e]),
    )
    infer_shapes(g)
    return g


def _head_nodes(attach_id: str, num_classes: int):
    base = f"{attach_id}_exit"
    gap = LayerNode(id=f"{base}_gap", kind=GAP, params={})
    fc = LayerNode(id=f"{base}_fc", kind=DENSE, params={"out_features": num_classes})
    sm = LayerNode(id=f"{base}_sm", kind=SOFTMAX, params={})
    head = LayerNode(id=f"{base}_head", kind=EXIT, params={"num_classes": num_classes})
    edges = [(attach_id, gap.id), (gap.id, fc.id), (fc.id, sm.id), (sm.id, head.id)]
    return [gap, fc, sm, head], edges


def insert_exits(graph: NetworkGraph, policy: ExitPolicy) -> NetworkGraph:
    """Attach early-exit heads (GAP -> dense -> softmax -> exit) to a backbone.

    The original exit is kept as the final one.  Raises PolicyError when an
    attachment point does not exist, is not on the backbone, or already feeds
    an exit head.
    """
    backbone = set(graph.backbone_ids())
    if policy.kind == AFTER_EACH_POOL:
        targets = [n.id for n in graph.nodes if n.kind == MAXPOOL and n.id in backbone]
        if not targets:
            raise PolicyError("graph has no pooling layer on the backbone to branch after")
    else:
        targets = list(policy.attach_after)
        for t in targets:
            try:
                node = graph.node(t)
            except SchemaError:
                raise PolicyError(f"attachment point {t!r} is not in the graph") from None
            if node.kind == EXIT:
                raise PolicyError(f"cannot branch after exit node {t!r}")
            if t not in backbone:
                raise PolicyError(f"attachment point {t!r} lies inside an exit branch")
        if len(set(targets)) != len(targets):
            raise PolicyError("duplicate attachment points")

    nodes = [n.clone() for n in graph.nodes]
    edges = list(graph.edges)
    exits = list(graph.exits)
    taken = {n.id for n in nodes}
    for t in targets:
        head, head_edges = _head_nodes(t, graph.num_classes)
        for n in head:
            if n.id in taken:
                raise PolicyError(f"generated id {n.id!r} collides with an existing node")
            taken.add(n.id)
        nodes.extend(head)
        edges.extend(head_edges)
        exits.append(head[-1].id)
    return _rebuild(graph, nodes, edges, exits)


def insert_mcd(graph: NetworkGraph, policy: McdPolicy) -> NetworkGraph:
    """Place a Monte-Carlo dropout sampler before trailing weighted layers.

    For each exit, the last ``layers_per_exit`` conv/dense layers on the path
    from the input to that exit each get a sampler spliced onto their input
    edge.  Layers shared between exits receive a single sampler.
    """
    if policy.layers_per_exit == 0:
        return graph.clone()

    targets: list[str] = []
    for e in graph.exits:
        weighted = [i for i in graph.path_to(e) if graph.node(i).kind in WEIGHTED]
        if len(weighted) < policy.layers_per_exit:
            raise PolicyError(
                f"exit {e!r} has only {len(weighted)} weighted layers on its path, "
                f"need {policy.layers_per_exit}"
            )
        for t in weighted[-policy.layers_per_exit:]:
            if t not in targets:
                targets.append(t)

    nodes = [n.clone() for n in graph.nodes]
    edges = list(graph.edges)
    by_id = {n.id: n for n in nodes}
    for t in targets:
        if graph.producer_id(t) is not None and by_id[graph.producer_id(t)].kind == MCDROPOUT:
            continue  # already sampled, e.g. when the policy is applied twice
        mid = f"mcd_{t}"
        if mid in by_id:
            raise PolicyError(f"generated id {mid!r} collides with an existing node")
        mcd = LayerNode(
            id=mid,
            kind=MCDROPOUT,
            params={"keep_rate": policy.keep_rate, "granularity": policy.granularity},
        )
        nodes.append(mcd)
        by_id[mid] = mcd
        prod = graph.producer_id(t)
        if prod is None:
            # target is the graph source: the sampler becomes the new source
            edges.append((mid, t))
        else:
            edges.remove((prod, t))
            edges.extend([(prod, mid), (mid, t)])
    return _rebuild(graph, nodes, edges, list(graph.exits))


def split_components(graph: NetworkGraph):
    """Partition node ids into (deterministic, resampled) sets.

    The resampled set is everything at or downstream of a dropout sampler;
    those nodes produce different values on every stochastic pass.  Everything
    else is computed once per input and cached.
    """
    seeds = [n.id for n in graph.nodes if n.kind == MCDROPOUT]
    bayesian = graph.downstream_of(seeds)
    deterministic = {n.id for n in graph.nodes} - bayesian
    return deterministic, bayesian


def boundary_ids(graph: NetworkGraph):
    """Nodes whose output tensor crosses from the cached into the resampled part.

    Returns ids of deterministic nodes with at least one resampled consumer.
    The sentinel ``""`` stands for the raw network input when the source node
    itself is resampled.
    """
    deterministic, bayesian = split_components(graph)
    out = []
    for n in graph.nodes:
        if n.id not in deterministic:
            continue
        if any(c in bayesian for c in graph.consumer_ids(n.id)):
            out.append(n.id)
    if graph.input_id in bayesian:
        out.append("")
    return out


def boundary_elements(graph: NetworkGraph) -> int:
    """Total elements that must be buffered to replay the boundary tensors."""
    total = 0
    for b in boundary_ids(graph):
        shape = graph.input_shape if b == "" else graph.node(b).output_shape
        if shape is None:
            raise SchemaError("shapes", "run shape inference before sizing boundaries")
        total += shape.elements
    return total


def scale_channels(graph: NetworkGraph, fraction: float) -> NetworkGraph:
    """Shrink conv/dense widths to a fraction of the original, rounding up.

    Exit-head dense layers keep their class count.  A fraction of 1 returns an
    unchanged copy with weights intact; any other fraction drops weights since
    the shapes no longer match and the net must be retrained.
    """
    if not 0.0 < fraction <= 1.0:
        raise PolicyError(f"channel fraction must be in (0, 1], got {fraction}")
    if fraction == 1.0:
        return graph.clone()

    head_dense = set()
    for e in graph.exits:
        for n in graph.exit_branches()[e]:
            head_dense.add(n)

    nodes = []
    for n in graph.nodes:
        c = n.clone()
        c.weights = {}
        if c.kind == CONV:
            c.params = dict(c.params)
            c.params["out_channels"] = max(1, math.ceil(c.params["out_channels"] * fraction))
        elif c.kind == DENSE and n.id not in head_dense:
            c.params = dict(c.params)
            c.params["out_features"] = max(1, math.ceil(c.params["out_features"] * fraction))
        nodes.append(c)
    return _rebuild(graph, nodes, list(graph.edges), list(graph.exits))


def annotate_quantization(graph, fmt: FixedPointFormat, scope: str = "both", overrides=None):
    """Stamp a fixed-point format onto every node, with optional per-node overrides.

    ``overrides`` maps node id to a FixedPointFormat or to ``(format, scope)``.
    """
    overrides = overrides or {}
    for o in overrides:
        graph.node(o)  # raises on unknown id
    nodes = []
    for n in graph.nodes:
        c = n.clone()
        if n.id in overrides:
            ov = overrides[n.id]
            if isinstance(ov, tuple):
                c.quant, c.quant_scope = ov
            else:
                c.quant, c.quant_scope = ov, scope
        else:
            c.quant, c.quant_scope = fmt, scope
        nodes.append(c)
    return _rebuild(graph, nodes, list(graph.edges), list(graph.exits))


def strip_quantization(graph: NetworkGraph) -> NetworkGraph:
    """Remove all fixed-point annotations, returning the float graph."""
    nodes = []
    for n in graph.nodes:
        c = n.clone()
        c.quant, c.quant_scope = None, "both"
        nodes.append(c)
    return _rebuild(graph, nodes, list(graph.edges), list(graph.exits))
