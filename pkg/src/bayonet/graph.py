"""Typed computation-graph IR for small feed-forward CNN/MLP networks.

Graphs are trees: a single backbone chain plus branches that each end in an
exit head. Nodes carry explicit shapes (inferred), optional inline weights,
and optional fixed-point annotations. The on-disk format is canonical JSON:
node list sorted by id, edges sorted, keys sorted, floats as shortest
round-trip decimals, so equal graphs serialize to equal bytes.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ParseError, SchemaError, ShapeMismatch

# Layer kinds
CONV = "conv2d"
DENSE = "dense"
RELU = "relu"
MAXPOOL = "maxpool"
GAP = "gap"
SOFTMAX = "softmax"
MCDROPOUT = "mcdropout"
EXIT = "exit"

KINDS = (CONV, DENSE, RELU, MAXPOOL, GAP, SOFTMAX, MCDROPOUT, EXIT)
WEIGHTED = (CONV, DENSE)

ELEMENT_WISE = "element"
CHANNEL_WISE = "channel"

# params each kind must carry in a graph document
_REQUIRED_PARAMS = {
    CONV: ("kernel", "stride", "padding", "out_channels"),
    DENSE: ("out_features",),
    RELU: (),
    MAXPOOL: ("kernel", "stride"),
    GAP: (),
    SOFTMAX: (),
    MCDROPOUT: ("keep_rate", "granularity"),
    EXIT: ("num_classes",),
}

_ALLOWED_BITS = (4, 6, 8, 16, 32)


@dataclass(frozen=True)
class TensorShape:
    """Feature-map shape (channels, height, width); vectors use h = w = 1."""

    channels: int
    height: int = 1
    width: int = 1

    def __post_init__(self):
        if self.channels < 1 or self.height < 1 or self.width < 1:
            raise SchemaError("shape", f"all dimensions must be >= 1, got {self}")

    @property
    def elements(self) -> int:
        return self.channels * self.height * self.width

    def as_list(self) -> list[int]:
        return [self.channels, self.height, self.width]


@dataclass(frozen=True)
class FixedPointFormat:
    """ap_fixed-style format: integer_bits includes the sign bit when signed.

    Values quantize to multiples of 2^-frac_bits with round-to-nearest-even
    and saturate at the format range.
    """

    total_bits: int
    integer_bits: int
    signed: bool = True

    def __post_init__(self):
        if self.total_bits not in _ALLOWED_BITS:
            raise SchemaError("quant.total_bits", f"must be one of {_ALLOWED_BITS}")
        if not (1 <= self.integer_bits <= self.total_bits):
            raise SchemaError(
                "quant.integer_bits",
                f"must satisfy 1 <= integer_bits <= total_bits, got {self.integer_bits}",
            )

    @property
    def frac_bits(self) -> int:
        return self.total_bits - self.integer_bits

    @property
    def max_value(self) -> float:
        ulp = 2.0 ** (-self.frac_bits)
        if self.signed:
            return 2.0 ** (self.integer_bits - 1) - ulp
        return 2.0**self.integer_bits - ulp

    @property
    def min_value(self) -> float:
        if self.signed:
            return -(2.0 ** (self.integer_bits - 1))
        return 0.0


@dataclass
class LayerNode:
    """One typed layer. Weights are float64 arrays keyed "w"/"b" when present."""

    id: str
    kind: str
    params: dict = field(default_factory=dict)
    weights: dict = field(default_factory=dict)
    quant: FixedPointFormat | None = None
    quant_scope: str = "both"  # weights | activations | both
    input_shape: TensorShape | None = None
    output_shape: TensorShape | None = None

    def has_weights(self) -> bool:
        return bool(self.weights)

    def clone(self) -> "LayerNode":
        return LayerNode(
            id=self.id,
            kind=self.kind,
            params=dict(self.params),
            weights=dict(self.weights),
            quant=self.quant,
            quant_scope=self.quant_scope,
            input_shape=self.input_shape,
            output_shape=self.output_shape,
        )


class NetworkGraph:
    """Layered DAG of LayerNodes: one input source, branches only for exits.

    Nodes are kept in topological order; treat instances as immutable after
    construction (transforms return new graphs).
    """

    def __init__(self, name, num_classes, input_shape, nodes, edges, exits):
        self.name = name
        self.num_classes = num_classes
        self.input_shape = input_shape
        self.nodes = list(nodes)
        self.edges = [tuple(e) for e in edges]
        self.exits = list(exits)
        self._by_id = {n.id: n for n in self.nodes}
        self._consumers: dict[str, list[str]] = {n.id: [] for n in self.nodes}
        self._producer: dict[str, str | None] = {n.id: None for n in self.nodes}
        self._validate()

    # -- structure queries ---------------------------------------------------

    def node(self, node_id: str) -> LayerNode:
        try:
            return self._by_id[node_id]
        except KeyError:
            raise SchemaError("nodes", f"unknown node id {node_id!r}") from None

    def producer_id(self, node_id: str) -> str | None:
        return self._producer[node_id]

    def consumer_ids(self, node_id: str) -> list[str]:
        return self._consumers[node_id]

    @property
    def input_id(self) -> str:
        return self.nodes[0].id

    @property
    def n_exit(self) -> int:
        return len(self.exits)

    def path_to(self, node_id: str) -> list[str]:
        """Producer chain input -> node_id (inclusive); unique because the
        graph is a tree."""
        path = [node_id]
        cur = self._producer[node_id]
        while cur is not None:
            path.append(cur)
            cur = self._producer[cur]
        path.reverse()
        return path

    def downstream_of(self, node_ids) -> set[str]:
        """All nodes reachable from (and including) the given nodes."""
        seen = set()
        stack = list(node_ids)
        while stack:
            cur = stack.pop()
            if cur in seen:
                continue
            seen.add(cur)
            stack.extend(self._consumers[cur])
        return seen

    def exit_branches(self) -> dict[str, list[str]]:
        """Nodes belonging to each exit's head, keyed by exit id.

        A branch is recognized by climbing upstream from the exit node
        through single-consumer nodes matching the head pattern
        gap? -> mcdropout* -> dense -> mcdropout* -> softmax? -> exit.
        The climb stops at the first fan-out node, which is the backbone
        attachment point. Everything outside every branch is backbone.
        """
        branches = {}
        for exit_id in self.exits:
            branch = [exit_id]
            cur = self._producer[exit_id]
            seen_dense = False
            seen_pool = False
            while cur is not None and len(self._consumers[cur]) == 1:
                kind = self._by_id[cur].kind
                if kind == MCDROPOUT:
                    branch.append(cur)
                elif kind == SOFTMAX and not seen_dense:
                    branch.append(cur)
                elif kind == DENSE and not seen_dense:
                    branch.append(cur)
                    seen_dense = True
                elif kind == GAP and seen_dense and not seen_pool:
                    branch.append(cur)
                    seen_pool = True
                else:
                    break
                cur = self._producer[cur]
            branch.reverse()
            branches[exit_id] = branch
        return branches

    def backbone_ids(self) -> list[str]:
        in_branch = {n for b in self.exit_branches().values() for n in b}
        return [n.id for n in self.nodes if n.id not in in_branch]

    def clone(self) -> NetworkGraph:
        """Structural copy; weight arrays are shared (treated immutable)."""
        nodes = [n.clone() for n in self.nodes]
        return NetworkGraph(
            self.name, self.num_classes, self.input_shape, nodes, self.edges, self.exits
        )

    # -- validation ----------------------------------------------------------

    def _validate(self):
        if len(self._by_id) != len(self.nodes):
            raise SchemaError("nodes", "duplicate node ids")
        if not self.nodes:
            raise SchemaError("nodes", "graph has no nodes")
        for src, dst in self.edges:
            if src not in self._by_id or dst not in self._by_id:
                raise SchemaError("edges", f"edge ({src}, {dst}) references unknown node")
            if self._producer[dst] is not None:
                raise SchemaError("edges", f"node {dst!r} has more than one producer")
            self._producer[dst] = src
            self._consumers[src].append(dst)

        sources = [n.id for n in self.nodes if self._producer[n.id] is None]
        if len(sources) != 1:
            raise SchemaError("edges", f"expected exactly one input source, found {sources}")

        order = topological_order([n.id for n in self.nodes], self.edges)
        if len(order) != len(self.nodes):
            raise SchemaError("edges", "cycle detected or unreachable nodes present")
        self.nodes = [self._by_id[i] for i in order]

        for n in self.nodes:
            if n.kind not in KINDS:
                raise SchemaError("kind", f"unknown layer kind {n.kind!r} on node {n.id!r}")
            for p in _REQUIRED_PARAMS[n.kind]:
                if p not in n.params:
                    raise SchemaError("params", f"node {n.id!r} ({n.kind}) missing {p!r}")
            if n.kind == MCDROPOUT:
                kr = n.params["keep_rate"]
                if not (0.0 < kr <= 1.0):
                    raise SchemaError("params", f"node {n.id!r} keep_rate must be in (0,1]")
                if n.params["granularity"] not in (ELEMENT_WISE, CHANNEL_WISE):
                    raise SchemaError("params", f"node {n.id!r} has bad granularity")

        leaves = [n.id for n in self.nodes if not self._consumers[n.id]]
        exit_kind = [n.id for n in self.nodes if n.kind == EXIT]
        if sorted(leaves) != sorted(exit_kind) or sorted(self.exits) != sorted(exit_kind):
            raise SchemaError(
                "exits", "exit nodes must be exactly the graph leaves and the exits list"
            )
        depth = {nid: i for i, nid in enumerate(order)}
        if self.exits != sorted(self.exits, key=lambda e: depth[e]):
            raise SchemaError("exits", "exits list must be ordered by depth")
        for e in self.exits:
            if self._by_id[e].params["num_classes"] != self.num_classes:
                raise SchemaError("exits", f"exit {e!r} num_classes != graph num_classes")

def topological_order(ids: list[str], edges: list[tuple[str, str]]) -> list[str]:
    """Kahn's algorithm with an id-sorted ready set.

    The sorted ready set makes the order a pure function of the document, so
    two structurally equal graphs always serialize the same way.  Returns as
    many nodes as are reachable; callers compare the length against ``ids``
    to detect cycles.
    """
    indeg = {i: 0 for i in ids}
    consumers: dict[str, list[str]] = {i: [] for i in ids}
    for src, dst in edges:
        indeg[dst] += 1
        consumers[src].append(dst)
    ready = [i for i in ids if indeg[i] == 0]
    order = []
    while ready:
        ready.sort()
        cur = ready.pop(0)
        order.append(cur)
        for c in consumers[cur]:
            indeg[c] -= 1
            if indeg[c] == 0:
                ready.append(c)
    return order


# -- shape inference ----------------------------------------------------------


def _out_shape(node: LayerNode, s: TensorShape) -> TensorShape:
    p = node.params
    if node.kind == CONV:
        k, st, pad = p["kernel"], p["stride"], p["padding"]
        h = (s.height + 2 * pad - k) // st + 1
        w = (s.width + 2 * pad - k) // st + 1
        if h < 1 or w < 1:
            raise ShapeMismatch(node.id, f"conv k={k} s={st} pad={pad} to fit", s)
        return TensorShape(p["out_channels"], h, w)
    if node.kind == DENSE:
        return TensorShape(p["out_features"], 1, 1)
    if node.kind == MAXPOOL:
        k, st = p["kernel"], p["stride"]
        h = (s.height - k) // st + 1
        w = (s.width - k) // st + 1
        if h < 1 or w < 1:
            raise ShapeMismatch(node.id, f"pool k={k} s={st} to fit", s)
        return TensorShape(s.channels, h, w)
    if node.kind == GAP:
        return TensorShape(s.channels, 1, 1)
    if node.kind == SOFTMAX:
        if s.height != 1 or s.width != 1:
            raise ShapeMismatch(node.id, "vector input (c,1,1) for softmax", s)
        return s
    if node.kind == EXIT:
        want = TensorShape(node.params["num_classes"], 1, 1)
        if s != want:
            raise ShapeMismatch(node.id, want, s)
        return s
    # relu / mcdropout are shape-preserving
    return s


def infer_shapes(graph: NetworkGraph) -> NetworkGraph:
    """Fill input/output shapes on every node; idempotent."""
    for n in graph.nodes:
        prod = graph.producer_id(n.id)
        s_in = graph.input_shape if prod is None else graph.node(prod).output_shape
        n.input_shape = s_in
        n.output_shape = _out_shape(n, s_in)
    return graph


def expected_weight_shapes(node: LayerNode) -> dict:
    """Weight array shapes implied by a node's kind and inferred shapes."""
    if node.kind == CONV:
        k = node.params["kernel"]
        c_in = node.input_shape.channels
        c_out = node.params["out_channels"]
        return {"w": (c_out, c_in, k, k), "b": (c_out,)}
    if node.kind == DENSE:
        return {
            "w": (node.params["out_features"], node.input_shape.elements),
            "b": (node.params["out_features"],),
        }
    return {}


# -- builders ------------------------------------------------------------------


def build_chain(name, input_shape, layers, num_classes) -> NetworkGraph:
    """Build a pure chain graph from (id, kind, params) triples.

    The last layer must be an exit head; shapes are inferred on the result.
    """
    nodes = [LayerNode(id=i, kind=k, params=dict(p)) for i, k, p in layers]
    edges = [(layers[i][0], layers[i + 1][0]) for i in range(len(layers) - 1)]
    if not isinstance(input_shape, TensorShape):
        input_shape = TensorShape(*input_shape)
    g = NetworkGraph(name, num_classes, input_shape, nodes, edges, [nodes[-1].id])
    return infer_shapes(g)


# -- serialization ---------------------------------------------------------------


def _node_doc(n: LayerNode) -> dict:
    params = dict(n.params)
    if n.quant is not None:
        params["quant"] = {
            "total_bits": n.quant.total_bits,
            "integer_bits": n.quant.integer_bits,
            "signed": n.quant.signed,
            "scope": n.quant_scope,
        }
    doc = {"id": n.id, "kind": n.kind, "params": params}
    if n.weights:
        doc["weights"] = {
            key: [float(v) for v in arr.ravel(order="C")]
            for key, arr in sorted(n.weights.items())
        }
    return doc


def save_graph(graph: NetworkGraph) -> str:
    """Canonical text form: ids sorted, keys sorted, shortest-decimal floats."""
    doc = {
        "name": graph.name,
        "num_classes": graph.num_classes,
        "input_shape": graph.input_shape.as_list(),
        "nodes": [_node_doc(n) for n in sorted(graph.nodes, key=lambda n: n.id)],
        "edges": sorted([list(e) for e in graph.edges]),
        "exits": list(graph.exits),
    }
    return json.dumps(doc, sort_keys=True, indent=2) + "\n"


_TOP_KEYS = {"name", "num_classes", "input_shape", "nodes", "edges", "exits"}
_NODE_KEYS = {"id", "kind", "params", "weights"}


def _parse_quant(q, node_id: str):
    for k in ("total_bits", "integer_bits", "signed", "scope"):
        if k not in q:
            raise SchemaError("quant", f"node {node_id!r} quant missing {k!r}")
    if q["scope"] not in ("weights", "activations", "both"):
        raise SchemaError("quant", f"node {node_id!r} has bad quant scope")
    return FixedPointFormat(q["total_bits"], q["integer_bits"], q["signed"]), q["scope"]


def load_graph(text: str) -> NetworkGraph:
    """Parse a graph document; validates structure, shapes and weight sizes."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise ParseError(e.msg, line=e.lineno) from None
    if not isinstance(doc, dict):
        raise SchemaError("document", "top level must be an object")
    missing = _TOP_KEYS - doc.keys()
    if missing:
        raise SchemaError("document", f"missing keys {sorted(missing)}")
    extra = doc.keys() - _TOP_KEYS
    if extra:
        raise SchemaError("document", f"unknown keys {sorted(extra)}")
    ishape = doc["input_shape"]
    if not (isinstance(ishape, list) and len(ishape) == 3):
        raise SchemaError("input_shape", "must be [channels, height, width]")

    nodes = []
    for nd in doc["nodes"]:
        extra = nd.keys() - _NODE_KEYS
        if extra:
            raise SchemaError("nodes", f"unknown node keys {sorted(extra)}")
        if "id" not in nd or "kind" not in nd:
            raise SchemaError("nodes", "node missing id or kind")
        params = dict(nd.get("params", {}))
        quant = None
        scope = "both"
        if "quant" in params:
            quant, scope = _parse_quant(params.pop("quant"), nd["id"])
        node = LayerNode(
            id=nd["id"], kind=nd["kind"], params=params, quant=quant, quant_scope=scope
        )
        for key, flat in nd.get("weights", {}).items():
            node.weights[key] = np.asarray(flat, dtype=np.float64)
        nodes.append(node)

    g = NetworkGraph(
        doc["name"], doc["num_classes"], TensorShape(*ishape), nodes,
        doc["edges"], doc["exits"],
    )
    infer_shapes(g)
    for n in g.nodes:
        shapes = expected_weight_shapes(n)
        for key, arr in n.weights.items():
            if key not in shapes:
                raise SchemaError("weights", f"node {n.id!r} has unexpected array {key!r}")
            if arr.size != math.prod(shapes[key]):
                raise SchemaError(
                    "weights",
                    f"node {n.id!r} array {key!r} has {arr.size} values, "
                    f"expected {math.prod(shapes[key])}",
                )
            n.weights[key] = arr.reshape(shapes[key])
    return g


def graph_hash(graph: NetworkGraph) -> str:
    """SHA-256 of the canonical document bytes."""
    return hashlib.sha256(save_graph(graph).encode("utf-8")).hexdigest()
