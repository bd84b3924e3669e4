"""Shared builders for the test suite.

Everything here is deterministic: builders take explicit seeds and the
random-graph generator is a pure function of its Rng argument.
"""

import numpy as np
import pytest

from bayonet.graph import (
    CONV,
    DENSE,
    EXIT,
    GAP,
    MAXPOOL,
    MCDROPOUT,
    RELU,
    SOFTMAX,
    TensorShape,
    build_chain,
    infer_shapes,
)
from bayonet.rng import Rng
from bayonet.train import init_weights


def lenet_like():
    """Five-layer convnet on 1x28x28 with a single softmax exit.

    Used as the fixed hand-counted reference everywhere a known graph is
    needed; the per-layer FLOP numbers live in test_flops.py.
    """
    layers = [
        ("conv1", CONV, {"kernel": 5, "stride": 1, "padding": 0, "out_channels": 6}),
        ("relu1", RELU, {}),
        ("pool1", MAXPOOL, {"kernel": 2, "stride": 2}),
        ("conv2", CONV, {"kernel": 5, "stride": 1, "padding": 0, "out_channels": 16}),
        ("relu2", RELU, {}),
        ("pool2", MAXPOOL, {"kernel": 2, "stride": 2}),
        ("dense1", DENSE, {"out_features": 10}),
        ("softmax1", SOFTMAX, {}),
        ("exit1", EXIT, {"num_classes": 10}),
    ]
    return build_chain("lenet_like", TensorShape(1, 28, 28), layers, num_classes=10)


def toy_conv(classes=3, side=8):
    """Small two-pool convnet so after_each_pool yields three exits."""
    layers = [
        ("conv1", CONV, {"kernel": 3, "stride": 1, "padding": 1, "out_channels": 4}),
        ("relu1", RELU, {}),
        ("pool1", MAXPOOL, {"kernel": 2, "stride": 2}),
        ("conv2", CONV, {"kernel": 3, "stride": 1, "padding": 1, "out_channels": 8}),
        ("relu2", RELU, {}),
        ("pool2", MAXPOOL, {"kernel": 2, "stride": 2}),
        ("dense1", DENSE, {"out_features": classes}),
        ("softmax1", SOFTMAX, {}),
        ("exit1", EXIT, {"num_classes": classes}),
    ]
    return build_chain("toy_conv", TensorShape(2, side, side), layers, num_classes=classes)


def mlp(dims=8, classes=4, hidden=(16, 16)):
    """Dense stack on vector input; exits must be attached explicitly."""
    layers = []
    for i, h in enumerate(hidden, start=1):
        layers.append((f"dense{i}", DENSE, {"out_features": h}))
        layers.append((f"relu{i}", RELU, {}))
    layers += [
        ("dense_out", DENSE, {"out_features": classes}),
        ("softmax_out", SOFTMAX, {}),
        ("exit_out", EXIT, {"num_classes": classes}),
    ]
    return build_chain("mlp", TensorShape(dims, 1, 1), layers, num_classes=classes)


def random_chain(rng: Rng, max_blocks=3, with_weights=False):
    """Random but always-valid chain graph: conv/relu/pool blocks then a head.

    Shapes are kept small so forward passes and plans stay cheap. Structure
    (depth, kernels, channels, input size) is drawn from ``rng`` only.
    """
    side = 8 + 4 * rng.randint_below(3)  # 8, 12, 16
    c_in = 1 + rng.randint_below(3)
    classes = 2 + rng.randint_below(4)
    layers = []
    n_blocks = 1 + rng.randint_below(max_blocks)
    cur_side = side
    for b in range(1, n_blocks + 1):
        k = (3, 5)[rng.randint_below(2)]
        pad = rng.randint_below(2)
        out_side = cur_side + 2 * pad - k + 1
        if out_side < 2:
            k, pad = 3, 1
            out_side = cur_side
        c_out = 2 + rng.randint_below(6)
        layers.append(
            (f"conv{b}", CONV, {"kernel": k, "stride": 1, "padding": pad, "out_channels": c_out})
        )
        layers.append((f"relu{b}", RELU, {}))
        cur_side = out_side
        if cur_side >= 4 and rng.randint_below(2):
            layers.append((f"pool{b}", MAXPOOL, {"kernel": 2, "stride": 2}))
            cur_side = (cur_side - 2) // 2 + 1
    if rng.randint_below(2):
        layers.append(("gap_t", GAP, {}))
    layers += [
        ("dense_t", DENSE, {"out_features": classes}),
        ("softmax_t", SOFTMAX, {}),
        ("exit_t", EXIT, {"num_classes": classes}),
    ]
    g = build_chain("random_chain", TensorShape(c_in, side, side), layers, classes)
    if with_weights:
        g = init_weights(g, seed=rng.next_u64() & 0xFFFFFFFF)
    return g


@pytest.fixture
def lenet():
    return lenet_like()


def random_mapped_graph(rng: Rng):
    """(graph-with-dropout, n_sample, strategy, reuse, engines) for plan tests."""
    from bayonet.transform import AFTER_EACH_POOL, ExitPolicy, McdPolicy, insert_exits, insert_mcd

    g = random_chain(rng)
    if any(n.kind == MAXPOOL for n in g.nodes) and rng.randint_below(2):
        g = insert_exits(g, ExitPolicy(AFTER_EACH_POOL))
    keep = (0.875, 0.75, 0.625, 0.5)[rng.randint_below(4)]
    gran = ("element", "channel")[rng.randint_below(2)]
    g = insert_mcd(g, McdPolicy(layers_per_exit=1, keep_rate=keep, granularity=gran))
    n_pass = 1 + rng.randint_below(8)
    n_sample = n_pass * g.n_exit
    strategy = ("spatial", "temporal", "mixed")[rng.randint_below(3)]
    engines = 1 + rng.randint_below(n_pass) if strategy == "mixed" else None
    reuse = (1, 2, 4, 8, 16)[rng.randint_below(5)]
    return g, n_sample, strategy, reuse, engines


def brute_layer_flops(node):
    """Straight-line re-derivation of the per-layer counting rule.

    Intentionally written from the counting convention (MAC = 2 FLOPs,
    element-wise ops = 1 FLOP/element) rather than calling into the package,
    so it can disagree with bayonet.flops if that module regresses.
    """
    out = node.output_shape
    if node.kind == CONV:
        k = node.params["kernel"]
        return 2 * k * k * node.input_shape.channels * out.channels * out.height * out.width
    if node.kind == DENSE:
        return 2 * node.input_shape.elements * node.params["out_features"]
    if node.kind == EXIT:
        return 0
    return out.elements


__all__ = [
    "lenet_like",
    "toy_conv",
    "mlp",
    "random_chain",
    "brute_layer_flops",
    "infer_shapes",
]
