"""Cost model: per-layer counts and the sample-budget formulas.

The LeNet-like per-layer numbers below were tabulated by hand from the
counting convention (MAC = 2 FLOPs, 1 FLOP per element otherwise) before the
counting code existed; treat them as frozen.
"""

from fractions import Fraction

import pytest

from bayonet.errors import IndivisibleSamples, ShapeMissing
from bayonet.flops import (
    count_flops,
    multi_exit_cost,
    node_flops,
    reduction_rate,
    reduction_rate_exact,
    single_exit_cost,
)
from bayonet.graph import CONV, DENSE, EXIT, LayerNode, SOFTMAX, TensorShape, build_chain
from bayonet.rng import Rng
from bayonet.transform import AFTER_EACH_POOL, ExitPolicy, McdPolicy, insert_exits, insert_mcd

from conftest import brute_layer_flops, lenet_like, random_chain, toy_conv

# frozen hand tabulation for lenet_like()
LENET_PER_LAYER = {
    "conv1": 172_800,  # 2 * 5*5 * 1 * 6 * 24*24
    "relu1": 3_456,
    "pool1": 864,
    "conv2": 307_200,  # 2 * 5*5 * 6 * 16 * 8*8
    "relu2": 1_024,
    "pool2": 256,
    "dense1": 5_120,  # 2 * 256 * 10
    "softmax1": 10,
    "exit1": 0,
}
LENET_MAIN = 485_600
LENET_EXIT = 5_130
LENET_TOTAL = 490_730


def test_dense_10x10_is_200_flops():
    g = build_chain(
        "t",
        (10, 1, 1),
        [
            ("d", DENSE, {"out_features": 10}),
            ("s", SOFTMAX, {}),
            ("e", EXIT, {"num_classes": 10}),
        ],
        10,
    )
    assert node_flops(g.node("d")) == 200


def test_conv_3x3_single_channel_on_4x4_output():
    # 2 * 9 * 16 = 288
    g = build_chain(
        "t",
        (1, 4, 4),
        [
            ("c", CONV, {"kernel": 3, "stride": 1, "padding": 1, "out_channels": 1}),
            ("d", DENSE, {"out_features": 2}),
            ("s", SOFTMAX, {}),
            ("e", EXIT, {"num_classes": 2}),
        ],
        2,
    )
    assert node_flops(g.node("c")) == 288


def test_missing_shapes_raise():
    n = LayerNode("d", DENSE, {"out_features": 4})
    with pytest.raises(ShapeMissing):
        node_flops(n)


def test_lenet_per_layer_matches_hand_tabulation(lenet):
    report = count_flops(lenet)
    assert report.per_layer == LENET_PER_LAYER
    assert report.flop_main == LENET_MAIN
    assert report.flop_exit == LENET_EXIT
    assert report.total == LENET_TOTAL
    assert report.per_exit == {"exit1": LENET_EXIT}
    assert report.alpha == pytest.approx(LENET_EXIT / LENET_MAIN)


def test_report_table_lists_every_layer(lenet):
    table = count_flops(lenet).as_table()
    for nid in LENET_PER_LAYER:
        assert nid in table
    assert str(LENET_TOTAL) in table


def test_per_layer_sum_equals_split(lenet):
    r = count_flops(lenet)
    assert sum(r.per_layer.values()) == r.flop_main + r.flop_exit


def test_multi_exit_graph_accounts_each_branch_once():
    g = insert_exits(toy_conv(), ExitPolicy(AFTER_EACH_POOL))
    base = count_flops(toy_conv())
    r = count_flops(g)
    assert len(r.per_exit) == 3
    # new heads add cost; the original layers are unchanged
    for nid, n in base.per_layer.items():
        assert r.per_layer[nid] == n
    assert r.total == sum(r.per_layer.values())
    added = r.total - base.total
    new_layers = set(r.per_layer) - set(base.per_layer)
    assert added == sum(r.per_layer[i] for i in new_layers)


def test_mcd_layers_count_one_flop_per_element():
    g = insert_mcd(
        insert_exits(toy_conv(), ExitPolicy(AFTER_EACH_POOL)),
        McdPolicy(layers_per_exit=1, keep_rate=0.5),
    )
    r = count_flops(g)
    for n in g.nodes:
        if n.kind == "mcdropout":
            assert r.per_layer[n.id] == n.output_shape.elements


def test_brute_force_recount_on_random_graphs():
    rng = Rng(77)
    for i in range(40):
        g = random_chain(rng)
        has_pool = any(n.kind == "maxpool" for n in g.nodes)
        if has_pool and rng.randint_below(2):
            g = insert_exits(g, ExitPolicy(AFTER_EACH_POOL))
        r = count_flops(g)
        for n in g.nodes:
            assert r.per_layer[n.id] == brute_layer_flops(n), (i, n.id)
        assert r.total == sum(brute_layer_flops(n) for n in g.nodes)


# -- budget formulas --------------------------------------------------------


def test_single_exit_cost_examples():
    assert single_exit_cost(1, 0, 5) == 5
    assert single_exit_cost(100, 50, 4) == 600
    assert single_exit_cost(100, 50, 1) == 150


def test_multi_exit_cost_examples():
    assert multi_exit_cost(100, 50, 6, 3) == 200
    assert multi_exit_cost(100, 50, 3, 3) == 150
    with pytest.raises(IndivisibleSamples):
        multi_exit_cost(100, 50, 4, 3)


def test_reduction_rate_examples():
    assert reduction_rate(0.7, 1, 1) == pytest.approx(1.0)
    assert reduction_rate(0.5, 6, 3) == pytest.approx(4.5)
    assert reduction_rate(0.0, 8, 5) == pytest.approx(8.0)


def test_reduction_rate_rejects_negative_alpha():
    with pytest.raises(ValueError):
        reduction_rate(-0.1, 2, 2)


def test_rate_times_cost_identity():
    for main in (1, 13, 100, 485_600):
        for exit_f in (0, 7, 50, 5_130):
            for n_exit in (1, 2, 3, 5):
                for passes in (1, 2, 4):
                    n_sample = n_exit * passes
                    se = single_exit_cost(main, exit_f, n_sample)
                    me = multi_exit_cost(main, exit_f, n_sample, n_exit)
                    rr = reduction_rate(exit_f / main, n_sample, n_exit)
                    assert abs(rr * me - se) <= 1e-12 * se


def test_exact_rational_rate_agrees_with_float():
    r = reduction_rate_exact(100, 50, 6, 3)
    assert r == Fraction(9, 2)
    assert float(r) == reduction_rate(0.5, 6, 3)


def test_reduction_rate_monotone_in_samples_and_exits():
    alpha = 0.3
    rates_s = [reduction_rate(alpha, s, 4) for s in (4, 8, 16, 32, 64)]
    assert rates_s == sorted(rates_s)
    rates_e = [reduction_rate(alpha, 64, e) for e in (1, 2, 4, 8)]
    assert rates_e == sorted(rates_e)
