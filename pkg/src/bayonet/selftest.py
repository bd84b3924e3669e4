"""Built-in invariant checks behind `bayonet selftest`.

A fast self-contained sweep over the core invariants: generator consistency,
cost-formula identities, calibration arithmetic, fixed-point behaviour,
dropout statistics, inference determinism, and analytic-model-vs-simulator
equality on randomized plans. Not a substitute for the full test suite, but
enough to catch a broken install or platform drift in seconds.
"""

from __future__ import annotations

from fractions import Fraction

import numpy as np

from .flops import multi_exit_cost, reduction_rate, single_exit_cost
from .graph import (
    CONV,
    DENSE,
    ELEMENT_WISE,
    EXIT,
    MAXPOOL,
    RELU,
    SOFTMAX,
    FixedPointFormat,
    TensorShape,
    build_chain,
)
from .mapper import MIXED, SPATIAL, TEMPORAL, DeviceProfile, estimate, plan, simulate
from .metrics import ece
from .rng import Rng
from .runtime import apply_fixed_point, forward_mc, mcd_layer
from .train import init_weights
from .transform import ExitPolicy, McdPolicy, insert_exits, insert_mcd


def _check_rng():
    rng_a, rng_b = Rng(123), Rng(123)
    block = rng_a.uniform_array(257)
    singles = np.array([rng_b.uniform01() for _ in range(257)])
    assert np.array_equal(block, singles), "vectorized and scalar draws differ"
    assert rng_a.state == rng_b.state, "stream positions diverged"


def _check_cost_formulas():
    for fm in (100, 12345):
        for fe in (7, 990):
            for ne in (1, 2, 5):
                for npass in (1, 3):
                    ns = ne * npass
                    se = single_exit_cost(fm, fe, ns)
                    me = multi_exit_cost(fm, fe, ns, ne)
                    rr = reduction_rate(fe / fm, ns, ne)
                    exact = Fraction(se, me)
                    assert abs(rr - float(exact)) <= 1e-12 * rr, "reduction-rate identity broken"


def _check_ece():
    probs = np.array(
        [[0.95, 0.05], [0.95, 0.05], [0.65, 0.35], [0.55, 0.45]]
    )
    labels = np.array([0, 1, 0, 0])
    report = ece(probs, labels, n_bins=10)
    assert abs(report.ece - 0.425) < 1e-15, f"hand ECE case gives {report.ece}"


def _check_fixed_point():
    fmt = FixedPointFormat(8, 4)
    assert apply_fixed_point(200.0, fmt) == 7.9375, "saturation to format max failed"
    rng = Rng(7)
    x = (rng.uniform_array(1000) - 0.5) * 50
    q = apply_fixed_point(x, fmt)
    assert np.array_equal(apply_fixed_point(q, fmt), q), "quantization is not idempotent"


def _check_dropout_stats():
    n, p = 100_000, 0.75
    out = mcd_layer(np.ones(n), p, Rng(11), ELEMENT_WISE)
    drop = np.mean(out == 0.0)
    bound = 4.0 * np.sqrt(p * (1 - p) / n)
    assert abs(drop - (1 - p)) < bound, f"drop rate {drop} outside 4-sigma of {1-p}"
    assert abs(out.mean() - p * p) < bound, f"mean {out.mean()} outside 4-sigma of {p*p}"


def _toy_graph(channels=2, size=6, classes=3):
    g = build_chain(
        "selftest-net",
        TensorShape(channels, size, size),
        [
            ("c1", CONV, {"kernel": 3, "stride": 1, "padding": 1, "out_channels": 4}),
            ("r1", RELU, {}),
            ("p1", MAXPOOL, {"kernel": 2, "stride": 2}),
            ("fc", DENSE, {"out_features": classes}),
            ("sm", SOFTMAX, {}),
            ("out", EXIT, {"num_classes": classes}),
        ],
        num_classes=classes,
    )
    g = insert_exits(g, ExitPolicy())
    return insert_mcd(g, McdPolicy(layers_per_exit=1, keep_rate=0.75))


def _check_determinism():
    g = init_weights(_toy_graph(), seed=3)
    x = Rng(5).uniform_array(g.input_shape.elements).reshape(g.input_shape.as_list())
    a = forward_mc(g, x, n_sample=6, seed=42)
    b = forward_mc(g, x, n_sample=6, seed=42)
    assert np.array_equal(a.per_exit_probs, b.per_exit_probs), "inference not deterministic"
    sums = a.per_exit_probs.sum(axis=2)
    assert np.all(np.abs(sums - 1.0) < 1e-6), "probability rows do not sum to 1"


def _check_mapper_oracle():
    g = _toy_graph()
    device = DeviceProfile("selftest-dev", 10_000, 10_000, 10_000_000, 10_000_000, 200.0)
    rng = Rng(99)
    for _ in range(20):
        n_pass = 1 + rng.randint_below(6)
        n_sample = n_pass * g.n_exit
        strategy = (SPATIAL, TEMPORAL, MIXED)[rng.randint_below(3)]
        engines = 1 + rng.randint_below(n_pass) if strategy == MIXED else None
        reuse = 1 + rng.randint_below(16)
        p = plan(g, n_sample, strategy, reuse=reuse, engines=engines)
        est = estimate(p, g, device)
        sim = simulate(p, g, device)
        assert est.latency_cycles == sim.latency_cycles, (
            f"model {est.latency_cycles} != simulator {sim.latency_cycles} "
            f"({strategy}, E={p.n_engines}, reuse={reuse})"
        )


CHECKS = [
    ("rng stream consistency", _check_rng),
    ("cost formula identity", _check_cost_formulas),
    ("calibration hand case", _check_ece),
    ("fixed-point saturation and idempotence", _check_fixed_point),
    ("dropout mask statistics", _check_dropout_stats),
    ("inference determinism", _check_determinism),
    ("latency model vs simulator", _check_mapper_oracle),
]


def run_selftest() -> int:
    failures = 0
    for name, fn in CHECKS:
        try:
            fn()
        except AssertionError as e:
            failures += 1
            print(f"FAIL - {name}: {e}")
        else:
            print(f"ok   - {name}")
    if failures:
        print(f"{failures} of {len(CHECKS)} checks failed")
        return 1
    print(f"all {len(CHECKS)} checks passed")
    return 0
