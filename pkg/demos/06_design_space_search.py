"""Search the joint algorithm/hardware space and emit a hardware plan.

Phase 1 sweeps the algorithmic knobs (exit placement, dropout depth and
rate, confidence threshold, exit mode) on a small convnet, training each
distinct network and deriving the threshold variants from cached
predictions. Phase 3 then takes a chosen design and sweeps the hardware
knobs (channel fraction, bitwidth, mapping, reuse) against a device
profile, minimizing latency among candidates that keep the accuracy of
the full-precision default. The winner is frozen into a plan document.

The same flow is available from the command line:

    bayonet dse --phase 1 --graph net.json --data ... --config search.json
    bayonet dse --phase 3 --graph net.json --data ... --device dev.json
    bayonet emit --graph net.json --device dev.json --strategy spatial ...
"""

import json
import tempfile
from pathlib import Path

import numpy as np

from bayonet.data import SyntheticDataset
from bayonet.dse import (
    AFTER_EACH_POOL,
    SINGLE_EXIT,
    Priority,
    SearchBudget,
    SearchGrids,
    export_results,
    phase1_search,
    phase3_search,
)
from bayonet.graph import CONV, DENSE, EXIT, MAXPOOL, RELU, SOFTMAX, TensorShape, build_chain
from bayonet.mapper import estimate, load_device, plan
from bayonet.plan import emit_plan, mapping_from_doc, serialize_plan
from bayonet.rng import Rng
from bayonet.train import TrainConfig, train
from bayonet.transform import ExitPolicy, McdPolicy, insert_exits, insert_mcd

ROOT = Path(__file__).resolve().parents[1]


def small_conv(classes=3, side=8):
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
    return build_chain("small_conv", TensorShape(2, side, side), layers, num_classes=classes)


def image_dataset(n_train=240, n_test=120, side=8, channels=2, seed=9):
    """Synthetic image task; the label is the quantile bin of the mean of
    channel 0, so it is learnable but not trivial."""
    rng = Rng(seed)

    def split(n):
        x = (rng.uniform_array(n * channels * side * side) - 0.5).reshape(n, channels, side, side)
        means = x[:, 0].mean(axis=(1, 2))
        edges = np.quantile(means, [1 / 3, 2 / 3])
        return x, np.digitize(means, edges).astype(np.int64)

    x_tr, y_tr = split(n_train)
    x_te, y_te = split(n_test)
    return SyntheticDataset(
        generator="image_quantiles",
        params={"side": side, "channels": channels},
        n_train=n_train,
        n_test=n_test,
        seed=seed,
        num_classes=3,
        input_shape=TensorShape(channels, side, side),
        x_train=x_tr,
        y_train=y_tr,
        x_test=x_te,
        y_test=y_te,
    )


def main():
    data = image_dataset()
    base = small_conv()
    budget = SearchBudget(epochs=10, seeds_per_point=1, n_pass=2, root_seed=5, lr=0.05, batch_size=32)

    print("== phase 1: algorithmic sweep ==")
    grids = SearchGrids(
        exit_options=(SINGLE_EXIT, AFTER_EACH_POOL),
        mcd_layers=(0, 1),
        keep_rates=(0.75, 0.5),
        thresholds=(0.5, 0.9),
    )
    res = phase1_search(base, data, budget=budget, grids=grids,
                        priority=Priority(("accuracy", "calibration", "flops")))
    print(f"evaluated {len(res.table)} design points "
          f"(baseline {res.baseline_flops} flops per inference)")

    def show(tag, p):
        thr = "-" if p.confidence_threshold is None else f"{p.confidence_threshold:.2f}"
        print(f"  {tag:<8} exits={p.exit_policy:<15} keep={p.keep_rate:.3f} "
              f"mcd={p.mcd_layers_per_exit} thr={thr} mode={p.exit_mode:<19} "
              f"acc={p.accuracy_mean:.4f} ece={p.ece_mean:.4f} "
              f"flops x{p.expected_flops_frac:.3f}")

    show("best", res.ranked[0])
    show("acc-opt", res.acc_opt)
    show("ece-opt", res.ece_opt)

    print("\n== phase 3: hardware sweep around the multi-exit design ==")
    device = load_device(ROOT / "assets" / "devices" / "edge_small.json")
    g = insert_mcd(insert_exits(base, ExitPolicy(AFTER_EACH_POOL)),
                   McdPolicy(layers_per_exit=1, keep_rate=0.75))
    g = train(g, data, TrainConfig(lr=0.05, epochs=10, batch_size=32, seed=5)).graph
    h = phase3_search(g, data, device, budget=budget,
                      grids=SearchGrids(bitwidths=(8, 16), channel_fractions=(1.0, 0.5),
                                        reuse_factors=(1, 2, 4)),
                      accuracy_tolerance=0.02)
    print(f"full-precision default accuracy {h.default_accuracy:.4f}, "
          f"{len(h.table)} hardware points, "
          f"{sum(p.feasible for p in h.table)} feasible on {device.name}")
    b = h.best
    m = b.mapping
    print(f"  winner: {b.bitwidth}-bit, channels x{b.channel_fraction:.3f}, "
          f"{m['strategy']} mapping ({m['n_engines']} engines, reuse {m['reuse']}), "
          f"{b.latency_cycles} cycles, acc {b.accuracy_mean:.4f}")

    print("\n== freeze the winner into a plan document ==")
    p = plan(g, n_sample=budget.n_pass * g.n_exit, strategy=m["strategy"],
             reuse=m["reuse"], engines=m["n_engines"] if m["strategy"] == "mixed" else None)
    doc = emit_plan(g, p, estimate(p, g, device), device, root_seed=budget.root_seed)
    out = Path(tempfile.mkdtemp(prefix="bayonet_demo_")) / "plan.json"
    out.write_text(serialize_plan(doc), encoding="utf-8")
    print(f"wrote {out}")
    print(f"  graph {doc['graph']['name']} hash {doc['graph']['hash'][:16]}...")
    print(f"  mapping round-trips: {mapping_from_doc(doc) == p}")

    csv_path = out.with_name("results.csv")
    csv_path.write_text(export_results(res.ranked + h.table), encoding="utf-8")
    print(f"  search tables exported to {csv_path}")


if __name__ == "__main__":
    main()
