"""Confidence-based early exiting: accuracy versus computation.

A multi-exit net can stop at the first exit whose confidence clears a
threshold. Low thresholds exit early and save arithmetic; high thresholds
fall through to the full network. This demo sweeps the threshold and
prints the achieved accuracy, the expected FLOPs per input (as a fraction
of always running everything), and where inputs actually exited.
"""

import numpy as np

from bayonet.data import gaussian_blobs
from bayonet.metrics import accuracy
from bayonet.runtime import CUMULATIVE_ENSEMBLE, PER_EXIT, exit_decisions, flops_to_exit, forward_mc_batch
from bayonet.train import TrainConfig, train
from bayonet.transform import EXPLICIT, ExitPolicy, McdPolicy, insert_exits, insert_mcd


def build_net(dims=8, classes=4):
    from bayonet.graph import DENSE, EXIT, RELU, SOFTMAX, TensorShape, build_chain

    layers = [
        ("dense1", DENSE, {"out_features": 32}),
        ("relu1", RELU, {}),
        ("dense2", DENSE, {"out_features": 32}),
        ("relu2", RELU, {}),
        ("dense_out", DENSE, {"out_features": classes}),
        ("softmax_out", SOFTMAX, {}),
        ("exit_out", EXIT, {"num_classes": classes}),
    ]
    return build_chain("blobs-net", TensorShape(dims, 1, 1), layers, num_classes=classes)


def main():
    data = gaussian_blobs(classes=4, dims=8, spread=1.2, n_train=2000, n_test=1000, seed=0)
    g = insert_mcd(
        insert_exits(build_net(), ExitPolicy(EXPLICIT, attach_after=("relu1", "relu2"))),
        McdPolicy(layers_per_exit=1, keep_rate=0.75),
    )
    cfg = TrainConfig(lr=0.1, momentum=0.9, weight_decay=5e-4, batch_size=64, epochs=15, seed=1)
    trained = train(g, data, cfg).graph

    n_pass = 2
    n_sample = n_pass * trained.n_exit
    probs = forward_mc_batch(trained, data.x_test, n_sample, seed=77)
    prefix = flops_to_exit(trained, n_pass)
    full = prefix[-1]
    print(f"{trained.n_exit} exits, {n_pass} stochastic passes, "
          f"cumulative cost to each exit: {prefix}")

    always_full = probs.mean(axis=(1, 2))
    print(f"\nno exiting: accuracy {accuracy(always_full, data.y_test):.4f}, "
          f"flops fraction 1.000")

    for mode in (PER_EXIT, CUMULATIVE_ENSEMBLE):
        print(f"\nmode {mode}:")
        print(f"{'threshold':>10} {'accuracy':>9} {'flops frac':>11}  exit usage")
        for thr in (0.1, 0.5, 0.6, 0.7, 0.8, 0.9, 0.95, 0.99, 0.999):
            choice, vec = exit_decisions(probs, thr, mode)
            acc = accuracy(vec, data.y_test)
            frac = np.mean([prefix[c] for c in choice]) / full
            usage = np.bincount(choice, minlength=trained.n_exit)
            bars = " ".join(f"e{k + 1}:{n}" for k, n in enumerate(usage))
            print(f"{thr:>10} {acc:>9.4f} {frac:>11.3f}  {bars}")

    print("\nreading: middling thresholds answer most inputs at the cheap exits")
    print("with little accuracy cost; only the hard inputs pay for the full net.")


if __name__ == "__main__":
    main()
