"""Train a single-exit baseline and a multi-exit stochastic net, compare calibration.

The interesting question is not raw accuracy (both nets learn the blobs)
but whether the predicted confidences mean anything. We train both nets on
the same data, then compare expected calibration error: the gap between
"the model said 90%" and "the model was right 90% of the time".
"""

import numpy as np

from bayonet.data import gaussian_blobs
from bayonet.graph import DENSE, EXIT, RELU, SOFTMAX, TensorShape, build_chain
from bayonet.metrics import accuracy, ece
from bayonet.runtime import forward_deterministic, forward_mc_batch
from bayonet.train import TrainConfig, train
from bayonet.transform import EXPLICIT, ExitPolicy, McdPolicy, insert_exits, insert_mcd


def dense_net(dims=8, classes=4, hidden=(32, 32)):
    layers = []
    for i, width in enumerate(hidden, start=1):
        layers.append((f"dense{i}", DENSE, {"out_features": width}))
        layers.append((f"relu{i}", RELU, {}))
    layers += [
        ("dense_out", DENSE, {"out_features": classes}),
        ("softmax_out", SOFTMAX, {}),
        ("exit_out", EXIT, {"num_classes": classes}),
    ]
    return build_chain("blobs-net", TensorShape(dims, 1, 1), layers, num_classes=classes)


def reliability(probs, labels, n_bins=10):
    conf = probs.max(axis=1)
    pred = probs.argmax(axis=1)
    print(f"{'bin':>10} {'count':>6} {'confidence':>11} {'accuracy':>9}")
    for b in range(n_bins):
        lo, hi = b / n_bins, (b + 1) / n_bins
        mask = (conf > lo) & (conf <= hi) if b else (conf <= hi)
        if not mask.any():
            continue
        print(f"{lo:.1f}-{hi:.1f}{'':>3} {mask.sum():>6} {conf[mask].mean():>11.4f} "
              f"{(pred[mask] == labels[mask]).mean():>9.4f}")


def main():
    data = gaussian_blobs(classes=4, dims=8, spread=1.2, n_train=2000, n_test=1000, seed=0)
    cfg = TrainConfig(lr=0.1, momentum=0.9, weight_decay=5e-4, batch_size=64, epochs=15, seed=1)

    base = dense_net()
    se = train(base, data, cfg)
    se_probs = forward_deterministic(se.graph, data.x_test)[-1]
    print(f"single exit: train acc {se.train_accuracy:.4f}, "
          f"test acc {accuracy(se_probs, data.y_test):.4f}, "
          f"ece {ece(se_probs, data.y_test).ece:.4f}")

    multi = insert_exits(base, ExitPolicy(EXPLICIT, attach_after=("relu1", "relu2")))
    stochastic = insert_mcd(multi, McdPolicy(layers_per_exit=1, keep_rate=0.75))
    me = train(stochastic, data, cfg)
    # 12 samples = 4 stochastic passes x 3 exits, averaged with equal weights
    probs = forward_mc_batch(me.graph, data.x_test, 12, seed=9001)
    vec = probs.mean(axis=(1, 2))
    print(f"multi exit:  train acc {me.train_accuracy:.4f}, "
          f"test acc {accuracy(vec, data.y_test):.4f}, "
          f"ece {ece(vec, data.y_test).ece:.4f} (12-sample ensemble)")

    print("\nper-exit test accuracy (first exit sees the least computation):")
    for k in range(me.graph.n_exit):
        exit_probs = probs[:, :, k].mean(axis=1)
        print(f"  exit {k + 1}: {accuracy(exit_probs, data.y_test):.4f}")

    print("\nsingle-exit reliability:")
    reliability(se_probs, data.y_test)
    print("\nensemble reliability:")
    reliability(vec, data.y_test)

    print("\nloss curves (first/last):")
    print(f"  single exit: {se.loss_curve[0]:.4f} -> {se.loss_curve[-1]:.4f}")
    print(f"  multi exit:  {me.loss_curve[0]:.4f} -> {me.loss_curve[-1]:.4f} "
          f"(sum over {me.graph.n_exit} exits)")


if __name__ == "__main__":
    main()
