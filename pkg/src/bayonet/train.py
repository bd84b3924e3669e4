"""Desk-scale SGD trainer for multi-exit graphs.

The loss is the unweighted sum of cross-entropy over every exit; dropout
stays active during training with the same mask-times-keep_rate semantics as
inference, and the gradient passes straight through the sampled mask.
Cross-entropy is fused with the exit softmax (gradient (p - onehot)/n at the
softmax input), so every exit's producer must be a softmax node.

Everything is deterministic: weight init, batch shuffling, and dropout masks
all consume one SplitMix64 stream seeded from the config, in a fixed order.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .data import SyntheticDataset
from .errors import DivergenceDetected, EmptyInput, PolicyError
from .graph import (
    CHANNEL_WISE,
    CONV,
    DENSE,
    EXIT,
    GAP,
    MAXPOOL,
    MCDROPOUT,
    RELU,
    SOFTMAX,
    WEIGHTED,
    NetworkGraph,
    expected_weight_shapes,
)
from .metrics import CalibrationReport, accuracy, ece
from .rng import Rng
from .runtime import forward_deterministic, forward_mc_batch

JOINT_EXIT_CROSS_ENTROPY = "joint_exit_cross_entropy"


@dataclass
class TrainConfig:
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 64
    epochs: int = 50
    loss: str = JOINT_EXIT_CROSS_ENTROPY
    seed: int = 0

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be > 0")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must be in [0, 1)")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size >= 1 and epochs >= 0 required")
        if self.loss != JOINT_EXIT_CROSS_ENTROPY:
            raise ValueError(f"unsupported loss {self.loss!r}")


class TrainResult(NamedTuple):
    graph: NetworkGraph
    loss_curve: list
    train_accuracy: float


# -- weight init -----------------------------------------------------------------


def _fan_in(node) -> int:
    if node.kind == CONV:
        return node.input_shape.channels * node.params["kernel"] ** 2
    return node.input_shape.elements


def _init_node(node, rng: Rng) -> None:
    shapes = expected_weight_shapes(node)
    limit = np.sqrt(6.0 / _fan_in(node))
    n_w = int(np.prod(shapes["w"]))
    node.weights = {
        "w": (2.0 * rng.uniform_array(n_w) - 1.0).reshape(shapes["w"]) * limit,
        "b": np.zeros(shapes["b"]),
    }


def init_weights(graph: NetworkGraph, seed: int) -> NetworkGraph:
    """Fresh He-uniform weights for every conv/dense node, in topo order."""
    g = graph.clone()
    rng = Rng(seed)
    for node in g.nodes:
        if node.kind in WEIGHTED:
            _init_node(node, rng)
    return g


# -- forward/backward tape ---------------------------------------------------------


def _forward_tape(graph, x, masks):
    """Forward pass recording what each node's backward step needs."""
    values, tape = {}, {}
    for node in graph.nodes:
        src = graph.producer_id(node.id)
        xin = x if src is None else values[src]
        k = node.kind
        if k == CONV:
            w, b = node.weights["w"], node.weights["b"]
            kk, s, pad = node.params["kernel"], node.params["stride"], node.params["padding"]
            xp = np.pad(xin, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else xin
            win = sliding_window_view(xp, (kk, kk), axis=(2, 3))[:, :, ::s, ::s]
            n, _, ho, wo = win.shape[0], win.shape[1], win.shape[2], win.shape[3]
            cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, -1)
            y = cols @ w.reshape(w.shape[0], -1).T
            out = y.reshape(n, ho, wo, w.shape[0]).transpose(0, 3, 1, 2) + b[None, :, None, None]
            tape[node.id] = {"cols": cols, "pad_shape": xp.shape, "hw": (ho, wo)}
        elif k == DENSE:
            w, b = node.weights["w"], node.weights["b"]
            x2 = xin.reshape(xin.shape[0], -1)
            out = (x2 @ w.T + b)[:, :, None, None]
            tape[node.id] = {"x2": x2}
        elif k == RELU:
            out = np.maximum(xin, 0.0)
            tape[node.id] = {"keep": xin > 0}
        elif k == MAXPOOL:
            kk, s = node.params["kernel"], node.params["stride"]
            win = sliding_window_view(xin, (kk, kk), axis=(2, 3))[:, :, ::s, ::s]
            flat = win.reshape(win.shape[:4] + (kk * kk,))
            am = flat.argmax(axis=4)
            out = np.take_along_axis(flat, am[..., None], axis=4)[..., 0]
            tape[node.id] = {"argmax": am, "in_shape": xin.shape}
        elif k == GAP:
            out = xin.mean(axis=(2, 3), keepdims=True)
            tape[node.id] = {"hw": xin.shape[2] * xin.shape[3]}
        elif k == SOFTMAX:
            z = xin - xin.max(axis=1, keepdims=True)
            e = np.exp(z)
            out = e / e.sum(axis=1, keepdims=True)
        elif k == MCDROPOUT:
            factor = masks[node.id] * node.params["keep_rate"] if masks else node.params["keep_rate"]
            out = xin * factor
            tape[node.id] = {"factor": factor}
        elif k == EXIT:
            out = xin
        else:  # pragma: no cover
            raise PolicyError(f"cannot train through node kind {k!r}")
        values[node.id] = out
    return values, tape


def joint_loss_and_grads(graph, x, y, masks):
    """Sum-of-exits cross-entropy and its exact gradients.

    ``masks`` maps dropout node id to a 0/1 array broadcastable over that
    node's batched output (None for expected-value mode). Returns
    (loss, grads, per_exit_loss) with grads keyed by weighted node id.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    n = x.shape[0]
    for e in graph.exits:
        if graph.node(graph.producer_id(e)).kind != SOFTMAX:
            raise PolicyError(f"exit {e!r} must be fed by a softmax node")

    values, tape = _forward_tape(graph, x, masks)
    onehot = np.zeros((n, graph.num_classes))
    onehot[np.arange(n), y] = 1.0

    per_exit_loss = []
    dvalue = {}
    for e in graph.exits:
        sm = graph.producer_id(e)
        p = values[sm].reshape(n, -1)
        with np.errstate(divide="ignore"):
            per_exit_loss.append(float(-np.log(p[np.arange(n), y]).mean()))
        dz = ((p - onehot) / n).reshape(values[sm].shape)
        src = graph.producer_id(sm)
        dvalue[src] = dvalue.get(src, 0.0) + dz
    loss = float(sum(per_exit_loss))

    grads = {}
    for node in reversed(graph.nodes):
        if node.kind in (EXIT, SOFTMAX):
            continue  # fused with the loss above
        dy = dvalue.pop(node.id, None)
        if dy is None:
            continue
        src = graph.producer_id(node.id)
        k = node.kind
        if k == CONV:
            w = node.weights["w"]
            kk, s, pad = node.params["kernel"], node.params["stride"], node.params["padding"]
            t = tape[node.id]
            ho, wo = t["hw"]
            dy2 = dy.transpose(0, 2, 3, 1).reshape(-1, w.shape[0])
            grads[node.id] = {
                "w": (dy2.T @ t["cols"]).reshape(w.shape),
                "b": dy2.sum(axis=0),
            }
            dcols = (dy2 @ w.reshape(w.shape[0], -1)).reshape(
                dy.shape[0], ho, wo, w.shape[1], kk, kk
            ).transpose(0, 3, 1, 2, 4, 5)
            dxp = np.zeros(t["pad_shape"])
            for i in range(kk):
                for j in range(kk):
                    dxp[:, :, i : i + s * ho : s, j : j + s * wo : s] += dcols[:, :, :, :, i, j]
            dx = dxp[:, :, pad : dxp.shape[2] - pad, pad : dxp.shape[3] - pad] if pad else dxp
        elif k == DENSE:
            w = node.weights["w"]
            t = tape[node.id]
            dy2 = dy.reshape(dy.shape[0], -1)
            grads[node.id] = {"w": dy2.T @ t["x2"], "b": dy2.sum(axis=0)}
            dx = (dy2 @ w).reshape((dy.shape[0],) + tuple(node.input_shape.as_list()))
        elif k == RELU:
            dx = dy * tape[node.id]["keep"]
        elif k == MAXPOOL:
            kk, s = node.params["kernel"], node.params["stride"]
            am = tape[node.id]["argmax"]
            dx = np.zeros(tape[node.id]["in_shape"])
            ni, ci, hi, wi = np.indices(am.shape)
            np.add.at(dx, (ni, ci, hi * s + am // kk, wi * s + am % kk), dy)
        elif k == GAP:
            dx = np.broadcast_to(dy / tape[node.id]["hw"], (dy.shape[0],) + tuple(node.input_shape.as_list())).copy()
        elif k == MCDROPOUT:
            dx = dy * tape[node.id]["factor"]
        else:  # pragma: no cover
            raise PolicyError(f"no backward rule for {k!r}")
        if src is not None:
            dvalue[src] = dvalue.get(src, 0.0) + dx
    return loss, grads, per_exit_loss


def draw_training_masks(graph, rng: Rng, batch: int):
    """One 0/1 dropout mask per sampler node, consumed in node-id order."""
    masks = {}
    for node in sorted((n for n in graph.nodes if n.kind == MCDROPOUT), key=lambda n: n.id):
        keep = node.params["keep_rate"]
        shape = node.output_shape
        if node.params["granularity"] == CHANNEL_WISE:
            u = rng.uniform_array(batch * shape.channels)
            masks[node.id] = (u <= keep).astype(np.float64).reshape(batch, shape.channels, 1, 1)
        else:
            u = rng.uniform_array(batch * shape.elements)
            masks[node.id] = (
                (u <= keep).astype(np.float64).reshape((batch,) + tuple(shape.as_list()))
            )
    return masks


# -- the training loop --------------------------------------------------------------


def train(graph: NetworkGraph, dataset: SyntheticDataset, config: TrainConfig) -> TrainResult:
    """SGD with momentum and weight decay on the joint sum-of-exit loss.

    Nodes that already carry weights keep them as the starting point (so
    epochs=0 is a no-op); missing weights are He-uniform initialized from the
    config seed. Raises DivergenceDetected the moment the loss stops being
    finite.
    """
    if not graph.exits:
        raise PolicyError("graph has no exits to train")
    if dataset.n_train == 0:
        raise EmptyInput("empty training split")
    g = graph.clone()
    rng = Rng(config.seed)
    for node in g.nodes:
        if node.kind in WEIGHTED and not node.has_weights():
            _init_node(node, rng)

    has_mcd = any(n.kind == MCDROPOUT for n in g.nodes)
    vel = {
        n.id: {"w": np.zeros_like(n.weights["w"]), "b": np.zeros_like(n.weights["b"])}
        for n in g.nodes
        if n.kind in WEIGHTED
    }
    x_all, y_all = dataset.x_train, dataset.y_train
    n = len(y_all)
    curve = []
    for _ in range(config.epochs):
        order = np.arange(n)
        rng.shuffle(order)
        epoch_loss, n_batches = 0.0, 0
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            xb, yb = x_all[idx], y_all[idx]
            masks = draw_training_masks(g, rng, len(idx)) if has_mcd else None
            loss, grads, _ = joint_loss_and_grads(g, xb, yb, masks)
            if not np.isfinite(loss):
                raise DivergenceDetected(f"loss {loss} is not finite")
            for node in g.nodes:
                if node.id not in grads:
                    continue
                v, wts = vel[node.id], node.weights
                for key in ("w", "b"):
                    step = grads[node.id][key] + config.weight_decay * wts[key]
                    v[key] = config.momentum * v[key] - config.lr * step
                    wts[key] = wts[key] + v[key]
            epoch_loss += loss
            n_batches += 1
        curve.append(epoch_loss / n_batches)

    outs = forward_deterministic(g, x_all)
    mean_probs = np.mean(outs, axis=0)
    return TrainResult(graph=g, loss_curve=curve, train_accuracy=accuracy(mean_probs, y_all))


# -- evaluation --------------------------------------------------------------------


@dataclass(frozen=True)
class EvalReport:
    """Accuracy/calibration per exit, per ensemble prefix, and overall."""

    per_exit: tuple
    prefix: tuple
    full: CalibrationReport
    n_sample: int
    seed: int


def evaluate(graph: NetworkGraph, dataset: SyntheticDataset, n_sample: int, seed: int) -> EvalReport:
    """Monte-Carlo evaluation on the test split.

    ``per_exit[k]`` scores exit k's pass-averaged predictions alone;
    ``prefix[k]`` scores the equally weighted ensemble of exits 0..k.
    ``full`` is the complete ensemble.
    """
    if dataset.n_test == 0:
        raise EmptyInput("empty test split")
    probs = forward_mc_batch(graph, dataset.x_test, n_sample, seed)
    y = dataset.y_test
    per_exit = []
    prefix = []
    pass_mean = probs.mean(axis=1)  # (n, n_exit, classes)
    for k in range(graph.n_exit):
        per_exit.append(ece(pass_mean[:, k], y))
        prefix.append(ece(pass_mean[:, : k + 1].mean(axis=1), y))
    return EvalReport(
        per_exit=tuple(per_exit),
        prefix=tuple(prefix),
        full=prefix[-1],
        n_sample=n_sample,
        seed=seed,
    )
