"""Inference engine: deterministic and Monte-Carlo forward passes.

Activations are computed in float64. Dropout sampling follows the literal
mask-then-scale-by-keep_rate rule (not classical inverted dropout; an
``inverted`` switch exists on mcd_layer for comparison runs). Per-node
fixed-point annotations quantize weights before use and activations after
each layer, except softmax and exit outputs which stay real so probability
vectors keep summing to one.

Randomness discipline: one root seed; input i of a batch owns sub-root
``sample_stream(seed, i)``; pass p draws from ``pass_stream(sub_root, p)``;
within a pass, dropout nodes consume draws in node-id order. Results are
therefore independent of batching and evaluation order.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import EmptyInput, IndivisibleSamples, ShapeMismatch
from .flops import count_flops
from .graph import (
    CHANNEL_WISE,
    CONV,
    DENSE,
    ELEMENT_WISE,
    EXIT,
    GAP,
    MAXPOOL,
    MCDROPOUT,
    RELU,
    SOFTMAX,
    FixedPointFormat,
    NetworkGraph,
    TensorShape,
)
from .rng import Rng, pass_stream, sample_stream
from .transform import split_components

PER_EXIT = "per_exit"
CUMULATIVE_ENSEMBLE = "cumulative_ensemble"
EXIT_MODES = (PER_EXIT, CUMULATIVE_ENSEMBLE)


# -- fixed point ---------------------------------------------------------------


def apply_fixed_point(x, fmt: FixedPointFormat):
    """Quantize to the nearest representable value, round-to-nearest-even,
    saturating at the format range. Scalars in, scalars out."""
    ulp = 2.0 ** (-fmt.frac_bits)
    lo = fmt.min_value / ulp
    hi = fmt.max_value / ulp
    arr = np.asarray(x, dtype=np.float64)
    q = np.clip(np.rint(arr / ulp), lo, hi) * ulp
    if np.ndim(x) == 0:
        return float(q)
    return q


# -- dropout sampling ----------------------------------------------------------


def draw_mask(rng: Rng, shape: TensorShape, keep_rate: float, granularity: str) -> np.ndarray:
    """0/1 keep mask for one tensor; consumes exactly one uniform per element
    (or per channel), in C order."""
    if granularity == CHANNEL_WISE:
        u = rng.uniform_array(shape.channels)
        return (u <= keep_rate).astype(np.float64).reshape(shape.channels, 1, 1)
    u = rng.uniform_array(shape.elements)
    return (u <= keep_rate).astype(np.float64).reshape(shape.as_list())


def mcd_layer(x, keep_rate, rng, granularity=ELEMENT_WISE, inverted=False):
    """Monte-Carlo dropout on one tensor.

    Each element (or channel) survives iff its uniform draw is <= keep_rate;
    survivors are then scaled by keep_rate. With ``inverted`` the survivors
    are scaled by 1/keep_rate instead (classical dropout, off by default).
    """
    if not 0.0 < keep_rate <= 1.0:
        raise ValueError(f"keep_rate must be in (0, 1], got {keep_rate}")
    x = np.asarray(x, dtype=np.float64)
    shape = TensorShape(*(list(x.shape) + [1] * (3 - x.ndim)))
    mask = draw_mask(rng, shape, keep_rate, granularity).reshape(
        x.shape if granularity == ELEMENT_WISE else (x.shape[0],) + (1,) * (x.ndim - 1)
    )
    scale = 1.0 / keep_rate if inverted else keep_rate
    return x * mask * scale


def _draw_pass_masks(graph, mcd_nodes, root_seed, pass_index, n_inputs, sample_offset=0):
    """Masks for every dropout node for one pass, stacked over the batch."""
    mcd_nodes = sorted(mcd_nodes, key=lambda m: m.id)
    per_node = {}
    for m in mcd_nodes:
        shape = m.output_shape
        c = shape.channels if m.params["granularity"] == CHANNEL_WISE else None
        tgt = (n_inputs, c, 1, 1) if c is not None else (n_inputs,) + tuple(shape.as_list())
        per_node[m.id] = np.empty(tgt)
    for i in range(n_inputs):
        rng = pass_stream(sample_stream(root_seed, sample_offset + i), pass_index)
        for m in mcd_nodes:
            per_node[m.id][i] = draw_mask(
                rng, m.output_shape, m.params["keep_rate"], m.params["granularity"]
            )
    return per_node


# -- single-layer evaluation ---------------------------------------------------


def _weights(node):
    w, b = node.weights["w"], node.weights["b"]
    if node.quant is not None and node.quant_scope in ("weights", "both"):
        w = apply_fixed_point(w, node.quant)
        b = apply_fixed_point(b, node.quant)
    return w, b


def _eval_node(node, x: np.ndarray, masks=None) -> np.ndarray:
    if node.kind == CONV:
        w, b = _weights(node)
        k, s, pad = node.params["kernel"], node.params["stride"], node.params["padding"]
        if pad:
            x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
        win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::s, ::s]
        y = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))
        out = np.transpose(y, (0, 3, 1, 2)) + b[None, :, None, None]
    elif node.kind == DENSE:
        w, b = _weights(node)
        out = (x.reshape(x.shape[0], -1) @ w.T + b)[:, :, None, None]
    elif node.kind == RELU:
        out = np.maximum(x, 0.0)
    elif node.kind == MAXPOOL:
        k, s = node.params["kernel"], node.params["stride"]
        win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::s, ::s]
        out = win.max(axis=(4, 5))
    elif node.kind == GAP:
        out = x.mean(axis=(2, 3), keepdims=True)
    elif node.kind == SOFTMAX:
        z = x - x.max(axis=1, keepdims=True)
        e = np.exp(z)
        out = e / e.sum(axis=1, keepdims=True)
    elif node.kind == MCDROPOUT:
        keep = node.params["keep_rate"]
        if masks is None:
            out = x * keep  # expected-value mode
        else:
            out = x * masks[node.id] * keep
    elif node.kind == EXIT:
        out = x
    else:  # pragma: no cover - validation rejects unknown kinds
        raise ShapeMismatch(node.id, "known layer kind", node.kind)
    if (
        node.quant is not None
        and node.quant_scope in ("activations", "both")
        and node.kind not in (SOFTMAX, EXIT)
    ):
        out = apply_fixed_point(out, node.quant)
    return out


def _run_nodes(graph, x, values, only=None, masks=None, counter=None):
    """Evaluate nodes in topological order, filling ``values`` (id -> tensor).

    ``only`` restricts evaluation to a node subset; already-present values are
    reused, which is how cached deterministic tensors are shared across passes.
    """
    for node in graph.nodes:
        if node.id in values or (only is not None and node.id not in only):
            continue
        src = graph.producer_id(node.id)
        xin = x if src is None else values[src]
        values[node.id] = _eval_node(node, xin, masks)
        if counter is not None:
            counter[node.id] = counter.get(node.id, 0) + 1
    return values


def _as_batch(graph, x):
    x = np.asarray(x, dtype=np.float64)
    expected = tuple(graph.input_shape.as_list())
    if x.ndim == 3:
        batched = False
        x = x[None]
    elif x.ndim == 4:
        batched = True
    else:
        raise ShapeMismatch(graph.input_id, expected, tuple(x.shape))
    if tuple(x.shape[1:]) != expected:
        raise ShapeMismatch(graph.input_id, expected, tuple(x.shape[1:]))
    if x.shape[0] == 0:
        raise EmptyInput("empty input batch")
    return x, batched


# -- forward passes ------------------------------------------------------------


def forward_deterministic(graph: NetworkGraph, x):
    """Single-pass evaluation with dropout in expected-value mode (scale by
    keep_rate). Returns one probability array per exit, in exit order."""
    xb, batched = _as_batch(graph, x)
    values = _run_nodes(graph, xb, {})
    outs = [values[e].reshape(xb.shape[0], -1) for e in graph.exits]
    if not batched:
        outs = [o[0] for o in outs]
    return outs


@dataclass
class PredictionSet:
    """Per-pass, per-exit class probabilities for one input."""

    per_exit_probs: np.ndarray  # (n_pass, n_exit, num_classes)
    n_pass: int
    seed: int


def _mc_exit_probs(graph, xb, n_sample, seed, sample_offset=0, counter=None):
    """Core Monte-Carlo loop: (n_pass, n_exit, batch, classes) probabilities."""
    n_pass = n_sample // graph.n_exit
    if n_pass * graph.n_exit != n_sample:
        raise IndivisibleSamples(n_sample, graph.n_exit)
    det, bayes = split_components(graph)
    mcd_nodes = [n for n in graph.nodes if n.kind == MCDROPOUT]
    base = _run_nodes(graph, xb, {}, only=det, counter=counter)
    n, n_exit = xb.shape[0], graph.n_exit
    probs = np.empty((n_pass, n_exit, n, graph.num_classes))
    for p in range(n_pass):
        if bayes:
            masks = _draw_pass_masks(graph, mcd_nodes, seed, p, n, sample_offset)
            values = _run_nodes(graph, xb, dict(base), only=bayes, masks=masks, counter=counter)
        else:
            values = base
        for e_i, e in enumerate(graph.exits):
            probs[p, e_i] = values[e].reshape(n, -1)
    return probs


def forward_mc(graph: NetworkGraph, x, n_sample: int, seed: int, counter=None) -> PredictionSet:
    """Monte-Carlo evaluation of one input.

    The deterministic component runs once and its outputs are reused across
    the n_sample / n_exit stochastic passes; each pass redraws dropout masks
    from its own derived stream. Bit-identical for equal seeds.
    """
    xb, batched = _as_batch(graph, x)
    if batched:
        raise ShapeMismatch(graph.input_id, "single input (c,h,w)", tuple(x.shape))
    probs = _mc_exit_probs(graph, xb, n_sample, seed, counter=counter)
    return PredictionSet(
        per_exit_probs=probs[:, :, 0, :], n_pass=probs.shape[0], seed=seed
    )


def forward_mc_batch(graph: NetworkGraph, x, n_sample: int, seed: int) -> np.ndarray:
    """Vectorized Monte-Carlo evaluation of a batch.

    Returns probabilities shaped (batch, n_pass, n_exit, classes). Row i uses
    the same dropout masks as forward_mc on input i seeded with
    sample_stream(seed, i); activations agree to floating-point round-off
    (batched matrix products may sum in a different order).
    """
    xb, _ = _as_batch(graph, x)
    probs = _mc_exit_probs(graph, xb, n_sample, seed)
    return np.transpose(probs, (2, 0, 1, 3))


def ensemble(pred: PredictionSet, upto_exit: int) -> np.ndarray:
    """Equally weighted average over all passes and exits 1..upto_exit."""
    n_exit = pred.per_exit_probs.shape[1]
    if not 1 <= upto_exit <= n_exit:
        raise ValueError(f"upto_exit must be in [1, {n_exit}], got {upto_exit}")
    return pred.per_exit_probs[:, :upto_exit, :].mean(axis=(0, 1))


# -- confidence-based early exiting ---------------------------------------------


class ExitDecision(NamedTuple):
    exit_index: int  # 1-based, in depth order
    probs: np.ndarray
    flops_spent: int


def exit_decisions(probs: np.ndarray, threshold: float, mode: str):
    """Vectorized early-exit choice over precomputed probabilities.

    ``probs`` is the (batch, n_pass, n_exit, classes) array produced by
    forward_mc_batch. Returns (0-based chosen exit per sample, decision
    probability vectors). Matches confidence_exit sample by sample.
    """
    if mode not in EXIT_MODES:
        raise ValueError(f"mode must be one of {EXIT_MODES}")
    per_exit = probs.mean(axis=1)  # (batch, n_exit, classes)
    if mode == PER_EXIT:
        basis = per_exit
    else:
        k = np.arange(1, per_exit.shape[1] + 1, dtype=np.float64)
        basis = np.cumsum(per_exit, axis=1) / k[None, :, None]
    conf = basis.max(axis=2)
    hit = conf >= threshold
    choice = np.where(hit.any(axis=1), hit.argmax(axis=1), per_exit.shape[1] - 1)
    vec = basis[np.arange(basis.shape[0]), choice]
    return choice, vec


def flops_to_exit(graph: NetworkGraph, n_pass: int) -> list[int]:
    """FLOPs actually executed when stopping at exit i (list index i-1).

    Deterministic layers on the union of paths to exits 1..i are paid once,
    stochastic layers once per pass.
    """
    report = count_flops(graph)
    det, bayes = split_components(graph)
    needed: set = set()
    out = []
    for e in graph.exits:
        needed |= set(graph.path_to(e))
        d = sum(report.per_layer[i] for i in needed if i in det)
        b = sum(report.per_layer[i] for i in needed if i in bayes)
        out.append(d + n_pass * b)
    return out


def confidence_exit(
    graph: NetworkGraph, x, threshold: float, mode: str, n_sample: int, seed: int
) -> ExitDecision:
    """Evaluate exits lazily in depth order and stop at the first confident one.

    Confidence is the max class probability of the exit's pass-averaged
    prediction (per_exit mode) or of the ensemble over all exits seen so far
    (cumulative_ensemble mode). Falls through to the final exit when nothing
    clears the threshold. flops_spent counts only layers actually executed;
    masks for skipped layers are still drawn so the visited-exit predictions
    are bit-identical to a full forward_mc run.
    """
    if mode not in EXIT_MODES:
        raise ValueError(f"mode must be one of {EXIT_MODES}")
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must be in (0, 1), got {threshold}")
    xb, batched = _as_batch(graph, x)
    if batched:
        raise ShapeMismatch(graph.input_id, "single input (c,h,w)", tuple(np.shape(x)))

    n_exit = graph.n_exit
    n_pass = n_sample // n_exit
    if n_pass * n_exit != n_sample:
        raise IndivisibleSamples(n_sample, n_exit)
    det, bayes = split_components(graph)
    mcd_nodes = [n for n in graph.nodes if n.kind == MCDROPOUT]
    all_masks = [
        _draw_pass_masks(graph, mcd_nodes, seed, p, 1) for p in range(n_pass)
    ]
    report = count_flops(graph)

    det_values: dict = {}
    pass_values = [dict() for _ in range(n_pass)]
    flops_spent = 0
    executed: set = set()
    prob_sum = np.zeros(graph.num_classes)

    for e_i, e in enumerate(graph.exits):
        needed = set(graph.path_to(e)) - executed
        for node in graph.nodes:  # topological order
            if node.id not in needed:
                continue
            if node.id in det:
                _run_nodes(graph, xb, det_values, only={node.id})
                flops_spent += report.per_layer[node.id]
            else:
                src = graph.producer_id(node.id)
                for p in range(n_pass):
                    vals = pass_values[p]
                    xin = xb if src is None else vals.get(src, det_values.get(src))
                    vals[node.id] = _eval_node(node, xin, all_masks[p])
                    flops_spent += report.per_layer[node.id]
            executed.add(node.id)

        if e in det:
            exit_probs = det_values[e].reshape(-1)
            per_pass = np.tile(exit_probs, (n_pass, 1))
        else:
            per_pass = np.stack([pass_values[p][e].reshape(-1) for p in range(n_pass)])
        mean_probs = per_pass.mean(axis=0)
        prob_sum += mean_probs
        basis = mean_probs if mode == PER_EXIT else prob_sum / (e_i + 1)
        if basis.max() >= threshold or e_i == n_exit - 1:
            return ExitDecision(exit_index=e_i + 1, probs=basis, flops_spent=flops_spent)
    raise AssertionError("unreachable")  # pragma: no cover
