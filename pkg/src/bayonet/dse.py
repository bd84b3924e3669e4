"""Grid-search design-space exploration.

Phase 1 sweeps the algorithmic knobs (exit placement, dropout depth and rate,
confidence threshold, exit mode), training each distinct network once per
seed and deriving every threshold/mode variant from the cached prediction
tensors. Phase 3 sweeps the hardware knobs (channel fraction, bitwidth,
mapping strategy, reuse) around one chosen design point, rejecting anything
whose accuracy falls more than half a point below the full-precision default,
then minimizes latency subject to device fit.

Ranking is lexicographic over the user's priority list; every sort ends with
a full knob tuple so results are a pure function of the evaluated table, not
of enumeration order.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass

import numpy as np

from .data import SyntheticDataset
from .errors import EmptyFeasibleSet, PolicyError
from .flops import count_flops
from .graph import MCDROPOUT, WEIGHTED, FixedPointFormat, NetworkGraph
from .mapper import MIXED, SPATIAL, TEMPORAL, DeviceProfile, check_fit, estimate, plan
from .metrics import accuracy, ece
from .rng import mix64
from .runtime import (
    EXIT_MODES,
    PER_EXIT,
    _run_nodes,
    exit_decisions,
    flops_to_exit,
    forward_mc_batch,
)
from .train import TrainConfig, train
from .transform import (
    ExitPolicy,
    McdPolicy,
    annotate_quantization,
    insert_exits,
    insert_mcd,
    scale_channels,
)

SINGLE_EXIT = "single"
AFTER_EACH_POOL = "after_each_pool"

ACCURACY = "accuracy"
CALIBRATION = "calibration"
FLOPS = "flops"
LATENCY = "latency"
PRIORITY_KEYS = (ACCURACY, CALIBRATION, FLOPS, LATENCY)


@dataclass(frozen=True)
class Constraints:
    """Feasibility bounds; every field optional. max_flops is relative to the
    single-exit one-pass baseline."""

    min_accuracy: float | None = None
    max_ece: float | None = None
    max_flops: float | None = None
    max_latency_cycles: int | None = None
    device: DeviceProfile | None = None


@dataclass(frozen=True)
class Priority:
    """Ordered metric preference, e.g. ("accuracy", "calibration")."""

    order: tuple

    def __post_init__(self):
        if not self.order:
            raise PolicyError("priority must list at least one metric")
        if len(set(self.order)) != len(self.order):
            raise PolicyError("priority metrics must be unique")
        for k in self.order:
            if k not in PRIORITY_KEYS:
                raise PolicyError(f"unknown priority metric {k!r}")


@dataclass(frozen=True)
class SearchGrids:
    keep_rates: tuple = (0.875, 0.75, 0.625, 0.5)
    thresholds: tuple = (0.1, 0.15, 0.25, 0.5, 0.6, 0.7, 0.8, 0.9, 0.95, 0.99, 0.999)
    exit_options: tuple = (SINGLE_EXIT, AFTER_EACH_POOL)
    mcd_layers: tuple = (0, 1)
    exit_modes: tuple = EXIT_MODES
    bitwidths: tuple = (4, 6, 8, 16)
    channel_fractions: tuple = (1.0, 0.5, 0.25, 0.125)
    reuse_factors: tuple = (1, 2, 4, 8, 16)


@dataclass(frozen=True)
class SearchBudget:
    epochs: int = 30
    seeds_per_point: int = 3
    n_pass: int = 2
    root_seed: int = 0
    lr: float = 0.05
    batch_size: int = 64


@dataclass
class DesignPoint:
    exit_policy: str
    n_exit: int
    keep_rate: float
    mcd_layers_per_exit: int
    confidence_threshold: float | None
    exit_mode: str
    bitwidth: int = 32
    channel_fraction: float = 1.0
    mapping: dict | None = None
    accuracy_mean: float = 0.0
    accuracy_std: float = 0.0
    ece_mean: float = 0.0
    ece_std: float = 0.0
    static_flops: int = 0
    static_flops_frac: float = 0.0
    expected_flops: float = 0.0
    expected_flops_frac: float = 0.0
    latency_cycles: int | None = None
    resources: dict | None = None
    feasible: bool = True
    reject_reason: str = ""

    def knob_key(self):
        """Deterministic total-order tiebreak over all knobs."""
        return (
            self.exit_policy,
            self.n_exit,
            -self.keep_rate,
            self.mcd_layers_per_exit,
            -1.0 if self.confidence_threshold is None else self.confidence_threshold,
            self.exit_mode,
            self.bitwidth,
            -self.channel_fraction,
            "" if self.mapping is None else f"{self.mapping['strategy']}:{self.mapping['n_engines']}:{self.mapping['reuse']}",
        )


def _passes_constraints(p: DesignPoint, c: Constraints):
    """Returns (feasible, reason) against every applicable bound."""
    if c.min_accuracy is not None and p.accuracy_mean < c.min_accuracy:
        return False, f"accuracy {p.accuracy_mean:.4f} < {c.min_accuracy}"
    if c.max_ece is not None and p.ece_mean > c.max_ece:
        return False, f"ece {p.ece_mean:.4f} > {c.max_ece}"
    if c.max_flops is not None and p.expected_flops_frac > c.max_flops:
        return False, f"flops fraction {p.expected_flops_frac:.4f} > {c.max_flops}"
    if c.max_latency_cycles is not None and p.latency_cycles is not None:
        if p.latency_cycles > c.max_latency_cycles:
            return False, f"latency {p.latency_cycles} > {c.max_latency_cycles}"
    return True, ""


def sort_key(priority: Priority):
    def key(p: DesignPoint):
        parts = []
        for k in priority.order:
            if k == ACCURACY:
                parts.append(-p.accuracy_mean)
            elif k == CALIBRATION:
                parts.append(p.ece_mean)
            elif k == FLOPS:
                parts.append(p.expected_flops_frac)
            else:
                parts.append(math.inf if p.latency_cycles is None else p.latency_cycles)
        return tuple(parts) + p.knob_key()

    return key


def _train_seed(root_seed: int, index: int) -> int:
    return mix64(root_seed ^ (index + 1))


def _eval_seed(root_seed: int) -> int:
    return mix64(root_seed ^ 0xE7A1)


def _transformed(base: NetworkGraph, exit_policy: str, mcd_layers: int, keep_rate: float):
    g = base if exit_policy == SINGLE_EXIT else insert_exits(base, ExitPolicy(AFTER_EACH_POOL))
    if mcd_layers > 0:
        g = insert_mcd(g, McdPolicy(layers_per_exit=mcd_layers, keep_rate=keep_rate))
    return g


@dataclass(frozen=True)
class Phase1Result:
    ranked: tuple  # feasible points, best first
    table: tuple  # every evaluated point
    acc_opt: DesignPoint
    ece_opt: DesignPoint
    baseline_flops: int


def phase1_search(
    base_graph: NetworkGraph,
    dataset: SyntheticDataset,
    constraints: Constraints | None = None,
    priority: Priority = Priority((ACCURACY, CALIBRATION, FLOPS)),
    budget: SearchBudget = SearchBudget(),
    grids: SearchGrids = SearchGrids(),
) -> Phase1Result:
    """Sweep the algorithmic design space of a single-exit base network.

    Each distinct (exit placement, dropout depth, keep rate) network is
    trained budget.seeds_per_point times; threshold and exit-mode variants
    reuse the cached per-pass probabilities. Rows without dropout collapse
    the keep-rate axis; rows with a single exit carry no threshold.
    """
    constraints = constraints or Constraints()
    baseline = count_flops(base_graph).total
    table = []
    for exit_policy in grids.exit_options:
        for mcd_layers in grids.mcd_layers:
            rates = grids.keep_rates if mcd_layers > 0 else (1.0,)
            for keep in rates:
                g = _transformed(base_graph, exit_policy, mcd_layers, keep)
                n_exit = g.n_exit
                n_sample = budget.n_pass * n_exit if mcd_layers > 0 else n_exit
                n_pass = n_sample // n_exit
                probs_runs, flops_prefix = [], None
                for s in range(budget.seeds_per_point):
                    cfg = TrainConfig(
                        lr=budget.lr,
                        batch_size=budget.batch_size,
                        epochs=budget.epochs,
                        seed=_train_seed(budget.root_seed, s),
                    )
                    trained = train(g, dataset, cfg).graph
                    probs_runs.append(
                        forward_mc_batch(
                            trained, dataset.x_test, n_sample, _eval_seed(budget.root_seed)
                        )
                    )
                    if flops_prefix is None:
                        flops_prefix = flops_to_exit(trained, n_pass)
                static = flops_prefix[-1]
                thresholds = [None]
                if n_exit > 1:
                    thresholds += list(grids.thresholds)
                for thr in thresholds:
                    modes = grids.exit_modes if thr is not None else (PER_EXIT,)
                    for mode in modes:
                        accs, eces, exps = [], [], []
                        for probs in probs_runs:
                            if thr is None:
                                vec = probs.mean(axis=(1, 2))
                                exp_flops = float(static)
                            else:
                                choice, vec = exit_decisions(probs, thr, mode)
                                exp_flops = float(
                                    np.mean([flops_prefix[c] for c in choice])
                                )
                            accs.append(accuracy(vec, dataset.y_test))
                            eces.append(ece(vec, dataset.y_test).ece)
                            exps.append(exp_flops)
                        point = DesignPoint(
                            exit_policy=exit_policy,
                            n_exit=n_exit,
                            keep_rate=keep,
                            mcd_layers_per_exit=mcd_layers,
                            confidence_threshold=thr,
                            exit_mode=mode,
                            accuracy_mean=float(np.mean(accs)),
                            accuracy_std=float(np.std(accs)),
                            ece_mean=float(np.mean(eces)),
                            ece_std=float(np.std(eces)),
                            static_flops=static,
                            static_flops_frac=static / baseline,
                            expected_flops=float(np.mean(exps)),
                            expected_flops_frac=float(np.mean(exps)) / baseline,
                        )
                        ok, reason = _passes_constraints(point, constraints)
                        point.feasible = ok
                        point.reject_reason = reason
                        table.append(point)

    feasible = [p for p in table if p.feasible]
    if not feasible:
        near = min(table, key=lambda p: (-p.accuracy_mean, p.ece_mean, p.knob_key()))
        raise EmptyFeasibleSet(
            f"all {len(table)} design points violate the constraints; "
            f"nearest miss: {near.reject_reason}",
            nearest_miss=near,
        )
    ranked = sorted(feasible, key=sort_key(priority))
    acc_opt = min(feasible, key=lambda p: (-p.accuracy_mean, p.ece_mean, p.knob_key()))
    ece_opt = min(feasible, key=lambda p: (p.ece_mean, -p.accuracy_mean, p.knob_key()))
    return Phase1Result(
        ranked=tuple(ranked),
        table=tuple(table),
        acc_opt=acc_opt,
        ece_opt=ece_opt,
        baseline_flops=baseline,
    )


# -- phase 3 -------------------------------------------------------------------------


def calibrate_formats(graph: NetworkGraph, x_batch, total_bits: int):
    """Per-node fixed-point formats sized from observed ranges.

    Integer bits cover the larger of the node's weight range and its
    activation range on the calibration batch (sign bit included), clamped to
    the format width.
    """
    values = _run_nodes(graph, np.asarray(x_batch, dtype=np.float64), {})
    overrides = {}
    for node in graph.nodes:
        peak = float(np.max(np.abs(values[node.id]))) if node.id in values else 0.0
        if node.kind in WEIGHTED:
            peak = max(
                peak,
                float(np.max(np.abs(node.weights["w"]))),
                float(np.max(np.abs(node.weights["b"]))),
            )
        int_bits = 1 if peak == 0.0 else int(math.floor(math.log2(peak))) + 2
        int_bits = min(max(int_bits, 1), total_bits)
        overrides[node.id] = FixedPointFormat(total_bits, int_bits, signed=True)
    return overrides


def quantize_graph(graph: NetworkGraph, total_bits: int, x_calibration) -> NetworkGraph:
    """Annotate every node with a range-calibrated format of the given width."""
    overrides = calibrate_formats(graph, x_calibration, total_bits)
    any_fmt = overrides[graph.input_id]
    return annotate_quantization(graph, any_fmt, "both", overrides=overrides)


def _mappings(n_pass: int, grids: SearchGrids):
    out = [(SPATIAL, n_pass)]
    for e in range(2, n_pass):
        if n_pass % e == 0:
            out.append((MIXED, e))
    if n_pass > 1:
        out.append((TEMPORAL, 1))
    return out


@dataclass(frozen=True)
class Phase3Result:
    best: DesignPoint
    table: tuple
    default_accuracy: float


def phase3_search(
    graph: NetworkGraph,
    dataset: SyntheticDataset,
    device: DeviceProfile,
    constraints: Constraints | None = None,
    budget: SearchBudget = SearchBudget(),
    grids: SearchGrids = SearchGrids(),
    n_sample: int | None = None,
    accuracy_tolerance: float = 0.005,
) -> Phase3Result:
    """Joint algorithm/hardware sweep around one trained design point.

    Channel fractions below 1 retrain the shrunken network; bitwidths
    annotate range-calibrated formats post training. Candidates losing more
    than ``accuracy_tolerance`` versus the full-precision default are
    rejected; survivors minimize latency subject to device fit, ties broken
    by fewer resources then lower bitwidth.
    """
    constraints = constraints or Constraints()
    if not any(n.kind == MCDROPOUT for n in graph.nodes):
        raise PolicyError("hardware search needs a network with dropout samplers")
    if n_sample is None:
        n_sample = budget.n_pass * graph.n_exit
    eval_seed = _eval_seed(budget.root_seed)
    cal_x = dataset.x_test[: min(64, len(dataset.y_test))]

    def ensemble_accuracy(g):
        probs = forward_mc_batch(g, dataset.x_test, n_sample, eval_seed)
        vec = probs.mean(axis=(1, 2))
        return accuracy(vec, dataset.y_test), ece(vec, dataset.y_test).ece

    default_acc, _ = ensemble_accuracy(graph)
    point_proto = dict(
        exit_policy="fixed",
        n_exit=graph.n_exit,
        keep_rate=_first_keep_rate(graph),
        mcd_layers_per_exit=_mcd_depth(graph),
        confidence_threshold=None,
        exit_mode=PER_EXIT,
    )

    table = []
    for fraction in grids.channel_fractions:
        if fraction == 1.0:
            g_f = graph
        else:
            scaled = scale_channels(graph, fraction)
            cfg = TrainConfig(
                lr=budget.lr,
                batch_size=budget.batch_size,
                epochs=budget.epochs,
                seed=_train_seed(budget.root_seed, 0),
            )
            g_f = train(scaled, dataset, cfg).graph
        for bits in grids.bitwidths:
            g_q = quantize_graph(g_f, bits, cal_x)
            acc_q, ece_q = ensemble_accuracy(g_q)
            acc_ok = acc_q >= default_acc - accuracy_tolerance
            for strategy, engines in _mappings(n_sample // graph.n_exit, grids):
                for r in grids.reuse_factors:
                    p = plan(g_q, n_sample, strategy, reuse=r, engines=engines)
                    est = estimate(p, g_q, device)
                    fit = check_fit(est, device)
                    point = DesignPoint(
                        **point_proto,
                        bitwidth=bits,
                        channel_fraction=fraction,
                        mapping={
                            "strategy": strategy,
                            "n_engines": p.n_engines,
                            "reuse": r,
                        },
                        accuracy_mean=acc_q,
                        ece_mean=ece_q,
                        latency_cycles=est.latency_cycles,
                        resources={
                            "dsp": est.dsp,
                            "bram_kb": est.bram_kb,
                            "lut": est.lut,
                            "ff": est.ff,
                        },
                    )
                    reasons = []
                    if not acc_ok:
                        reasons.append(
                            f"accuracy {acc_q:.4f} < default {default_acc:.4f} - {accuracy_tolerance}"
                        )
                    if not fit.fits:
                        reasons.append(fit.describe())
                    ok, reason = _passes_constraints(point, constraints)
                    if not ok:
                        reasons.append(reason)
                    point.feasible = not reasons
                    point.reject_reason = "; ".join(reasons)
                    table.append(point)

    feasible = [p for p in table if p.feasible]
    if not feasible:
        near = min(
            table,
            key=lambda p: (
                math.inf if p.latency_cycles is None else p.latency_cycles,
                p.knob_key(),
            ),
        )
        raise EmptyFeasibleSet(
            f"no hardware configuration satisfies all constraints; nearest miss "
            f"({near.reject_reason}) at latency {near.latency_cycles}",
            nearest_miss=near,
        )

    def hw_key(p: DesignPoint):
        r = p.resources
        return (
            p.latency_cycles,
            (r["dsp"], r["bram_kb"], r["lut"], r["ff"]),
            p.bitwidth,
            p.knob_key(),
        )

    best = min(feasible, key=hw_key)
    table.sort(key=hw_key)
    return Phase3Result(best=best, table=tuple(table), default_accuracy=default_acc)


def _first_keep_rate(graph) -> float:
    for n in graph.nodes:
        if n.kind == MCDROPOUT:
            return n.params["keep_rate"]
    return 1.0


def _mcd_depth(graph) -> int:
    # samplers per exit path, maximal over exits
    depth = 0
    for e in graph.exits:
        cnt = sum(1 for i in graph.path_to(e) if graph.node(i).kind == MCDROPOUT)
        depth = max(depth, cnt)
    return depth


# -- export -------------------------------------------------------------------------

CSV_COLUMNS = [
    "rank",
    "exit_policy",
    "n_exit",
    "keep_rate",
    "mcd_layers",
    "threshold",
    "exit_mode",
    "channel_fraction",
    "bitwidth",
    "mapping",
    "engines",
    "reuse",
    "accuracy_mean",
    "accuracy_std",
    "ece_mean",
    "ece_std",
    "static_flops",
    "static_flops_frac",
    "expected_flops",
    "expected_flops_frac",
    "latency_cycles",
    "dsp",
    "bram_kb",
    "lut",
    "ff",
    "feasible",
]


def export_results(points) -> str:
    """Render design points as CSV with a fixed column order.

    FLOP columns are fractions of the single-exit baseline; missing values
    (e.g. latency before phase 3) stay empty.
    """
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for rank, p in enumerate(points, start=1):
        m = p.mapping or {}
        r = p.resources or {}
        w.writerow(
            [
                rank,
                p.exit_policy,
                p.n_exit,
                f"{p.keep_rate:.4f}",
                p.mcd_layers_per_exit,
                "" if p.confidence_threshold is None else f"{p.confidence_threshold:.4f}",
                p.exit_mode,
                f"{p.channel_fraction:.4f}",
                p.bitwidth,
                m.get("strategy", ""),
                m.get("n_engines", ""),
                m.get("reuse", ""),
                f"{p.accuracy_mean:.4f}",
                f"{p.accuracy_std:.4f}",
                f"{p.ece_mean:.4f}",
                f"{p.ece_std:.4f}",
                p.static_flops if p.static_flops else "",
                f"{p.static_flops_frac:.4f}" if p.static_flops else "",
                f"{p.expected_flops:.1f}" if p.expected_flops else "",
                f"{p.expected_flops_frac:.4f}" if p.expected_flops else "",
                "" if p.latency_cycles is None else p.latency_cycles,
                r.get("dsp", ""),
                r.get("bram_kb", ""),
                r.get("lut", ""),
                r.get("ff", ""),
                int(p.feasible),
            ]
        )
    return buf.getvalue()
