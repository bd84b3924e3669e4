"""Analytical cost model: per-layer FLOP counts and sample-budget formulas.

Conventions: one multiply-accumulate is 2 FLOPs; element-wise layers (ReLU,
pooling, softmax, dropout sampling, global average pool) cost 1 FLOP per
output element so that exit-head overhead is tracked exactly.  Exit marker
nodes are free.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

from .errors import IndivisibleSamples, ShapeMissing
from .graph import CONV, DENSE, EXIT, NetworkGraph


def node_flops(node) -> int:
    """FLOPs to evaluate one node for a single input."""
    if node.input_shape is None or node.output_shape is None:
        raise ShapeMissing(node.id)
    if node.kind == CONV:
        k = node.params["kernel"]
        c_in = node.input_shape.channels
        out = node.output_shape
        return 2 * k * k * c_in * out.channels * out.height * out.width
    if node.kind == DENSE:
        return 2 * node.input_shape.elements * node.params["out_features"]
    if node.kind == EXIT:
        return 0
    return node.output_shape.elements


@dataclass(frozen=True)
class FlopReport:
    """Per-layer FLOP counts split into backbone and exit-branch totals."""

    per_layer: dict
    flop_main: int
    flop_exit: int
    per_exit: dict

    @property
    def total(self) -> int:
        return self.flop_main + self.flop_exit

    @property
    def alpha(self) -> float:
        """Exit overhead ratio flop_exit / flop_main."""
        return self.flop_exit / self.flop_main

    def as_table(self) -> str:
        width = max([len("layer")] + [len(i) for i in self.per_layer])
        lines = [f"{'layer'.ljust(width)}  {'flops':>12}"]
        for nid, n in self.per_layer.items():
            lines.append(f"{nid.ljust(width)}  {n:>12}")
        lines.append(f"{'main body'.ljust(width)}  {self.flop_main:>12}")
        lines.append(f"{'exit branches'.ljust(width)}  {self.flop_exit:>12}")
        lines.append(f"{'total'.ljust(width)}  {self.total:>12}")
        return "\n".join(lines)

    def as_dict(self) -> dict:
        return {
            "per_layer": dict(self.per_layer),
            "flop_main": self.flop_main,
            "flop_exit": self.flop_exit,
            "per_exit": dict(self.per_exit),
            "alpha": self.alpha,
        }


def count_flops(graph: NetworkGraph) -> FlopReport:
    """Count FLOPs per layer and aggregate into backbone vs exit branches.

    The per-layer map is keyed in topological order and always sums to
    flop_main + flop_exit.
    """
    per_layer = {n.id: node_flops(n) for n in graph.nodes}
    branches = graph.exit_branches()
    per_exit = {
        e: sum(per_layer[i] for i in members) for e, members in branches.items()
    }
    flop_exit = sum(per_exit.values())
    flop_main = sum(per_layer.values()) - flop_exit
    return FlopReport(
        per_layer=per_layer, flop_main=flop_main, flop_exit=flop_exit, per_exit=per_exit
    )


def single_exit_cost(flop_main: int, flop_exit: int, n_sample: int) -> int:
    """Cost of n_sample full stochastic passes through a single-exit net."""
    if n_sample < 1:
        raise ValueError("n_sample must be >= 1")
    return n_sample * (flop_main + flop_exit)


def multi_exit_cost(flop_main: int, flop_exit: int, n_sample: int, n_exit: int) -> int:
    """Cost of gathering n_sample predictions from a net with n_exit exits.

    The backbone runs once; each of the n_sample/n_exit stochastic passes
    re-runs only the (much cheaper) exit heads.
    """
    if n_sample < 1 or n_exit < 1:
        raise ValueError("n_sample and n_exit must be >= 1")
    if n_sample % n_exit != 0:
        raise IndivisibleSamples(n_sample, n_exit)
    return flop_main + (n_sample // n_exit) * flop_exit


def reduction_rate(alpha: float, n_sample: int, n_exit: int) -> float:
    """Factor by which the multi-exit evaluation is cheaper than single-exit.

    Equals single_exit_cost / multi_exit_cost for any flop_main > 0 with
    alpha = flop_exit / flop_main.
    """
    if n_sample < 1 or n_exit < 1:
        raise ValueError("n_sample and n_exit must be >= 1")
    if alpha < 0:
        raise ValueError("alpha must be >= 0")
    return (1.0 + alpha) / (1.0 / n_sample + alpha / n_exit)


def reduction_rate_exact(flop_main: int, flop_exit: int, n_sample: int, n_exit: int) -> Fraction:
    """Reduction rate in exact rational arithmetic (useful for validation)."""
    se = single_exit_cost(flop_main, flop_exit, n_sample)
    me = multi_exit_cost(flop_main, flop_exit, n_sample, n_exit)
    return Fraction(se, me)
