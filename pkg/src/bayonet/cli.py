"""Command-line front-end.

Thin argparse layer over the library: every subcommand is a few lines of
plumbing around one module. Exit status 0 on success, 1 on a domain error
(diagnostic on stderr), 2 on usage errors (argparse's convention). All
randomness flows from --seed; no environment variables, no wall clock.
"""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from . import __version__
from .data import make_dataset, read_bten
from .dse import (
    Constraints,
    Priority,
    SearchBudget,
    SearchGrids,
    export_results,
    phase1_search,
    phase3_search,
)
from .errors import BayonetError
from .flops import count_flops, multi_exit_cost, reduction_rate, single_exit_cost
from .graph import CHANNEL_WISE, ELEMENT_WISE, load_graph, save_graph
from .mapper import MIXED, SPATIAL, TEMPORAL, check_fit, estimate, load_device, plan, simulate
from .plan import emit_plan, save_plan
from .runtime import CUMULATIVE_ENSEMBLE, PER_EXIT, confidence_exit, ensemble, forward_mc
from .train import TrainConfig, train
from .transform import AFTER_EACH_POOL, EXPLICIT, ExitPolicy, McdPolicy, insert_exits, insert_mcd


def _load(path):
    with open(path, "r", encoding="utf-8") as fh:
        return load_graph(fh.read())


def _save(graph, path):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(save_graph(graph))


def _parse_strategy(text: str):
    if text == SPATIAL or text == TEMPORAL:
        return text, None
    if text.startswith("mixed:"):
        return MIXED, int(text.split(":", 1)[1])
    raise argparse.ArgumentTypeError(
        f"strategy must be spatial, temporal or mixed:<engines>, got {text!r}"
    )


def _parse_data(text: str):
    """'gaussian_blobs:classes=4,dims=8,seed=1' -> dataset."""
    name, _, rest = text.partition(":")
    kwargs = {}
    if rest:
        for item in rest.split(","):
            key, _, val = item.partition("=")
            if not _ or not key:
                raise argparse.ArgumentTypeError(f"bad dataset parameter {item!r}")
            try:
                kwargs[key] = int(val)
            except ValueError:
                kwargs[key] = float(val)
    try:
        return make_dataset(name, **kwargs)
    except (ValueError, TypeError) as e:
        raise argparse.ArgumentTypeError(str(e)) from None


def _load_search_config(path):
    """JSON document with optional 'grids' and 'constraints' sections.

    Grid values given as lists become tuples; unknown keys in either section
    are usage errors so typos never silently fall back to defaults.
    """
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    grids_kw = {
        k: tuple(v) if isinstance(v, list) else v
        for k, v in doc.get("grids", {}).items()
    }
    try:
        grids = SearchGrids(**grids_kw)
    except TypeError as e:
        raise ValueError(f"grids section: {e}") from None
    cons_kw = doc.get("constraints", {})
    allowed = {"min_accuracy", "max_ece", "max_flops", "max_latency_cycles"}
    unknown = set(cons_kw) - allowed
    if unknown:
        raise ValueError(f"constraints section: unknown keys {sorted(unknown)}")
    return grids, cons_kw


def _parse_mode(text: str) -> str:
    aliases = {
        "per_exit": PER_EXIT,
        "cumulative": CUMULATIVE_ENSEMBLE,
        "cumulative_ensemble": CUMULATIVE_ENSEMBLE,
    }
    if text not in aliases:
        raise argparse.ArgumentTypeError(f"mode must be per_exit or cumulative, got {text!r}")
    return aliases[text]


# -- subcommands ---------------------------------------------------------------


def cmd_transform(args) -> int:
    g = _load(args.graph)
    if args.exits != "none":
        if args.exits == AFTER_EACH_POOL:
            policy = ExitPolicy(AFTER_EACH_POOL)
        else:
            policy = ExitPolicy(EXPLICIT, attach_after=tuple(args.exits.split(",")))
        g = insert_exits(g, policy)
    if args.mcd_layers > 0:
        granularity = CHANNEL_WISE if args.granularity == "channel" else ELEMENT_WISE
        g = insert_mcd(
            g,
            McdPolicy(
                layers_per_exit=args.mcd_layers,
                keep_rate=args.keep_rate,
                granularity=granularity,
            ),
        )
    _save(g, args.out)
    print(f"wrote {args.out}: {g.n_exit} exit(s), {len(g.nodes)} nodes")
    return 0


def cmd_train(args) -> int:
    g = _load(args.graph)
    dataset = _parse_data(args.data)
    cfg = TrainConfig(
        lr=args.lr,
        momentum=args.momentum,
        weight_decay=args.weight_decay,
        batch_size=args.batch_size,
        epochs=args.epochs,
        seed=args.seed,
    )
    result = train(g, dataset, cfg)
    _save(result.graph, args.out)
    last = f"{result.loss_curve[-1]:.4f}" if result.loss_curve else "n/a"
    print(
        f"wrote {args.out}: {args.epochs} epochs, final loss {last}, "
        f"train accuracy {result.train_accuracy:.4f}"
    )
    return 0


def cmd_infer(args) -> int:
    g = _load(args.graph)
    batch = read_bten(args.input)
    for i, x in enumerate(batch):
        if args.threshold is not None:
            decision = confidence_exit(
                g, x, args.threshold, args.mode, args.n_sample, args.seed + i
            )
            probs = " ".join(f"{p:.4f}" for p in decision.probs)
            print(
                f"input {i}: exit {decision.exit_index}/{g.n_exit} "
                f"prediction {int(np.argmax(decision.probs))} "
                f"confidence {decision.probs.max():.4f} flops {decision.flops_spent}"
            )
            print(f"  probs: {probs}")
        else:
            pred = forward_mc(g, x, args.n_sample, args.seed + i)
            vec = ensemble(pred, g.n_exit)
            print(f"input {i}: prediction {int(np.argmax(vec))} confidence {vec.max():.4f}")
            print(f"  probs: {' '.join(f'{p:.4f}' for p in vec)}")
    return 0


def cmd_flops(args) -> int:
    g = _load(args.graph)
    report = count_flops(g)
    print(report.as_table())
    if args.n_sample:
        se = single_exit_cost(report.flop_main, report.flop_exit, args.n_sample)
        me = multi_exit_cost(report.flop_main, report.flop_exit, args.n_sample, g.n_exit)
        rr = reduction_rate(report.alpha, args.n_sample, g.n_exit)
        print(f"single-exit cost @ {args.n_sample} samples: {se}")
        print(f"multi-exit cost  @ {args.n_sample} samples: {me}")
        print(f"reduction rate: {rr:.6f}")
    print(json.dumps(report.as_dict(), sort_keys=True))
    return 0


def cmd_map(args) -> int:
    g = _load(args.graph)
    device = load_device(args.device)
    strategy, engines = args.strategy
    p = plan(g, args.n_sample, strategy, reuse=args.reuse, engines=engines)
    est = estimate(p, g, device)
    sim = simulate(p, g, device)
    rows = [
        ("latency_cycles", est.latency_cycles, sim.latency_cycles),
        ("latency_ms", f"{est.latency_ms:.6f}", f"{sim.latency_ms:.6f}"),
        ("dsp", est.dsp, sim.dsp),
        ("bram_kb", est.bram_kb, sim.bram_kb),
        ("lut", est.lut, sim.lut),
        ("ff", est.ff, sim.ff),
    ]
    print(f"{'':>16}  {'estimate':>12}  {'simulated':>12}")
    for name, a, b in rows:
        print(f"{name:>16}  {a!s:>12}  {b!s:>12}")
    fit = check_fit(est, device)
    print(f"device {device.name}: " + ("fits" if fit.fits else fit.describe()))
    if est.latency_cycles != sim.latency_cycles:
        print("error: analytic estimate deviates from simulation", file=sys.stderr)
        return 1
    return 0


def cmd_dse(args) -> int:
    g = _load(args.graph)
    dataset = _parse_data(args.data)
    grids = SearchGrids()
    config_cons = {}
    if args.config:
        try:
            grids, config_cons = _load_search_config(args.config)
        except (OSError, ValueError) as e:
            print(f"error: bad search config: {e}", file=sys.stderr)
            return 2
    # explicit flags take precedence over the config document
    constraints = Constraints(
        min_accuracy=args.min_accuracy if args.min_accuracy is not None else config_cons.get("min_accuracy"),
        max_ece=args.max_ece if args.max_ece is not None else config_cons.get("max_ece"),
        max_flops=args.max_flops if args.max_flops is not None else config_cons.get("max_flops"),
        max_latency_cycles=args.max_latency if args.max_latency is not None else config_cons.get("max_latency_cycles"),
    )
    priority = Priority(tuple(args.priority.split(",")))
    budget = SearchBudget(
        epochs=args.epochs,
        seeds_per_point=args.seeds_per_point,
        n_pass=args.n_pass,
        root_seed=args.seed,
    )
    if args.phase == 1:
        result = phase1_search(g, dataset, constraints, priority, budget, grids)
        points = result.ranked
        print(f"evaluated {len(result.table)} points, {len(points)} feasible")
        a = result.acc_opt
        e = result.ece_opt
        print(
            f"acc-opt: accuracy {a.accuracy_mean:.4f}+-{a.accuracy_std:.4f} "
            f"ece {a.ece_mean:.4f} ({a.exit_policy}, keep {a.keep_rate}, "
            f"mcd {a.mcd_layers_per_exit}, thr {a.confidence_threshold}, {a.exit_mode})"
        )
        print(
            f"ece-opt: accuracy {e.accuracy_mean:.4f}+-{e.accuracy_std:.4f} "
            f"ece {e.ece_mean:.4f} ({e.exit_policy}, keep {e.keep_rate}, "
            f"mcd {e.mcd_layers_per_exit}, thr {e.confidence_threshold}, {e.exit_mode})"
        )
    else:
        if not args.device:
            print("error: --device is required for phase 3", file=sys.stderr)
            return 2
        device = load_device(args.device)
        result = phase3_search(
            g, dataset, device, constraints, budget, grids,
            accuracy_tolerance=args.tolerance,
        )
        points = result.table
        b = result.best
        print(
            f"best: latency {b.latency_cycles} cycles, {b.mapping['strategy']} "
            f"E={b.mapping['n_engines']} reuse={b.mapping['reuse']} "
            f"bits={b.bitwidth} fraction={b.channel_fraction} "
            f"accuracy {b.accuracy_mean:.4f} (default {result.default_accuracy:.4f})"
        )
    if args.out:
        with open(args.out, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(export_results(points))
        print(f"wrote {args.out}")
    return 0


def cmd_emit(args) -> int:
    g = _load(args.graph)
    device = load_device(args.device)
    strategy, engines = args.strategy
    p = plan(g, args.n_sample, strategy, reuse=args.reuse, engines=engines)
    est = estimate(p, g, device)
    sim = simulate(p, g, device)
    doc = emit_plan(g, p, est, device, root_seed=args.seed, simulated=sim, force=args.force)
    save_plan(doc, args.out)
    for line in doc["summary"]:
        print(line)
    print(f"wrote {args.out}")
    return 0


def cmd_selftest(args) -> int:
    del args
    from .selftest import run_selftest

    return run_selftest()


# -- parser ---------------------------------------------------------------------


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="bayonet",
        description="multi-exit Bayesian network transform/evaluation/mapping toolkit",
    )
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    t = sub.add_parser("transform", help="insert exits and dropout samplers")
    t.add_argument("--graph", required=True)
    t.add_argument("--exits", default=AFTER_EACH_POOL, help="none | after_each_pool | id1,id2,...")
    t.add_argument("--mcd-layers", type=int, default=1)
    t.add_argument("--keep-rate", type=float, default=0.875)
    t.add_argument("--granularity", choices=["element", "channel"], default="element")
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_transform)

    tr = sub.add_parser("train", help="SGD training on a synthetic dataset")
    tr.add_argument("--graph", required=True)
    tr.add_argument("--data", required=True, help="generator:key=val,... e.g. gaussian_blobs:classes=4,dims=8")
    tr.add_argument("--epochs", type=int, default=50)
    tr.add_argument("--lr", type=float, default=0.1)
    tr.add_argument("--momentum", type=float, default=0.9)
    tr.add_argument("--weight-decay", type=float, default=5e-4)
    tr.add_argument("--batch-size", type=int, default=64)
    tr.add_argument("--seed", type=int, default=0)
    tr.add_argument("--out", required=True)
    tr.set_defaults(func=cmd_train)

    inf = sub.add_parser("infer", help="Monte-Carlo inference on BTEN tensors")
    inf.add_argument("--graph", required=True)
    inf.add_argument("--input", required=True, help="BTEN tensor container")
    inf.add_argument("--n-sample", type=int, default=12)
    inf.add_argument("--seed", type=int, default=0)
    inf.add_argument("--threshold", type=float, default=None)
    inf.add_argument("--mode", type=_parse_mode, default=PER_EXIT)
    inf.set_defaults(func=cmd_infer)

    fl = sub.add_parser("flops", help="analytic cost report")
    fl.add_argument("--graph", required=True)
    fl.add_argument("--n-sample", type=int, default=0)
    fl.set_defaults(func=cmd_flops)

    mp = sub.add_parser("map", help="plan a mapping and compare estimate vs simulation")
    mp.add_argument("--graph", required=True)
    mp.add_argument("--device", required=True)
    mp.add_argument("--n-sample", type=int, default=12)
    mp.add_argument("--strategy", type=_parse_strategy, default=(SPATIAL, None))
    mp.add_argument("--reuse", type=int, default=1)
    mp.set_defaults(func=cmd_map)

    ds = sub.add_parser("dse", help="grid-search design-space exploration")
    ds.add_argument("--graph", required=True)
    ds.add_argument("--data", required=True)
    ds.add_argument("--device", default=None)
    ds.add_argument("--phase", type=int, choices=[1, 3], default=1)
    ds.add_argument("--config", default=None, help="JSON with 'grids' and 'constraints' sections")
    ds.add_argument("--priority", default="accuracy,calibration,flops")
    ds.add_argument("--min-accuracy", type=float, default=None)
    ds.add_argument("--max-ece", type=float, default=None)
    ds.add_argument("--max-flops", type=float, default=None)
    ds.add_argument("--max-latency", type=int, default=None)
    ds.add_argument("--tolerance", type=float, default=0.005,
                    help="phase-3 allowed accuracy drop vs the full-precision default")
    ds.add_argument("--epochs", type=int, default=30)
    ds.add_argument("--seeds-per-point", type=int, default=3)
    ds.add_argument("--n-pass", type=int, default=2)
    ds.add_argument("--seed", type=int, default=0)
    ds.add_argument("--out", default=None, help="results CSV path")
    ds.set_defaults(func=cmd_dse)

    em = sub.add_parser("emit", help="emit the final hardware plan document")
    em.add_argument("--graph", required=True)
    em.add_argument("--device", required=True)
    em.add_argument("--n-sample", type=int, default=12)
    em.add_argument("--strategy", type=_parse_strategy, default=(SPATIAL, None))
    em.add_argument("--reuse", type=int, default=1)
    em.add_argument("--seed", type=int, default=0)
    em.add_argument("--force", action="store_true")
    em.add_argument("--out", required=True)
    em.set_defaults(func=cmd_emit)

    st = sub.add_parser("selftest", help="run the built-in invariant checks")
    st.set_defaults(func=cmd_selftest)

    return ap


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        return args.func(args)
    except BayonetError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
