"""Hardware plan documents: the toolkit's final, deterministic artifact.

A plan binds together the exact graph (by content hash), the mapping, the
per-layer reuse and fixed-point choices, resource/latency numbers from both
the analytic model and the event simulator, and the device profile. The
serialization is canonical (sorted keys, fixed indentation, trailing
newline), so equal plans are equal bytes and golden files are stable.
"""

from __future__ import annotations

import json

from . import __version__
from .errors import DoesNotFit, SchemaError, VerificationFailed
from .graph import NetworkGraph, graph_hash, save_graph
from .mapper import (
    DeviceProfile,
    EngineSlot,
    HwEstimate,
    MappingPlan,
    check_fit,
    estimate,
    simulate,
)

PLAN_FORMAT = "bayonet-plan"
PLAN_VERSION = 1


def _quant_doc(graph: NetworkGraph) -> dict:
    out = {}
    for n in graph.nodes:
        if n.quant is None:
            out[n.id] = None
        else:
            out[n.id] = {
                "total_bits": n.quant.total_bits,
                "integer_bits": n.quant.integer_bits,
                "signed": n.quant.signed,
                "scope": n.quant_scope,
            }
    return out


def _summary(graph, plan_, est, device, fit) -> list:
    return [
        f"graph '{graph.name}' with {graph.n_exit} exit(s), {len(graph.nodes)} nodes",
        f"mapping {plan_.strategy} on {plan_.n_engines} engine(s), "
        f"{plan_.n_pass} stochastic pass(es), clone buffer {plan_.clone_buffer} elements",
        f"latency {est.latency_cycles} cycles = {est.latency_ms:.6f} ms at {device.clock_mhz} MHz "
        f"(deterministic {est.backbone_cycles} + clone {est.clone_cycles} + stochastic {est.bayesian_cycles})",
        f"resources dsp={est.dsp} bram_kb={est.bram_kb} lut={est.lut} ff={est.ff}",
        f"device {device.name}: " + ("fits" if fit.fits else fit.describe()),
    ]


def emit_plan(
    graph: NetworkGraph,
    plan_: MappingPlan,
    est: HwEstimate,
    device: DeviceProfile,
    root_seed: int = 0,
    simulated: HwEstimate | None = None,
    force: bool = False,
) -> dict:
    """Assemble the plan document. Refuses oversubscribed plans unless forced."""
    fit = check_fit(est, device)
    if not fit.fits and not force:
        raise DoesNotFit(f"plan exceeds device capacity: {fit.describe()}")
    if simulated is None:
        simulated = simulate(plan_, graph, device)
    return {
        "format": PLAN_FORMAT,
        "version": PLAN_VERSION,
        "toolkit_version": __version__,
        "root_seed": root_seed,
        "graph": {
            "name": graph.name,
            "hash": graph_hash(graph),
            "n_exit": graph.n_exit,
            "num_classes": graph.num_classes,
            "input_shape": graph.input_shape.as_list(),
        },
        "device": device.as_dict(),
        "mapping": plan_.as_dict(),
        "quantization": _quant_doc(graph),
        "estimate": est.as_dict(),
        "simulated_latency_cycles": simulated.latency_cycles,
        "fits": fit.fits,
        "summary": _summary(graph, plan_, est, device, fit),
    }


def serialize_plan(doc: dict) -> str:
    """Canonical text form; byte-stable across runs and platforms."""
    return json.dumps(doc, sort_keys=True, indent=2) + "\n"


def save_plan(doc: dict, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(serialize_plan(doc))


def load_plan(text: str) -> dict:
    doc = json.loads(text)
    if not isinstance(doc, dict) or doc.get("format") != PLAN_FORMAT:
        raise SchemaError("format", f"not a {PLAN_FORMAT} document")
    required = {
        "version",
        "toolkit_version",
        "root_seed",
        "graph",
        "device",
        "mapping",
        "quantization",
        "estimate",
        "simulated_latency_cycles",
        "fits",
        "summary",
    }
    missing = required - set(doc)
    if missing:
        raise SchemaError("plan", f"missing fields {sorted(missing)}")
    return doc


def mapping_from_doc(doc: dict) -> MappingPlan:
    m = doc["mapping"]
    return MappingPlan(
        strategy=m["strategy"],
        n_engines=m["n_engines"],
        n_pass=m["n_pass"],
        engines=tuple(EngineSlot(id=e["id"], passes=tuple(e["passes"])) for e in m["engines"]),
        reuse=dict(m["reuse"]),
        boundary_elems=m["boundary_elems"],
        clone_buffer=m["clone_buffer"],
    )


def verify_plan(doc: dict, graph: NetworkGraph) -> None:
    """Re-derive everything the plan claims and fail loudly on any drift.

    Checks the graph hash, then re-runs estimate and simulate on the embedded
    mapping and compares every field.
    """
    actual_hash = graph_hash(graph)
    if doc["graph"]["hash"] != actual_hash:
        raise VerificationFailed(
            f"graph hash mismatch: plan has {doc['graph']['hash'][:12]}..., "
            f"graph is {actual_hash[:12]}..."
        )
    device = DeviceProfile.from_dict(doc["device"])
    plan_ = mapping_from_doc(doc)
    est = estimate(plan_, graph, device)
    if est.as_dict() != doc["estimate"]:
        raise VerificationFailed("re-estimated numbers differ from the embedded estimate")
    sim = simulate(plan_, graph, device)
    if sim.latency_cycles != doc["simulated_latency_cycles"]:
        raise VerificationFailed(
            f"re-simulated latency {sim.latency_cycles} != "
            f"embedded {doc['simulated_latency_cycles']}"
        )
