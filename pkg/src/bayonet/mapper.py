"""Hardware mapping: stochastic-pass scheduling, latency/resource model, simulator.

The network splits into a deterministic part (run once) and a stochastic part
(run n_pass times on identical engines). Strategies: spatial (one engine per
pass), temporal (one engine, passes queued), mixed (E engines, round-robin).

Model, per weighted layer with per-output multiplication count m and reuse R
(clamped to the nearest divisor of m, ties to the smaller):

    dsp = ceil(m / R)          multipliers
    cycles = outputs * R + 8   pipeline fill constant

Engine latency is the sum over its layers. Total latency = deterministic part
+ clone transfer (1 cycle per buffered boundary element) + ceil(n_pass / E)
rounds of engine latency. BRAM holds weights (engine weights once per engine)
and the clone buffer; LUT = 120*dsp + 2*stream_width_bits with stream width
act_bits*(E+1); FF = 90*dsp + clone-buffer bits / 8. The coefficients are
fixed, documented stand-ins, calibratable per device; the event simulator is
the correctness oracle for the latency half of the model.
"""

from __future__ import annotations

import heapq
import json
import math
from dataclasses import dataclass

from .errors import IndivisibleSamples, NoBayesianComponent, SchemaError
from .graph import CONV, DENSE, WEIGHTED, NetworkGraph, expected_weight_shapes
from .transform import boundary_elements, split_components

SPATIAL = "spatial"
TEMPORAL = "temporal"
MIXED = "mixed"
STRATEGIES = (SPATIAL, TEMPORAL, MIXED)

PIPELINE_FILL = 8
LUT_PER_DSP = 120
LUT_PER_STREAM_BIT = 2
FF_PER_DSP = 90


@dataclass(frozen=True)
class DeviceProfile:
    name: str
    dsp: int
    bram_kb: int
    lut: int
    ff: int
    clock_mhz: float

    def __post_init__(self):
        for f in ("dsp", "bram_kb", "lut", "ff", "clock_mhz"):
            if getattr(self, f) <= 0:
                raise SchemaError(f, "device capacity must be > 0")

    @staticmethod
    def from_dict(doc: dict) -> "DeviceProfile":
        required = {"name", "dsp", "bram_kb", "lut", "ff", "clock_mhz"}
        missing = required - set(doc)
        if missing:
            raise SchemaError("device", f"missing fields {sorted(missing)}")
        return DeviceProfile(
            name=doc["name"],
            dsp=int(doc["dsp"]),
            bram_kb=int(doc["bram_kb"]),
            lut=int(doc["lut"]),
            ff=int(doc["ff"]),
            clock_mhz=float(doc["clock_mhz"]),
        )

    def as_dict(self) -> dict:
        return {
            "name": self.name,
            "dsp": self.dsp,
            "bram_kb": self.bram_kb,
            "lut": self.lut,
            "ff": self.ff,
            "clock_mhz": self.clock_mhz,
        }


def load_device(path) -> DeviceProfile:
    with open(path, "r", encoding="utf-8") as fh:
        return DeviceProfile.from_dict(json.load(fh))


@dataclass(frozen=True)
class EngineSlot:
    id: int
    passes: tuple


@dataclass(frozen=True)
class MappingPlan:
    strategy: str
    n_engines: int
    n_pass: int
    engines: tuple  # EngineSlot per engine
    reuse: dict  # weighted node id -> clamped reuse factor
    boundary_elems: int
    clone_buffer: int  # elements buffered = boundary_elems * n_pass

    def as_dict(self) -> dict:
        return {
            "strategy": self.strategy,
            "n_engines": self.n_engines,
            "n_pass": self.n_pass,
            "engines": [{"id": e.id, "passes": list(e.passes)} for e in self.engines],
            "reuse": dict(sorted(self.reuse.items())),
            "boundary_elems": self.boundary_elems,
            "clone_buffer": self.clone_buffer,
        }


def _per_output_mults(node) -> int:
    if node.kind == CONV:
        return node.params["kernel"] ** 2 * node.input_shape.channels
    return node.input_shape.elements


def clamp_reuse(per_out: int, requested: int) -> int:
    """Nearest divisor of per_out to the request; ties go to the smaller."""
    if requested < 1:
        requested = 1
    best = 1
    for d in range(1, per_out + 1):
        if per_out % d:
            continue
        if abs(d - requested) < abs(best - requested):
            best = d
    return best


def plan(graph: NetworkGraph, n_sample: int, strategy: str, reuse=1, engines=None) -> MappingPlan:
    """Build a mapping plan for running n_sample predictions.

    ``reuse`` is a uniform target or a per-node map; factors are clamped per
    layer. ``engines`` picks E for the mixed strategy (spatial and temporal
    imply E = n_pass and E = 1).
    """
    if strategy not in STRATEGIES:
        raise SchemaError("strategy", f"must be one of {STRATEGIES}")
    _, bayes = split_components(graph)
    if not bayes:
        raise NoBayesianComponent("graph has no dropout sampler; nothing to map")
    if n_sample % graph.n_exit != 0:
        raise IndivisibleSamples(n_sample, graph.n_exit)
    n_pass = n_sample // graph.n_exit

    if strategy == SPATIAL:
        n_engines = max(1, n_pass)
    elif strategy == TEMPORAL:
        n_engines = 1
    else:
        if engines is None:
            raise SchemaError("engines", "mixed strategy needs an engine count")
        n_engines = int(engines)
        if not 1 <= n_engines <= max(1, n_pass):
            raise SchemaError("engines", f"need 1 <= E <= n_pass, got {n_engines}")

    slots = [EngineSlot(id=e, passes=tuple(range(e, n_pass, n_engines))) for e in range(n_engines)]
    resolved = {}
    for node in graph.nodes:
        if node.kind not in WEIGHTED:
            continue
        want = reuse.get(node.id, 1) if isinstance(reuse, dict) else int(reuse)
        resolved[node.id] = clamp_reuse(_per_output_mults(node), want)
    b_elems = boundary_elements(graph)
    return MappingPlan(
        strategy=strategy,
        n_engines=n_engines,
        n_pass=n_pass,
        engines=tuple(slots),
        reuse=resolved,
        boundary_elems=b_elems,
        clone_buffer=b_elems * n_pass,
    )


@dataclass(frozen=True)
class HwEstimate:
    latency_cycles: int
    latency_ms: float
    dsp: int
    bram_kb: int
    lut: int
    ff: int
    backbone_cycles: int
    clone_cycles: int
    bayesian_cycles: int
    engine_latency: int
    backbone_dsp: int
    engine_dsp: int
    per_engine: tuple

    def as_dict(self) -> dict:
        return {
            "latency_cycles": self.latency_cycles,
            "latency_ms": self.latency_ms,
            "dsp": self.dsp,
            "bram_kb": self.bram_kb,
            "lut": self.lut,
            "ff": self.ff,
            "backbone_cycles": self.backbone_cycles,
            "clone_cycles": self.clone_cycles,
            "bayesian_cycles": self.bayesian_cycles,
            "engine_latency": self.engine_latency,
            "backbone_dsp": self.backbone_dsp,
            "engine_dsp": self.engine_dsp,
            "per_engine": [dict(p) for p in self.per_engine],
        }


def _weight_bits(node) -> int:
    if node.quant is not None and node.quant_scope in ("weights", "both"):
        return node.quant.total_bits
    return 32


def _activation_bits(graph) -> int:
    bits = [
        n.quant.total_bits
        for n in graph.nodes
        if n.quant is not None and n.quant_scope in ("activations", "both")
    ]
    return max(bits) if bits else 32


def _layer_costs(graph, plan_):
    """Per weighted layer: (dsp, cycles, weight_bits_total) keyed by id."""
    costs = {}
    for node in graph.nodes:
        if node.kind not in WEIGHTED:
            continue
        per_out = _per_output_mults(node)
        outputs = node.output_shape.elements
        r = plan_.reuse[node.id]
        n_params = sum(
            int(math.prod(s)) for s in expected_weight_shapes(node).values()
        )
        costs[node.id] = {
            "dsp": math.ceil(per_out / r),
            "cycles": outputs * r + PIPELINE_FILL,
            "weight_bits": n_params * _weight_bits(node),
        }
    return costs


def _resources(graph, plan_, costs):
    det, bayes = split_components(graph)
    backbone_dsp = sum(c["dsp"] for i, c in costs.items() if i in det)
    engine_dsp = sum(c["dsp"] for i, c in costs.items() if i in bayes)
    backbone_cycles = sum(c["cycles"] for i, c in costs.items() if i in det)
    engine_latency = sum(c["cycles"] for i, c in costs.items() if i in bayes)

    act_bits = _activation_bits(graph)
    e = plan_.n_engines
    weight_bits = sum(c["weight_bits"] for i, c in costs.items() if i in det)
    weight_bits += e * sum(c["weight_bits"] for i, c in costs.items() if i in bayes)
    buffer_bits = plan_.clone_buffer * act_bits
    bram_kb = math.ceil((weight_bits + buffer_bits) / 8 / 1024)

    dsp = backbone_dsp + e * engine_dsp
    stream_bits = act_bits * (e + 1)
    lut = LUT_PER_DSP * dsp + LUT_PER_STREAM_BIT * stream_bits
    ff = FF_PER_DSP * dsp + math.ceil(buffer_bits / 8)
    return {
        "backbone_dsp": backbone_dsp,
        "engine_dsp": engine_dsp,
        "backbone_cycles": backbone_cycles,
        "engine_latency": engine_latency,
        "dsp": dsp,
        "bram_kb": bram_kb,
        "lut": lut,
        "ff": ff,
    }


def _package(plan_, device, res, latency):
    per_engine = tuple(
        {
            "id": slot.id,
            "passes": list(slot.passes),
            "dsp": res["engine_dsp"],
            "busy_cycles": len(slot.passes) * res["engine_latency"],
        }
        for slot in plan_.engines
    )
    return HwEstimate(
        latency_cycles=latency,
        latency_ms=latency / (device.clock_mhz * 1e3),
        dsp=res["dsp"],
        bram_kb=res["bram_kb"],
        lut=res["lut"],
        ff=res["ff"],
        backbone_cycles=res["backbone_cycles"],
        clone_cycles=plan_.clone_buffer,
        bayesian_cycles=math.ceil(plan_.n_pass / plan_.n_engines) * res["engine_latency"],
        engine_latency=res["engine_latency"],
        backbone_dsp=res["backbone_dsp"],
        engine_dsp=res["engine_dsp"],
        per_engine=per_engine,
    )


def estimate(plan_: MappingPlan, graph: NetworkGraph, device: DeviceProfile) -> HwEstimate:
    """Closed-form latency and resource estimate for a mapping plan."""
    costs = _layer_costs(graph, plan_)
    res = _resources(graph, plan_, costs)
    rounds = math.ceil(plan_.n_pass / plan_.n_engines)
    latency = res["backbone_cycles"] + plan_.clone_buffer + rounds * res["engine_latency"]
    return _package(plan_, device, res, latency)


def simulate(plan_: MappingPlan, graph: NetworkGraph, device: DeviceProfile) -> HwEstimate:
    """Discrete-event validation of the latency model.

    Events: the deterministic part finishes, the clone transfer streams the
    boundary buffer, then engines grab their queued passes; an engine is busy
    for its full latency per pass. Latency must equal estimate() exactly.
    """
    costs = _layer_costs(graph, plan_)
    res = _resources(graph, plan_, costs)

    queues = {slot.id: list(slot.passes) for slot in plan_.engines}
    heap = []
    seq = 0
    heapq.heappush(heap, (res["backbone_cycles"], seq, "backbone_done", None))
    finish = res["backbone_cycles"]
    while heap:
        t, _, kind, payload = heapq.heappop(heap)
        finish = max(finish, t)
        if kind == "backbone_done":
            seq += 1
            heapq.heappush(heap, (t + plan_.clone_buffer, seq, "clone_done", None))
        elif kind == "clone_done":
            for slot in plan_.engines:
                seq += 1
                heapq.heappush(heap, (t, seq, "engine_free", slot.id))
        elif kind == "engine_free":
            if queues[payload]:
                queues[payload].pop(0)
                seq += 1
                heapq.heappush(heap, (t + res["engine_latency"], seq, "engine_free", payload))
    return _package(plan_, device, res, finish)


@dataclass(frozen=True)
class Violation:
    resource: str
    demand: int
    capacity: int

    @property
    def overage_pct(self) -> float:
        return 100.0 * (self.demand - self.capacity) / self.capacity


@dataclass(frozen=True)
class FitReport:
    violations: tuple

    @property
    def fits(self) -> bool:
        return not self.violations

    def describe(self) -> str:
        if self.fits:
            return "fits"
        return "; ".join(
            f"{v.resource} over by {v.overage_pct:.1f}% ({v.demand} > {v.capacity})"
            for v in self.violations
        )


def check_fit(est: HwEstimate, device: DeviceProfile) -> FitReport:
    """List every capacity the estimate exceeds; empty list means it fits."""
    pairs = [
        ("dsp", est.dsp, device.dsp),
        ("bram_kb", est.bram_kb, device.bram_kb),
        ("lut", est.lut, device.lut),
        ("ff", est.ff, device.ff),
    ]
    violations = tuple(
        Violation(resource=r, demand=d, capacity=c) for r, d, c in pairs if d > c
    )
    return FitReport(violations=violations)
