"""Greedy first-fit placement of spiking layers onto neuro-cores."""

from __future__ import annotations

import csv
import io
import math
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .errors import InfeasibleError
from .network import QuantizedLayer, SpikingNetwork

RESOURCES = ("compartments", "fan_in_axons", "fan_out_axons", "synapse_memory")

# Published core counts for the 24-class models, for side-by-side output only.
# Layer rows do not sum to the totals (pool layers are not listed separately).
REFERENCE_CORES = {
    "mlp": {"fc1": 10, "fc2": 4, "output": 1, "total": 18},
    "lenet": {"conv1": 9, "conv2": 4, "fc1": 1, "fc2": 1, "output": 1, "total": 21},
    "alexnet": {"conv1": 12, "conv2": 7, "conv3": 3, "conv4": 4, "conv5": 4, "fc1": 1, "fc2": 1,
                "output": 1, "total": 41},
    "vggnet": {"conv1": 12, "conv2": 7, "conv3": 4, "conv4": 7, "conv5": 2, "conv6": 3, "fc1": 1,
               "fc2": 1, "output": 1, "total": 47},
}


@dataclass(frozen=True)
class CoreBudget:
    compartments: int = 1024
    fan_in_axons: int = 4096
    fan_out_axons: int = 4096
    synapse_memory: int = 128 * 1024  # bytes
    synapse_overhead_bits: int = 12

    def __post_init__(self):
        for name in RESOURCES:
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} budget must be positive")
        if self.synapse_overhead_bits < 0:
            raise ValueError("synapse_overhead_bits must be non-negative")

    def limit(self, resource: str) -> int:
        return getattr(self, resource)


@dataclass
class NeuronCost:
    """Per-neuron resource needs of one layer, plus the index lists that drive axon unions."""

    compartments: np.ndarray
    fan_in: np.ndarray
    fan_out: np.ndarray
    memory_bytes: np.ndarray
    sources: list  # presynaptic indices per neuron
    targets: list  # postsynaptic indices per neuron

    def __len__(self):
        return len(self.compartments)


@dataclass
class CoreUsage:
    layer: str
    start: int
    stop: int  # neuron range [start, stop)
    compartments: int
    fan_in_axons: int
    fan_out_axons: int
    synapse_memory: int

    def usage(self) -> dict:
        return {r: getattr(self, r) for r in RESOURCES}


@dataclass
class LayerPlacement:
    name: str
    neurons: int
    cores: list
    binding: str

    @property
    def n_cores(self) -> int:
        return len(self.cores)


@dataclass
class PartitionPlan:
    layers: list
    budget: CoreBudget
    demand: dict = field(default_factory=dict)  # layer -> resource -> layer-level demand

    @property
    def total_cores(self) -> int:
        return sum(l.n_cores for l in self.layers)

    def cores(self):
        for layer in self.layers:
            yield from layer.cores

    def core_counts(self) -> dict:
        return {l.name: l.n_cores for l in self.layers}


def _rows(matrix) -> list:
    return [matrix.indices[matrix.indptr[i]:matrix.indptr[i + 1]] for i in range(matrix.shape[0])]


def estimate_core_cost(layer: QuantizedLayer, budget: CoreBudget | None = None,
                       next_layer: QuantizedLayer | None = None) -> NeuronCost:
    """Resource vector for every neuron of ``layer``.

    Fan-in counts distinct presynaptic sources (structural zeros included,
    since a zero weight still occupies a synapse slot); fan-out counts
    distinct targets in ``next_layer``. Memory is
    ``ceil(fan_in * (weight_bits + overhead) / 8)`` bytes.
    """
    budget = budget or CoreBudget()
    topo = layer.topology
    sources = _rows(topo)
    fan_in = np.array([len(np.unique(s)) for s in sources], dtype=np.int64)
    if next_layer is not None:
        targets = _rows(next_layer.topology.T.tocsr())
    else:
        targets = [np.zeros(0, dtype=np.int32)] * layer.n_out
    fan_out = np.array([len(np.unique(t)) for t in targets], dtype=np.int64)
    bits = layer.weight_bits + budget.synapse_overhead_bits
    memory = (fan_in * bits + 7) // 8
    return NeuronCost(np.ones(layer.n_out, dtype=np.int64), fan_in, fan_out, memory, sources, targets)


def _place_layer(layer: QuantizedLayer, cost: NeuronCost, budget: CoreBudget) -> LayerPlacement:
    for resource, values in (("compartments", cost.compartments), ("fan_in_axons", cost.fan_in),
                             ("fan_out_axons", cost.fan_out), ("synapse_memory", cost.memory_bytes)):
        over = np.flatnonzero(values > budget.limit(resource))
        if over.size:
            i = int(over[0])
            raise InfeasibleError(layer.name, i, resource, int(values[i]), budget.limit(resource))

    n_src = layer.n_in
    n_tgt = max((int(t.max()) + 1 for t in cost.targets if len(t)), default=0)
    cores, reasons = [], Counter()

    def open_core(start):
        return {"start": start, "comp": 0, "mem": 0, "in": np.zeros(n_src, bool), "n_in": 0,
                "out": np.zeros(n_tgt, bool), "n_out": 0}

    def close(core, stop):
        cores.append(CoreUsage(layer.name, core["start"], stop, core["comp"], core["n_in"],
                               core["n_out"], core["mem"]))

    cur = open_core(0)
    for i in range(len(cost)):
        src, tgt = cost.sources[i], cost.targets[i]
        add_in = int(np.count_nonzero(~cur["in"][src])) if len(src) else 0
        add_out = int(np.count_nonzero(~cur["out"][tgt])) if len(tgt) else 0
        checks = (
            ("compartments", cur["comp"] + 1),
            ("fan_in_axons", cur["n_in"] + add_in),
            ("fan_out_axons", cur["n_out"] + add_out),
            ("synapse_memory", cur["mem"] + int(cost.memory_bytes[i])),
        )
        blocked = [r for r, v in checks if v > budget.limit(r)]
        if blocked and cur["comp"] > 0:
            reasons[blocked[0]] += 1
            close(cur, i)
            cur = open_core(i)
            add_in, add_out = len(src), len(tgt)
        cur["comp"] += 1
        cur["mem"] += int(cost.memory_bytes[i])
        cur["in"][src] = True
        cur["n_in"] += add_in
        cur["out"][tgt] = True
        cur["n_out"] += add_out
    if cur["comp"]:
        close(cur, len(cost))

    if reasons:
        binding = reasons.most_common(1)[0][0]
    else:
        # single core: report the resource closest to its limit
        u = cores[0].usage() if cores else {r: 0 for r in RESOURCES}
        binding = max(RESOURCES, key=lambda r: u[r] / budget.limit(r))
    return LayerPlacement(layer.name, layer.n_out, cores, binding)


def layer_demand(layer: QuantizedLayer, cost: NeuronCost) -> dict:
    """Layer-wide resource totals; axon demand is the size of the union over all neurons."""
    src = np.unique(np.concatenate(cost.sources)) if cost.sources else np.zeros(0)
    tgts = [t for t in cost.targets if len(t)]
    tgt = np.unique(np.concatenate(tgts)) if tgts else np.zeros(0)
    return {
        "compartments": int(cost.compartments.sum()),
        "fan_in_axons": int(src.size),
        "fan_out_axons": int(tgt.size),
        "synapse_memory": int(cost.memory_bytes.sum()),
    }


def lower_bound(demand: dict, budget: CoreBudget) -> int:
    return max(math.ceil(demand[r] / budget.limit(r)) for r in RESOURCES)


def partition_network(network: SpikingNetwork, budget: CoreBudget | None = None) -> PartitionPlan:
    """Place each layer in neuron order, opening a core whenever a budget would overflow.

    Input pixels are fed from the host and use no cores.
    """
    budget = budget or CoreBudget()
    layers = network.layers
    placements, demand = [], {}
    for k, layer in enumerate(layers):
        nxt = layers[k + 1] if k + 1 < len(layers) else None
        cost = estimate_core_cost(layer, budget, nxt)
        placements.append(_place_layer(layer, cost, budget))
        demand[layer.name] = layer_demand(layer, cost)
    return PartitionPlan(placements, budget, demand)


def audit(plan: PartitionPlan) -> list:
    """All budget violations and assignment gaps as readable strings (empty when valid)."""
    problems = []
    b = plan.budget
    for layer in plan.layers:
        expect = 0
        for core in layer.cores:
            if core.start != expect or core.stop <= core.start:
                problems.append(f"{layer.name}: neuron range [{core.start},{core.stop}) breaks coverage")
            expect = core.stop
            if core.compartments != core.stop - core.start:
                problems.append(f"{layer.name}: compartment count differs from range size")
            for r, v in core.usage().items():
                if v > b.limit(r):
                    problems.append(f"{layer.name}[{core.start}:{core.stop}] {r} {v} > {b.limit(r)}")
        if expect != layer.neurons:
            problems.append(f"{layer.name}: {layer.neurons - expect} neurons unassigned")
    return problems


def check_chip_fit(plan_or_cores, cores_per_chip: int = 128) -> int:
    if cores_per_chip <= 0:
        raise ValueError("cores_per_chip must be positive")
    total = plan_or_cores.total_cores if isinstance(plan_or_cores, PartitionPlan) else int(plan_or_cores)
    return -(-total // cores_per_chip)


def format_plan(plan: PartitionPlan, reference: dict | None = None) -> str:
    ref = reference or {}
    lines = [f"{'layer':<10} {'neurons':>8} {'cores':>6} {'binding':<15} {'reference':>9}"]
    for l in plan.layers:
        r = ref.get(l.name, "")
        lines.append(f"{l.name:<10} {l.neurons:>8} {l.n_cores:>6} {l.binding:<15} {r!s:>9}")
    lines.append(f"{'total':<10} {sum(l.neurons for l in plan.layers):>8} {plan.total_cores:>6} "
                 f"{'':<15} {ref.get('total', '')!s:>9}")
    lines.append(f"chips: {check_chip_fit(plan)}")
    return "\n".join(lines)


def plan_csv(plan: PartitionPlan) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["layer", "core", "start", "stop"] + list(RESOURCES))
    for layer in plan.layers:
        for j, core in enumerate(layer.cores):
            w.writerow([layer.name, j, core.start, core.stop] + [getattr(core, r) for r in RESOURCES])
    return buf.getvalue()
