import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from spikebench.convert import convert
from spikebench.data import random_subset
from spikebench.errors import InfeasibleError
from spikebench.network import NeuronConfig, QuantizedLayer, SpikingNetwork
from spikebench.nn.models import build_model, init_params
from spikebench.partition import (
    REFERENCE_CORES,
    RESOURCES,
    CoreBudget,
    audit,
    check_chip_fit,
    estimate_core_cost,
    format_plan,
    layer_demand,
    lower_bound,
    partition_network,
    plan_csv,
)


def _usage_oracle(layer, nxt, start, stop, overhead):
    """Recompute a core's resources from the dense weight matrices."""
    topo = layer.topology.tocoo()
    conn = np.zeros((layer.n_out, layer.n_in), bool)
    conn[topo.row, topo.col] = True  # structural zeros still use a slot
    rows = conn[start:stop]
    fan_in = int(rows.any(axis=0).sum())
    mem = int(sum((r.sum() * (layer.weight_bits + overhead) + 7) // 8 for r in rows))
    fan_out = 0
    if nxt is not None:
        nt = nxt.topology.tocoo()
        out = np.zeros((nxt.n_out, nxt.n_in), bool)
        out[nt.row, nt.col] = True
        fan_out = int(out[:, start:stop].any(axis=1).sum())
    return {"compartments": stop - start, "fan_in_axons": fan_in, "fan_out_axons": fan_out,
            "synapse_memory": mem}


@pytest.fixture(scope="module")
def lenet24(mnist5k):
    m = build_model("lenet", 24, constrained=True)
    return convert(m, init_params(m, 0), random_subset(mnist5k, 32, 0))


@pytest.mark.parametrize("budget", [CoreBudget(), CoreBudget(compartments=300),
                                    CoreBudget(fan_in_axons=600, synapse_memory=20_000)])
def test_core_usage_matches_oracle(lenet24, budget):
    plan = partition_network(lenet24, budget)
    assert audit(plan) == []
    layers = lenet24.layers
    for k, placement in enumerate(plan.layers):
        nxt = layers[k + 1] if k + 1 < len(layers) else None
        for core in placement.cores:
            got = core.usage()
            assert got == _usage_oracle(layers[k], nxt, core.start, core.stop, budget.synapse_overhead_bits)


def test_greedy_cores_are_maximal(lenet24):
    budget = CoreBudget(compartments=500, fan_in_axons=700)
    plan = partition_network(lenet24, budget)
    layers = lenet24.layers
    for k, placement in enumerate(plan.layers):
        nxt = layers[k + 1] if k + 1 < len(layers) else None
        for core in placement.cores[:-1]:
            grown = _usage_oracle(layers[k], nxt, core.start, core.stop + 1, budget.synapse_overhead_bits)
            assert any(grown[r] > budget.limit(r) for r in RESOURCES)


def test_lower_bound_and_chip_count(lenet24):
    plan = partition_network(lenet24)
    for layer, placement in zip(lenet24.layers, plan.layers):
        assert placement.n_cores >= lower_bound(plan.demand[layer.name], plan.budget)
    assert check_chip_fit(plan) == 1
    assert check_chip_fit(129) == 2
    with pytest.raises(ValueError):
        check_chip_fit(3, 0)


def test_infeasible_neuron_reports_constraint(lenet24):
    with pytest.raises(InfeasibleError) as e:
        partition_network(lenet24, CoreBudget(fan_in_axons=10))
    assert "fan_in_axons" in str(e.value)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 1000), n_in=st.integers(4, 40), n_out=st.integers(1, 60),
       comp=st.integers(1, 16), fan=st.integers(40, 80))
def test_random_dense_layers_property(seed, n_in, n_out, comp, fan):
    rng = np.random.default_rng(seed)
    W = rng.integers(-3, 4, (n_in, n_out)).astype(np.int16)
    layer = QuantizedLayer("d", "dense", (n_in,), (n_out,), W, np.zeros(n_out, np.int16), 0, 6)
    net = SpikingNetwork([layer], NeuronConfig(), n_out, input_shape=(n_in,))
    budget = CoreBudget(compartments=comp, fan_in_axons=fan)
    plan = partition_network(net, budget)
    assert audit(plan) == []
    cost = estimate_core_cost(layer, budget)
    assert plan.total_cores >= lower_bound(layer_demand(layer, cost), budget)
    assert plan.total_cores == -(-n_out // comp)  # dense layers are compartment-bound here


def test_audit_flags_violations(lenet24):
    plan = partition_network(lenet24)
    plan.layers[0].cores[0].compartments += 5000
    assert audit(plan)


def test_reports(lenet24):
    plan = partition_network(lenet24)
    text = format_plan(plan, REFERENCE_CORES.get("lenet"))
    assert "total" in text and "chips: 1" in text
    lines = plan_csv(plan).splitlines()
    assert lines[0].startswith("layer,core,start,stop")
    assert len(lines) == plan.total_cores + 1
    with pytest.raises(ValueError):
        CoreBudget(compartments=0)
