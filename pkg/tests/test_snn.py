import io

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from spikebench.convert import convert
from spikebench.data import random_subset
from spikebench.network import NeuronConfig, QuantizedLayer, SpikingNetwork
from spikebench.nn.models import build_model, init_params
from spikebench.snn import SimResult, SpikeTraceWriter, afr, decay, infer, simulate


def _trunc_div(a, b):
    q = abs(a) // b
    return -q if a < 0 else q


def reference_run(weights, biases, neuron, pixels, T):
    """Scalar CUBA oracle for a stack of dense layers (pure Python ints)."""
    vth = neuron.vth_mantissa << neuron.vth_exponent
    layers = [(W, b) for W, b in zip(weights, biases)]
    u = [[0] * len(b) for _, b in layers]
    v = [[0] * len(b) for _, b in layers]
    ref = [[0] * len(b) for _, b in layers]
    counts = [0] * len(layers[-1][1])
    for t in range(1, T + 1):
        spikes = [int(np.floor(x * t + 1e-9)) > int(np.floor(x * (t - 1) + 1e-9)) for x in pixels]
        for li, (W, b) in enumerate(layers):
            out = []
            for j in range(len(b)):
                acc = sum(int(W[i][j]) for i, s in enumerate(spikes) if s)
                syn = acc * neuron.vth_mantissa * 2 ** neuron.vth_exponent  # weight exponent 0
                u[li][j] = _trunc_div(u[li][j] * (4096 - neuron.current_decay), 4096) + syn
                v[li][j] = (_trunc_div(v[li][j] * (4096 - neuron.voltage_decay), 4096)
                            + u[li][j] + (int(b[j]) << neuron.bias_exponent))
                fire = False
                if ref[li][j] > 0:
                    ref[li][j] -= 1
                elif v[li][j] >= vth:
                    v[li][j] -= vth
                    ref[li][j] = neuron.refractory_delay
                    fire = True
                out.append(fire)
            spikes = out
        counts = [c + s for c, s in zip(counts, spikes)]
    return counts


def _dense_net(rng, sizes, neuron):
    layers, Ws, bs = [], [], []
    for k, (a, b) in enumerate(zip(sizes, sizes[1:])):
        W = rng.integers(-2, 3, (a, b)).astype(np.int16)
        bias = rng.integers(-8, 12, b).astype(np.int16)
        layers.append(QuantizedLayer(f"fc{k}", "dense", (a,), (b,), W, bias, 0, neuron.bias_exponent))
        Ws.append(W)
        bs.append(bias)
    return SpikingNetwork(layers, neuron, sizes[-1], input_shape=(sizes[0],)), Ws, bs


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 10_000), cdecay=st.sampled_from([0, 1024, 4095, 4096]),
       vdecay=st.sampled_from([0, 256]), refr=st.integers(0, 2))
def test_simulator_matches_scalar_oracle(seed, cdecay, vdecay, refr):
    rng = np.random.default_rng(seed)
    neuron = NeuronConfig(vth_mantissa=8, vth_exponent=6, current_decay=cdecay,
                          voltage_decay=vdecay, refractory_delay=refr)
    net, Ws, bs = _dense_net(rng, (6, 5, 3), neuron)
    pixels = rng.uniform(0, 1, 6)
    T = 40
    (bc,) = simulate(net, pixels[None, :], [T])
    assert bc.output_counts[0].tolist() == reference_run(Ws, bs, neuron, pixels, T)


def test_decay_truncates_toward_zero():
    x = np.array([-7, -1, 0, 1, 7, 4097], dtype=np.int64)
    for d in (0, 1, 2048, 4095, 4096):
        expect = [_trunc_div(int(v) * (4096 - d), 4096) for v in x]
        assert decay(x, d).tolist() == expect


@pytest.fixture(scope="module")
def small_net(mnist5k):
    m = build_model("lenet", 10, constrained=True)
    return convert(m, init_params(m, 0), random_subset(mnist5k, 32, 0))


def test_structured_equals_sparse(small_net, mnist5k):
    imgs = mnist5k.images[:6]
    a = simulate(small_net, imgs, [15, 30], method="structured")
    b = simulate(small_net, imgs, [15, 30], method="sparse")
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x.output_counts, y.output_counts)
        np.testing.assert_array_equal(x.layer_spikes, y.layer_spikes)


def test_checkpoints_are_prefixes(small_net, mnist5k):
    imgs = mnist5k.images[:4]
    both = simulate(small_net, imgs, [10, 25])
    (alone,) = simulate(small_net, imgs, [10])
    np.testing.assert_array_equal(both[0].output_counts, alone.output_counts)
    assert [bc.duration for bc in both] == [10, 25]
    assert np.all(both[1].layer_spikes >= both[0].layer_spikes)


def test_batch_equals_single(small_net, mnist5k):
    imgs = mnist5k.images[:3]
    (bc,) = simulate(small_net, imgs, [20])
    for i in range(3):
        r = infer(small_net, imgs[i], 20)
        np.testing.assert_array_equal(r.output_counts, bc.output_counts[i])
        assert r.predicted_class == int(np.argmax(bc.output_counts[i]))


def test_blank_input_and_ties():
    neuron = NeuronConfig()
    layer = QuantizedLayer("o", "dense", (784,), (3,), np.zeros((784, 3), np.int16),
                           np.zeros(3, np.int16), 0, 6)
    net = SpikingNetwork([layer], neuron, 3)
    r = infer(net, np.zeros((28, 28)), 50)
    assert r.n_spikes == 0 and r.predicted_class == 0


def test_trace_writer_rows(small_net, mnist5k):
    buf = io.StringIO()
    writer = SpikeTraceWriter(buf, [l.name for l in small_net.layers])
    r = infer(small_net, mnist5k.images[0], 12, trace=writer)
    lines = buf.getvalue().strip().splitlines()
    assert lines[0] == "timestep,layer,neuron,spike"
    assert len(lines) - 1 == r.n_spikes


def test_afr_arithmetic():
    r = SimResult(1, np.zeros(4), np.array([10, 30]), 20)
    assert afr(r, 1, 8, 20) == 40 / 160
    assert afr(400, 2, 10, 20) == 1.0
    with pytest.raises(ValueError):
        afr(1, 0, 1, 1)
    with pytest.raises(ValueError):
        simulate(SpikingNetwork([], NeuronConfig(), 0), np.zeros((1, 28, 28)), [0])
