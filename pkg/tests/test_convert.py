import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from spikebench.convert import (
    ConversionConfig,
    analog_forward,
    collect_activation_stats,
    convert,
    encode_input,
    encode_step,
    model_hash,
    normalize_weights,
    plan_layers,
    quantize_array,
    quantize_bias,
    weight_exponent,
)
from spikebench.data import random_subset
from spikebench.errors import ConversionError, FormatError
from spikebench.network import NeuronConfig, load, loads, unroll
from spikebench.nn.layers import conv_forward
from spikebench.nn.models import ARCHS, activations, build_model, init_params


@pytest.fixture(scope="module")
def lenet_net(mnist5k):
    m = build_model("lenet", 10, constrained=True)
    p = init_params(m, 0)
    return m, p, convert(m, p, random_subset(mnist5k, 64, 0))


@settings(max_examples=200, deadline=None)
@given(mag=st.floats(1e-12, 1e6), bits=st.integers(2, 16))
def test_weight_exponent_is_minimal(mag, bits):
    qmax = 2 ** (bits - 1) - 1
    e = weight_exponent(mag, bits)
    assert mag / 2.0 ** e <= qmax
    assert mag / 2.0 ** (e - 1) > qmax


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10_000), bits=st.sampled_from([4, 8, 12]))
def test_quantize_array_error_bound(seed, bits):
    w = np.random.default_rng(seed).standard_normal(64) * 0.3
    q, e = quantize_array(w, bits)
    assert np.abs(q).max() <= 2 ** (bits - 1) - 1
    assert np.all(np.abs(q * 2.0 ** e - w) <= 2.0 ** (e - 1) + 1e-15)


def test_quantize_zero_and_nonfinite():
    q, e = quantize_array(np.zeros(4), 8)
    assert not q.any() and e == -64
    with pytest.raises(ValueError):
        quantize_array([1.0, math.nan], 8)


def test_quantize_bias_units_and_saturation():
    n = NeuronConfig()
    # bias 1.0 (one threshold per step) is vth / 2**bias_exponent mantissa units
    q, sat = quantize_bias([1.0, 0.5, -0.25], 16, n)
    assert q.tolist() == [n.vth >> 6, n.vth >> 7, -(n.vth >> 8)]
    assert sat == 0
    q, sat = quantize_bias([1.0, 0.1], 8, n)
    assert sat == 1 and q[0] == 127


def test_plan_layers_fold_activations():
    for arch in ARCHS:
        plans = plan_layers(build_model(arch, 24, constrained=True))
        assert {p.kind for p in plans} <= {"dense", "conv", "pool"}
        assert plans[-1].out_shape == (24,)
    with pytest.raises(ConversionError, match="maxpool1"):
        plan_layers(build_model("alexnet", 24))


def test_stats_use_positive_percentile(mnist5k):
    m = build_model("mlp", 10, constrained=True)
    p = init_params(m, 1)
    imgs = mnist5k.images[:32]
    stats = collect_activation_stats(m, p, imgs, 99.0)
    act = activations(m, p, imgs)["fc1"]
    assert stats["fc1"] == pytest.approx(np.percentile(act[act > 0].astype(np.float64), 99.0))


def test_normalization_preserves_ann_decision(mnist5k):
    m = build_model("lenet", 10, constrained=True)
    p = init_params(m, 3)
    imgs = mnist5k.images[:40]
    stats = collect_activation_stats(m, p, imgs)
    scaled = normalize_weights(m, p, stats)
    analog = analog_forward(m, scaled, imgs)
    names = [pl.name for pl in plan_layers(m)]
    logits = activations(m, p, imgs)["output"]
    np.testing.assert_allclose(analog, logits / stats[names[-1]], rtol=1e-5, atol=1e-6)


def test_encode_input_spacing_and_step_agree():
    x = np.array([0.0, 0.25, 0.29, 0.5, 1.0])
    s = encode_input(x, 100)
    assert s.shape == (100, 5)
    assert s.sum(axis=0).tolist() == [0, 25, 29, 50, 100]
    for t in (1, 7, 100):
        np.testing.assert_array_equal(encode_step(x, t), s[t - 1])
    with pytest.raises(ValueError):
        encode_input(x, 0)


def test_convert_layers_and_topology(lenet_net):
    m, p, net = lenet_net
    assert net.neuron_count() == sum(int(np.prod(pl.out_shape)) for pl in plan_layers(m))
    rng = np.random.default_rng(0)
    for layer in net.layers:
        t = unroll(layer)
        assert t.shape == (layer.n_out, layer.n_in)
        if layer.kind == "conv":
            x = rng.integers(0, 2, (1,) + tuple(layer.in_shape)).astype(np.float64)
            pad = (layer.kernel.shape[2] - 1) // 2 if layer.padding == "same" else 0
            ref, _ = conv_forward(x, layer.kernel.astype(np.float64), np.zeros(layer.kernel.shape[0]), 1, pad)
            np.testing.assert_array_equal(t @ x.ravel(), ref.ravel())
        if layer.kind == "dense":
            np.testing.assert_array_equal(t.toarray(), layer.kernel.T)


def test_convert_deterministic_hash(lenet_net, mnist5k):
    m, p, net = lenet_net
    again = convert(m, p, random_subset(mnist5k, 64, 0))
    assert again.to_bytes() == net.to_bytes()
    assert model_hash(m, p) == model_hash(m, p.copy())


def test_all_zero_layer_warns(mnist5k):
    m = build_model("mlp", 10, constrained=True)
    p = init_params(m, 0)
    W, b = p["fc1"]
    W[:] = -abs(W)
    with warnings.catch_warnings(record=True):
        warnings.simplefilter("always")
        stats = collect_activation_stats(m, p, mnist5k.images[:8])
    assert "fc1" in stats.degenerate


def test_network_round_trip(lenet_net, tmp_path):
    _, _, net = lenet_net
    path = tmp_path / "n.sbsn"
    net.save(path)
    back = load(path)
    assert back.to_bytes() == net.to_bytes()
    assert (tmp_path / "n.sbsn.json").exists()
    blob = net.to_bytes()
    with pytest.raises(FormatError):
        loads(blob[:-3])
    with pytest.raises(FormatError):
        loads(b"NOPE" + blob[4:])


def test_conversion_config_validation():
    with pytest.raises(ValueError):
        ConversionConfig(percentile=0)
    with pytest.raises(ValueError):
        ConversionConfig(weight_bits=1)
    with pytest.raises(ValueError):
        NeuronConfig(reset_mode="hard")
