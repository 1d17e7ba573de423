"""Acceptance suite: one test per criterion, each tagged for the summary table.

Published values used here are the reference parameter counts, the MLP
alphabet operating points, the power/latency rows and the ten-trial VGG
statistics. Everything else is checked against independent
oracles written in this file.
"""

import math
import time
import warnings
from fractions import Fraction

import numpy as np
import pytest

from gradcheck import GRAD_KINDS, check_layer, random_case
from spikebench.bench import (
    EnergyModel,
    HardwareMeasurement,
    SweepPoint,
    balanced_point,
    comparison_report,
    estimate_energy,
    fit_latency,
)
from spikebench.convert import convert, encode_input
from spikebench.data import edge_detect_dataset, random_subset, split
from spikebench.network import NeuronConfig, QuantizedLayer, SpikingNetwork
from spikebench.nn.models import build_model, init_params
from spikebench.nn.train import TrainConfig, evaluate, train
from spikebench.partition import audit, layer_demand, lower_bound, partition_network, estimate_core_cost
from spikebench.snn import SimResult, afr, simulate
from spikebench.stats import confidence_interval, half_width

CRIT3_DURATIONS = (10, 20, 40, 80, 120, 160, 240)
EDGE_THRESHOLD = 0.8


def _detail(record_property, text):
    record_property("detail", text)


# ---------------------------------------------------------------------------
# shared desk-scale pipeline (criteria 3, 6, 12, 13)


@pytest.fixture(scope="module")
def pipeline(mnist5k):
    t0 = time.perf_counter()
    corpus = random_subset(mnist5k, 5000, seed=0)
    pool, test = split(corpus, 0.2, seed=0, names=("train", "test"))
    tr, va = split(pool, 0.1, seed=1)
    model = build_model("lenet", 10, constrained=True)
    params = init_params(model, seed=0)
    best, _ = train(model, params, tr, va, TrainConfig(epochs=30, seed=0))
    train_seconds = time.perf_counter() - t0
    ann_acc = evaluate(model, best, test)["accuracy"]
    net = convert(model, best, random_subset(tr, 500, seed=0))
    runs = simulate(net, test.images, CRIT3_DURATIONS)
    return {
        "model": model,
        "params": best,
        "test": test,
        "net": net,
        "train_seconds": train_seconds,
        "ann_acc": ann_acc,
        "runs": {bc.duration: bc for bc in runs},
    }


def _snn_acc(pipe, T):
    bc = pipe["runs"][T]
    return float((bc.predictions() == pipe["test"].labels).mean())


# ---------------------------------------------------------------------------


@pytest.mark.criterion(1, "parameter counts match the published tables")
def test_c01_parameter_counts(record_property):
    t0 = time.perf_counter()
    totals = {a: build_model(a, 24).param_count() for a in ("mlp", "lenet", "alexnet", "vggnet")}
    mlp = build_model("mlp", 24).layer_param_counts()
    out10 = build_model("mlp", 10).layer_param_counts()["output"]
    elapsed = time.perf_counter() - t0
    _detail(record_property, f"{totals}, mlp10 output {out10}, {elapsed:.3f}s")
    assert totals == {"mlp": 539_416, "lenet": 45_616, "alexnet": 53_244, "vggnet": 67_568}
    assert (mlp["fc1"], mlp["fc2"], mlp["output"]) == (401_920, 131_328, 6_168)
    assert out10 == 2_570
    assert elapsed < 1.0


@pytest.mark.criterion(2, "analytic gradients match central differences")
def test_c02_gradient_check(record_property):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst = {}
    for kind in GRAD_KINDS:
        errs = [check_layer(*random_case(kind, rng), seed=i) for i in range(20)]
        worst[kind] = max(errs)
    elapsed = time.perf_counter() - t0
    top = max(worst, key=worst.get)
    _detail(record_property, f"worst {top} {worst[top]:.2e}, {elapsed:.1f}s")
    assert all(e <= 1e-4 for e in worst.values()), worst
    assert elapsed < 30.0


@pytest.mark.criterion(3, "desk-scale LeNet >= 90% and SNN(120) within 3 points of C-ANN")
def test_c03_end_to_end(pipeline, record_property):
    ann = pipeline["ann_acc"]
    snn = _snn_acc(pipeline, 120)
    _detail(record_property, f"C-ANN {ann:.4f}, SNN@120 {snn:.4f}, train {pipeline['train_seconds']:.0f}s")
    assert pipeline["train_seconds"] <= 600
    assert ann >= 0.90
    assert abs(ann - snn) <= 0.03


@pytest.mark.criterion(4, "encoder emits floor(x*T) regularly spaced spikes")
def test_c04_encoder_exact(record_property):
    t0 = time.perf_counter()
    k = np.arange(1001)
    x = k / 1000.0
    for T in range(1, 301):
        s = encode_input(x, T)
        expected = (k * T) // 1000  # exact integer floor(x*T)
        np.testing.assert_array_equal(s.sum(axis=0), expected)
        pix, t = np.nonzero(s.T)
        same = np.diff(pix) == 0
        if same.any():
            gaps = np.diff(t)[same]
            owner = pix[1:][same]
            hi = np.full(len(x), -1)
            lo = np.full(len(x), T + 1)
            np.maximum.at(hi, owner, gaps)
            np.minimum.at(lo, owner, gaps)
            has = hi >= 0
            assert np.all(hi[has] - lo[has] <= 1), T
    elapsed = time.perf_counter() - t0
    _detail(record_property, f"1001 x 300 cases, {elapsed:.1f}s")
    assert elapsed < 10.0


def _bias_network(biases, neuron=None):
    n = len(biases)
    layer = QuantizedLayer("probe", "dense", (784,), (n,), np.zeros((784, n), np.int16),
                           np.asarray(biases, np.int16), weight_exponent=0, bias_exponent=6)
    return SpikingNetwork([layer], neuron or NeuronConfig(), n)


@pytest.mark.criterion(5, "soft-reset rate equals min(c/vTh, 1/2)")
def test_c05_rate_law(record_property):
    t0 = time.perf_counter()
    neuron = NeuronConfig()
    T = 1000
    biases = np.linspace(0, 1024, 50).round().astype(int)  # c = bias * 2**6 spans 0..2 vTh
    net = _bias_network(biases, neuron)
    (bc,) = simulate(net, np.zeros((1, 28, 28)), [T])
    rate = bc.output_counts[0] / T
    c = biases * 2 ** 6
    expect = np.minimum(c / neuron.vth, 0.5)
    err = np.abs(rate - expect).max()
    elapsed = time.perf_counter() - t0
    _detail(record_property, f"max |rate - law| {err:.4f} (bound {2 / T}), {elapsed:.2f}s")
    assert err <= 2 / T
    assert elapsed < 5.0


@pytest.mark.criterion(6, "accuracy rises then plateaus over duration")
def test_c06_plateau(pipeline, record_property):
    grid = (10, 20, 40, 80, 160, 240)
    acc = [100 * _snn_acc(pipeline, T) for T in grid]
    _detail(record_property, " ".join(f"{T}:{a:.1f}" for T, a in zip(grid, acc)))
    assert all(b >= a - 1.0 for a, b in zip(acc, acc[1:]))
    assert acc[-1] - acc[-2] <= 1.0


@pytest.mark.criterion(7, "least-squares latency fit matches closed form")
def test_c07_ols(record_property):
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(20):
        a, b = rng.uniform(-5, 5, size=2)
        x = np.sort(rng.choice(np.arange(1, 301), size=int(rng.integers(2, 40)), replace=False))
        y = a * x + b
        if np.any(y <= 0):
            y = y - y.min() + 1.0
            b = y[0] - a * x[0]
        fit = fit_latency([SweepPoint(int(d), 0.5, float(v)) for d, v in zip(x, y)])
        worst = max(worst, abs(fit.slope - a), abs(fit.intercept - b))
        assert abs(fit.slope - a) <= 1e-9 and abs(fit.intercept - b) <= 1e-9
    for _ in range(100):
        x = np.sort(rng.choice(np.arange(5, 301, 5), size=int(rng.integers(3, 60)), replace=False)).astype(float)
        y = 0.3 * x + 5 + rng.normal(0, 2, x.size)
        y = np.abs(y) + 0.1
        X = np.column_stack([x, np.ones_like(x)])
        slope, icpt = np.linalg.solve(X.T @ X, X.T @ y)  # normal equations
        fit = fit_latency([SweepPoint(int(d), 0.5, float(v)) for d, v in zip(x, y)])
        worst = max(worst, abs(fit.slope - slope), abs(fit.intercept - icpt))
        assert abs(fit.slope - slope) <= 1e-9 and abs(fit.intercept - icpt) <= 1e-9
    _detail(record_property, f"max deviation {worst:.1e}")


# Published MLP alphabet operating points: best 92.07% at 75 and 90.67% at 20.
# The 25-step accuracy is not published; it only needs to sit within 1 point
# of the best, and everything below 20 must be more than 5 points down
# (the 5% column still reports 20).
MLP_ALPHABET_SWEEP = {5: 40.00, 10: 71.30, 15: 85.20, 20: 90.67, 25: 91.50, 30: 91.62, 35: 91.70,
              40: 91.66, 45: 91.81, 50: 91.77, 55: 91.90, 60: 91.85, 65: 91.98, 70: 92.01,
              75: 92.07, 80: 92.03, 100: 92.00, 150: 91.95, 200: 92.04, 300: 92.02}


def _scan_oracle(counts, durations, relax_count):
    best = max(counts)
    for d, c in sorted(zip(durations, counts)):
        if c >= best - relax_count:
            return d


@pytest.mark.criterion(8, "balanced point equals a linear-scan oracle")
def test_c08_balanced_point(record_property):
    rng = np.random.default_rng(8)
    n_samples = 1000
    relaxes = (0.0, 0.01, 0.02, 0.05)
    for _ in range(1000):
        durations = np.sort(rng.choice(np.arange(5, 301, 5), size=int(rng.integers(1, 30)), replace=False))
        counts = rng.integers(0, n_samples + 1, size=durations.size)
        pts = [SweepPoint(int(d), c / n_samples, 1.0) for d, c in zip(durations, counts)]
        prev = None
        for r in relaxes:
            got = balanced_point(pts, r).duration
            assert got == _scan_oracle(counts, durations, round(r * n_samples))
            if prev is not None:
                assert got <= prev
            prev = got
    table = [SweepPoint(d, a / 100, 1.0) for d, a in MLP_ALPHABET_SWEEP.items()]
    d1 = balanced_point(table, 0.01).duration
    d2 = balanced_point(table, 0.02).duration
    _detail(record_property, f"MLP fixture: 1% -> {d1}, 2% -> {d2}")
    assert (d1, d2) == (25, 20)


@pytest.mark.criterion(9, "report energy and power-ratio arithmetic")
def test_c09_report_arithmetic(record_property):
    hw = [
        HardwareMeasurement("Loihi", "lenet", 0.0, 58.06, 8.97),
        HardwareMeasurement("NCS2", "vggnet", 635.0, 1460.0, 2.59),
        HardwareMeasurement("Loihi", "vggnet", 0.0, 71.89, 8.03),
    ]
    rep = comparison_report(hw=hw)
    lenet = next(r for r in rep.rows if r.model == "lenet")
    ratio = next(r for r in rep.ratios if r[0] == "vggnet")
    _detail(record_property, f"LeNet {lenet.energy_mj:.4f} mJ, VGG power ratio {ratio[3]:.3f}x")
    assert abs(lenet.energy_mj - 0.52) <= 0.01
    assert math.isclose(lenet.energy_mj, 58.06 * 8.97 / 1000, rel_tol=1e-12)
    assert abs(ratio[3] - 11.48) <= 0.01


@pytest.mark.criterion(10, "confidence interval half-width and 1/sqrt(n) scaling")
def test_c10_confidence_interval(record_property):
    lo, hi = confidence_interval(99.38, 0.31, 10, 1.96)
    h = (hi - lo) / 2
    _detail(record_property, f"half-width {h:.4f}, interval ({lo:.4f}, {hi:.4f})")
    assert abs(h - 0.1921) <= 1e-3
    for n in (1, 3, 10, 25, 101):
        assert half_width(0.31, 4 * n) == half_width(0.31, n) / 2


@pytest.mark.criterion(11, "partition plans fit every core budget on one chip")
def test_c11_partition(mnist5k, record_property):
    calib = random_subset(mnist5k, 64, seed=11).images
    totals = {}
    for arch in ("mlp", "lenet", "alexnet", "vggnet"):
        model = build_model(arch, 24, constrained=True)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            net = convert(model, init_params(model, seed=11), calib)
        plan = partition_network(net)
        assert audit(plan) == []
        for k, layer in enumerate(net.layers):
            nxt = net.layers[k + 1] if k + 1 < len(net.layers) else None
            demand = layer_demand(layer, estimate_core_cost(layer, plan.budget, nxt))
            assert plan.layers[k].n_cores >= lower_bound(demand, plan.budget)
        totals[arch] = plan.total_cores
        assert plan.total_cores <= 128
    _detail(record_property, f"cores {totals}")


@pytest.mark.criterion(12, "average firing rate arithmetic and range")
def test_c12_afr(pipeline, record_property):
    r = SimResult(0, np.zeros(10), np.array([60, 40]), 500)
    assert math.isclose(afr(r, 1, 10, 500), float(Fraction(100, 5000)), rel_tol=1e-15)
    assert afr(SimResult(0, np.zeros(2), np.array([0, 0]), 7), 1, 2, 7) == 0
    assert afr(SimResult(0, np.zeros(3), np.array([3, 3]), 2), 2, 3, 2) == 0.5
    M = pipeline["net"].neuron_count()
    rates = np.concatenate([[afr(int(n), 1, M, T) for n in bc.total_spikes()]
                            for T, bc in pipeline["runs"].items()])
    _detail(record_property, f"AFR range [{rates.min():.4f}, {rates.max():.4f}] over {rates.size} inferences")
    assert np.all((rates >= 0) & (rates <= 1))


@pytest.mark.criterion(13, "edge-detected inputs spike less and cost less energy")
def test_c13_sparsification(pipeline, record_property):
    net = pipeline["net"]
    test = pipeline["test"]
    T = 120
    edges = edge_detect_dataset(test, EDGE_THRESHOLD)
    (bc_edge,) = simulate(net, edges.images, [T])
    gray = pipeline["runs"][T].total_spikes().mean()
    edge = bc_edge.total_spikes().mean()
    model = EnergyModel()
    M = net.neuron_count()
    e_gray = estimate_energy(gray, M, T, model).dynamic_j
    e_edge = estimate_energy(edge, M, T, model).dynamic_j
    _detail(record_property, f"spikes gray {gray:.0f} edge {edge:.0f}; "
                             f"energy gray {e_gray * 1e6:.2f} uJ edge {e_edge * 1e6:.2f} uJ (estimated)")
    assert edge < gray
    assert e_edge < e_gray
