"""Discrete-time simulator for converted networks with integer CUBA LIF compartments.

Per compartment and timestep:

    u <- decay(u, current_decay) + synaptic input
    v <- decay(v, voltage_decay) + u + bias * 2**bias_exponent
    refractory: count down, no spike (v keeps integrating)
    otherwise:  v >= vth -> spike, v -= vth, start refractory

``decay(x, d) = trunc(x * (4096 - d) / 4096)``. Spikes emitted by layer
``l`` at step ``t`` reach layer ``l + 1`` within the same step. ``u`` and
``v`` saturate at 32-bit bounds; saturation events are counted.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .convert import encode_step
from .data import ImageSample
from .network import NeuronConfig, QuantizedLayer, SpikingNetwork

INT32_MIN = -(2 ** 31)
INT32_MAX = 2 ** 31 - 1
DECAY_SCALE = 4096


@dataclass
class CompartmentState:
    u: np.ndarray
    v: np.ndarray
    refractory: np.ndarray
    saturations: int = 0

    @classmethod
    def zeros(cls, batch: int, n: int) -> "CompartmentState":
        return cls(
            np.zeros((batch, n), dtype=np.int64),
            np.zeros((batch, n), dtype=np.int64),
            np.zeros((batch, n), dtype=np.int64),
        )


@dataclass
class SimResult:
    predicted_class: int
    output_counts: np.ndarray
    layer_spikes: np.ndarray
    timesteps: int
    saturations: int = 0

    @property
    def n_spikes(self) -> int:
        return int(self.layer_spikes.sum())


@dataclass
class BatchCounts:
    """Spike counts of a batch at one duration checkpoint."""

    duration: int
    output_counts: np.ndarray  # (B, num_classes)
    layer_spikes: np.ndarray  # (B, n_layers)
    saturations: int = 0

    def predictions(self) -> np.ndarray:
        return np.argmax(self.output_counts, axis=1)

    def total_spikes(self) -> np.ndarray:
        return self.layer_spikes.sum(axis=1)


def decay(x: np.ndarray, d: int) -> np.ndarray:
    """``trunc(x * (4096 - d) / 4096)`` in exact integer arithmetic."""
    if d == 0:
        return x
    if d >= DECAY_SCALE:
        return np.zeros_like(x)
    mag = (np.abs(x) * (DECAY_SCALE - d)) // DECAY_SCALE
    return np.where(x < 0, -mag, mag)


def _saturate(x: np.ndarray):
    over = (x > INT32_MAX) | (x < INT32_MIN)
    n = int(np.count_nonzero(over))
    if n:
        np.clip(x, INT32_MIN, INT32_MAX, out=x)
    return n


def _scale_input(acc: np.ndarray, layer: QuantizedLayer, neuron: NeuronConfig) -> np.ndarray:
    """Weighted spike sum (in weight mantissas) to membrane voltage units."""
    acc = acc * neuron.vth_mantissa
    shift = neuron.vth_exponent + layer.weight_exponent
    if shift >= 0:
        return acc << shift
    mag = np.abs(acc) >> (-shift)
    return np.where(acc < 0, -mag, mag)


class _Propagator:
    """Integer weighted spike sums for one layer, for a batch of spike vectors."""

    def __init__(self, layer: QuantizedLayer, method: str = "structured"):
        self.layer = layer
        self.method = method
        fan = int(layer.fan_in().max()) if layer.n_out else 0
        bound = fan * (1 << (layer.weight_bits - 1))
        # float32 sums of integers stay exact below 2**24
        self.dtype = np.float32 if bound < 2 ** 24 else np.float64
        if method == "sparse":
            self.matrix = layer.topology.astype(self.dtype)
        elif layer.kind == "dense":
            self.matrix = np.asarray(layer.kernel, dtype=self.dtype)
        elif layer.kind == "conv":
            f = layer.kernel.shape[0]
            self.matrix = np.asarray(layer.kernel, dtype=self.dtype).reshape(f, -1).T.copy()
            self.k = layer.kernel.shape[2]
            self.pad = (self.k - 1) // 2 if layer.padding == "same" else 0
        else:
            self.weight = int(layer.kernel)

    def __call__(self, spikes: np.ndarray) -> np.ndarray:
        layer = self.layer
        b = spikes.shape[0]
        s = spikes.astype(self.dtype)
        if self.method == "sparse":
            return np.rint(np.asarray(self.matrix @ s.T).T).astype(np.int64)
        if layer.kind == "dense":
            out = s @ self.matrix
        elif layer.kind == "conv":
            x = s.reshape((b,) + tuple(layer.in_shape))
            if self.pad:
                p = self.pad
                x = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
            win = sliding_window_view(x, (self.k, self.k), axis=(2, 3))[:, :, ::layer.stride, ::layer.stride]
            _, c, ho, wo = win.shape[:4]
            cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(b * ho * wo, -1)
            out = (cols @ self.matrix).reshape(b, ho, wo, -1).transpose(0, 3, 1, 2).reshape(b, -1)
        else:
            c, h, w = layer.in_shape
            ho, wo = h // 2, w // 2
            x = s.reshape(b, c, h, w)[:, :, :2 * ho, :2 * wo]
            out = x.reshape(b, c, ho, 2, wo, 2).sum(axis=(3, 5)).reshape(b, -1) * self.weight
        return np.rint(out).astype(np.int64)


def make_propagators(net: SpikingNetwork, method: str = "structured") -> list:
    if method not in ("structured", "sparse"):
        raise ValueError("method must be 'structured' or 'sparse'")
    return [_Propagator(layer, method) for layer in net.layers]


def init_states(net: SpikingNetwork, batch: int = 1) -> list:
    return [CompartmentState.zeros(batch, layer.n_out) for layer in net.layers]


def step(net: SpikingNetwork, states: list, input_spikes: np.ndarray, propagators=None):
    """Advance every layer one timestep; ``input_spikes`` is ``(B, n_inputs)`` bool.

    States are updated in place and returned with the per-layer spike arrays.
    """
    neuron = net.neuron
    props = propagators or make_propagators(net)
    vth = neuron.vth
    spikes = np.asarray(input_spikes, dtype=bool)
    if spikes.ndim == 1:
        spikes = spikes[None]
    emitted = []
    for layer, st, prop in zip(net.layers, states, props):
        syn = _scale_input(prop(spikes), layer, neuron) if spikes.any() else 0
        st.u = decay(st.u, neuron.current_decay) + syn
        st.saturations += _saturate(st.u)
        bias = layer.biases.astype(np.int64) << layer.bias_exponent
        st.v = decay(st.v, neuron.voltage_decay) + st.u + bias
        st.saturations += _saturate(st.v)

        refractory = st.refractory > 0
        fire = ~refractory & (st.v >= vth)
        st.refractory[refractory] -= 1
        st.v[fire] -= vth
        st.refractory[fire] = neuron.refractory_delay
        emitted.append(fire)
        spikes = fire
    return states, emitted


def simulate(net: SpikingNetwork, images, durations, method: str = "structured", trace=None) -> list:
    """Run a batch for ``max(durations)`` steps, snapshotting counts at each duration.

    The regular input code does not depend on the total duration, so a run of
    length ``T`` is a prefix of any longer run and one pass serves all
    checkpoints. ``trace`` (optional callable) receives
    ``(timestep, layer_index, neuron_index)`` for every spike of sample 0.
    """
    durations = sorted({int(d) for d in np.atleast_1d(durations)})
    if not durations or durations[0] < 1:
        raise ValueError("durations must be >= 1")
    x = np.asarray(images, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    x = x.reshape(x.shape[0], -1)
    b = x.shape[0]
    props = make_propagators(net, method)
    states = init_states(net, b)
    counts = [np.zeros((b, layer.n_out), dtype=np.int64) for layer in net.layers]
    out = []
    want = set(durations)
    for t in range(1, durations[-1] + 1):
        _, emitted = step(net, states, encode_step(x, t), props)
        for li, (c, e) in enumerate(zip(counts, emitted)):
            c += e
            if trace is not None:
                for n in np.flatnonzero(e[0]):
                    trace(t, li, int(n))
        if t in want:
            out.append(BatchCounts(
                t, counts[-1].copy(), np.stack([c.sum(axis=1) for c in counts], axis=1),
            ))
    sat = sum(s.saturations for s in states)
    for bc in out:
        bc.saturations = sat
    return out


def infer(net: SpikingNetwork, image, T: int, method: str = "structured", trace=None) -> SimResult:
    """Classify one image by output spike counts over ``T`` steps (ties -> lowest class)."""
    if T < 1:
        raise ValueError("T must be at least 1")
    pixels = image.pixels if isinstance(image, ImageSample) else image
    (bc,) = simulate(net, np.asarray(pixels)[None], [T], method, trace)
    counts = bc.output_counts[0]
    return SimResult(
        predicted_class=int(np.argmax(counts)),
        output_counts=counts,
        layer_spikes=bc.layer_spikes[0],
        timesteps=T,
        saturations=bc.saturations,
    )


def afr(result, batch: int, M: int, T: int) -> float:
    """Average firing rate ``N_spikes / (batch * M * T)``.

    ``result`` may be a :class:`SimResult` or a raw spike total.
    """
    if batch <= 0 or M <= 0 or T <= 0:
        raise ValueError("batch, M and T must be positive")
    n = result.n_spikes if isinstance(result, SimResult) else int(result)
    return n / (batch * M * T)


class SpikeTraceWriter:
    """CSV rows ``timestep,layer,neuron,spike`` for one inference."""

    def __init__(self, fh, layer_names):
        self.writer = csv.writer(fh)
        self.names = list(layer_names)
        self.writer.writerow(["timestep", "layer", "neuron", "spike"])

    def __call__(self, t, layer_index, neuron):
        self.writer.writerow([t, self.names[layer_index], neuron, 1])
