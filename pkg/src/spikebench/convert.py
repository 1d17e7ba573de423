"""Rate-coded ANN-to-SNN conversion.

The pipeline is parse -> normalize -> quantize -> assemble. Only constrained
networks (ReLU activations, average pooling) convert; dropout is dropped and
softmax becomes a spike-count readout.
"""

from __future__ import annotations

import hashlib
import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset, ImageSample
from .errors import ConversionError
from .network import NeuronConfig, QuantizedLayer, SpikingNetwork
from .nn.layers import avgpool_forward, conv_forward
from .nn.models import ModelSpec, ParamStore, activations, check_params

log = logging.getLogger(__name__)

MIN_EXPONENT = -64
# x*t landing within this below an integer counts as reaching it, so decimal
# intensities such as 0.29 encode floor(0.29*T) exactly despite binary rounding
ENCODE_TOL = 1e-9


@dataclass(frozen=True)
class ConversionConfig:
    percentile: float = 99.9
    duration: int = 100
    weight_bits: int = 8
    bias_bits: int = 12
    neuron: NeuronConfig = field(default_factory=NeuronConfig)

    def __post_init__(self):
        if not 0.0 < self.percentile <= 100.0:
            raise ValueError("percentile must be in (0, 100]")
        if self.duration < 1:
            raise ValueError("duration must be at least 1")
        if not 2 <= self.weight_bits <= 16 or not 2 <= self.bias_bits <= 16:
            raise ValueError("bit widths must be in [2, 16]")


@dataclass(frozen=True)
class LayerPlan:
    """A spiking layer derived from the ANN graph."""

    name: str
    kind: str  # dense | conv | pool
    source: str  # ANN layer whose output this layer's rates represent
    in_shape: tuple
    out_shape: tuple
    stride: int = 1
    padding: str = "valid"


@dataclass
class ActivationStats:
    scales: dict
    degenerate: list = field(default_factory=list)

    def __getitem__(self, name):
        return self.scales[name]


def plan_layers(model: ModelSpec) -> list:
    """Map the ANN layer list onto spiking layers, rejecting unsupported kinds."""
    plans = []
    shapes = model.shapes()
    in_shapes = model.input_shapes()
    layers = model.layers
    for i, layer in enumerate(layers):
        if layer.kind in ("maxpool", "tanh"):
            raise ConversionError(f"{layer.kind} has no spiking equivalent; train a constrained model", layer.name)
        if layer.kind not in ("dense", "conv2d", "avgpool"):
            continue
        # rates represent the post-activation output: skip forward over relu/dropout
        source = layer.name
        j = i + 1
        while j < len(layers) and layers[j].kind in ("relu", "dropout"):
            if layers[j].kind == "relu":
                source = layers[j].name
            j += 1
        kind = {"dense": "dense", "conv2d": "conv", "avgpool": "pool"}[layer.kind]
        plans.append(LayerPlan(
            layer.name, kind, source, tuple(in_shapes[i]), tuple(shapes[i]),
            layer.stride, layer.padding if layer.kind == "conv2d" else "valid",
        ))
    if not plans:
        raise ConversionError("model has no convertible layers")
    return plans


def _percentile_scale(values: np.ndarray, p: float):
    pos = values[values > 0]
    if pos.size == 0:
        return None
    return float(np.percentile(pos.astype(np.float64), p))


def collect_activation_stats(model: ModelSpec, params: ParamStore, calibration, p: float = 99.9,
                             batch_size: int = 256) -> ActivationStats:
    """Per-layer activation scale: the ``p``-th percentile of positive activations.

    Layers whose activations are all zero get scale 1 and a warning.
    """
    images = calibration.images if isinstance(calibration, Dataset) else np.asarray(calibration)
    if len(images) == 0:
        raise ValueError("calibration set is empty")
    plans = plan_layers(model)
    collected = {pl.name: [] for pl in plans}
    for i in range(0, len(images), batch_size):
        acts = activations(model, params, images[i:i + batch_size])
        for pl in plans:
            collected[pl.name].append(acts[pl.source].reshape(-1))
    scales, degenerate = {}, []
    for pl in plans:
        lam = _percentile_scale(np.concatenate(collected[pl.name]), p)
        if lam is None or lam <= 0:
            warnings.warn(f"layer {pl.name} never activates on the calibration set; using scale 1")
            degenerate.append(pl.name)
            lam = 1.0
        scales[pl.name] = lam
    return ActivationStats(scales, degenerate)


def normalize_weights(model: ModelSpec, params: ParamStore, stats: ActivationStats) -> dict:
    """Rescale each spiking layer by ``scale[l-1] / scale[l]`` (input scale 1).

    Returns ``{name: (W, b)}`` in float64; pool layers get a scalar weight
    (0.25 before scaling) and no bias.
    """
    out = {}
    prev = 1.0
    for pl in plan_layers(model):
        if pl.name not in stats.scales:
            raise ValueError(f"no activation scale for layer {pl.name}")
        lam = float(stats[pl.name])
        if pl.kind == "pool":
            out[pl.name] = (np.float64(0.25 * prev / lam), None)
        else:
            W, b = params[pl.name]
            out[pl.name] = (W.astype(np.float64) * (prev / lam), b.astype(np.float64) / lam)
        prev = lam
    return out


def analog_forward(model: ModelSpec, scaled: dict, images) -> np.ndarray:
    """Real-valued forward pass through normalized spiking layers.

    Output is the pre-rectification value of the last layer.
    """
    x = np.asarray(images, dtype=np.float64)
    if x.ndim == 3:
        x = x[:, None]
    plans = plan_layers(model)
    for k, pl in enumerate(plans):
        W, b = scaled[pl.name]
        x = x.reshape((x.shape[0],) + pl.in_shape)
        if pl.kind == "dense":
            x = x.reshape(x.shape[0], -1) @ W + b
        elif pl.kind == "conv":
            x, _ = conv_forward(x, W, b, pl.stride, (W.shape[2] - 1) // 2 if pl.padding == "same" else 0)
        else:
            x, _ = avgpool_forward(x)
            x = x * (4.0 * W)
        if k < len(plans) - 1:
            x = np.maximum(x, 0.0)
    return x.reshape(x.shape[0], -1)


def weight_exponent(max_abs: float, bits: int) -> int:
    """Smallest integer e with ``max_abs / 2**e <= 2**(bits-1) - 1``."""
    if not math.isfinite(max_abs):
        raise ValueError("non-finite weight")
    if max_abs == 0.0:
        return MIN_EXPONENT
    qmax = (1 << (bits - 1)) - 1
    e = math.ceil(math.log2(max_abs / qmax))
    while max_abs / 2.0 ** (e - 1) <= qmax:
        e -= 1
    while max_abs / 2.0 ** e > qmax:
        e += 1
    return max(e, MIN_EXPONENT)


def quantize_array(w, bits: int):
    """Signed ``bits``-bit mantissas sharing one power-of-two exponent.

    Rounds half to even; returns ``(ints, exponent)``.
    """
    w = np.asarray(w, dtype=np.float64)
    if not np.all(np.isfinite(w)):
        raise ValueError("cannot quantize non-finite weights")
    e = weight_exponent(float(np.max(np.abs(w))) if w.size else 0.0, bits)
    q = np.rint(w / 2.0 ** e)
    qmax = (1 << (bits - 1)) - 1
    return np.clip(q, -qmax, qmax).astype(np.int16), e


def quantize_bias(b, bits: int, neuron: NeuronConfig):
    """Bias mantissas in units of ``2**bias_exponent`` voltage; saturates at the bit width.

    Returns ``(ints, n_saturated)``.
    """
    b = np.asarray(b, dtype=np.float64)
    if not np.all(np.isfinite(b)):
        raise ValueError("cannot quantize non-finite biases")
    q = np.rint(b * neuron.vth / 2.0 ** neuron.bias_exponent)
    qmax = (1 << (bits - 1)) - 1
    saturated = int(np.count_nonzero(np.abs(q) > qmax))
    return np.clip(q, -qmax, qmax).astype(np.int16), saturated


def quantize(scaled: dict, weight_bits: int = 8, bias_bits: int = 12, neuron: NeuronConfig | None = None) -> dict:
    """Quantize normalized layers: ``{name: (int_weights, exponent, int_biases)}``."""
    neuron = neuron or NeuronConfig()
    out = {}
    for name, (W, b) in scaled.items():
        qw, e = quantize_array(W, weight_bits)
        if b is None:
            qb, sat = None, 0
        else:
            qb, sat = quantize_bias(b, bias_bits, neuron)
        if sat:
            log.warning("layer %s: %d biases saturated at %d bits", name, sat, bias_bits)
        out[name] = (qw, e, qb)
    return out


def encode_input(image, T: int) -> np.ndarray:
    """Regular rate code: ``(T, n_pixels)`` boolean spikes.

    Pixel ``x`` fires at step ``t`` (1-indexed) iff
    ``floor(x*t) > floor(x*(t-1))``, giving ``floor(x*T)`` evenly spaced spikes.
    """
    if T < 1:
        raise ValueError("T must be at least 1")
    pixels = image.pixels if isinstance(image, ImageSample) else image
    x = np.asarray(pixels, dtype=np.float64).reshape(-1)
    t = np.arange(T + 1, dtype=np.float64)[:, None]
    counts = np.floor(x[None, :] * t + ENCODE_TOL)
    return np.diff(counts, axis=0) > 0


def encode_step(x: np.ndarray, t: int) -> np.ndarray:
    """Spikes of the regular code at step ``t`` for pixel array ``x`` (float64)."""
    return np.floor(x * t + ENCODE_TOL) > np.floor(x * (t - 1) + ENCODE_TOL)


def model_hash(model: ModelSpec, params: ParamStore) -> str:
    h = hashlib.sha256()
    h.update(f"{model.arch}|{model.num_classes}|{model.constrained}|{model.width_scale}".encode())
    for name in params.names():
        W, b = params[name]
        h.update(name.encode())
        h.update(np.ascontiguousarray(W, dtype="<f4").tobytes())
        h.update(np.ascontiguousarray(b, dtype="<f4").tobytes())
    return h.hexdigest()


def convert(model: ModelSpec, params: ParamStore, calibration, cfg: ConversionConfig | None = None) -> SpikingNetwork:
    """Parse, normalize, quantize and assemble a :class:`SpikingNetwork`."""
    cfg = cfg or ConversionConfig()
    check_params(model, params)
    plans = plan_layers(model)
    stats = collect_activation_stats(model, params, calibration, cfg.percentile)
    scaled = normalize_weights(model, params, stats)
    quant = quantize(scaled, cfg.weight_bits, cfg.bias_bits, cfg.neuron)

    layers = []
    for pl in plans:
        qw, e, qb = quant[pl.name]
        n_out = int(np.prod(pl.out_shape))
        if qb is None:
            qb = np.zeros(n_out, dtype=np.int16)
        elif pl.kind == "conv":
            # per-channel bias broadcast to every output position
            qb = np.repeat(qb, n_out // len(qb)).astype(np.int16)
        layers.append(QuantizedLayer(
            name=pl.name,
            kind=pl.kind,
            in_shape=pl.in_shape,
            out_shape=pl.out_shape,
            kernel=qw,
            biases=qb,
            weight_exponent=e,
            bias_exponent=cfg.neuron.bias_exponent,
            weight_bits=cfg.weight_bits,
            bias_bits=cfg.bias_bits,
            stride=pl.stride,
            padding=pl.padding,
        ))
    config = {
        "percentile": cfg.percentile,
        "duration": cfg.duration,
        "weight_bits": cfg.weight_bits,
        "bias_bits": cfg.bias_bits,
    }
    provenance = {
        "arch": model.arch,
        "constrained": model.constrained,
        "width_scale": model.width_scale,
        "source_model_sha256": model_hash(model, params),
        "activation_scales": {k: float(v) for k, v in stats.scales.items()},
        "degenerate_layers": list(stats.degenerate),
    }
    return SpikingNetwork(layers, cfg.neuron, model.num_classes, tuple(model.input_shape), config, provenance)

