"""The four gesture-classifier families and a functional forward pass."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import ShapeError
from .layers import LayerSpec, layer_backward, layer_forward, output_shape, param_shapes

ARCHS = ("mlp", "lenet", "alexnet", "vggnet")
INPUT_SHAPE = (1, 28, 28)


@dataclass(frozen=True)
class ModelSpec:
    arch: str
    layers: tuple
    num_classes: int
    constrained: bool = False
    width_scale: float = 1.0
    input_shape: tuple = INPUT_SHAPE

    def __post_init__(self):
        shapes = self.shapes()
        if self.layers[-1].kind != "softmax":
            raise ValueError("final layer must be softmax")
        if shapes[-1] != (self.num_classes,):
            raise ValueError(f"output shape {shapes[-1]} does not match {self.num_classes} classes")

    def shapes(self) -> list:
        """Per-sample output shape of every layer."""
        out, s = [], tuple(self.input_shape)
        for layer in self.layers:
            s = output_shape(layer, s)
            out.append(s)
        return out

    def input_shapes(self) -> list:
        return [tuple(self.input_shape)] + self.shapes()[:-1]

    def param_layers(self) -> list:
        return [l for l in self.layers if l.has_params]

    def layer_param_counts(self) -> dict:
        counts = {}
        for layer, s in zip(self.layers, self.input_shapes()):
            shp = param_shapes(layer, s)
            if shp:
                counts[layer.name] = int(np.prod(shp[0]) + np.prod(shp[1]))
        return counts

    def param_count(self) -> int:
        return sum(self.layer_param_counts().values())

    def kinds(self) -> set:
        return {l.kind for l in self.layers}


@dataclass
class ParamStore:
    """Trainable arrays keyed by layer name: ``{name: (W, b)}``."""

    arrays: dict = field(default_factory=dict)

    def __getitem__(self, name):
        return self.arrays[name]

    def __contains__(self, name):
        return name in self.arrays

    def names(self):
        return list(self.arrays)

    def copy(self) -> "ParamStore":
        return ParamStore({k: (W.copy(), b.copy()) for k, (W, b) in self.arrays.items()})

    def astype(self, dtype) -> "ParamStore":
        return ParamStore({k: (W.astype(dtype), b.astype(dtype)) for k, (W, b) in self.arrays.items()})

    def count(self) -> int:
        return int(sum(W.size + b.size for W, b in self.arrays.values()))

    def equals(self, other: "ParamStore") -> bool:
        if self.names() != other.names():
            return False
        return all(
            np.array_equal(W, other[k][0]) and np.array_equal(b, other[k][1])
            and W.dtype == other[k][0].dtype
            for k, (W, b) in self.arrays.items()
        )


def _scaled(n, scale):
    return max(1, int(round(n * scale)))


def build_model(arch: str, num_classes: int, constrained: bool = False, width_scale: float = 1.0) -> ModelSpec:
    """Build one of the four architectures.

    ``constrained`` swaps max-pooling for average pooling and tanh for ReLU so
    the network can be converted to spikes. ``width_scale`` multiplies conv
    filter counts (dense widths are fixed).
    """
    if arch not in ARCHS:
        raise ValueError(f"unknown architecture {arch!r}; expected one of {ARCHS}")
    if num_classes < 1:
        raise ValueError("num_classes must be positive")
    if width_scale <= 0:
        raise ValueError("width_scale must be positive")

    pool = "avgpool" if constrained else "maxpool"
    layers = []

    def add(kind, **kw):
        n = sum(1 for l in layers if l.kind == kind) + 1
        layers.append(LayerSpec(kind=kind, name=kw.pop("name", f"{kind}{n}"), **kw))

    def conv(filters, kernel, act, padding="valid"):
        n = sum(1 for l in layers if l.kind == "conv2d") + 1
        add("conv2d", name=f"conv{n}", filters=_scaled(filters, width_scale), kernel=kernel, padding=padding)
        add(act)

    def fc(units, act, dropout=0.0, name=None):
        n = sum(1 for l in layers if l.kind == "dense") + 1
        add("dense", name=name or f"fc{n}", units=units)
        add(act)
        if dropout:
            add("dropout", rate=dropout)

    if arch == "mlp":
        add("flatten")
        fc(512, "relu", 0.2)
        fc(256, "relu", 0.2)
    elif arch == "lenet":
        act = "relu" if constrained else "tanh"
        conv(6, 5, act)
        add("avgpool")
        conv(16, 5, act)
        add("avgpool")
        add("flatten")
        fc(120, act, 0.25)
        fc(84, act, 0.25)
    elif arch == "alexnet":
        conv(6, 5, "relu")
        conv(12, 5, "relu")
        add(pool)
        conv(24, 3, "relu")
        conv(24, 3, "relu")
        add(pool)
        conv(24, 3, "relu", padding="same")
        add("flatten")
        fc(120, "relu", 0.5)
        fc(84, "relu", 0.5)
    else:
        conv(6, 3, "relu")
        conv(16, 3, "relu")
        add(pool)
        conv(32, 3, "relu")
        conv(32, 3, "relu")
        add(pool)
        conv(48, 3, "relu")
        conv(48, 3, "relu", padding="same")
        add(pool)
        add("flatten")
        fc(120, "relu")
        fc(84, "relu")

    add("dense", name="output", units=num_classes)
    add("softmax")
    return ModelSpec(arch, tuple(layers), num_classes, bool(constrained), float(width_scale))


def init_params(model: ModelSpec, seed: int, dtype=np.float32) -> ParamStore:
    """Glorot-uniform weights, zero biases."""
    rng = np.random.default_rng(seed)
    arrays = {}
    for layer, s in zip(model.layers, model.input_shapes()):
        shp = param_shapes(layer, s)
        if not shp:
            continue
        w_shape, b_shape = shp
        if layer.kind == "dense":
            fan_in, fan_out = w_shape
        else:
            rf = w_shape[2] * w_shape[3]
            fan_in, fan_out = w_shape[1] * rf, w_shape[0] * rf
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        arrays[layer.name] = (
            rng.uniform(-limit, limit, size=w_shape).astype(dtype),
            np.zeros(b_shape, dtype=dtype),
        )
    return ParamStore(arrays)


def check_params(model: ModelSpec, params: ParamStore):
    for layer, s in zip(model.layers, model.input_shapes()):
        shp = param_shapes(layer, s)
        if not shp:
            continue
        if layer.name not in params:
            raise ShapeError("missing parameters", layer.name)
        W, b = params[layer.name]
        if W.shape != shp[0] or b.shape != shp[1]:
            raise ShapeError(f"parameter shapes {W.shape}/{b.shape}, expected {shp[0]}/{shp[1]}", layer.name)


def _as_batch(model: ModelSpec, batch):
    x = np.asarray(batch)
    if x.ndim == 3 and len(model.input_shape) == 3:
        x = x[:, None]
    if tuple(x.shape[1:]) != tuple(model.input_shape):
        raise ShapeError(f"batch shape {x.shape[1:]} does not match input {model.input_shape}", "input")
    return x


def run_layers(model: ModelSpec, params: ParamStore, x, upto=None, training=False, rng=None, keep=False):
    """Run layers ``[0, upto)``; with ``keep`` also return per-layer (output, cache)."""
    layers = model.layers if upto is None else model.layers[:upto]
    trace = []
    for layer, expect in zip(layers, model.input_shapes()):
        if tuple(x.shape[1:]) != tuple(expect):
            raise ShapeError(f"input shape {x.shape[1:]}, expected {expect}", layer.name)
        p = params[layer.name] if layer.has_params else None
        x, cache = layer_forward(layer, p, x, training, rng)
        if keep:
            trace.append((x, cache))
    return (x, trace) if keep else x


def forward(model: ModelSpec, params: ParamStore, batch, training: bool = False, rng=None):
    """Class probabilities, shape ``(N, num_classes)``."""
    check_params(model, params)
    return run_layers(model, params, _as_batch(model, batch), training=training, rng=rng)


def logits(model: ModelSpec, params: ParamStore, batch, training=False, rng=None):
    return run_layers(model, params, _as_batch(model, batch), upto=len(model.layers) - 1, training=training, rng=rng)


def predict(model: ModelSpec, params: ParamStore, images, batch_size: int = 512) -> np.ndarray:
    """Argmax class per image; ties go to the lowest index."""
    out = []
    for i in range(0, len(images), batch_size):
        z = logits(model, params, images[i:i + batch_size])
        out.append(np.argmax(z, axis=1))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def activations(model: ModelSpec, params: ParamStore, batch) -> dict:
    """Output of every layer by name (inference mode)."""
    _, trace = run_layers(model, params, _as_batch(model, batch), keep=True)
    return {layer.name: out for layer, (out, _) in zip(model.layers, trace)}


def loss_and_grads(model: ModelSpec, params: ParamStore, x, y_onehot, rng=None, training=True):
    """Mean categorical cross-entropy and its gradients.

    Softmax and cross-entropy are fused: the gradient at the logits is
    ``(p - y) / N``.
    """
    n_body = len(model.layers) - 1
    z, trace = run_layers(model, params, x, upto=n_body, training=training, rng=rng, keep=True)
    zs = z - z.max(axis=1, keepdims=True)
    logp = zs - np.log(np.exp(zs).sum(axis=1, keepdims=True))
    n = x.shape[0]
    loss = float(-(y_onehot * logp).sum() / n)
    dz = (np.exp(logp) - y_onehot) / z.dtype.type(n)

    grads = {}
    for layer, (_, cache) in zip(reversed(model.layers[:n_body]), reversed(trace)):
        p = params[layer.name] if layer.has_params else None
        dz, g = layer_backward(layer, p, cache, dz)
        if g is not None:
            grads[layer.name] = g
    return loss, grads, np.exp(logp)
