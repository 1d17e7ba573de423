"""Converted spiking network: neuron parameters, quantized layers, binary container."""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import asdict, dataclass, field
from functools import cached_property

import numpy as np
from scipy import sparse

from .errors import FormatError

SBSN_MAGIC = b"SBSN"
SBSN_VERSION = 1

LAYER_KINDS = {"dense": 1, "conv": 2, "pool": 3}
_KIND_NAMES = {v: k for k, v in LAYER_KINDS.items()}
_PADDING = {"valid": 0, "same": 1}


@dataclass(frozen=True)
class NeuronConfig:
    """Loihi-style CUBA compartment parameters (integer units)."""

    reset_mode: str = "soft"
    vth_mantissa: int = 512
    vth_exponent: int = 6
    bias_exponent: int = 6
    voltage_decay: int = 0
    current_decay: int = 4095
    refractory_delay: int = 1
    threshold_input_ratio: int = 1
    functional_state: int = 2

    def __post_init__(self):
        if self.reset_mode != "soft":
            raise ValueError("only soft reset is supported")
        if self.vth_mantissa <= 0:
            raise ValueError("vth_mantissa must be positive")
        for name in ("voltage_decay", "current_decay"):
            if not 0 <= getattr(self, name) <= 4096:
                raise ValueError(f"{name} must be in [0, 4096]")
        if self.refractory_delay < 0:
            raise ValueError("refractory_delay must be non-negative")

    @property
    def vth(self) -> int:
        return self.vth_mantissa << self.vth_exponent


@dataclass
class QuantizedLayer:
    """One spiking layer after quantization.

    ``kernel`` holds the compact integer weights (dense ``(in, out)``, conv
    ``(F, C, k, k)``, pool a scalar); ``topology`` is the same connectivity
    unrolled into an ``(out, in)`` CSR matrix. Dequantized weight is
    ``int * 2**weight_exponent``; the bias mantissa enters the membrane as
    ``bias * 2**bias_exponent`` voltage units.
    """

    name: str
    kind: str
    in_shape: tuple
    out_shape: tuple
    kernel: np.ndarray
    biases: np.ndarray
    weight_exponent: int
    bias_exponent: int
    weight_bits: int = 8
    bias_bits: int = 12
    stride: int = 1
    padding: str = "valid"

    @property
    def n_in(self) -> int:
        return int(np.prod(self.in_shape))

    @property
    def n_out(self) -> int:
        return int(np.prod(self.out_shape))

    @cached_property
    def topology(self) -> sparse.csr_matrix:
        return unroll(self)

    def fan_in(self) -> np.ndarray:
        t = self.topology
        return np.diff(t.indptr)

    def weight_scale(self) -> float:
        return 2.0 ** self.weight_exponent


@dataclass
class SpikingNetwork:
    layers: list
    neuron: NeuronConfig
    num_classes: int
    input_shape: tuple = (1, 28, 28)
    config: dict = field(default_factory=dict)
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        prev = tuple(self.input_shape)
        for layer in self.layers:
            if int(np.prod(layer.in_shape)) != int(np.prod(prev)):
                raise ValueError(f"{layer.name}: fan-in size {layer.in_shape} does not match {prev}")
            prev = tuple(layer.out_shape)
        if self.layers and self.layers[-1].n_out != self.num_classes:
            raise ValueError("output layer size differs from num_classes")

    @property
    def n_inputs(self) -> int:
        return int(np.prod(self.input_shape))

    def neuron_count(self) -> int:
        return sum(l.n_out for l in self.layers)

    def layer_sizes(self) -> list:
        return [l.n_out for l in self.layers]

    def to_bytes(self) -> bytes:
        return dumps(self)

    def save(self, path, manifest=True):
        blob = dumps(self)
        with open(path, "wb") as fh:
            fh.write(blob)
        if manifest:
            with open(str(path) + ".json", "w", encoding="utf-8") as fh:
                json.dump(self.manifest(), fh, indent=2, sort_keys=True)
                fh.write("\n")

    def manifest(self) -> dict:
        return {
            "num_classes": self.num_classes,
            "input_shape": list(self.input_shape),
            "neurons": self.neuron_count(),
            "neuron": asdict(self.neuron),
            "config": self.config,
            "provenance": self.provenance,
            "layers": [
                {
                    "name": l.name,
                    "kind": l.kind,
                    "in_shape": list(l.in_shape),
                    "out_shape": list(l.out_shape),
                    "synapses": int(l.topology.nnz),
                    "weight_exponent": l.weight_exponent,
                    "bias_exponent": l.bias_exponent,
                    "weight_bits": l.weight_bits,
                    "bias_bits": l.bias_bits,
                }
                for l in self.layers
            ],
        }


def unroll(layer: QuantizedLayer) -> sparse.csr_matrix:
    """Explicit ``(n_out, n_in)`` integer connectivity of a layer."""
    if layer.kind == "dense":
        return sparse.csr_matrix(np.ascontiguousarray(layer.kernel.T).astype(np.int32))

    if layer.kind == "conv":
        f, c, k, _ = layer.kernel.shape
        _, h, w = layer.in_shape
        _, ho, wo = layer.out_shape
        pad = (k - 1) // 2 if layer.padding == "same" else 0
        fo, io, jo, ci, di, dj = np.meshgrid(
            np.arange(f), np.arange(ho), np.arange(wo), np.arange(c), np.arange(k), np.arange(k), indexing="ij"
        )
        r = io * layer.stride + di - pad
        q = jo * layer.stride + dj - pad
        ok = (r >= 0) & (r < h) & (q >= 0) & (q < w)
        rows = ((fo * ho + io) * wo + jo)[ok]
        cols = ((ci * h + r) * w + q)[ok]
        vals = layer.kernel[fo[ok], ci[ok], di[ok], dj[ok]].astype(np.int32)
    elif layer.kind == "pool":
        c, h, w = layer.in_shape
        _, ho, wo = layer.out_shape
        ch, io, jo, di, dj = np.meshgrid(
            np.arange(c), np.arange(ho), np.arange(wo), np.arange(2), np.arange(2), indexing="ij"
        )
        rows = ((ch * ho + io) * wo + jo).ravel()
        cols = ((ch * h + 2 * io + di) * w + 2 * jo + dj).ravel()
        vals = np.full(rows.shape, int(layer.kernel), dtype=np.int32)
    else:
        raise ValueError(f"unknown layer kind {layer.kind!r}")

    order = np.lexsort((cols, rows))
    rows, cols, vals = rows[order], cols[order], vals[order]
    indptr = np.zeros(layer.n_out + 1, dtype=np.int64)
    np.add.at(indptr, rows + 1, 1)
    np.cumsum(indptr, out=indptr)
    # built directly so structural zeros survive
    return sparse.csr_matrix((vals, cols, indptr), shape=(layer.n_out, layer.n_in))


# ---------------------------------------------------------------------------
# Binary container

_NEURON_FMT = "<BHbbHHBBB"
_CONFIG_FMT = "<dIBB"


def _shape(shape):
    return struct.pack("<B", len(shape)) + struct.pack(f"<{len(shape)}I", *shape)


def dumps(net: SpikingNetwork) -> bytes:
    n = net.neuron
    cfg = net.config
    out = bytearray()
    out += SBSN_MAGIC
    out += struct.pack("<HHH", SBSN_VERSION, len(net.layers), net.num_classes)
    out += struct.pack(
        _CONFIG_FMT,
        float(cfg.get("percentile", 99.9)),
        int(cfg.get("duration", 100)),
        int(cfg.get("weight_bits", 8)),
        int(cfg.get("bias_bits", 12)),
    )
    out += struct.pack(
        _NEURON_FMT, 1, n.vth_mantissa, n.vth_exponent, n.bias_exponent, n.voltage_decay,
        n.current_decay, n.refractory_delay, n.threshold_input_ratio, n.functional_state,
    )
    prov = json.dumps(net.provenance, sort_keys=True).encode()
    out += struct.pack("<I", len(prov)) + prov
    out += _shape(net.input_shape)
    for layer in net.layers:
        name = layer.name.encode()
        out += struct.pack("<H", len(name)) + name
        out += struct.pack("<BBBBB", LAYER_KINDS[layer.kind], layer.weight_bits, layer.bias_bits,
                           layer.stride, _PADDING[layer.padding])
        out += struct.pack("<hh", layer.weight_exponent, layer.bias_exponent)
        out += _shape(layer.in_shape) + _shape(layer.out_shape)
        kernel = np.asarray(layer.kernel, dtype="<i2")
        out += _shape(kernel.shape) + kernel.tobytes()
        out += struct.pack("<I", layer.n_out) + np.asarray(layer.biases, dtype="<i2").tobytes()
    out += struct.pack("<I", zlib.crc32(bytes(out)))
    return bytes(out)


class _Reader:
    def __init__(self, buf):
        self.buf = buf
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.buf):
            raise FormatError("truncated spiking-network file")
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def shape(self):
        (rank,) = self.unpack("<B")
        return tuple(self.unpack(f"<{rank}I")) if rank else ()


def loads(blob: bytes) -> SpikingNetwork:
    if len(blob) < 8 or blob[:4] != SBSN_MAGIC:
        raise FormatError("not a spiking-network file (bad magic)")
    (crc,) = struct.unpack("<I", blob[-4:])
    if zlib.crc32(blob[:-4]) != crc:
        raise FormatError("checksum mismatch (corrupt or truncated file)")
    r = _Reader(blob[:-4])
    r.take(4)
    version, n_layers, num_classes = r.unpack("<HHH")
    if version != SBSN_VERSION:
        raise FormatError(f"unsupported spiking-network version {version}")
    pct, duration, wbits, bbits = r.unpack(_CONFIG_FMT)
    _, vm, ve, be, vd, cd, rd, tir, fs = r.unpack(_NEURON_FMT)
    neuron = NeuronConfig("soft", vm, ve, be, vd, cd, rd, tir, fs)
    (plen,) = r.unpack("<I")
    provenance = json.loads(r.take(plen).decode())
    input_shape = r.shape()
    layers = []
    for _ in range(n_layers):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode()
        kind, lw, lb, stride, pad = r.unpack("<BBBBB")
        we, bexp = r.unpack("<hh")
        in_shape, out_shape = r.shape(), r.shape()
        kshape = r.shape()
        count = int(np.prod(kshape)) if kshape else 1
        kernel = np.frombuffer(r.take(2 * count), dtype="<i2").reshape(kshape).astype(np.int16)
        (n_out,) = r.unpack("<I")
        biases = np.frombuffer(r.take(2 * n_out), dtype="<i2").astype(np.int16)
        if kind not in _KIND_NAMES:
            raise FormatError(f"unknown layer kind code {kind}")
        layers.append(QuantizedLayer(
            name, _KIND_NAMES[kind], in_shape, out_shape, kernel, biases, we, bexp, lw, lb,
            stride, "same" if pad else "valid",
        ))
    if r.pos != len(r.buf):
        raise FormatError("trailing bytes in spiking-network file")
    config = {"percentile": pct, "duration": duration, "weight_bits": wbits, "bias_bits": bbits}
    return SpikingNetwork(layers, neuron, num_classes, input_shape, config, provenance)


def load(path) -> SpikingNetwork:
    with open(path, "rb") as fh:
        return loads(fh.read())
