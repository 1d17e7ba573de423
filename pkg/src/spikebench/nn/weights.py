"""Binary weight files ("SBNW").

Layout (little-endian)::

    "SBNW" | u16 version | u16 layer count
    u8 arch code | u16 num_classes | u8 constrained | f64 width_scale | u32 param total
    u32 metadata length | metadata (UTF-8 JSON)
    per parameter layer: u8 kind code | u8 rank | rank x u32 dims | f32 weights | f32 biases
    u32 CRC32 of everything before it

The architecture fields let :func:`load_weights` rebuild the ModelSpec.
"""

from __future__ import annotations

import json
import struct
import zlib

import numpy as np

from ..errors import FormatError
from .models import ARCHS, ModelSpec, ParamStore, build_model, check_params

MAGIC = b"SBNW"
VERSION = 1
KIND_CODES = {"dense": 1, "conv2d": 2}
_HEAD = "<4sHH"
_ARCH = "<BHBdI"


def dumps(model: ModelSpec, params: ParamStore, metadata: dict | None = None) -> bytes:
    check_params(model, params)
    layers = model.param_layers()
    out = bytearray(struct.pack(_HEAD, MAGIC, VERSION, len(layers)))
    out += struct.pack(_ARCH, ARCHS.index(model.arch), model.num_classes, int(model.constrained),
                       model.width_scale, model.param_count())
    meta = json.dumps(metadata or {}, sort_keys=True).encode()
    out += struct.pack("<I", len(meta)) + meta
    for layer in layers:
        W, b = params[layer.name]
        out += struct.pack("<BB", KIND_CODES[layer.kind], W.ndim)
        out += struct.pack(f"<{W.ndim}I", *W.shape)
        out += np.ascontiguousarray(W, dtype="<f4").tobytes()
        out += np.ascontiguousarray(b, dtype="<f4").tobytes()
    out += struct.pack("<I", zlib.crc32(bytes(out)))
    return bytes(out)


def loads(blob: bytes):
    """Parse a weight file; returns ``(ModelSpec, ParamStore, metadata)``."""
    head = struct.calcsize(_HEAD)
    if len(blob) < head + 4 or blob[:4] != MAGIC:
        raise FormatError("not a weight file (bad magic)")
    (crc,) = struct.unpack("<I", blob[-4:])
    if zlib.crc32(blob[:-4]) != crc:
        raise FormatError("checksum mismatch (corrupt or truncated weight file)")
    body = blob[:-4]
    _, version, n_layers = struct.unpack_from(_HEAD, body, 0)
    if version != VERSION:
        raise FormatError(f"unsupported weight file version {version}")
    pos = head
    try:
        arch, num_classes, constrained, width, total = struct.unpack_from(_ARCH, body, pos)
        pos += struct.calcsize(_ARCH)
        (mlen,) = struct.unpack_from("<I", body, pos)
        pos += 4
        metadata = json.loads(body[pos:pos + mlen].decode())
        pos += mlen
        model = build_model(ARCHS[arch], num_classes, bool(constrained), width)
        layers = model.param_layers()
        if len(layers) != n_layers or model.param_count() != total:
            raise FormatError("header does not match the rebuilt architecture")
        arrays = {}
        for layer in layers:
            kind, rank = struct.unpack_from("<BB", body, pos)
            pos += 2
            if kind != KIND_CODES[layer.kind]:
                raise FormatError(f"layer {layer.name}: kind code {kind} does not match")
            shape = struct.unpack_from(f"<{rank}I", body, pos)
            pos += 4 * rank
            n_w = int(np.prod(shape))
            n_b = shape[-1] if layer.kind == "dense" else shape[0]
            end = pos + 4 * (n_w + n_b)
            if end > len(body):
                raise FormatError("truncated weight file")
            flat = np.frombuffer(body[pos:end], dtype="<f4").astype(np.float32)
            arrays[layer.name] = (flat[:n_w].reshape(shape), flat[n_w:].copy())
            pos = end
    except (struct.error, IndexError, UnicodeDecodeError, json.JSONDecodeError, ValueError) as exc:
        if isinstance(exc, FormatError):
            raise
        raise FormatError(f"malformed weight file: {exc}") from None
    if pos != len(body):
        raise FormatError("trailing bytes in weight file")
    params = ParamStore(arrays)
    check_params(model, params)
    return model, params, metadata


def save_weights(model: ModelSpec, params: ParamStore, path, metadata: dict | None = None):
    blob = dumps(model, params, metadata)
    with open(path, "wb") as fh:
        fh.write(blob)


def load_weights(path):
    """Return ``(ModelSpec, ParamStore)``; see :func:`loads` for the metadata too."""
    with open(path, "rb") as fh:
        model, params, _ = loads(fh.read())
    return model, params


def read_header(path) -> dict:
    with open(path, "rb") as fh:
        model, params, metadata = loads(fh.read())
    return {"arch": model.arch, "num_classes": model.num_classes, "constrained": model.constrained,
            "width_scale": model.width_scale, "param_total": model.param_count(), "metadata": metadata}
