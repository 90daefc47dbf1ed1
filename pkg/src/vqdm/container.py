"""Bit-exact binary container for model checkpoints.

Layout (all integers little-endian):

    bytes 0..3    magic "VQDM"
    bytes 4..5    u16 version (currently 1)
    bytes 6..13   u64 header length in bytes
    bytes 14..    UTF-8 JSON header
    ...           zero padding to the next 8-byte boundary
    ...           per-layer payloads in header order, each 8-byte aligned

The header lists every layer with its kind, status, shapes, quantization
config and absolute payload offsets/lengths. Quantized layers carry a
packed-code bitstream plus half-precision codebooks and scales; dense
tensors (excluded layers, biases, norm affines, embeddings) are stored as
half floats.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .codec import QuantConfig, QuantizedTensor, pack_codes, unpack_codes
from .errors import FormatError

MAGIC = b"VQDM"
VERSION = 1
_FIXED_HEADER = struct.Struct("<4sHQ")


@dataclass
class LayerBundle:
    """One layer's stored state: quantized parts and/or named dense arrays."""

    name: str
    kind: str      # "conv" | "linear" | "norm" | "embedding"
    status: str    # "quantized" | "dense"
    shape: tuple   # dense weight shape (original shape when quantized)
    quant: Optional[QuantizedTensor] = None
    dense: dict = field(default_factory=dict)  # e.g. {"weight": arr, "bias": arr}


@dataclass
class ModelBundle:
    meta: dict
    layers: list

    def layer(self, name: str) -> LayerBundle:
        for rec in self.layers:
            if rec.name == name:
                return rec
        raise KeyError(name)


def _align8(n: int) -> int:
    return (n + 7) & ~7


def _half_bytes(arr: np.ndarray) -> bytes:
    return np.ascontiguousarray(arr, dtype="<f2").tobytes()


def _half_array(buf: bytes, shape) -> np.ndarray:
    arr = np.frombuffer(buf, dtype="<f2").astype(np.float32)
    return np.ascontiguousarray(arr.reshape(tuple(shape)))


def serialize(bundle: ModelBundle) -> bytes:
    """Serialize a bundle to container bytes. Deterministic for equal input."""
    payload_specs = []  # (layer_index, payload_name, bytes, extra_header)
    for idx, rec in enumerate(bundle.layers):
        if rec.status == "quantized":
            q = rec.quant
            payload_specs.append((idx, "codes", pack_codes(q.codes, q.config.codebook_bits)))
            payload_specs.append((idx, "codebooks", _half_bytes(q.codebooks)))
            payload_specs.append((idx, "scales", _half_bytes(q.scales)))
        for name in sorted(rec.dense):
            payload_specs.append((idx, name, _half_bytes(rec.dense[name])))

    # Two passes: header size depends on offsets, offsets depend on header
    # size. Offsets are written with fixed 12-digit padding-free ints, so we
    # iterate until the layout is stable (it converges in <= 2 rounds).
    header_len_guess = 0
    for _ in range(8):
        layer_entries = []
        cursor = _align8(_FIXED_HEADER.size + header_len_guess)
        offsets = {}
        for idx, name, blob in payload_specs:
            offsets[(idx, name)] = (cursor, len(blob))
            cursor = _align8(cursor + len(blob))
        for idx, rec in enumerate(bundle.layers):
            entry = {
                "name": rec.name,
                "kind": rec.kind,
                "status": rec.status,
                "shape": list(rec.shape),
                "payloads": {
                    name: list(offsets[(i, name)])
                    for (i, name) in offsets
                    if i == idx
                },
            }
            if rec.status == "quantized":
                q = rec.quant
                entry["quant"] = q.config.to_dict()
                entry["d_out"] = q.d_out
                entry["n_groups"] = q.n_groups
            if rec.dense:
                entry["dense_shapes"] = {
                    name: list(rec.dense[name].shape) for name in sorted(rec.dense)
                }
            layer_entries.append(entry)
        header = {"format": "vqdm", "meta": bundle.meta, "layers": layer_entries}
        header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
        if len(header_bytes) == header_len_guess:
            break
        header_len_guess = len(header_bytes)
    else:
        raise FormatError("header layout failed to converge", 0)

    out = bytearray()
    out += _FIXED_HEADER.pack(MAGIC, VERSION, len(header_bytes))
    out += header_bytes
    out += b"\0" * (_align8(len(out)) - len(out))
    for idx, name, blob in payload_specs:
        off, length = offsets[(idx, name)]
        assert off == len(out), "payload offset drifted from header"
        out += blob
        out += b"\0" * (_align8(len(out)) - len(out))
    return bytes(out)


def deserialize(data: bytes) -> ModelBundle:
    """Parse container bytes, validating structure with byte-precise errors."""
    if len(data) < _FIXED_HEADER.size:
        raise FormatError(f"container truncated to {len(data)} bytes", len(data))
    magic, version, header_len = _FIXED_HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}", 0)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    header_end = _FIXED_HEADER.size + header_len
    if header_end > len(data):
        raise FormatError(f"header length {header_len} exceeds container", 6)
    try:
        header = json.loads(data[_FIXED_HEADER.size:header_end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"header is not valid JSON: {e}", _FIXED_HEADER.size) from None
    if not isinstance(header, dict) or header.get("format") != "vqdm":
        raise FormatError("header missing format marker", _FIXED_HEADER.size)

    def fetch(payloads, name, entry_name):
        if name not in payloads:
            raise FormatError(f"layer {entry_name}: missing payload {name!r}", header_end)
        off, length = payloads[name]
        if off % 8:
            raise FormatError(f"payload {name!r} not 8-byte aligned", off)
        if off + length > len(data):
            raise FormatError(f"payload {name!r} overruns container", off)
        return data[off:off + length]

    layers = []
    for entry in header.get("layers", []):
        name = entry.get("name", "?")
        shape = tuple(entry["shape"])
        payloads = entry.get("payloads", {})
        rec = LayerBundle(
            name=name, kind=entry["kind"], status=entry["status"], shape=shape
        )
        consumed = set()
        if rec.status == "quantized":
            cfg = QuantConfig.from_dict(entry["quant"])
            d_out, n_groups = entry["d_out"], entry["n_groups"]
            codes = unpack_codes(
                fetch(payloads, "codes", name), d_out, n_groups,
                cfg.num_codebooks, cfg.codebook_bits,
            )
            codebooks = _half_array(
                fetch(payloads, "codebooks", name),
                (cfg.num_codebooks, cfg.codebook_size, cfg.group_size),
            )
            scales = _half_array(fetch(payloads, "scales", name), (d_out,))
            rec.quant = QuantizedTensor(
                config=cfg, kind=rec.kind, shape=shape,
                codebooks=codebooks, codes=codes, scales=scales,
            )
            consumed = {"codes", "codebooks", "scales"}
        dense_shapes = entry.get("dense_shapes", {})
        for pname in payloads:
            if pname in consumed:
                continue
            if pname not in dense_shapes:
                raise FormatError(f"layer {name}: no shape for payload {pname!r}", header_end)
            rec.dense[pname] = _half_array(
                fetch(payloads, pname, name), tuple(dense_shapes[pname])
            )
        layers.append(rec)
    return ModelBundle(meta=header.get("meta", {}), layers=layers)


def write_container(path, bundle: ModelBundle) -> bytes:
    blob = serialize(bundle)
    with open(path, "wb") as fh:
        fh.write(blob)
    return blob


def read_container(path) -> ModelBundle:
    with open(path, "rb") as fh:
        return deserialize(fh.read())
