"""Synthetic training data and sampled-trajectory datasets.

The synthetic set renders one Gaussian blob per latent whose position is
determined by the class id; every item is reproducible from (seed, index).
Trajectory datasets persist with the same container convention as model
checkpoints: fixed header, JSON index, aligned little-endian payloads.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .container import MAGIC, VERSION, _FIXED_HEADER, _align8
from .errors import FormatError
from .seeding import derive_rng


@dataclass(frozen=True)
class SyntheticSpec:
    num_classes: int = 8
    channels: int = 4
    size: int = 16
    null_dropout: float = 0.1
    seed: int = 0


class SyntheticDataset:
    """Procedural class-conditional latents; null condition id = num_classes."""

    def __init__(self, spec: SyntheticSpec):
        self.spec = spec
        grid = np.arange(spec.size, dtype=np.float32)
        self._yy, self._xx = np.meshgrid(grid, grid, indexing="ij")

    def item(self, index: int):
        """(latent [C,H,W] float32, condition id) for one index."""
        sp = self.spec
        rng = derive_rng(sp.seed, "data", index)
        cls = int(rng.integers(sp.num_classes))
        angle = 2.0 * np.pi * cls / sp.num_classes
        center = sp.size / 2.0 - 0.5
        radius = sp.size * 0.28
        cy = center + radius * np.sin(angle) + 0.6 * rng.standard_normal()
        cx = center + radius * np.cos(angle) + 0.6 * rng.standard_normal()
        sigma = 1.8 + 0.3 * rng.random()
        blob = np.exp(-(((self._yy - cy) ** 2 + (self._xx - cx) ** 2)
                        / (2.0 * sigma * sigma)))
        phases = angle + np.arange(sp.channels) * (np.pi / sp.channels)
        amps = 3.0 * np.cos(phases).astype(np.float32)
        x = amps[:, None, None] * blob[None].astype(np.float32)
        x += 0.05 * rng.standard_normal(x.shape).astype(np.float32)
        cond = sp.num_classes if rng.random() < sp.null_dropout else cls
        return x.astype(np.float32), cond

    def batch(self, indices):
        xs, conds = zip(*(self.item(int(i)) for i in indices))
        return np.stack(xs), np.asarray(conds, dtype=np.int64)


@dataclass
class TrajectoryDataset:
    """Per-branch sampling records: (x_t, timestep, condition, teacher eps)."""

    x: np.ndarray            # [N, C, H, W] float32
    t: np.ndarray            # [N] int64
    cond: np.ndarray         # [N] int64
    teacher_eps: np.ndarray  # [N, C, H, W] float32
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return self.x.shape[0]

    def subset(self, indices) -> "TrajectoryDataset":
        idx = np.asarray(indices)
        return TrajectoryDataset(x=self.x[idx], t=self.t[idx], cond=self.cond[idx],
                                 teacher_eps=self.teacher_eps[idx], meta=dict(self.meta))


_DATASET_FORMAT = "vqdm-dataset"
_ARRAY_ORDER = ("x", "t", "cond", "teacher_eps")
_DTYPES = {"x": "<f4", "t": "<i8", "cond": "<i8", "teacher_eps": "<f4"}


def write_dataset(path, ds: TrajectoryDataset) -> None:
    payloads = {}
    for name in _ARRAY_ORDER:
        arr = getattr(ds, name)
        payloads[name] = np.ascontiguousarray(arr, dtype=_DTYPES[name]).tobytes()

    header_len_guess = 0
    for _ in range(8):
        cursor = _align8(_FIXED_HEADER.size + header_len_guess)
        index = {}
        for name in _ARRAY_ORDER:
            index[name] = {
                "offset": cursor,
                "length": len(payloads[name]),
                "shape": list(getattr(ds, name).shape),
            }
            cursor = _align8(cursor + len(payloads[name]))
        header = {"format": _DATASET_FORMAT, "meta": ds.meta, "arrays": index}
        blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
        if len(blob) == header_len_guess:
            break
        header_len_guess = len(blob)
    else:
        raise FormatError("dataset header failed to converge", 0)

    with open(path, "wb") as fh:
        out = bytearray(_FIXED_HEADER.pack(MAGIC, VERSION, len(blob)))
        out += blob
        out += b"\0" * (_align8(len(out)) - len(out))
        for name in _ARRAY_ORDER:
            assert index[name]["offset"] == len(out)
            out += payloads[name]
            out += b"\0" * (_align8(len(out)) - len(out))
        fh.write(out)


def read_dataset(path) -> TrajectoryDataset:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < _FIXED_HEADER.size:
        raise FormatError("dataset file truncated", len(data))
    magic, version, header_len = _FIXED_HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}", 0)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    end = _FIXED_HEADER.size + header_len
    if end > len(data):
        raise FormatError("header overruns file", 6)
    try:
        header = json.loads(data[_FIXED_HEADER.size:end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"header is not valid JSON: {e}", _FIXED_HEADER.size) from None
    if header.get("format") != _DATASET_FORMAT:
        raise FormatError("not a trajectory dataset", _FIXED_HEADER.size)
    arrays = {}
    for name in _ARRAY_ORDER:
        entry = header["arrays"][name]
        off, length = entry["offset"], entry["length"]
        if off % 8 or off + length > len(data):
            raise FormatError(f"payload {name!r} bad bounds", off)
        arr = np.frombuffer(data[off:off + length], dtype=_DTYPES[name])
        arrays[name] = arr.reshape(tuple(entry["shape"])).copy()
    return TrajectoryDataset(
        x=arrays["x"].astype(np.float32),
        t=arrays["t"].astype(np.int64),
        cond=arrays["cond"].astype(np.int64),
        teacher_eps=arrays["teacher_eps"].astype(np.float32),
        meta=header.get("meta", {}),
    )
