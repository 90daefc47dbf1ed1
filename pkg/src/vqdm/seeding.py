"""Deterministic named RNG substreams derived from one top-level seed."""

from __future__ import annotations

import zlib

import numpy as np


def derive_rng(seed: int, *labels) -> np.random.Generator:
    """Generator for (seed, labels...); stable across platforms and runs."""
    key = [int(seed) & 0xFFFFFFFF] + [zlib.crc32(str(l).encode("utf-8")) for l in labels]
    return np.random.default_rng(key)
