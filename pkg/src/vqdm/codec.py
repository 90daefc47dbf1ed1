"""Compressed-weight representation: grouping, dequantization, LUT matmul,
bit accounting and code packing.

A layer's weight is reshaped to a [d_out x d_flat] matrix whose columns are
grouped in runs of `group_size`; each group is encoded as the sum of one
codeword per codebook, plus a per-output-row scale.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigError, DimensionError, EncodingError, UsageError
from .tensor import conv_weight_from_matrix, conv_weight_matrix

PACKABLE_BITS = (4, 6, 8)
STORAGE_BITS = 16  # codebooks, scales and dense weights are stored as halves


@dataclass(frozen=True)
class QuantConfig:
    """Hyperparameters for one layer's additive quantization."""

    group_size: int = 8
    num_codebooks: int = 3
    codebook_bits: int = 8
    beam_width: int = 4
    loss_tol: float = 1e-3
    max_outer_iters: int = 8
    adam_steps: int = 100
    adam_lr: float = 1e-3
    kmeans_iters: int = 20
    seed: int = 0

    def __post_init__(self):
        if self.group_size < 1:
            raise ConfigError(f"group_size must be >= 1, got {self.group_size}")
        if not 1 <= self.codebook_bits <= 16:
            raise ConfigError(f"codebook_bits must be in [1,16], got {self.codebook_bits}")
        if not 1 <= self.num_codebooks <= 8:
            raise ConfigError(f"num_codebooks must be in [1,8], got {self.num_codebooks}")
        if self.beam_width < 1:
            raise ConfigError(f"beam_width must be >= 1, got {self.beam_width}")
        if self.max_outer_iters < 0:
            raise ConfigError(f"max_outer_iters must be >= 0, got {self.max_outer_iters}")

    @property
    def codebook_size(self) -> int:
        return 1 << self.codebook_bits

    def to_dict(self) -> dict:
        return {
            "group_size": self.group_size,
            "num_codebooks": self.num_codebooks,
            "codebook_bits": self.codebook_bits,
            "beam_width": self.beam_width,
            "loss_tol": self.loss_tol,
            "max_outer_iters": self.max_outer_iters,
            "adam_steps": self.adam_steps,
            "adam_lr": self.adam_lr,
            "kmeans_iters": self.kmeans_iters,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "QuantConfig":
        return cls(**d)


def reshape_for_quant(weight: np.ndarray, kind: str, group_size: int) -> np.ndarray:
    """Flatten a weight tensor to [d_out x d_flat] with groupable columns.

    Linear weights [d_out, d_in] pass through unchanged. Conv weights
    [Cout, Cin, kh, kw] are laid out with column order (kernel row, kernel
    col, input channel), input channel fastest, so each group of
    `group_size` columns stays inside one spatial tap's input channels.
    """
    if kind == "linear":
        if weight.ndim != 2:
            raise DimensionError(f"linear weight must be 2-D, got {weight.shape}")
        if weight.shape[1] % group_size:
            raise ConfigError(
                f"input dim {weight.shape[1]} not divisible by group size {group_size}"
            )
        return np.ascontiguousarray(weight)
    if kind == "conv":
        if weight.ndim != 4:
            raise DimensionError(f"conv weight must be 4-D, got {weight.shape}")
        if weight.shape[1] % group_size:
            raise ConfigError(
                f"input channels {weight.shape[1]} not divisible by group size {group_size}"
            )
        return conv_weight_matrix(weight)
    raise UsageError(f"unknown weight kind {kind!r}")


def inverse_reshape(mat: np.ndarray, kind: str, shape: Sequence[int]) -> np.ndarray:
    """Undo reshape_for_quant back to the original dense shape."""
    shape = tuple(shape)
    if kind == "linear":
        return np.ascontiguousarray(mat.reshape(shape))
    if kind == "conv":
        cout, cin, kh, kw = shape
        return conv_weight_from_matrix(mat, cin, kh, kw)
    raise UsageError(f"unknown weight kind {kind!r}")


def reconstruct_grouped(codebooks: np.ndarray, codes: np.ndarray) -> np.ndarray:
    """Unscaled reconstruction [d_out, d_flat] = per-group sum of codewords."""
    m_books = codebooks.shape[0]
    d_out, n_groups, _ = codes.shape
    rec = codebooks[0][codes[:, :, 0]]
    for m in range(1, m_books):
        rec = rec + codebooks[m][codes[:, :, m]]
    return rec.reshape(d_out, n_groups * codebooks.shape[2])


@dataclass(frozen=True)
class QuantizedTensor:
    """Immutable compressed form of one layer's weight."""

    config: QuantConfig
    kind: str                 # "linear" | "conv"
    shape: tuple              # original dense shape
    codebooks: np.ndarray     # [M, k, g]
    codes: np.ndarray         # [d_out, n_groups, M], uint16
    scales: np.ndarray        # [d_out]

    def __post_init__(self):
        cfg = self.config
        m, k, g = self.codebooks.shape
        if (m, k, g) != (cfg.num_codebooks, cfg.codebook_size, cfg.group_size):
            raise DimensionError(
                f"codebooks {self.codebooks.shape} vs config (M={cfg.num_codebooks}, "
                f"k={cfg.codebook_size}, g={cfg.group_size})"
            )
        d_out, n_groups, mc = self.codes.shape
        if mc != m:
            raise DimensionError(f"codes carry {mc} codebooks, expected {m}")
        if self.codes.size and int(self.codes.max()) >= k:
            raise EncodingError(f"code index {int(self.codes.max())} >= k={k}")
        if self.scales.shape != (d_out,):
            raise DimensionError(f"scales shape {self.scales.shape}, expected ({d_out},)")
        d_flat = n_groups * g
        if self.kind == "linear":
            got = tuple(self.shape)
        elif self.kind == "conv":
            cout, cin, kh, kw = self.shape
            got = (cout, cin * kh * kw)
        else:
            raise UsageError(f"unknown weight kind {self.kind!r}")
        if got != (d_out, d_flat):
            raise DimensionError(
                f"shape {self.shape} inconsistent with {d_out} rows x {d_flat} columns"
            )
        if not np.all(np.isfinite(self.codebooks)) or not np.all(np.isfinite(self.scales)):
            raise EncodingError("non-finite codebook or scale entries")
        object.__setattr__(self, "shape", tuple(self.shape))
        for arr in (self.codebooks, self.codes, self.scales):
            arr.setflags(write=False)

    @property
    def d_out(self) -> int:
        return self.codes.shape[0]

    @property
    def d_flat(self) -> int:
        return self.codes.shape[1] * self.config.group_size

    @property
    def n_groups(self) -> int:
        return self.codes.shape[1]


def dequantize(q: QuantizedTensor) -> np.ndarray:
    """Dense weight in the original shape: scales times summed codewords."""
    mat = reconstruct_grouped(q.codebooks, q.codes) * q.scales[:, None]
    return inverse_reshape(mat, q.kind, q.shape)


def dequantize_grouped(q: QuantizedTensor) -> np.ndarray:
    """Dense [d_out, d_flat] matrix including output scales."""
    return reconstruct_grouped(q.codebooks, q.codes) * q.scales[:, None]


def lut_matmul(q: QuantizedTensor, x: np.ndarray) -> np.ndarray:
    """Multiply by the grouped weight via per-group lookup tables.

    x has shape [d_flat, n]. Each table entry LUT[m][p][c] holds the dot
    product of codeword c of codebook m with the p-th input group; the
    output row is the scale times the sum of table hits for that row's
    codes. Matches dequantize(q) @ x up to summation order.
    """
    if x.ndim != 2 or x.shape[0] != q.d_flat:
        raise DimensionError(f"lut_matmul: x shape {x.shape}, expected ({q.d_flat}, n)")
    if x.dtype != q.codebooks.dtype:
        raise DimensionError(f"lut_matmul: dtype {x.dtype} vs codebooks {q.codebooks.dtype}")
    g = q.config.group_size
    n_groups = q.n_groups
    xr = x.reshape(n_groups, g, -1)
    luts = np.einsum("mkg,pgn->mpkn", q.codebooks, xr)
    p_index = np.arange(n_groups)[None, :]
    acc = luts[0][p_index, q.codes[:, :, 0]].sum(axis=1)
    for m in range(1, q.config.num_codebooks):
        acc = acc + luts[m][p_index, q.codes[:, :, m]].sum(axis=1)
    return acc * q.scales[:, None]


# ---------------------------------------------------------------------------
# bit accounting
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LayerBits:
    """One linear/conv layer's entry in the bit-accounting report."""

    name: str
    weight_count: int
    d_out: int
    status: str  # "quantized" | "excluded"
    config: Optional[QuantConfig] = None


def layer_stored_bits(entry: LayerBits) -> int:
    """Total stored bits for one layer under the container conventions."""
    if entry.status == "excluded":
        return entry.weight_count * STORAGE_BITS
    if entry.status != "quantized" or entry.config is None:
        raise UsageError(f"layer {entry.name}: bad status {entry.status!r}")
    cfg = entry.config
    if entry.weight_count % cfg.group_size:
        raise ConfigError(f"layer {entry.name}: weights not divisible by group size")
    code_bits = cfg.num_codebooks * cfg.codebook_bits * (entry.weight_count // cfg.group_size)
    codebook_bits = cfg.num_codebooks * cfg.codebook_size * cfg.group_size * STORAGE_BITS
    scale_bits = entry.d_out * STORAGE_BITS
    return code_bits + codebook_bits + scale_bits


def avg_bits(report: Sequence[LayerBits]) -> float:
    """Stored bits per weight over every linear/conv layer, codebooks included.

    Quantized layers contribute code, codebook and scale bits; excluded
    layers contribute 16 bits per weight. Biases and norm parameters are
    outside the weight count by convention.
    """
    report = list(report)
    if not report:
        raise UsageError("avg_bits: empty layer report")
    total_bits = sum(layer_stored_bits(e) for e in report)
    total_weights = sum(e.weight_count for e in report)
    return total_bits / total_weights


# ---------------------------------------------------------------------------
# bit packing
# ---------------------------------------------------------------------------

def pack_codes(codes: np.ndarray, bits: int) -> bytes:
    """Little-endian bit packing of codes in (row, group, codebook) order."""
    if bits not in PACKABLE_BITS:
        raise EncodingError(f"packable bit widths are {PACKABLE_BITS}, got {bits}")
    flat = np.ascontiguousarray(codes).reshape(-1)
    if flat.size and int(flat.max()) >= (1 << bits):
        raise EncodingError(f"code {int(flat.max())} does not fit in {bits} bits")
    if flat.size and int(flat.min()) < 0:
        raise EncodingError("negative code index")
    as_bytes = flat.astype(np.uint8)[:, None]
    bit_rows = np.unpackbits(as_bytes, axis=1, bitorder="little")[:, :bits]
    return np.packbits(bit_rows.reshape(-1), bitorder="little").tobytes()


def unpack_codes(data: bytes, d_out: int, n_groups: int, num_codebooks: int, bits: int) -> np.ndarray:
    """Inverse of pack_codes; returns uint16 codes [d_out, n_groups, M]."""
    if bits not in PACKABLE_BITS:
        raise EncodingError(f"packable bit widths are {PACKABLE_BITS}, got {bits}")
    n_codes = d_out * n_groups * num_codebooks
    need_bits = n_codes * bits
    raw = np.frombuffer(data, dtype=np.uint8)
    if raw.size * 8 < need_bits:
        raise EncodingError(f"bitstream holds {raw.size * 8} bits, need {need_bits}")
    bit_rows = np.unpackbits(raw, bitorder="little")[:need_bits].reshape(n_codes, bits)
    vals = np.packbits(bit_rows, axis=1, bitorder="little")[:, 0]
    return vals.astype(np.uint16).reshape(d_out, n_groups, num_codebooks)
