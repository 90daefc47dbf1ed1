"""Grouping, dequantization, LUT equivalence, bit accounting, packing."""

import numpy as np
import pytest

from vqdm import codec
from vqdm.codec import (
    LayerBits,
    QuantConfig,
    QuantizedTensor,
    avg_bits,
    dequantize,
    inverse_reshape,
    lut_matmul,
    pack_codes,
    reshape_for_quant,
    unpack_codes,
)
from vqdm.errors import ConfigError, DimensionError, EncodingError, UsageError


def make_random_q(d_out=6, n_groups=4, m=2, bits=4, g=8, kind="linear",
                  dtype=np.float32, seed=0, scales=None):
    rng = np.random.default_rng(seed)
    cfg = QuantConfig(group_size=g, num_codebooks=m, codebook_bits=bits)
    k = cfg.codebook_size
    codebooks = rng.standard_normal((m, k, g)).astype(dtype)
    codes = rng.integers(0, k, size=(d_out, n_groups, m)).astype(np.uint16)
    if scales is None:
        scales = (0.5 + rng.random(d_out)).astype(dtype)
    if kind == "linear":
        shape = (d_out, n_groups * g)
    else:
        shape = (d_out, n_groups * g // 9, 3, 3)
    return QuantizedTensor(config=cfg, kind=kind, shape=shape,
                           codebooks=codebooks, codes=codes, scales=scales)


# ---------------------------------------------------------------------------
# reshape
# ---------------------------------------------------------------------------

def test_reshape_linear_is_identity():
    w = np.arange(32, dtype=np.float64).reshape(4, 8)
    out = reshape_for_quant(w, "linear", 8)
    assert out.shape == (4, 8)
    assert np.array_equal(out, w)


def test_reshape_conv_1x1_squeezes():
    w = np.random.default_rng(0).standard_normal((2, 8, 1, 1))
    out = reshape_for_quant(w, "conv", 8)
    assert np.array_equal(out, w[:, :, 0, 0])


def test_reshape_conv_column_order_oracle():
    w = np.random.default_rng(1).standard_normal((1, 8, 3, 3))
    out = reshape_for_quant(w, "conv", 8)
    assert out.shape == (1, 72)
    for cin in range(8):
        for i in range(3):
            for j in range(3):
                col = (i * 3 + j) * 8 + cin
                assert out[0, col] == w[0, cin, i, j]


@pytest.mark.parametrize("kind,shape", [("linear", (5, 16)), ("conv", (4, 8, 3, 3))])
def test_reshape_roundtrip(kind, shape):
    w = np.random.default_rng(2).standard_normal(shape)
    mat = reshape_for_quant(w, kind, 8)
    back = inverse_reshape(mat, kind, shape)
    assert np.array_equal(back, w)


def test_reshape_indivisible_rejected():
    with pytest.raises(ConfigError):
        reshape_for_quant(np.zeros((2, 10)), "linear", 8)
    with pytest.raises(ConfigError):
        reshape_for_quant(np.zeros((2, 4, 3, 3)), "conv", 8)
    with pytest.raises(UsageError):
        reshape_for_quant(np.zeros((2, 8)), "bogus", 8)


# ---------------------------------------------------------------------------
# dequantize
# ---------------------------------------------------------------------------

def test_dequantize_single_codeword():
    # degenerate book: both entries hold the same codeword, so every group
    # reconstructs to c regardless of codes (smallest legal k is 2)
    cfg = QuantConfig(group_size=4, num_codebooks=1, codebook_bits=1)
    c = np.array([1.0, -2.0, 3.0, 0.5], dtype=np.float32)
    codebooks = np.stack([np.stack([c, c])])
    codes = np.zeros((3, 2, 1), dtype=np.uint16)
    q = QuantizedTensor(config=cfg, kind="linear", shape=(3, 8),
                        codebooks=codebooks, codes=codes,
                        scales=np.ones(3, dtype=np.float32))
    out = dequantize(q)
    assert np.array_equal(out, np.tile(c, (3, 2)))


def test_dequantize_zero_scales():
    q = make_random_q(scales=np.zeros(6, dtype=np.float32))
    assert np.all(dequantize(q) == 0.0)


def test_dequantize_hand_computed():
    cfg = QuantConfig(group_size=2, num_codebooks=2, codebook_bits=1)
    codebooks = np.array(
        [[[1.0, 2.0], [3.0, 4.0]],      # book 0: codewords a0, a1
         [[10.0, 20.0], [30.0, 40.0]]],  # book 1: codewords b0, b1
        dtype=np.float32)
    codes = np.array([[[0, 1], [1, 0]],
                      [[1, 1], [0, 0]]], dtype=np.uint16)
    scales = np.array([1.0, 2.0], dtype=np.float32)
    q = QuantizedTensor(config=cfg, kind="linear", shape=(2, 4),
                        codebooks=codebooks, codes=codes, scales=scales)
    want = np.array(
        [[1 + 30, 2 + 40, 3 + 10, 4 + 20],
         [2 * (3 + 30), 2 * (4 + 40), 2 * (1 + 10), 2 * (2 + 20)]],
        dtype=np.float32)
    assert np.array_equal(dequantize(q), want)


def test_dequantize_scale_linearity_power_of_two():
    # power-of-two factor keeps float multiplication exact either way
    q1 = make_random_q(seed=7)
    q2 = QuantizedTensor(config=q1.config, kind=q1.kind, shape=q1.shape,
                         codebooks=q1.codebooks.copy(), codes=q1.codes.copy(),
                         scales=4.0 * q1.scales)
    assert np.array_equal(dequantize(q2), 4.0 * dequantize(q1))


def test_quantized_tensor_immutable():
    q = make_random_q()
    with pytest.raises(ValueError):
        q.codebooks[0, 0, 0] = 1.0
    with pytest.raises(ValueError):
        q.codes[0, 0, 0] = 1


def test_quantized_tensor_validation():
    q = make_random_q()
    bad_codes = q.codes.copy()
    bad_codes[0, 0, 0] = q.config.codebook_size  # out of range
    with pytest.raises(EncodingError):
        QuantizedTensor(config=q.config, kind=q.kind, shape=q.shape,
                        codebooks=q.codebooks.copy(), codes=bad_codes,
                        scales=q.scales.copy())


# ---------------------------------------------------------------------------
# LUT matmul
# ---------------------------------------------------------------------------

def test_lut_zero_input():
    q = make_random_q()
    x = np.zeros((q.d_flat, 3), dtype=np.float32)
    assert np.all(lut_matmul(q, x) == 0.0)


def test_lut_degenerate_codebook_ignores_codes():
    cfg = QuantConfig(group_size=4, num_codebooks=1, codebook_bits=1)
    c = np.array([0.5, -1.0, 2.0, 1.5], dtype=np.float64)
    codebooks = np.stack([np.stack([c, c])])
    scales = np.ones(3, dtype=np.float64)
    rng = np.random.default_rng(3)
    x = rng.standard_normal((8, 5))
    outs = []
    for seed in (0, 1):
        codes = np.random.default_rng(seed).integers(0, 2, (3, 2, 1)).astype(np.uint16)
        q = QuantizedTensor(config=cfg, kind="linear", shape=(3, 8),
                            codebooks=codebooks.copy(), codes=codes, scales=scales.copy())
        outs.append(lut_matmul(q, x))
    assert np.array_equal(outs[0], outs[1])


@pytest.mark.parametrize("dtype,tol", [(np.float32, 1e-4), (np.float64, 1e-10)])
def test_lut_matches_dequantize_path(dtype, tol):
    rng = np.random.default_rng(11)
    for seed in range(5):
        q = make_random_q(d_out=12, n_groups=6, m=3, bits=4, dtype=dtype, seed=seed)
        x = rng.standard_normal((q.d_flat, 7)).astype(dtype)
        ref = dequantize(q) @ x
        got = lut_matmul(q, x)
        rel = np.linalg.norm(got - ref) / max(np.linalg.norm(ref), 1e-30)
        assert rel <= tol


def test_lut_shape_mismatch():
    q = make_random_q()
    with pytest.raises(DimensionError):
        lut_matmul(q, np.zeros((q.d_flat + 1, 2), dtype=np.float32))


# ---------------------------------------------------------------------------
# bit accounting
# ---------------------------------------------------------------------------

def _single_layer(m):
    cfg = QuantConfig(group_size=8, num_codebooks=m, codebook_bits=8)
    return [LayerBits(name="fc", weight_count=1024 * 1024, d_out=1024,
                      status="quantized", config=cfg)]


def test_avg_bits_anchor_m4():
    assert avg_bits(_single_layer(4)) == 4.140625


def test_avg_bits_anchor_m3():
    assert avg_bits(_single_layer(3)) == 3.109375


def test_avg_bits_all_excluded():
    report = [LayerBits(name=f"l{i}", weight_count=100 + i, d_out=10, status="excluded")
              for i in range(3)]
    assert avg_bits(report) == 16.0


def test_avg_bits_monotone_in_m_and_bits():
    def bits_for(m, b):
        cfg = QuantConfig(group_size=8, num_codebooks=m, codebook_bits=b)
        rep = [LayerBits(name="a", weight_count=4096 * 512, d_out=512,
                         status="quantized", config=cfg),
               LayerBits(name="x", weight_count=1000, d_out=10, status="excluded")]
        return avg_bits(rep)

    for b in (4, 6, 8):
        vals = [bits_for(m, b) for m in (1, 2, 3, 4)]
        assert all(v2 > v1 for v1, v2 in zip(vals, vals[1:]))
    for m in (1, 2, 4):
        vals = [bits_for(m, b) for b in (4, 6, 8)]
        assert all(v2 > v1 for v1, v2 in zip(vals, vals[1:]))


def test_avg_bits_empty_report():
    with pytest.raises(UsageError):
        avg_bits([])


# ---------------------------------------------------------------------------
# packing
# ---------------------------------------------------------------------------

def test_pack_b8_is_bytes():
    codes = np.arange(12, dtype=np.uint16).reshape(2, 3, 2)
    blob = pack_codes(codes, 8)
    assert blob == bytes(range(12))
    assert np.array_equal(unpack_codes(blob, 2, 3, 2, 8), codes)


def test_pack_b4_hand_layout():
    codes = np.array([1, 2, 3, 4], dtype=np.uint16).reshape(1, 2, 2)
    assert pack_codes(codes, 4) == bytes([0x21, 0x43])


@pytest.mark.parametrize("bits", [4, 6, 8])
def test_pack_roundtrip(bits):
    rng = np.random.default_rng(bits)
    codes = rng.integers(0, 1 << bits, size=(5, 7, 3)).astype(np.uint16)
    blob = pack_codes(codes, bits)
    assert np.array_equal(unpack_codes(blob, 5, 7, 3, bits), codes)


def test_pack_rejects_overflow():
    with pytest.raises(EncodingError):
        pack_codes(np.array([[[16]]], dtype=np.uint16), 4)
    with pytest.raises(EncodingError):
        pack_codes(np.array([[[0]]], dtype=np.uint16), 5)


def test_unpack_rejects_short_stream():
    with pytest.raises(EncodingError):
        unpack_codes(b"\x00", 2, 2, 2, 8)
