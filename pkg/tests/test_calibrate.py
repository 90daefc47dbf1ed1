"""Calibration engine: objective identities, k-means, beam search, recovery."""

import numpy as np
import pytest

from vqdm import tensor as T
from vqdm.calibrate import (
    HessianStats,
    LayerCalibJob,
    beam_search_update,
    calib_loss,
    calib_loss_grads,
    init_codebooks_residual_kmeans,
    kmeans,
    quantize_layer,
    refit_scales_closed_form,
    row_losses,
    train_codebooks_scales_adam,
    uniform_quantize_layer,
)
from vqdm.codec import QuantConfig, dequantize_grouped, reconstruct_grouped
from vqdm.errors import ConfigError, DimensionError, UsageError
from vqdm.seeding import derive_rng
from vqdm.tensor import conv_weight_matrix, unfold_patches


def random_psd(dim, rng, n_cols=None):
    x = rng.standard_normal((dim, n_cols or 2 * dim))
    h = x @ x.T
    return 0.5 * (h + h.T)


# ---------------------------------------------------------------------------
# Hessian accumulation
# ---------------------------------------------------------------------------

def test_hessian_single_column():
    stats = HessianStats(2)
    stats.accumulate(np.array([[1.0], [0.0]]))
    assert np.array_equal(stats.H, [[1.0, 0.0], [0.0, 0.0]])
    assert stats.n_samples == 1


def test_hessian_streaming_equals_one_shot():
    rng = np.random.default_rng(0)
    x1, x2 = rng.standard_normal((6, 11)), rng.standard_normal((6, 5))
    streamed = HessianStats(6)
    streamed.accumulate(x1)
    streamed.accumulate(x2)
    oneshot = HessianStats(6)
    oneshot.accumulate(np.concatenate([x1, x2], axis=1))
    denom = max(np.abs(oneshot.H).max(), 1.0)
    assert np.abs(streamed.H - oneshot.H).max() / denom < 1e-12
    assert streamed.n_samples == oneshot.n_samples == 16


def test_hessian_symmetry_and_psd():
    rng = np.random.default_rng(1)
    stats = HessianStats(8)
    for _ in range(3):
        stats.accumulate(rng.standard_normal((8, 7)))
    assert np.array_equal(stats.H, stats.H.T)
    eig = np.linalg.eigvalsh(stats.H)
    assert eig.min() >= -1e-8 * np.trace(stats.H) / 8


def test_hessian_conv_layout_matches_conv2d():
    # unfolded patches dotted with reshaped weights reproduce conv exactly
    rng = np.random.default_rng(2)
    x = rng.standard_normal((2, 8, 6, 6))
    w = rng.standard_normal((3, 8, 3, 3))
    cols = unfold_patches(x, 3, 3, 1, 1)            # [N, Ho, Wo, d_flat]
    wmat = conv_weight_matrix(w)                    # [Cout, d_flat]
    via_cols = np.einsum("nhwd,cd->nchw", cols, wmat)
    out = T.conv2d(T.Tensor(x), T.Tensor(w), stride=1, pad=1).data
    assert np.allclose(via_cols, out, atol=1e-12)


def test_hessian_guards():
    stats = HessianStats(4)
    with pytest.raises(DimensionError):
        stats.accumulate(np.zeros((5, 2)))
    stats.seal()
    with pytest.raises(UsageError):
        stats.accumulate(np.zeros((4, 2)))


# ---------------------------------------------------------------------------
# objective
# ---------------------------------------------------------------------------

def test_calib_loss_zero_at_exact():
    rng = np.random.default_rng(3)
    w = rng.standard_normal((4, 8))
    h = random_psd(8, rng)
    assert calib_loss(w, w.copy(), np.ones(4), h) == 0.0


def test_calib_loss_identity_hessian_is_frobenius():
    rng = np.random.default_rng(4)
    w, wq = rng.standard_normal((5, 6)), rng.standard_normal((5, 6))
    got = calib_loss(w, wq, np.ones(5), np.eye(6))
    want = np.sum((w - wq) ** 2)
    assert abs(got - want) < 1e-12 * want


def test_calib_loss_matches_direct_objective():
    rng = np.random.default_rng(5)
    for _ in range(10):
        d_out = int(rng.integers(2, 12))
        d_flat = int(rng.integers(2, 16))
        n = int(rng.integers(4, 40))
        w = rng.standard_normal((d_out, d_flat))
        wq = rng.standard_normal((d_out, d_flat))
        s = 0.5 + rng.random(d_out)
        x = rng.standard_normal((d_flat, n))
        direct = np.sum(((w - s[:, None] * wq) @ x) ** 2)
        hess = x @ x.T
        got = calib_loss(w, wq, s, 0.5 * (hess + hess.T))
        assert abs(got - direct) / direct <= 1e-10


def test_calib_loss_row_decomposition():
    rng = np.random.default_rng(6)
    w, wq = rng.standard_normal((7, 10)), rng.standard_normal((7, 10))
    s = 0.5 + rng.random(7)
    h = random_psd(10, rng)
    rows = row_losses(w, wq, s, h)
    assert abs(rows.sum() - calib_loss(w, wq, s, h)) <= 1e-10 * abs(rows.sum())


# ---------------------------------------------------------------------------
# k-means
# ---------------------------------------------------------------------------

def test_kmeans_exact_when_points_equal_k():
    rng = derive_rng(0, "km")
    pts = np.array([[0.0, 0.0], [10.0, 0.0], [0.0, 10.0], [7.0, 7.0]])
    cent, assign = kmeans(pts, 4, 10, rng)
    sse = np.sum((pts - cent[assign]) ** 2)
    assert sse == 0.0


def test_kmeans_two_separated_clusters():
    rng = derive_rng(1, "km")
    pts = np.concatenate([
        -10.0 + 0.1 * rng.standard_normal((20, 1)),
        10.0 + 0.1 * rng.standard_normal((20, 1)),
    ])
    cent, assign = kmeans(pts, 2, 20, rng)
    assert np.allclose(sorted(cent.ravel()), [-10, 10], atol=0.2)
    # each point lands with its nearest centroid
    d = np.abs(pts - cent[assign])
    d_other = np.abs(pts - cent[1 - assign])
    assert np.all(d <= d_other)


def test_kmeans_k1_is_mean():
    rng = derive_rng(2, "km")
    pts = rng.standard_normal((30, 3))
    cent, assign = kmeans(pts, 1, 5, rng)
    assert np.allclose(cent[0], pts.mean(axis=0), atol=1e-12)
    sse = np.sum((pts - cent[0]) ** 2)
    assert abs(sse - pts.var(axis=0).sum() * 30) < 1e-9


def test_kmeans_sse_nonincreasing_per_iteration():
    pts = np.random.default_rng(7).standard_normal((60, 4))
    sses = []
    for iters in range(1, 8):
        cent, assign = kmeans(pts, 5, iters, derive_rng(3, "km"))
        sses.append(np.sum((pts - cent[assign]) ** 2))
    assert all(b <= a + 1e-9 for a, b in zip(sses, sses[1:]))


def test_kmeans_more_clusters_than_points():
    rng = derive_rng(4, "km")
    pts = np.array([[0.0], [1.0], [5.0]])
    cent, assign = kmeans(pts, 8, 10, rng)
    assert assign.shape == (3,)
    assert np.all(assign < 8)
    assert np.sum((pts - cent[assign]) ** 2) == 0.0


def test_kmeans_rejects_bad_k():
    with pytest.raises(UsageError):
        kmeans(np.zeros((3, 2)), 0, 5, derive_rng(0, "km"))


# ---------------------------------------------------------------------------
# residual k-means init
# ---------------------------------------------------------------------------

def test_init_exact_with_k_distinct_groups():
    rng = np.random.default_rng(8)
    cfg = QuantConfig(group_size=4, num_codebooks=1, codebook_bits=2, seed=0)
    vocab = 10.0 * rng.standard_normal((4, 4))
    picks = rng.integers(0, 4, size=24)
    w = vocab[picks].reshape(4, 24)
    cb, codes, s = init_codebooks_residual_kmeans(w, cfg, derive_rng(0, "init"))
    rec = reconstruct_grouped(cb, codes)
    assert np.max(np.abs(rec - w)) < 1e-10
    assert np.array_equal(s, np.ones(4))


def test_init_two_stage_exact_recovery():
    # residuals after stage 1 take exactly k distinct values by construction
    rng = np.random.default_rng(9)
    g, k = 4, 4
    base = np.array([30.0, 90.0, 150.0, 210.0])[:, None] + 0.3 * rng.standard_normal((k, g))
    detail = np.array([-2.0, -0.7, 0.7, 2.0])[:, None] + 0.05 * rng.standard_normal((k, g))
    pairs = [(a, b) for a in range(k) for b in range(k)]
    rows = []
    for r in range(8):
        groups = [base[a] + detail[b] for a, b in pairs[:: 2] + pairs[1:: 2]]
        rows.append(np.concatenate(groups))
    w = np.stack(rows)
    cfg = QuantConfig(group_size=g, num_codebooks=2, codebook_bits=2, seed=0)
    cb, codes, _ = init_codebooks_residual_kmeans(w, cfg, derive_rng(1, "init"))
    rec = reconstruct_grouped(cb, codes)
    assert np.max(np.abs(rec - w)) < 1e-9


def test_init_error_nonincreasing_in_codebooks():
    for seed in range(100):
        w = np.random.default_rng(seed).standard_normal((6, 24))
        errs = []
        for m in (1, 2):
            cfg = QuantConfig(group_size=4, num_codebooks=m, codebook_bits=2, seed=seed)
            cb, codes, _ = init_codebooks_residual_kmeans(w, cfg, derive_rng(seed, "init"))
            errs.append(np.sum((reconstruct_grouped(cb, codes) - w) ** 2))
        assert errs[1] <= errs[0] + 1e-12


# ---------------------------------------------------------------------------
# beam search
# ---------------------------------------------------------------------------

def random_instance(seed, d_out=6, n_groups=3, g=4, m=2, bits=2):
    rng = np.random.default_rng(seed)
    cfg = QuantConfig(group_size=g, num_codebooks=m, codebook_bits=bits, seed=seed)
    w = rng.standard_normal((d_out, n_groups * g))
    h = random_psd(n_groups * g, rng)
    cb = rng.standard_normal((m, cfg.codebook_size, g))
    codes = rng.integers(0, cfg.codebook_size, (d_out, n_groups, m)).astype(np.uint16)
    s = 0.5 + rng.random(d_out)
    return w, h, cb, codes, s


def test_beam_keeps_optimal_codes():
    rng = np.random.default_rng(10)
    cfg = QuantConfig(group_size=4, num_codebooks=1, codebook_bits=2)
    cb = np.stack([10.0 * rng.standard_normal((4, 4))])
    codes = rng.integers(0, 4, (5, 3, 1)).astype(np.uint16)
    w = reconstruct_grouped(cb, codes)
    h = random_psd(12, rng)
    out = beam_search_update(w, h, cb, codes, np.ones(5), beam_width=2)
    assert np.array_equal(out, codes)
    assert calib_loss(w, reconstruct_grouped(cb, out), np.ones(5), h) == 0.0


def test_beam_identity_hessian_is_nearest_codeword():
    rng = np.random.default_rng(11)
    g, k = 4, 8
    cb = np.stack([rng.standard_normal((k, g))])
    w = rng.standard_normal((7, 5 * g))
    codes = rng.integers(0, k, (7, 5, 1)).astype(np.uint16)
    got = beam_search_update(w, np.eye(5 * g), cb, codes, np.ones(7), beam_width=3)
    groups = w.reshape(7, 5, g)
    d2 = ((groups[:, :, None, :] - cb[0][None, None]) ** 2).sum(axis=3)
    want = d2.argmin(axis=2)
    assert np.array_equal(got[:, :, 0], want)


def test_beam_matches_exhaustive_single_group():
    for seed in range(10):
        w, h, cb, codes, s = random_instance(seed, d_out=5, n_groups=1, g=4, m=2, bits=2)
        out = beam_search_update(w, h, cb, codes, s, beam_width=4)
        got = row_losses(w, reconstruct_grouped(cb, out), s, h)
        k = cb.shape[1]
        best = np.full(5, np.inf)
        for c1 in range(k):
            for c2 in range(k):
                rec = (cb[0][c1] + cb[1][c2])[None, :].repeat(5, axis=0)
                best = np.minimum(best, row_losses(w, rec, s, h))
        assert np.all(np.abs(got - best) <= 1e-10 * np.maximum(best, 1e-30))


def test_beam_never_increases_loss():
    for seed in range(25):
        w, h, cb, codes, s = random_instance(seed)
        before = calib_loss(w, reconstruct_grouped(cb, codes), s, h)
        out = beam_search_update(w, h, cb, codes, s, beam_width=2)
        after = calib_loss(w, reconstruct_grouped(cb, out), s, h)
        assert after <= before + 1e-12 * max(before, 1.0)


def test_beam_rows_are_independent():
    w, h, cb, codes, s = random_instance(42)
    out_full = beam_search_update(w, h, cb, codes, s, beam_width=2)
    w2 = w.copy()
    w2[0] += 5.0  # perturb one row only
    out_perturbed = beam_search_update(w2, h, cb, codes, s, beam_width=2)
    assert np.array_equal(out_full[1:], out_perturbed[1:])


# ---------------------------------------------------------------------------
# codebook/scale training and scale refit
# ---------------------------------------------------------------------------

def test_train_fixed_point_when_exact():
    rng = np.random.default_rng(12)
    cfg = QuantConfig(group_size=4, num_codebooks=1, codebook_bits=2)
    cb = np.stack([rng.standard_normal((4, 4))])
    codes = rng.integers(0, 4, (3, 2, 1)).astype(np.uint16)
    w = reconstruct_grouped(cb, codes)
    h = random_psd(8, rng)
    cb2, s2, loss = train_codebooks_scales_adam(w, h, cb, codes, np.ones(3), steps=5, lr=1e-3)
    assert loss == 0.0
    assert np.array_equal(cb2, cb)
    assert np.array_equal(s2, np.ones(3))


def test_calib_gradients_match_finite_differences():
    w, h, cb, codes, s = random_instance(13, d_out=2, n_groups=2, g=2, m=2, bits=1)
    loss0, d_cb, d_s = calib_loss_grads(w, h, cb, codes, s)

    def loss_at(cb_v, s_v):
        return calib_loss(w, reconstruct_grouped(cb_v, codes), s_v, h)

    eps = 1e-5
    num_cb = np.zeros_like(cb)
    for idx in np.ndindex(cb.shape):
        cb_p, cb_m = cb.copy(), cb.copy()
        cb_p[idx] += eps
        cb_m[idx] -= eps
        num_cb[idx] = (loss_at(cb_p, s) - loss_at(cb_m, s)) / (2 * eps)
    rel = np.linalg.norm(num_cb - d_cb) / max(np.linalg.norm(num_cb), 1e-12)
    assert rel <= 1e-4
    num_s = np.zeros_like(s)
    for i in range(s.size):
        s_p, s_m = s.copy(), s.copy()
        s_p[i] += eps
        s_m[i] -= eps
        num_s[i] = (loss_at(cb, s_p) - loss_at(cb, s_m)) / (2 * eps)
    rel_s = np.linalg.norm(num_s - d_s) / max(np.linalg.norm(num_s), 1e-12)
    assert rel_s <= 1e-4


def test_train_decreases_loss():
    w, h, cb, codes, s = random_instance(14)
    before = calib_loss(w, reconstruct_grouped(cb, codes), s, h)
    _, _, after = train_codebooks_scales_adam(w, h, cb, codes, s, steps=200, lr=1e-2)
    assert after < before


def test_refit_scales_identity_case():
    rng = np.random.default_rng(15)
    w = rng.standard_normal((4, 8))
    cfg = QuantConfig(group_size=8, num_codebooks=1, codebook_bits=2)
    # craft a codebook whose rows reproduce w exactly, one code per row
    cb = np.stack([w])
    codes = np.arange(4, dtype=np.uint16).reshape(4, 1, 1)
    h = random_psd(8, rng)
    s = refit_scales_closed_form(w, h, cb, codes)
    assert np.allclose(s, 1.0, atol=1e-12)


def test_refit_scales_half_when_doubled():
    rng = np.random.default_rng(16)
    w = rng.standard_normal((3, 4))
    cb = np.stack([2.0 * w])
    codes = np.arange(3, dtype=np.uint16).reshape(3, 1, 1)
    s = refit_scales_closed_form(w, np.eye(4), cb, codes)
    assert np.allclose(s, 0.5, atol=1e-12)


def test_refit_scales_is_optimal_and_stationary():
    w, h, cb, codes, _ = random_instance(17)
    s_star = refit_scales_closed_form(w, h, cb, codes)
    rec = reconstruct_grouped(cb, codes)
    loss_star = calib_loss(w, rec, s_star, h)
    rng = np.random.default_rng(18)
    for _ in range(100):
        s_probe = s_star + rng.standard_normal(s_star.size)
        assert loss_star <= calib_loss(w, rec, s_probe, h) + 1e-9
    _, _, d_s = calib_loss_grads(w, h, cb, codes, s_star)
    assert np.max(np.abs(d_s)) <= 1e-8 * max(1.0, loss_star)


# ---------------------------------------------------------------------------
# layer driver
# ---------------------------------------------------------------------------

def make_planted_job(seed, d_out=8, n_groups=8, g=4, scales_differ=True):
    """Exactly-representable weights: two separated base codebooks, balanced
    code composition, and (optionally) two per-row output scales that the
    code assignment can absorb."""
    rng = np.random.default_rng(seed)
    k = 4
    base = np.array([30.0, 90.0])[:, None] + 0.3 * rng.standard_normal((2, g))
    detail = np.array([-2.0, 2.0])[:, None] + 0.05 * rng.standard_normal((2, g))
    row_scales = np.where(np.arange(d_out) % 2 == 0, 1.0, 2.0) if scales_differ \
        else np.ones(d_out)
    combos = [(a, b) for a in range(2) for b in range(2)]
    rows = []
    for r in range(d_out):
        picks = (combos * (n_groups // len(combos)))
        perm = rng.permutation(n_groups)
        groups = [base[picks[i][0]] + detail[picks[i][1]] for i in perm]
        rows.append(row_scales[r] * np.concatenate(groups))
    w = np.stack(rows)
    stats = HessianStats(n_groups * g)
    stats.accumulate(rng.standard_normal((n_groups * g, 3 * n_groups * g)))
    cfg = QuantConfig(group_size=g, num_codebooks=2, codebook_bits=2,
                      beam_width=4, seed=seed)
    return LayerCalibJob(name=f"planted{seed}", weight=w, hessian=stats, config=cfg)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_quantize_layer_recovers_planted_solution(seed):
    q, record = quantize_layer(make_planted_job(seed))
    assert record["rel_loss"] <= 1e-8


def test_quantize_layer_zero_iterations_is_kmeans_init():
    rng = np.random.default_rng(19)
    w = rng.standard_normal((4, 16))
    stats = HessianStats(16)
    stats.accumulate(rng.standard_normal((16, 40)))
    for cfg in (QuantConfig(group_size=4, num_codebooks=2, codebook_bits=2,
                            max_outer_iters=0, seed=3),
                QuantConfig(group_size=4, num_codebooks=2, codebook_bits=2,
                            loss_tol=np.inf, seed=3)):
        job = LayerCalibJob(name="init-only", weight=w, hessian=stats, config=cfg)
        q, record = quantize_layer(job)
        cb, codes, s = init_codebooks_residual_kmeans(
            w, cfg, derive_rng(cfg.seed, "layer", "init-only"))
        assert record["outer_iters"] == 0
        assert np.array_equal(q.codes, codes)
        assert np.array_equal(q.codebooks, cb.astype(np.float32))
        assert np.array_equal(q.scales, np.ones(4, dtype=np.float32))


def test_quantize_layer_trace_nonincreasing():
    for seed in range(20):
        rng = np.random.default_rng(seed)
        w = rng.standard_normal((6, 16))
        stats = HessianStats(16)
        stats.accumulate(rng.standard_normal((16, 48)))
        cfg = QuantConfig(group_size=4, num_codebooks=2, codebook_bits=2,
                          max_outer_iters=3, adam_steps=20, loss_tol=1e-12, seed=seed)
        job = LayerCalibJob(name=f"rand{seed}", weight=w, hessian=stats, config=cfg)
        q, record = quantize_layer(job)
        trace = record["loss_trace"]
        assert all(b <= a + 1e-9 * max(abs(a), 1.0) for a, b in zip(trace, trace[1:]))
        assert record["final_loss"] <= record["init_loss"] + 1e-12


def test_quantize_layer_deterministic():
    job = make_planted_job(5)
    q1, _ = quantize_layer(job)
    q2, _ = quantize_layer(make_planted_job(5))
    assert np.array_equal(q1.codes, q2.codes)
    assert np.array_equal(q1.codebooks, q2.codebooks)
    assert np.array_equal(q1.scales, q2.scales)


def test_quantize_layer_result_dequantizes():
    q, _ = quantize_layer(make_planted_job(6))
    w = make_planted_job(6).weight
    rel = np.linalg.norm(dequantize_grouped(q) - w) / np.linalg.norm(w)
    assert rel < 1e-3  # float32 storage of an exact recovery


# ---------------------------------------------------------------------------
# uniform baseline
# ---------------------------------------------------------------------------

def test_uniform_exact_on_grid_values():
    rng = np.random.default_rng(20)
    bits = 3
    levels = np.arange(1 << bits, dtype=np.float64)
    w = np.stack([
        -1.0 + 2.0 / 7.0 * levels[rng.permutation(8)],
        3.0 + 0.5 * levels[rng.permutation(8)],
    ])
    out = uniform_quantize_layer(w, bits)
    assert np.allclose(out, w, atol=1e-12)


def test_uniform_exact_on_constant():
    w = np.full((3, 5), 2.5)
    assert np.array_equal(uniform_quantize_layer(w, 4), w)


def test_uniform_error_bound():
    rng = np.random.default_rng(21)
    w = rng.standard_normal((6, 50))
    out = uniform_quantize_layer(w, 8)
    step = (w.max(axis=1) - w.min(axis=1)) / (2 ** 8 - 1)
    err = np.abs(out - w).max(axis=1)
    assert np.all(err <= step / 2 + 1e-12)


def test_uniform_rejects_bad_bits():
    with pytest.raises(ConfigError):
        uniform_quantize_layer(np.zeros((2, 2)), 1)
