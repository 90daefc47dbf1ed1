"""Layer-wise quantization under the activation-weighted objective.

The layer objective ||W X - W_q X||^2 is evaluated through the streamed
second-moment matrix H = sum X X^T, which makes the loss a sum of
independent per-row quadratic forms (w - s q) H (w - s q)^T. Codebooks and
scales descend on that loss with Adam while codes are frozen; codes are
then reassigned by a beam search that scores candidates exactly through H.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .codec import QuantConfig, QuantizedTensor, reconstruct_grouped
from .errors import ConfigError, DimensionError, NumericError, UsageError
from .optim import AdamState, adam_step
from .seeding import derive_rng


class HessianStats:
    """Streamed accumulation of X X^T over activation columns."""

    def __init__(self, dim: int):
        self.H = np.zeros((dim, dim), dtype=np.float64)
        self.n_samples = 0
        self._sealed = False

    @property
    def dim(self) -> int:
        return self.H.shape[0]

    def accumulate(self, x_batch: np.ndarray) -> None:
        """Add one batch of activation columns [dim, n]."""
        if self._sealed:
            raise UsageError("HessianStats is sealed")
        x = np.asarray(x_batch, dtype=np.float64)
        if x.ndim != 2 or x.shape[0] != self.dim:
            raise DimensionError(f"activation batch {x.shape}, expected ({self.dim}, n)")
        prod = x @ x.T
        self.H += 0.5 * (prod + prod.T)  # keep exact symmetry
        self.n_samples += x.shape[1]

    def seal(self) -> "HessianStats":
        self._sealed = True
        self.H.setflags(write=False)
        return self


@dataclass
class LayerCalibJob:
    """Everything needed to quantize one layer independently."""

    name: str
    weight: np.ndarray        # grouped [d_out, d_flat]
    hessian: HessianStats
    config: QuantConfig
    kind: str = "linear"      # original tensor kind for the result
    shape: tuple = None       # original dense shape

    def __post_init__(self):
        if self.weight.shape[1] != self.hessian.dim:
            raise DimensionError(
                f"{self.name}: weight columns {self.weight.shape[1]} "
                f"vs Hessian dim {self.hessian.dim}"
            )
        if self.shape is None:
            self.shape = tuple(self.weight.shape)


# ---------------------------------------------------------------------------
# objective
# ---------------------------------------------------------------------------

def row_losses(w, rec, scales, hess):
    """Per-row quadratic forms r H r^T with r = w - diag(scales) rec."""
    err = w - scales[:, None] * rec
    return np.einsum("ij,ij->i", err @ hess, err)


def calib_loss(w, rec, scales, hess) -> float:
    """<(W - W_q) H, (W - W_q)>_F with W_q = diag(scales) @ rec."""
    return float(row_losses(w, rec, scales, hess).sum())


def calib_loss_grads(w, hess, codebooks, codes, scales):
    """Loss plus analytic gradients w.r.t. codebooks and scales.

    dL/dW_q = -2 (W - W_q) H, chained into codebook entries through the
    code-assignment structure and into scales through the reconstruction.
    """
    m_books, _, g = codebooks.shape
    d_out = w.shape[0]
    rec = reconstruct_grouped(codebooks, codes)
    err = w - scales[:, None] * rec
    eh = err @ hess
    loss = float(np.einsum("ij,ij->", eh, err))
    d_scales = -2.0 * np.einsum("ij,ij->i", eh, rec)
    d_rec = (-2.0 * scales[:, None] * eh).reshape(d_out, -1, g)
    d_codebooks = np.zeros_like(codebooks)
    for m in range(m_books):
        np.add.at(d_codebooks[m], codes[:, :, m], d_rec)
    return loss, d_codebooks, d_scales


# ---------------------------------------------------------------------------
# k-means
# ---------------------------------------------------------------------------

def _maximin_init(pts: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """Farthest-first centroid seeding: covers separated clusters by design."""
    n = pts.shape[0]
    centroids = np.empty((k, pts.shape[1]), dtype=pts.dtype)
    centroids[0] = pts[int(rng.integers(n))]
    min_d2 = np.einsum("ij,ij->i", pts - centroids[0], pts - centroids[0])
    for c in range(1, k):
        centroids[c] = pts[int(np.argmax(min_d2))]
        d2 = np.einsum("ij,ij->i", pts - centroids[c], pts - centroids[c])
        np.minimum(min_d2, d2, out=min_d2)
    return centroids


def kmeans(points: np.ndarray, k: int, iters: int, rng: np.random.Generator):
    """Lloyd iterations with deterministic ties and empty-cluster reseeding.

    Centroids are seeded farthest-first from a random starting point. Ties
    in assignment go to the lowest centroid index; a cluster left empty is
    reseeded to the point farthest from its previous centroid (distinct
    points when several clusters empty out at once).
    """
    if k <= 0:
        raise UsageError(f"kmeans: k must be positive, got {k}")
    pts = np.asarray(points, dtype=np.float64)
    n = pts.shape[0]
    if n == 0:
        raise UsageError("kmeans: no points")
    centroids = _maximin_init(pts, k, rng)
    pp = np.einsum("ij,ij->i", pts, pts)
    assign = None
    for _ in range(max(iters, 1)):
        d2 = pp[:, None] + np.einsum("ij,ij->i", centroids, centroids)[None, :] \
            - 2.0 * (pts @ centroids.T)
        new_assign = d2.argmin(axis=1)
        counts = np.bincount(new_assign, minlength=k)
        sums = np.zeros_like(centroids)
        np.add.at(sums, new_assign, pts)
        nonempty = counts > 0
        centroids[nonempty] = sums[nonempty] / counts[nonempty, None]
        taken = set()
        for c in np.flatnonzero(~nonempty):
            order = np.argsort(-d2[:, c], kind="stable")
            pick = next((int(i) for i in order if int(i) not in taken), int(order[0]))
            taken.add(pick)
            centroids[c] = pts[pick]
        if assign is not None and np.array_equal(assign, new_assign):
            assign = new_assign
            break
        assign = new_assign
    d2 = pp[:, None] + np.einsum("ij,ij->i", centroids, centroids)[None, :] \
        - 2.0 * (pts @ centroids.T)
    assign = d2.argmin(axis=1)
    return centroids, assign


def init_codebooks_residual_kmeans(w_grouped: np.ndarray, config: QuantConfig,
                                   rng: np.random.Generator):
    """Stage-wise k-means on residuals; returns (codebooks, codes, unit scales)."""
    g, m_books, k = config.group_size, config.num_codebooks, config.codebook_size
    d_out, d_flat = w_grouped.shape
    if d_flat % g:
        raise ConfigError(f"flattened dim {d_flat} not divisible by group size {g}")
    n_groups = d_flat // g
    residual = np.asarray(w_grouped, dtype=np.float64).reshape(d_out * n_groups, g).copy()
    codebooks = np.zeros((m_books, k, g), dtype=np.float64)
    codes = np.zeros((d_out, n_groups, m_books), dtype=np.uint16)
    for m in range(m_books):
        centroids, assign = kmeans(residual, k, config.kmeans_iters, rng)
        codebooks[m] = centroids
        codes[:, :, m] = assign.reshape(d_out, n_groups).astype(np.uint16)
        residual -= centroids[assign]
    return codebooks, codes, np.ones(d_out, dtype=np.float64)


# ---------------------------------------------------------------------------
# beam search
# ---------------------------------------------------------------------------

def beam_search_update(w, hess, codebooks, codes, scales, beam_width: int):
    """One left-to-right sweep of beam-search code reassignment.

    Rows are independent and processed together. For each group position and
    each codebook in turn, every hypothesis is expanded with all k codewords
    and scored by the exact row loss; the incumbent assignment is one of the
    expansions, and a final exact comparison keeps the incumbent wherever the
    sweep did not strictly help, so the loss never increases.
    """
    w = np.asarray(w, dtype=np.float64)
    hess = np.asarray(hess, dtype=np.float64)
    cb = np.asarray(codebooks, dtype=np.float64)
    s = np.asarray(scales, dtype=np.float64)
    n_rows, d_flat = w.shape
    m_books, k, g = cb.shape
    n_groups = d_flat // g
    width = int(beam_width)
    if width < 1:
        raise UsageError(f"beam width must be >= 1, got {width}")

    wh = w @ hess                                  # [R, D]
    whw = np.einsum("ij,ij->i", wh, w)             # [R]
    rec0 = reconstruct_grouped(cb, codes)          # [R, D]
    incumbent_loss = row_losses(w, rec0, s, hess)

    # hypothesis state; the beam grows from the single incumbent
    codes_b = codes[:, None].astype(np.int64)      # [R, b, P, M]
    hq = (rec0 @ hess)[:, None]                    # [R, b, D]
    qhq = np.einsum("ij,ij->i", rec0 @ hess, rec0)[:, None]
    whq = np.einsum("ij,ij->i", wh, rec0)[:, None]
    score = whw[:, None] - 2.0 * s[:, None] * whq + (s ** 2)[:, None] * qhq

    s_col = s[:, None, None]
    for p in range(n_groups):
        sl = slice(p * g, (p + 1) * g)
        h_pp = hess[sl, sl]
        h_blk = hess[sl, :]
        for m in range(m_books):
            b = codes_b.shape[1]
            u_old = cb[m][codes_b[:, :, p, m]]                       # [R, b, g]
            delta = cb[m][None, None] - u_old[:, :, None, :]         # [R, b, k, g]
            qhd = np.einsum("rbkg,rbg->rbk", delta, hq[:, :, sl])
            dh = delta.reshape(-1, g) @ h_pp
            dhd = np.einsum("ij,ij->i", dh, delta.reshape(-1, g)).reshape(n_rows, b, k)
            whd = np.einsum("rbkg,rg->rbk", delta, wh[:, sl])
            cand = (score[:, :, None]
                    + (s_col ** 2) * (2.0 * qhd + dhd)
                    - 2.0 * s_col * whd).reshape(n_rows, b * k)
            keep = min(width, b * k)
            sel = np.argsort(cand, axis=1, kind="stable")[:, :keep]  # [R, keep]
            parent = sel // k
            new_code = sel % k
            score = np.take_along_axis(cand, sel, axis=1)
            codes_b = np.take_along_axis(
                codes_b, parent[:, :, None, None], axis=1
            ).copy()
            codes_b[:, :, p, m] = new_code
            delta_sel = np.take_along_axis(
                delta.reshape(n_rows, b * k, g), sel[:, :, None], axis=1
            )
            hq = np.take_along_axis(hq, parent[:, :, None], axis=1) \
                + delta_sel @ h_blk

    best = codes_b[:, 0].astype(np.uint16)          # stable sort: slot 0 is best
    rec_best = reconstruct_grouped(cb, best)
    best_loss = row_losses(w, rec_best, s, hess)
    worse = best_loss > incumbent_loss               # exact guard per row
    if np.any(worse):
        best[worse] = codes[worse]
    return best


# ---------------------------------------------------------------------------
# codebook / scale training
# ---------------------------------------------------------------------------

def train_codebooks_scales_adam(w, hess, codebooks, codes, scales,
                                steps: int, lr: float):
    """Adam descent on codebooks and scales with codes frozen.

    Returns the best iterate seen (including the starting point), so the
    reported loss never exceeds the entry loss.
    """
    cb = np.asarray(codebooks, dtype=np.float64).copy()
    s = np.asarray(scales, dtype=np.float64).copy()
    state = AdamState(lr=lr)
    best_loss = None
    best = (cb.copy(), s.copy())
    for _ in range(steps):
        loss, d_cb, d_s = calib_loss_grads(w, hess, cb, codes, s)
        if best_loss is None or loss < best_loss:
            best_loss = loss
            best = (cb.copy(), s.copy())
        adam_step([cb, s], [d_cb, d_s], state)
    final_loss = calib_loss(w, reconstruct_grouped(cb, codes), s, hess)
    if best_loss is None or final_loss < best_loss:
        best_loss = final_loss
        best = (cb, s)
    return best[0], best[1], best_loss


def refit_scales_closed_form(w, hess, codebooks, codes):
    """Per-row least-squares optimum of the output scale.

    s*_r = (w_r H q_r^T) / (q_r H q_r^T); rows whose reconstruction is
    negligible under H fall back to scale 1.
    """
    rec = reconstruct_grouped(codebooks, codes)
    hrec = rec @ hess
    num = np.einsum("ij,ij->i", np.asarray(w, dtype=np.float64), hrec)
    den = np.einsum("ij,ij->i", rec, hrec)
    qq = np.einsum("ij,ij->i", rec, rec)
    out = np.ones(rec.shape[0], dtype=np.float64)
    ok = den > 1e-12 * qq
    out[ok] = num[ok] / den[ok]
    return out


# ---------------------------------------------------------------------------
# layer driver
# ---------------------------------------------------------------------------

def quantize_layer(job: LayerCalibJob):
    """Alternating optimization until the relative loss target is met.

    Returns (QuantizedTensor, record) where the record carries the per-layer
    calibration trace. Deterministic given the config seed and layer name.
    """
    t0 = time.perf_counter()
    cfg = job.config
    w = np.asarray(job.weight, dtype=np.float64)
    hess = np.asarray(job.hessian.H, dtype=np.float64)
    rng = derive_rng(cfg.seed, "layer", job.name)

    cb, codes, s = init_codebooks_residual_kmeans(w, cfg, rng)
    base = float(np.einsum("ij,ij->", w @ hess, w))
    norm = base if base > 0.0 else 1.0
    loss = calib_loss(w, reconstruct_grouped(cb, codes), s, hess)
    init_loss = loss
    best = (loss, cb, codes, s)

    def consider(loss_now, cb_now, codes_now, s_now):
        nonlocal best
        if loss_now < best[0]:
            best = (loss_now, cb_now, codes_now, s_now)

    outer = 0
    trace = [loss]
    while loss / norm > cfg.loss_tol and outer < cfg.max_outer_iters:
        cb, s, loss = train_codebooks_scales_adam(
            w, hess, cb, codes, s, cfg.adam_steps, cfg.adam_lr
        )
        consider(loss, cb, codes, s)
        codes = beam_search_update(w, hess, cb, codes, s, cfg.beam_width)
        loss = calib_loss(w, reconstruct_grouped(cb, codes), s, hess)
        consider(loss, cb, codes, s)
        if not np.isfinite(loss):
            raise NumericError("calibration loss became non-finite", layer=job.name)
        outer += 1
        trace.append(loss)

    loss, cb, codes, s = best
    if outer > 0:
        # closed-form scale refit on the best iterate, kept only when it
        # helps; a zero-iteration run must return the k-means init verbatim
        s_refit = refit_scales_closed_form(w, hess, cb, codes)
        refit_loss = calib_loss(w, reconstruct_grouped(cb, codes), s_refit, hess)
        if refit_loss < loss:
            loss, s = refit_loss, s_refit
        trace.append(loss)

    if not np.isfinite(loss):
        raise NumericError("calibration loss became non-finite", layer=job.name)

    quant = QuantizedTensor(
        config=cfg, kind=job.kind, shape=tuple(job.shape),
        codebooks=cb.astype(np.float32), codes=codes.astype(np.uint16),
        scales=s.astype(np.float32),
    )
    record = {
        "layer": job.name,
        "init_loss": init_loss,
        "final_loss": loss,
        "rel_loss": loss / norm,
        "outer_iters": outer,
        "loss_trace": trace,
        "n_samples": job.hessian.n_samples,
        "wall_time_s": time.perf_counter() - t0,
    }
    return quant, record


# ---------------------------------------------------------------------------
# scalar baseline
# ---------------------------------------------------------------------------

def uniform_quantize_layer(w: np.ndarray, bits: int, per_channel: bool = True) -> np.ndarray:
    """Asymmetric min-max round-to-nearest baseline, per row or per tensor."""
    if not 2 <= bits <= 8:
        raise ConfigError(f"uniform baseline bits must be in [2,8], got {bits}")
    w = np.asarray(w, dtype=np.float64)
    levels = (1 << bits) - 1
    if per_channel:
        mn = w.min(axis=1, keepdims=True)
        mx = w.max(axis=1, keepdims=True)
    else:
        mn = np.full((1, 1), w.min())
        mx = np.full((1, 1), w.max())
    scale = (mx - mn) / levels
    scale = np.where(scale > 0, scale, 1.0)
    q = np.clip(np.rint((w - mn) / scale), 0, levels)
    return mn + q * scale
