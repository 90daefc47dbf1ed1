"""Dense-tensor engine with reverse-mode autodiff.

Tensors wrap contiguous row-major numpy buffers (float32 or float64).
Operations executed while a Tape is active are recorded and can be
differentiated by replaying the tape in exact reverse execution order.
Without an active tape, ops run forward-only (inference mode).
"""

from __future__ import annotations

import math
import threading

import numpy as np

from .errors import DimensionError, UsageError

FLOAT_DTYPES = (np.float32, np.float64)


class Tensor:
    """A shaped view over a contiguous row-major float buffer."""

    __slots__ = ("data", "requires_grad", "grad", "is_leaf")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in FLOAT_DTYPES:
            arr = arr.astype(np.float32 if dtype is None else dtype)
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.is_leaf = True

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self):
        return f"Tensor(shape={tuple(self.shape)}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"

    # operator sugar; scalars are promoted to constant tensors
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return mul(self, -1.0)


class Tape:
    """Ordered record of executed ops; replayed backwards for gradients."""

    def __init__(self):
        self._nodes = []  # (out, inputs, backward_fn) in execution order

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise UsageError("tape stack corrupted: exiting a tape that is not innermost")
        stack.pop()
        return False

    def record(self, out: Tensor, inputs, backward_fn):
        self._nodes.append((out, inputs, backward_fn))

    def backward(self, loss: Tensor):
        """Gradients of a scalar loss for every requires_grad leaf.

        Returns a dict mapping leaf Tensor -> numpy gradient array, and
        also stores each gradient on the leaf's .grad attribute.
        """
        if loss.data.size != 1:
            raise UsageError(f"backward() needs a scalar loss, got shape {loss.shape}")
        if not self._nodes:
            raise UsageError("backward() on an empty tape")
        # pending grads keyed by id(); values hold the tensor ref to keep ids stable
        pending = {id(loss): (loss, np.ones_like(loss.data))}
        for out, inputs, backward_fn in reversed(self._nodes):
            entry = pending.get(id(out))
            if entry is None:
                continue  # node not on the path from the loss
            g = entry[1]
            if not out.is_leaf:
                del pending[id(out)]
            input_grads = backward_fn(g)
            for inp, gi in zip(inputs, input_grads):
                if gi is None or not inp.requires_grad:
                    continue
                prev = pending.get(id(inp))
                if prev is None:
                    pending[id(inp)] = (inp, gi)
                else:
                    pending[id(inp)] = (inp, prev[1] + gi)
        grads = {}
        for tensor, g in pending.values():
            if tensor.is_leaf and tensor.requires_grad:
                grads[tensor] = g
                tensor.grad = g
        return grads


_LOCAL = threading.local()


def _tape_stack():
    stack = getattr(_LOCAL, "tapes", None)
    if stack is None:
        stack = []
        _LOCAL.tapes = stack
    return stack


def active_tape() -> Tape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


def _as_tensor(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.data.dtype))


def _make_out(data, inputs, backward_fn) -> Tensor:
    """Wrap op output; record on the active tape when gradients may flow."""
    out = Tensor(data)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.is_leaf = False
        tape.record(out, inputs, backward_fn)
    return out


def _check_same_dtype(*tensors):
    dt = tensors[0].data.dtype
    for t in tensors[1:]:
        if t.data.dtype != dt:
            raise DimensionError(f"mixed dtypes {dt} and {t.data.dtype}")
    return dt


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Sum a broadcast gradient back down to the original operand shape."""
    if grad.shape == tuple(shape):
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return np.ascontiguousarray(grad.reshape(shape))


# ---------------------------------------------------------------------------
# elementwise / arithmetic ops
# ---------------------------------------------------------------------------

def add(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    _check_same_dtype(a, b)
    try:
        data = a.data + b.data
    except ValueError as e:
        raise DimensionError(f"add: shapes {a.shape} and {b.shape}: {e}") from None
    ash, bsh = a.shape, b.shape
    return _make_out(data, (a, b), lambda g: (_unbroadcast(g, ash), _unbroadcast(g, bsh)))


def sub(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    _check_same_dtype(a, b)
    try:
        data = a.data - b.data
    except ValueError as e:
        raise DimensionError(f"sub: shapes {a.shape} and {b.shape}: {e}") from None
    ash, bsh = a.shape, b.shape
    return _make_out(data, (a, b), lambda g: (_unbroadcast(g, ash), _unbroadcast(-g, bsh)))


def mul(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    _check_same_dtype(a, b)
    try:
        data = a.data * b.data
    except ValueError as e:
        raise DimensionError(f"mul: shapes {a.shape} and {b.shape}: {e}") from None
    ad, bd = a.data, b.data
    ash, bsh = a.shape, b.shape
    return _make_out(
        data, (a, b),
        lambda g: (_unbroadcast(g * bd, ash), _unbroadcast(g * ad, bsh)),
    )


def silu(x: Tensor) -> Tensor:
    """x * sigmoid(x)."""
    sig = 1.0 / (1.0 + np.exp(-x.data))
    data = x.data * sig
    xd = x.data

    def bwd(g):
        d = 1.0 - sig
        d *= xd
        d += 1.0
        d *= sig
        d *= g
        return (d,)

    return _make_out(data, (x,), bwd)


def softmax_lastdim(x: Tensor) -> Tensor:
    """Softmax over the last axis, max-shifted for stability."""
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        return (y * (g - dot),)

    return _make_out(y, (x,), bwd)


def sum_all(x: Tensor) -> Tensor:
    """Full reduction to a scalar tensor."""
    data = np.asarray(x.data.sum(), dtype=x.data.dtype)
    xsh = x.shape
    return _make_out(data, (x,), lambda g: (np.full(xsh, g, dtype=g.dtype),))


def mean_all(x: Tensor) -> Tensor:
    n = x.data.size
    data = np.asarray(x.data.sum() / n, dtype=x.data.dtype)
    xsh = x.shape
    return _make_out(data, (x,), lambda g: (np.full(xsh, g / n, dtype=g.dtype),))


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        data = x.data.reshape(shape)
    except ValueError as e:
        raise DimensionError(f"reshape: {x.shape} -> {shape}: {e}") from None
    xsh = x.shape
    return _make_out(data, (x,), lambda g: (np.ascontiguousarray(g.reshape(xsh)),))


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(x.data.ndim)):
        raise DimensionError(f"transpose: axes {axes} invalid for ndim {x.data.ndim}")
    inv = tuple(np.argsort(axes))
    data = np.ascontiguousarray(x.data.transpose(axes))
    return _make_out(data, (x,), lambda g: (np.ascontiguousarray(g.transpose(inv)),))


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate along axis 1 (channels for NCHW, features for NF)."""
    _check_same_dtype(a, b)
    if a.data.ndim != b.data.ndim or a.data.ndim < 2:
        raise DimensionError(f"concat_channels: ndims {a.data.ndim} vs {b.data.ndim}")
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise DimensionError(f"concat_channels: shapes {a.shape} and {b.shape}")
    data = np.concatenate([a.data, b.data], axis=1)
    ca = a.shape[1]

    def bwd(g):
        return (np.ascontiguousarray(g[:, :ca]), np.ascontiguousarray(g[:, ca:]))

    return _make_out(data, (a, b), bwd)


def gather_rows(table: Tensor, ids) -> Tensor:
    """Row lookup table[ids]; gradient scatter-adds into the table."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim != 1:
        raise DimensionError(f"gather_rows: ids must be 1-D, got {ids.shape}")
    if table.data.ndim != 2:
        raise DimensionError(f"gather_rows: table must be 2-D, got {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise DimensionError("gather_rows: index out of range")
    data = table.data[ids]
    tsh = table.shape
    dt = table.data.dtype

    def bwd(g):
        acc = np.zeros(tsh, dtype=dt)
        np.add.at(acc, ids, g)
        return (acc,)

    return _make_out(data, (table,), bwd)


# ---------------------------------------------------------------------------
# matmul / convolution
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor, bias: Tensor | None = None) -> Tensor:
    """Matrix product; 2-D x 2-D or batched 3-D x 3-D, optional row bias."""
    _check_same_dtype(a, b)
    if a.data.ndim != b.data.ndim or a.data.ndim not in (2, 3):
        raise DimensionError(f"matmul: ndims {a.data.ndim} and {b.data.ndim}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner dims {a.shape} x {b.shape}")
    if a.data.ndim == 3 and a.shape[0] != b.shape[0]:
        raise DimensionError(f"matmul: batch dims {a.shape[0]} vs {b.shape[0]}")
    if bias is not None and bias.shape != (b.shape[-1],):
        raise DimensionError(f"matmul: bias shape {bias.shape} vs columns {b.shape[-1]}")
    data = a.data @ b.data
    if bias is not None:
        data += bias.data
    ad, bd = a.data, b.data
    need_a, need_b = a.requires_grad, b.requires_grad
    inputs = (a, b) if bias is None else (a, b, bias)

    def bwd(g):
        ga = np.ascontiguousarray(g @ bd.swapaxes(-1, -2)) if need_a else None
        gb = np.ascontiguousarray(ad.swapaxes(-1, -2) @ g) if need_b else None
        if bias is None:
            return (ga, gb)
        gbias = g.sum(axis=tuple(range(g.ndim - 1)))
        return (ga, gb, gbias)

    return _make_out(data, inputs, bwd)


def _conv_geometry(h, w, kh, kw, stride, pad):
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    if (h + 2 * pad - kh) % stride or (w + 2 * pad - kw) % stride or ho <= 0 or wo <= 0:
        raise DimensionError(
            f"conv geometry: input {h}x{w}, kernel {kh}x{kw}, stride {stride}, pad {pad}"
        )
    return ho, wo


def unfold_patches(x: np.ndarray, kh: int, kw: int, stride: int, pad: int) -> np.ndarray:
    """im2col: [N,C,H,W] -> [N, Ho, Wo, kh*kw*C] patch matrix.

    Column order is (kernel row, kernel col, input channel) with the input
    channel fastest-varying, so that every run of C consecutive columns
    holds one spatial tap. Weight reshaping for quantization uses the same
    order, which keeps weight columns aligned with activation rows.
    """
    n, c, h, w = x.shape
    ho, wo = _conv_geometry(h, w, kh, kw, stride, pad)
    # channel-last staging keeps the gather's inner runs contiguous
    xp = np.zeros((n, h + 2 * pad, w + 2 * pad, c), dtype=x.dtype)
    xp[:, pad : pad + h, pad : pad + w, :] = x.transpose(0, 2, 3, 1)
    sn, sh, sw, sc = xp.strides
    view = np.lib.stride_tricks.as_strided(
        xp,
        shape=(n, ho, wo, kh, kw, c),
        strides=(sn, stride * sh, stride * sw, sh, sw, sc),
        writeable=False,
    )
    return np.ascontiguousarray(view).reshape(n, ho, wo, kh * kw * c)


def fold_patches(cols: np.ndarray, x_shape, kh: int, kw: int, stride: int, pad: int) -> np.ndarray:
    """Adjoint of unfold_patches: scatter-add columns back onto the input."""
    n, c, h, w = x_shape
    ho, wo = _conv_geometry(h, w, kh, kw, stride, pad)
    # accumulate channel-last so every tap add streams contiguous runs
    taps = cols.reshape(n, ho, wo, kh * kw, c)
    xp = np.zeros((n, h + 2 * pad, w + 2 * pad, c), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            xp[:, i : i + ho * stride : stride, j : j + wo * stride : stride, :] += \
                taps[:, :, :, i * kw + j, :]
    inner = xp[:, pad : pad + h, pad : pad + w, :] if pad else xp
    return np.ascontiguousarray(inner.transpose(0, 3, 1, 2))


def conv_weight_matrix(w: np.ndarray) -> np.ndarray:
    """[Cout,Cin,kh,kw] -> [Cout, kh*kw*Cin] in unfold_patches column order."""
    cout = w.shape[0]
    return np.ascontiguousarray(w.transpose(0, 2, 3, 1).reshape(cout, -1))


def conv_weight_from_matrix(m: np.ndarray, cin: int, kh: int, kw: int) -> np.ndarray:
    """Inverse of conv_weight_matrix."""
    cout = m.shape[0]
    return np.ascontiguousarray(m.reshape(cout, kh, kw, cin).transpose(0, 3, 1, 2))


def conv2d(x: Tensor, weight: Tensor, stride: int = 1, pad: int = 0,
           col_sink=None, bias: Tensor | None = None) -> Tensor:
    """2-D cross-correlation, NCHW input and [Cout,Cin,kh,kw] weight.

    col_sink, when given, receives the unfolded patch matrix transposed to
    [d_flat, n_positions]; used to stream activation statistics without a
    second unfold. bias, when given, is a [Cout] vector added per channel.
    """
    _check_same_dtype(x, weight)
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise DimensionError(f"conv2d: input {x.shape}, weight {weight.shape}")
    n, cin, h, w = x.shape
    cout, wcin, kh, kw = weight.shape
    if cin != wcin:
        raise DimensionError(f"conv2d: Cin {cin} != weight Cin {wcin}")
    if bias is not None and bias.shape != (cout,):
        raise DimensionError(f"conv2d: bias shape {bias.shape}, expected ({cout},)")
    cols = unfold_patches(x.data, kh, kw, stride, pad)
    ho, wo = cols.shape[1], cols.shape[2]
    cols2d = cols.reshape(n * ho * wo, kh * kw * cin)
    if col_sink is not None:
        col_sink(cols2d.T)
    wmat = conv_weight_matrix(weight.data)
    out2d = cols2d @ wmat.T
    if bias is not None:
        out2d += bias.data[None, :]
    data = np.ascontiguousarray(out2d.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2))
    xsh = x.shape
    inputs = (x, weight) if bias is None else (x, weight, bias)
    need_x, need_w = x.requires_grad, weight.requires_grad

    def bwd(g):
        g2d = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(n * ho * wo, cout)
        gw = conv_weight_from_matrix(g2d.T @ cols2d, cin, kh, kw) if need_w else None
        gx = None
        if need_x:
            gx = fold_patches(g2d @ wmat, xsh, kh, kw, stride, pad)
        if bias is None:
            return (gx, gw)
        return (gx, gw, g2d.sum(axis=0))

    return _make_out(data, inputs, bwd)


# ---------------------------------------------------------------------------
# spatial resizing
# ---------------------------------------------------------------------------

def upsample_nearest2x(x: Tensor) -> Tensor:
    if x.data.ndim != 4:
        raise DimensionError(f"upsample_nearest2x: need NCHW, got {x.shape}")
    data = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)
    n, c, h, w = x.shape

    def bwd(g):
        return (np.ascontiguousarray(g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5))),)

    return _make_out(data, (x,), bwd)


def avgpool2x(x: Tensor) -> Tensor:
    if x.data.ndim != 4:
        raise DimensionError(f"avgpool2x: need NCHW, got {x.shape}")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise DimensionError(f"avgpool2x: H and W must be even, got {h}x{w}")
    data = x.data.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))

    def bwd(g):
        gx = np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) * np.asarray(0.25, dtype=g.dtype)
        return (np.ascontiguousarray(gx),)

    return _make_out(data, (x,), bwd)


# ---------------------------------------------------------------------------
# normalization / embeddings
# ---------------------------------------------------------------------------

def group_norm(x: Tensor, groups: int, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-sample group normalization with per-channel affine."""
    if x.data.ndim != 4:
        raise DimensionError(f"group_norm: need NCHW, got {x.shape}")
    n, c, h, w = x.shape
    if c % groups:
        raise DimensionError(f"group_norm: {groups} groups do not divide {c} channels")
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(f"group_norm: affine shapes {gamma.shape}, {beta.shape} for C={c}")
    _check_same_dtype(x, gamma, beta)
    xg = x.data.reshape(n, groups, -1)
    mean = xg.mean(axis=2, keepdims=True)
    centered = xg - mean
    var = np.einsum("ngk,ngk->ng", centered, centered)[:, :, None] / xg.shape[2]
    inv_std = 1.0 / np.sqrt(var + np.asarray(eps, dtype=x.data.dtype))
    xhat = (centered * inv_std).reshape(n, c, h, w)
    data = xhat * gamma.data.reshape(1, c, 1, 1) + beta.data.reshape(1, c, 1, 1)
    gd = gamma.data

    def bwd(g):
        dbeta = g.sum(axis=(0, 2, 3))
        dgamma = (g * xhat).sum(axis=(0, 2, 3))
        dxh = (g * gd.reshape(1, c, 1, 1)).reshape(n, groups, -1)
        xh = xhat.reshape(n, groups, -1)
        m1 = dxh.mean(axis=2, keepdims=True)
        m2 = (dxh * xh).mean(axis=2, keepdims=True)
        dx = (inv_std * (dxh - m1 - xh * m2)).reshape(n, c, h, w)
        return (np.ascontiguousarray(dx), dgamma, dbeta)

    return _make_out(data, (x, gamma, beta), bwd)


def sinusoidal_embed(t, dim: int, dtype=np.float32) -> Tensor:
    """Sinusoidal position features for integer timesteps; not differentiable."""
    if dim % 2:
        raise DimensionError(f"sinusoidal_embed: dim must be even, got {dim}")
    tv = t.data if isinstance(t, Tensor) else np.asarray(t)
    tv = np.asarray(tv, dtype=dtype).reshape(-1)
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half, dtype=dtype) / half)
    args = tv[:, None] * freqs[None, :]
    return Tensor(np.concatenate([np.sin(args), np.cos(args)], axis=1).astype(dtype))


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def mse(a: Tensor, b: Tensor) -> Tensor:
    """Mean squared error over all elements."""
    d = sub(a, b)
    return mean_all(mul(d, d))
