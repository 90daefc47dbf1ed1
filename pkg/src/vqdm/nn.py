"""Small module system over the tensor engine.

Modules auto-register Tensor attributes as parameters and Module attributes
as children, giving stable dotted names for traversal, checkpointing and
layer swapping.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .codec import QuantizedTensor, dequantize
from .errors import DimensionError
from .tensor import Tensor


class Module:
    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_children", {})

    def __setattr__(self, name, value):
        if isinstance(value, Tensor):
            self._params[name] = value
        elif isinstance(value, Module):
            self._children[name] = value
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix: str = ""):
        for name, p in self._params.items():
            yield (f"{prefix}{name}", p)
        for name, child in self._children.items():
            yield from child.named_parameters(f"{prefix}{name}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_modules(self, prefix: str = ""):
        yield (prefix.rstrip("."), self)
        for name, child in self._children.items():
            yield from child.named_modules(f"{prefix}{name}.")

    def get_module(self, dotted: str) -> "Module":
        mod = self
        for part in dotted.split("."):
            mod = mod._children[part]
        return mod

    def set_module(self, dotted: str, new: "Module") -> None:
        parts = dotted.split(".")
        parent = self
        for part in parts[:-1]:
            parent = parent._children[part]
        leaf = parts[-1]
        if leaf not in parent._children:
            raise KeyError(f"no child module {dotted!r}")
        parent._children[leaf] = new
        if leaf in vars(parent):
            object.__setattr__(parent, leaf, new)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class ModuleList(Module):
    def __init__(self, mods):
        super().__init__()
        for i, m in enumerate(mods):
            self._children[str(i)] = m

    def __getitem__(self, i: int) -> Module:
        return self._children[str(i)]

    def __len__(self):
        return len(self._children)

    def __iter__(self):
        return (self._children[str(i)] for i in range(len(self._children)))


def _init_weight(rng: np.random.Generator, shape, fan_in: int, dtype) -> Tensor:
    std = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.normal(0.0, std, size=shape).astype(dtype), requires_grad=True)


class Linear(Module):
    """y = x W^T + b with weight [d_out, d_in]."""

    weight_kind = "linear"

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator,
                 dtype=np.float32, never_quantize: bool = False):
        super().__init__()
        self.d_in, self.d_out = d_in, d_out
        self.weight = _init_weight(rng, (d_out, d_in), d_in, dtype)
        self.bias = Tensor(np.zeros(d_out, dtype=dtype), requires_grad=True)
        self.never_quantize = never_quantize
        self.input_recorder = None

    def forward(self, x: Tensor) -> Tensor:
        if x.data.ndim != 2 or x.shape[1] != self.d_in:
            raise DimensionError(f"linear expects [n, {self.d_in}], got {x.shape}")
        if self.input_recorder is not None:
            self.input_recorder(x.data.T)
        return T.matmul(x, T.transpose(self.weight, (1, 0)), bias=self.bias)

    def dense_weight(self) -> np.ndarray:
        return self.weight.data


class Conv2d(Module):
    """Cross-correlation with weight [Cout, Cin, kh, kw]."""

    weight_kind = "conv"

    def __init__(self, cin: int, cout: int, ksize: int, rng: np.random.Generator,
                 stride: int = 1, pad: int = 0, dtype=np.float32,
                 never_quantize: bool = False):
        super().__init__()
        self.cin, self.cout, self.ksize = cin, cout, ksize
        self.stride, self.pad = stride, pad
        self.weight = _init_weight(
            rng, (cout, cin, ksize, ksize), cin * ksize * ksize, dtype
        )
        self.bias = Tensor(np.zeros(cout, dtype=dtype), requires_grad=True)
        self.never_quantize = never_quantize
        self.input_recorder = None

    def forward(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.stride, self.pad,
                        col_sink=self.input_recorder, bias=self.bias)

    def dense_weight(self) -> np.ndarray:
        return self.weight.data


class GroupNorm(Module):
    def __init__(self, groups: int, channels: int, dtype=np.float32):
        super().__init__()
        self.groups, self.channels = groups, channels
        self.weight = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)

    def forward(self, x: Tensor) -> Tensor:
        return T.group_norm(x, self.groups, self.weight, self.bias)


class Embedding(Module):
    def __init__(self, count: int, dim: int, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        self.count, self.dim = count, dim
        self.weight = Tensor(rng.normal(0.0, 0.02, (count, dim)).astype(dtype),
                             requires_grad=True)

    def forward(self, ids) -> Tensor:
        return T.gather_rows(self.weight, ids)


class _QuantWeightMixin:
    """Shared machinery for layers backed by a QuantizedTensor.

    Codebooks and scales are trainable tensors; codes stay frozen integer
    arrays. The dense weight is reassembled differentiably on each forward,
    so fine-tuning reaches the codebooks through the layer output.
    """

    def _install_quant(self, quant: QuantizedTensor, dtype):
        codes = quant.codes.copy()
        codes.setflags(write=False)
        self.codes = codes
        self.quant_config = quant.config
        self.codebook_list = [
            Tensor(quant.codebooks[m].astype(dtype), requires_grad=True)
            for m in range(quant.config.num_codebooks)
        ]
        for m, t in enumerate(self.codebook_list):
            self._params[f"codebook{m}"] = t
        self.scales = Tensor(quant.scales.astype(dtype), requires_grad=True)
        self._flat_codes = [
            np.ascontiguousarray(codes[:, :, m].reshape(-1))
            for m in range(quant.config.num_codebooks)
        ]

    def _dense_weight_tensor(self) -> Tensor:
        d_out = self.codes.shape[0]
        acc = T.gather_rows(self.codebook_list[0], self._flat_codes[0])
        for m in range(1, len(self.codebook_list)):
            acc = T.add(acc, T.gather_rows(self.codebook_list[m], self._flat_codes[m]))
        mat = T.reshape(acc, (d_out, acc.size // d_out))
        return T.mul(mat, T.reshape(self.scales, (d_out, 1)))

    def to_quantized_tensor(self) -> QuantizedTensor:
        cb = np.stack([t.data.astype(np.float32) for t in self.codebook_list])
        return QuantizedTensor(
            config=self.quant_config, kind=self.weight_kind, shape=self.dense_shape,
            codebooks=cb, codes=self.codes.copy(),
            scales=self.scales.data.astype(np.float32),
        )

    def dense_weight(self) -> np.ndarray:
        return dequantize(self.to_quantized_tensor())


class QuantLinear(Module, _QuantWeightMixin):
    weight_kind = "linear"

    def __init__(self, quant: QuantizedTensor, bias: Tensor, dtype=np.float32):
        super().__init__()
        self.d_out, self.d_in = quant.shape
        self.dense_shape = tuple(quant.shape)
        self.never_quantize = False
        self.input_recorder = None
        self._install_quant(quant, dtype)
        self.bias = bias

    def forward(self, x: Tensor) -> Tensor:
        w = self._dense_weight_tensor()  # [d_out, d_in]
        return T.matmul(x, T.transpose(w, (1, 0)), bias=self.bias)


class QuantConv2d(Module, _QuantWeightMixin):
    weight_kind = "conv"

    def __init__(self, quant: QuantizedTensor, bias: Tensor,
                 stride: int = 1, pad: int = 0, dtype=np.float32):
        super().__init__()
        self.cout, self.cin, self.ksize, _ = quant.shape
        self.dense_shape = tuple(quant.shape)
        self.stride, self.pad = stride, pad
        self.never_quantize = False
        self.input_recorder = None
        self._install_quant(quant, dtype)
        self.bias = bias

    def forward(self, x: Tensor) -> Tensor:
        mat = self._dense_weight_tensor()  # [Cout, kh*kw*Cin]
        w = T.transpose(
            T.reshape(mat, (self.cout, self.ksize, self.ksize, self.cin)),
            (0, 3, 1, 2),
        )
        return T.conv2d(x, w, self.stride, self.pad, bias=self.bias)


QUANTIZABLE_TYPES = (Linear, Conv2d)
QUANTIZED_TYPES = (QuantLinear, QuantConv2d)
