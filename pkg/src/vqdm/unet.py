"""Miniature conditional U-Net denoiser and its calibration plan.

Three resolution levels (16/8/4) with two residual blocks each, one
single-head self-attention block at the lowest resolution, channel-concat
skip connections, and a sinusoidal-time + class-condition embedding path.
The first conv, last conv and the two time-MLP linears are never quantized.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .codec import LayerBits, QuantizedTensor, reshape_for_quant
from .container import LayerBundle, ModelBundle
from .errors import ConfigError, UsageError
from .nn import (
    QUANTIZABLE_TYPES,
    QUANTIZED_TYPES,
    Conv2d,
    Embedding,
    GroupNorm,
    Linear,
    Module,
    ModuleList,
    QuantConv2d,
    QuantLinear,
)
from .seeding import derive_rng
from .tensor import Tensor


@dataclass(frozen=True)
class UNetSpec:
    in_channels: int = 4
    base_channels: int = 32
    channel_mults: tuple = (1, 2, 4)
    latent_size: int = 16
    num_classes: int = 8
    norm_groups: int = 4

    def __post_init__(self):
        if len(self.channel_mults) != 3:
            raise ConfigError("the model is built for exactly 3 resolution levels")
        if self.latent_size % 4:
            raise ConfigError("latent size must be divisible by 4 for two poolings")

    @property
    def time_dim(self) -> int:
        return self.base_channels

    @property
    def emb_dim(self) -> int:
        return 4 * self.base_channels

    @property
    def null_class(self) -> int:
        return self.num_classes

    def to_dict(self) -> dict:
        return {
            "in_channels": self.in_channels,
            "base_channels": self.base_channels,
            "channel_mults": list(self.channel_mults),
            "latent_size": self.latent_size,
            "num_classes": self.num_classes,
            "norm_groups": self.norm_groups,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "UNetSpec":
        d = dict(d)
        d["channel_mults"] = tuple(d["channel_mults"])
        return cls(**d)


class ResBlock(Module):
    def __init__(self, cin, cout, emb_dim, groups, rng, dtype):
        super().__init__()
        self.gn1 = GroupNorm(groups, cin, dtype)
        self.conv1 = Conv2d(cin, cout, 3, rng, pad=1, dtype=dtype)
        self.emb_proj = Linear(emb_dim, cout, rng, dtype=dtype)
        self.gn2 = GroupNorm(groups, cout, dtype)
        self.conv2 = Conv2d(cout, cout, 3, rng, pad=1, dtype=dtype)
        self.skip = Conv2d(cin, cout, 1, rng, dtype=dtype) if cin != cout else None

    def forward(self, x, emb):
        n = x.shape[0]
        h = self.conv1(T.silu(self.gn1(x)))
        e = self.emb_proj(T.silu(emb))
        h = T.add(h, T.reshape(e, (n, e.shape[1], 1, 1)))
        h = self.conv2(T.silu(self.gn2(h)))
        shortcut = self.skip(x) if self.skip is not None else x
        return T.add(h, shortcut)


class AttentionBlock(Module):
    """Single-head self-attention over spatial positions."""

    def __init__(self, channels, groups, rng, dtype):
        super().__init__()
        self.channels = channels
        self.gn = GroupNorm(groups, channels, dtype)
        self.q = Linear(channels, channels, rng, dtype=dtype)
        self.k = Linear(channels, channels, rng, dtype=dtype)
        self.v = Linear(channels, channels, rng, dtype=dtype)
        self.out = Linear(channels, channels, rng, dtype=dtype)

    def forward(self, x):
        n, c, h, w = x.shape
        tokens = T.reshape(
            T.transpose(T.reshape(self.gn(x), (n, c, h * w)), (0, 2, 1)),
            (n * h * w, c),
        )
        q3 = T.reshape(self.q(tokens), (n, h * w, c))
        k3 = T.reshape(self.k(tokens), (n, h * w, c))
        v3 = T.reshape(self.v(tokens), (n, h * w, c))
        att = T.softmax_lastdim(
            T.mul(T.matmul(q3, T.transpose(k3, (0, 2, 1))), 1.0 / math.sqrt(c))
        )
        mixed = T.reshape(T.matmul(att, v3), (n * h * w, c))
        o = T.reshape(
            T.transpose(T.reshape(self.out(mixed), (n, h * w, c)), (0, 2, 1)),
            (n, c, h, w),
        )
        return T.add(x, o)


class Downsample(Module):
    def __init__(self, channels, rng, dtype):
        super().__init__()
        self.conv = Conv2d(channels, channels, 3, rng, pad=1, dtype=dtype)

    def forward(self, x):
        return self.conv(T.avgpool2x(x))


class Upsample(Module):
    def __init__(self, channels, rng, dtype):
        super().__init__()
        self.conv = Conv2d(channels, channels, 3, rng, pad=1, dtype=dtype)

    def forward(self, x):
        # conv at the coarse resolution, then nearest-neighbor doubling
        return T.upsample_nearest2x(self.conv(x))


class MiniUNet(Module):
    def __init__(self, spec: UNetSpec, seed: int = 0, dtype=np.float32):
        super().__init__()
        self.spec = spec
        self.dtype = dtype
        rng = derive_rng(seed, "model-init")
        c0, c1, c2 = (spec.base_channels * m for m in spec.channel_mults)
        g = spec.norm_groups
        emb = spec.emb_dim

        self.time_fc1 = Linear(spec.time_dim, emb, rng, dtype=dtype, never_quantize=True)
        self.time_fc2 = Linear(emb, emb, rng, dtype=dtype, never_quantize=True)
        self.cond_embed = Embedding(spec.num_classes + 1, emb, rng, dtype=dtype)
        self.conv_in = Conv2d(spec.in_channels, c0, 3, rng, pad=1, dtype=dtype,
                              never_quantize=True)
        self.down0 = ModuleList([ResBlock(c0, c0, emb, g, rng, dtype),
                                 ResBlock(c0, c0, emb, g, rng, dtype)])
        self.down0_pool = Downsample(c0, rng, dtype)
        self.down1 = ModuleList([ResBlock(c0, c1, emb, g, rng, dtype),
                                 ResBlock(c1, c1, emb, g, rng, dtype)])
        self.down1_pool = Downsample(c1, rng, dtype)
        self.down2 = ModuleList([ResBlock(c1, c2, emb, g, rng, dtype),
                                 ResBlock(c2, c2, emb, g, rng, dtype)])
        self.mid_res0 = ResBlock(c2, c2, emb, g, rng, dtype)
        self.mid_attn = AttentionBlock(c2, g, rng, dtype)
        self.mid_res1 = ResBlock(c2, c2, emb, g, rng, dtype)
        self.up2 = ModuleList([ResBlock(c2 + c2, c2, emb, g, rng, dtype),
                               ResBlock(c2, c2, emb, g, rng, dtype)])
        self.up2_up = Upsample(c2, rng, dtype)
        self.up1 = ModuleList([ResBlock(c2 + c1, c1, emb, g, rng, dtype),
                               ResBlock(c1, c1, emb, g, rng, dtype)])
        self.up1_up = Upsample(c1, rng, dtype)
        self.up0 = ModuleList([ResBlock(c1 + c0, c0, emb, g, rng, dtype),
                               ResBlock(c0, c0, emb, g, rng, dtype)])
        self.gn_out = GroupNorm(g, c0, dtype)
        self.conv_out = Conv2d(c0, spec.in_channels, 3, rng, pad=1, dtype=dtype,
                               never_quantize=True)

    def forward(self, x: Tensor, t, cond) -> Tensor:
        t = np.asarray(t)
        cond = np.asarray(cond)
        temb = T.sinusoidal_embed(t, self.spec.time_dim, dtype=self.dtype)
        emb = self.time_fc2(T.silu(self.time_fc1(temb)))
        emb = T.add(emb, self.cond_embed(cond))

        h = self.conv_in(x)
        for block in self.down0:
            h = block(h, emb)
        s0 = h
        h = self.down0_pool(h)
        for block in self.down1:
            h = block(h, emb)
        s1 = h
        h = self.down1_pool(h)
        for block in self.down2:
            h = block(h, emb)
        s2 = h
        h = self.mid_res0(h, emb)
        h = self.mid_attn(h)
        h = self.mid_res1(h, emb)
        h = T.concat_channels(h, s2)
        for block in self.up2:
            h = block(h, emb)
        h = self.up2_up(h)
        h = T.concat_channels(h, s1)
        for block in self.up1:
            h = block(h, emb)
        h = self.up1_up(h)
        h = T.concat_channels(h, s0)
        for block in self.up0:
            h = block(h, emb)
        return self.conv_out(T.silu(self.gn_out(h)))

    # ------------------------------------------------------------------
    # layer bookkeeping
    # ------------------------------------------------------------------

    def weight_layers(self):
        """All conv/linear layers (dense or quantized) in traversal order."""
        out = []
        for name, mod in self.named_modules():
            if isinstance(mod, QUANTIZABLE_TYPES + QUANTIZED_TYPES):
                out.append((name, mod))
        return out

    def quantizable_layers(self):
        return [(n, m) for n, m in self.weight_layers()
                if isinstance(m, QUANTIZABLE_TYPES) and not m.never_quantize]

    def clear_recorders(self):
        for _, mod in self.weight_layers():
            mod.input_recorder = None


# subsets follow forward topology: down levels, middle, then up levels
PLAN_PREFIXES = [
    ("down-L0", ("down0.", "down0_pool.")),
    ("down-L1", ("down1.", "down1_pool.")),
    ("down-L2", ("down2.",)),
    ("mid", ("mid_res0.", "mid_attn.", "mid_res1.")),
    ("up-L2", ("up2.", "up2_up.")),
    ("up-L1", ("up1.", "up1_up.")),
    ("up-L0", ("up0.",)),
]


@dataclass
class CalibrationPlan:
    """Ordered layer subsets quantized one stack at a time."""

    subsets: list = field(default_factory=list)  # [(label, [layer names])]

    @property
    def labels(self):
        return [label for label, _ in self.subsets]

    def all_layers(self):
        return [name for _, names in self.subsets for name in names]


def build_calibration_plan(model: MiniUNet, group_size: int = 8) -> CalibrationPlan:
    """Partition quantizable layers into the seven per-resolution subsets."""
    subsets = [(label, []) for label, _ in PLAN_PREFIXES]
    for name, mod in model.quantizable_layers():
        matched = False
        for (label, prefixes), bucket in zip(PLAN_PREFIXES, subsets):
            if any(name.startswith(p) for p in prefixes):
                bucket[1].append(name)
                matched = True
                break
        if not matched:
            raise UsageError(f"quantizable layer {name!r} not covered by the plan")
        # fail early if a layer cannot be grouped
        reshape_for_quant(mod.weight.data, mod.weight_kind, group_size)
    return CalibrationPlan(subsets=subsets)


# ---------------------------------------------------------------------------
# container bridge
# ---------------------------------------------------------------------------

def model_to_bundle(model: MiniUNet, meta: dict) -> ModelBundle:
    """Snapshot every parameterized module into a container bundle."""
    meta = dict(meta)
    meta["model"] = model.spec.to_dict()
    layers = []
    for name, mod in model.named_modules():
        if isinstance(mod, QUANTIZED_TYPES):
            q = mod.to_quantized_tensor()
            layers.append(LayerBundle(
                name=name, kind=mod.weight_kind, status="quantized",
                shape=q.shape, quant=q,
                dense={"bias": mod.bias.data},
            ))
        elif isinstance(mod, QUANTIZABLE_TYPES):
            layers.append(LayerBundle(
                name=name, kind=mod.weight_kind, status="dense",
                shape=mod.weight.shape,
                dense={"weight": mod.weight.data, "bias": mod.bias.data},
            ))
        elif isinstance(mod, GroupNorm):
            layers.append(LayerBundle(
                name=name, kind="norm", status="dense", shape=mod.weight.shape,
                dense={"weight": mod.weight.data, "bias": mod.bias.data},
            ))
        elif isinstance(mod, Embedding):
            layers.append(LayerBundle(
                name=name, kind="embedding", status="dense", shape=mod.weight.shape,
                dense={"weight": mod.weight.data},
            ))
    return ModelBundle(meta=meta, layers=layers)


def model_from_bundle(bundle: ModelBundle, dtype=np.float32) -> MiniUNet:
    """Rebuild a model from a container bundle (half-precision storage)."""
    spec = UNetSpec.from_dict(bundle.meta["model"])
    model = MiniUNet(spec, seed=0, dtype=dtype)
    known = dict(model.named_modules())
    for rec in bundle.layers:
        if rec.name not in known:
            raise UsageError(f"container layer {rec.name!r} not present in model")
        mod = known[rec.name]
        if rec.status == "quantized":
            bias = Tensor(rec.dense["bias"].astype(dtype), requires_grad=True)
            if rec.kind == "conv":
                new = QuantConv2d(rec.quant, bias, stride=mod.stride, pad=mod.pad,
                                  dtype=dtype)
            else:
                new = QuantLinear(rec.quant, bias, dtype=dtype)
            model.set_module(rec.name, new)
        else:
            for pname, arr in rec.dense.items():
                if pname not in mod._params:
                    raise UsageError(f"{rec.name}: unexpected payload {pname!r}")
                target = mod._params[pname]
                if target.shape != arr.shape:
                    raise UsageError(
                        f"{rec.name}.{pname}: shape {arr.shape} vs model {target.shape}"
                    )
                target.data = arr.astype(dtype)
    return model


def bits_report(model: MiniUNet):
    """Bit-accounting entries for every conv/linear layer."""
    entries = []
    for name, mod in model.weight_layers():
        if isinstance(mod, QUANTIZED_TYPES):
            q = mod.quant_config
            weight_count = int(np.prod(mod.dense_shape))
            entries.append(LayerBits(name=name, weight_count=weight_count,
                                     d_out=mod.codes.shape[0], status="quantized",
                                     config=q))
        else:
            weight_count = int(np.prod(mod.weight.shape))
            entries.append(LayerBits(name=name, weight_count=weight_count,
                                     d_out=mod.weight.shape[0], status="excluded"))
    return entries
