"""U-shaped noise-prediction network.

Encoder levels: ``convs_per_block`` x (3x3 conv, batch norm, ReLU), then
2x2 max pooling. The bottleneck gets a sinusoidal timestep embedding
(two-layer MLP) broadcast-added after its first conv block. Decoder levels:
nearest 2x upsample and a 3x3 conv block (the "up-conv"), concatenation with
the encoder skip, then ``convs_per_block`` conv blocks. A 1x1 conv with bias
maps to one noise channel per modality.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .errors import ConfigurationError, DimensionError
from .numerics import BatchNormState, Tensor


@dataclass(frozen=True)
class DenoiserConfig:
    depth: int = 3
    base_width: int = 16
    in_channels: int = 5
    out_channels: int = 4
    time_embed_dim: int = 32
    convs_per_block: int = 2

    def __post_init__(self):
        if self.depth < 1 or self.base_width < 1 or self.convs_per_block < 1:
            raise ConfigurationError(f"invalid denoiser config {self}")
        if self.time_embed_dim < 2 or self.time_embed_dim % 2:
            raise ConfigurationError("time_embed_dim must be a positive even integer")

    def width(self, level: int) -> int:
        return self.base_width * 2**level


def _conv_block_specs(prefix: str, cin: int, cout: int) -> list[tuple[str, tuple[int, ...]]]:
    return [
        (f"{prefix}.w", (cout, cin, 3, 3)),
        (f"{prefix}.bn.gamma", (cout,)),
        (f"{prefix}.bn.beta", (cout,)),
    ]


def layer_plan(config: DenoiserConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Ordered (name, shape) for every trainable tensor."""
    plan = []
    cin = config.in_channels
    for lvl in range(config.depth):
        w = config.width(lvl)
        for j in range(config.convs_per_block):
            plan += _conv_block_specs(f"enc{lvl}.conv{j}", cin, w)
            cin = w
    wb = config.width(config.depth)
    for j in range(config.convs_per_block):
        plan += _conv_block_specs(f"mid.conv{j}", cin, wb)
        cin = wb
    e = config.time_embed_dim
    plan += [("time.w1", (e, e)), ("time.b1", (e,)), ("time.w2", (e, wb)), ("time.b2", (wb,))]
    for lvl in reversed(range(config.depth)):
        w = config.width(lvl)
        plan += _conv_block_specs(f"dec{lvl}.up", cin, w)
        cin = 2 * w
        for j in range(config.convs_per_block):
            plan += _conv_block_specs(f"dec{lvl}.conv{j}", cin, w)
            cin = w
    plan += [("out.w", (config.out_channels, cin, 1, 1)), ("out.b", (config.out_channels,))]
    return plan


def conv_param_count(cin: int, cout: int, k: int, bias: bool = True) -> int:
    return cin * cout * k * k + (cout if bias else 0)


def count_params(config: DenoiserConfig) -> int:
    return sum(math.prod(shape) for _, shape in layer_plan(config))


@dataclass
class DenoiserParams:
    config: DenoiserConfig
    tensors: dict[str, Tensor]
    norms: dict[str, BatchNormState] = field(default_factory=dict)

    @classmethod
    def init(cls, config: DenoiserConfig, seed: int = 0, dtype=np.float32) -> "DenoiserParams":
        rng = np.random.default_rng(seed)
        tensors, norms = {}, {}
        for name, shape in layer_plan(config):
            if name.endswith(".gamma"):
                arr = np.ones(shape)
            elif name.endswith((".beta", ".b", ".b1", ".b2")):
                arr = np.zeros(shape)
            else:
                fan_in = shape[0] if name.startswith("time.") else math.prod(shape[1:])
                bound = math.sqrt(6.0 / fan_in)
                arr = rng.uniform(-bound, bound, size=shape)
            tensors[name] = Tensor(arr.astype(dtype), requires_grad=True)
            if name.endswith(".bn.gamma"):
                norms[name[: -len(".gamma")]] = BatchNormState.create(shape[0], dtype)
        return cls(config, tensors, norms)

    @property
    def dtype(self):
        return next(iter(self.tensors.values())).dtype

    def names(self) -> list[str]:
        return list(self.tensors)

    def count(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def astype(self, dtype) -> "DenoiserParams":
        tensors = {k: Tensor(v.data.astype(dtype), requires_grad=True) for k, v in self.tensors.items()}
        norms = {
            k: BatchNormState(v.running_mean.astype(dtype), v.running_var.astype(dtype), v.momentum, v.eps, v.num_batches)
            for k, v in self.norms.items()
        }
        return DenoiserParams(self.config, tensors, norms)

    def copy(self) -> "DenoiserParams":
        return self.astype(self.dtype)


def timestep_embedding(t, dim: int, dtype=np.float32) -> np.ndarray:
    """Sinusoidal features of integer timesteps, shape (B, dim)."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    args = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(args), np.cos(args)], axis=1).astype(dtype)


# activations run channels-last internally; input and output are NCHW
_LAYOUT = "NHWC"


def _conv_block(p: DenoiserParams, prefix: str, x: Tensor, training: bool) -> Tensor:
    P = p.tensors
    y = nx.conv2d(x, P[f"{prefix}.w"], layout=_LAYOUT)
    y = nx.batchnorm(y, P[f"{prefix}.bn.gamma"], P[f"{prefix}.bn.beta"], p.norms[f"{prefix}.bn"], training, _LAYOUT)
    return nx.relu(y)


def forward(params: DenoiserParams, x, t, training: bool = False) -> Tensor:
    """Predicted noise, shape (B, out_channels, H, W).

    ``x`` is a (B, C, H, W) array or tensor, or a single
    :class:`~freqdiff.conditioning.ConditioningStack`; ``t`` is an int or a
    length-B array of timesteps.
    """
    cfg = params.config
    if hasattr(x, "channels"):
        if t is None:
            t = x.t
        x = x.channels[None]
    if not isinstance(x, Tensor):
        x = Tensor(np.asarray(x, dtype=params.dtype))
    if x.data.ndim != 4 or x.shape[1] != cfg.in_channels:
        raise DimensionError(f"denoiser expects (B, {cfg.in_channels}, H, W), got {x.shape}")
    B, _, H, W = x.shape
    f = 2**cfg.depth
    if H % f or W % f:
        raise DimensionError(f"spatial size {H}x{W} not divisible by 2**depth = {f}")
    t = np.broadcast_to(np.asarray(t), (B,))
    P = params.tensors

    skips = []
    h = nx.to_channels_last(x)
    for lvl in range(cfg.depth):
        for j in range(cfg.convs_per_block):
            h = _conv_block(params, f"enc{lvl}.conv{j}", h, training)
        skips.append(h)
        h = nx.maxpool2(h, _LAYOUT)

    emb = Tensor(timestep_embedding(t, cfg.time_embed_dim, params.dtype))
    emb = nx.relu(nx.linear(emb, P["time.w1"], P["time.b1"]))
    emb = nx.linear(emb, P["time.w2"], P["time.b2"])
    emb = nx.reshape(emb, (B, 1, 1, cfg.width(cfg.depth)))
    for j in range(cfg.convs_per_block):
        h = _conv_block(params, f"mid.conv{j}", h, training)
        if j == 0:
            h = nx.add(h, emb)

    for lvl in reversed(range(cfg.depth)):
        h = _conv_block(params, f"dec{lvl}.up", nx.upsample_nearest2(h, _LAYOUT), training)
        h = nx.concat_channels([h, skips[lvl]], _LAYOUT)
        for j in range(cfg.convs_per_block):
            h = _conv_block(params, f"dec{lvl}.conv{j}", h, training)
    return nx.to_channels_first(nx.conv2d(h, P["out.w"], P["out.b"], layout=_LAYOUT))
