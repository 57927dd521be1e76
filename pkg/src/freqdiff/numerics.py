"""Small dense-tensor engine with reverse-mode differentiation.

Only the primitives the denoiser and its training objective need are
provided. Arrays are plain numpy arrays; a :class:`Tensor` wraps one and
records the operation that produced it so :meth:`Tensor.backward` can walk
the graph in reverse topological order.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigurationError, ContractError, DimensionError

PADDING_MODES = ("zero", "reflect")


class Tensor:
    """A numpy array plus the bookkeeping needed for backpropagation."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def zero_grad(self) -> None:
        self.grad = None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Backpropagate from this tensor. Scalars default to a unit seed."""
        if grad is None:
            if self.data.size != 1:
                raise ContractError(f"backward() without a seed needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        order = _topological_order(self)
        self._accumulate(np.asarray(grad, dtype=self.data.dtype).reshape(self.shape))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)


def _not_scalar(t: Tensor) -> float:
    raise ContractError(f"item() needs a single-element tensor, got shape {t.shape}")


def _topological_order(root: Tensor) -> list[Tensor]:
    # Iterative DFS so deep graphs do not hit the recursion limit.
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Sequence[Tensor], op: str, backward) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    out.op = op
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


# ---------------------------------------------------------------------------
# elementwise and shape primitives


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError as exc:
        raise DimensionError(f"add: cannot broadcast {a.shape} with {b.shape}") from exc

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _result(out, (a, b), "add", backward)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.data * b.data
    except ValueError as exc:
        raise DimensionError(f"mul: cannot broadcast {a.shape} with {b.shape}") from exc

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _result(out, (a, b), "mul", backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = np.where(mask, x.data, 0).astype(x.dtype, copy=False)

    def backward(g):
        x._accumulate(g * mask)

    return _result(out, (x,), "relu", backward)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        out = x.data.reshape(tuple(shape))
    except ValueError as exc:
        raise DimensionError(f"reshape: {x.shape} -> {tuple(shape)}") from exc

    def backward(g):
        x._accumulate(g.reshape(x.shape))

    return _result(out, (x,), "reshape", backward)


def sum_all(x: Tensor) -> Tensor:
    def backward(g):
        x._accumulate(np.broadcast_to(g, x.shape))

    return _result(np.asarray(x.data.sum()), (x,), "sum", backward)


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out = np.ascontiguousarray(x.data.transpose(axes))

    def backward(g):
        x._accumulate(g.transpose(inverse))

    return _result(out, (x,), "transpose", backward)


def to_channels_last(x: Tensor) -> Tensor:
    return transpose(x, (0, 2, 3, 1))


def to_channels_first(x: Tensor) -> Tensor:
    return transpose(x, (0, 3, 1, 2))


def _channel_axis(layout: str) -> int:
    if layout == "NCHW":
        return 1
    if layout == "NHWC":
        return 3
    raise ConfigurationError(f"unknown layout {layout!r}; expected NCHW or NHWC")


def concat_channels(xs: Sequence[Tensor], layout: str = "NCHW") -> Tensor:
    """Concatenate 4-D tensors along the channel axis."""
    ax = _channel_axis(layout)
    xs = [_as_tensor(x) for x in xs]
    ref = xs[0].shape
    for x in xs:
        if x.data.ndim != 4 or any(x.shape[i] != ref[i] for i in range(4) if i != ax):
            raise DimensionError(f"concat_channels: {x.shape} incompatible with {ref}")
    out = np.concatenate([x.data for x in xs], axis=ax)
    bounds = np.cumsum([0] + [x.shape[ax] for x in xs])

    def backward(g):
        for x, lo, hi in zip(xs, bounds[:-1], bounds[1:]):
            if x.requires_grad:
                idx = [slice(None)] * 4
                idx[ax] = slice(lo, hi)
                x._accumulate(g[tuple(idx)])

    return _result(out, xs, "concat", backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` for ``x`` of shape (B, I) and ``weight`` (I, O)."""
    if x.data.ndim != 2 or weight.data.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise DimensionError(f"linear: {x.shape} @ {weight.shape}")
    out = x.data @ weight.data
    if bias is not None:
        if bias.shape != (weight.shape[1],):
            raise DimensionError(f"linear: bias {bias.shape} for {weight.shape[1]} outputs")
        out = out + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        if x.requires_grad:
            x._accumulate(g @ weight.data.T)
        if weight.requires_grad:
            weight._accumulate(x.data.T @ g)
        if bias is not None and bias.requires_grad:
            bias._accumulate(g.sum(axis=0))

    return _result(out, parents, "linear", backward)


# ---------------------------------------------------------------------------
# losses


def weighted_mse(pred: Tensor, target, weight=None) -> Tensor:
    """``sum(w * (pred - target)**2) / sum(w)``; ``weight=None`` is the plain mean.

    Entries with zero weight receive an exactly zero gradient.
    """
    target = _as_tensor(target)
    if pred.shape != target.shape:
        raise DimensionError(f"mse: {pred.shape} vs {target.shape}")
    diff = pred.data - target.data
    if weight is None:
        w = None
        denom = diff.size
    else:
        w = np.broadcast_to(np.asarray(weight, dtype=pred.dtype), pred.shape)
        denom = float(w.sum())
        if denom <= 0:
            raise ContractError("mse: weight has no positive mass")
    sq = diff * diff if w is None else w * diff * diff
    out = np.asarray(sq.sum() / denom, dtype=pred.dtype)

    def backward(g):
        d = (2.0 / denom) * diff if w is None else (2.0 / denom) * w * diff
        d = d * g
        if pred.requires_grad:
            pred._accumulate(d)
        if target.requires_grad:
            target._accumulate(-d)

    return _result(out, (pred, target), "mse", backward)


def mse_mean(a: Tensor, b) -> Tensor:
    return weighted_mse(a, b)


# ---------------------------------------------------------------------------
# spatial primitives


def _pad_index(n: int, p: int) -> np.ndarray:
    """Source indices of a reflect-padded axis (edge sample not repeated)."""
    idx = np.abs(np.arange(-p, n + p))
    return np.where(idx > n - 1, 2 * (n - 1) - idx, idx)


def _spatial_axes(layout: str) -> tuple[int, int]:
    return (2, 3) if _channel_axis(layout) == 1 else (1, 2)


def pad2d(x: Tensor, p: int, mode: str = "zero", layout: str = "NCHW") -> Tensor:
    if mode not in PADDING_MODES:
        raise ConfigurationError(f"unknown padding mode {mode!r}; expected one of {PADDING_MODES}")
    if p == 0:
        return x
    ah, aw = _spatial_axes(layout)
    H, W = x.shape[ah], x.shape[aw]
    if mode == "zero":
        widths = [(0, 0)] * 4
        widths[ah] = widths[aw] = (p, p)
        out = np.pad(x.data, widths)
        inner = [slice(None)] * 4
        inner[ah] = slice(p, p + H)
        inner[aw] = slice(p, p + W)
        inner = tuple(inner)

        def backward(g):
            x._accumulate(g[inner])

    else:
        if p > H - 1 or p > W - 1:
            raise DimensionError(f"reflect padding {p} too large for {H}x{W}")
        ri, ci = _pad_index(H, p), _pad_index(W, p)
        out = np.take(np.take(x.data, ri, axis=ah), ci, axis=aw)

        def backward(g):
            gm = np.moveaxis(g, (ah, aw), (0, 1))
            acc = np.zeros((H,) + gm.shape[1:], dtype=x.dtype)
            np.add.at(acc, ri, gm)
            res = np.zeros((H, W) + gm.shape[2:], dtype=x.dtype)
            np.add.at(res, (slice(None), ci), acc)
            x._accumulate(np.moveaxis(res, (0, 1), (ah, aw)))

    return _result(out, (x,), "pad", backward)


def _im2col_nhwc(xp: np.ndarray, k: int, H: int, W: int) -> np.ndarray:
    """(B, H+k-1, W+k-1, C) -> (B*H*W, k*k*C) patch matrix, (i, j, c) minor order."""
    B, C = xp.shape[0], xp.shape[3]
    cols = np.empty((B, H, W, k, k, C), dtype=xp.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, :, i, j, :] = xp[:, i : i + H, j : j + W, :]
    return cols.reshape(B * H * W, k * k * C)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, padding: str = "zero",
           layout: str = "NCHW") -> Tensor:
    """Stride-1 "same" cross-correlation with an (O, C, k, k) kernel.

    ``layout`` selects NCHW or NHWC activations; the kernel layout is the
    same for both. NHWC is the fast path, NCHW transposes around it.
    """
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise DimensionError(f"conv2d expects 4-D input and weight, got {x.shape}, {weight.shape}")
    if _channel_axis(layout) == 1:
        return to_channels_first(conv2d(to_channels_last(x), weight, bias, padding, "NHWC"))
    O, C, kh, kw = weight.shape
    if kh != kw or kh % 2 == 0:
        raise DimensionError(f"conv2d needs an odd square kernel, got {kh}x{kw}")
    if x.shape[3] != C:
        raise DimensionError(f"conv2d: input has {x.shape[3]} channels, weight expects {C}")
    if bias is not None and bias.shape != (O,):
        raise DimensionError(f"conv2d: bias shape {bias.shape} for {O} outputs")
    k, p = kh, kh // 2
    B, H, W, _ = x.shape
    xp = pad2d(x, p, padding, "NHWC")
    cols = _im2col_nhwc(xp.data, k, H, W)
    wmat = weight.data.transpose(2, 3, 1, 0).reshape(k * k * C, O)
    out = cols @ wmat
    if bias is not None:
        out += bias.data
    out = out.reshape(B, H, W, O)
    parents = (xp, weight) if bias is None else (xp, weight, bias)

    def backward(g):
        g2 = g.reshape(B * H * W, O)
        if weight.requires_grad:
            weight._accumulate((cols.T @ g2).reshape(k, k, C, O).transpose(3, 2, 0, 1))
        if bias is not None and bias.requires_grad:
            bias._accumulate(g2.sum(axis=0))
        if xp.requires_grad:
            # gradient w.r.t. the padded input: full correlation with the flipped kernel
            Hp, Wp = H + 2 * p, W + 2 * p
            gpad = np.pad(g, ((0, 0), (2 * p, 2 * p), (2 * p, 2 * p), (0, 0)))
            wflip = weight.data[:, :, ::-1, ::-1].transpose(2, 3, 0, 1).reshape(k * k * O, C)
            dxp = (_im2col_nhwc(gpad, k, Hp, Wp) @ wflip).reshape(B, Hp, Wp, C)
            xp._accumulate(dxp)

    return _result(out, parents, "conv2d", backward)


def maxpool2(x: Tensor, layout: str = "NCHW") -> Tensor:
    """2x2 max pooling, stride 2. Ties route the gradient to the first
    maximum in row-major order within the block."""
    if x.data.ndim != 4:
        raise DimensionError(f"maxpool2 expects a 4-D tensor, got {x.shape}")
    ah, aw = _spatial_axes(layout)
    H, W = x.shape[ah], x.shape[aw]
    if H % 2 or W % 2:
        raise DimensionError(f"maxpool2 needs even spatial size, got {H}x{W}")
    # move to (B, C, H, W) view, pool, move back
    xv = x.data if ah == 2 else x.data.transpose(0, 3, 1, 2)
    B, C = xv.shape[:2]
    blocks = xv.reshape(B, C, H // 2, 2, W // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, H // 2, W // 2, 4)
    arg = blocks.argmax(axis=-1)  # first maximum on ties
    pooled = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]
    out = pooled if ah == 2 else np.ascontiguousarray(pooled.transpose(0, 2, 3, 1))

    def backward(g):
        gv = g if ah == 2 else g.transpose(0, 3, 1, 2)
        gb = np.zeros(blocks.shape, dtype=x.dtype)
        np.put_along_axis(gb, arg[..., None], gv[..., None], axis=-1)
        gx = gb.reshape(B, C, H // 2, W // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, H, W)
        x._accumulate(gx if ah == 2 else gx.transpose(0, 2, 3, 1))

    return _result(out, (x,), "maxpool2", backward)


def upsample_nearest2(x: Tensor, layout: str = "NCHW") -> Tensor:
    if x.data.ndim != 4:
        raise DimensionError(f"upsample_nearest2 expects a 4-D tensor, got {x.shape}")
    ah, aw = _spatial_axes(layout)
    out = np.repeat(np.repeat(x.data, 2, axis=ah), 2, axis=aw)
    s = list(x.shape)
    split = s[:ah] + [s[ah], 2] + s[ah + 1 : aw] + [s[aw], 2] + s[aw + 1 :]

    def backward(g):
        x._accumulate(g.reshape(split).sum(axis=(ah + 1, aw + 2)))

    return _result(out, (x,), "upsample2", backward)


@dataclass
class BatchNormState:
    """Running statistics for one normalization layer (not differentiated)."""

    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5
    num_batches: int = field(default=0)

    @classmethod
    def create(cls, channels: int, dtype=np.float32, momentum: float = 0.1, eps: float = 1e-5) -> "BatchNormState":
        return cls(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype), momentum, eps)


def batchnorm(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState, training: bool,
              layout: str = "NCHW") -> Tensor:
    """Per-channel normalization; train mode uses batch statistics and
    updates the running estimates (unbiased variance), eval mode uses them."""
    if x.data.ndim != 4:
        raise DimensionError(f"batchnorm expects a 4-D tensor, got {x.shape}")
    ax = _channel_axis(layout)
    C = x.shape[ax]
    if gamma.shape != (C,) or beta.shape != (C,):
        raise DimensionError(f"batchnorm: scale/shift must have shape ({C},)")
    red = tuple(i for i in range(4) if i != ax)
    bshape = [1, 1, 1, 1]
    bshape[ax] = C
    n = x.data.size // C
    if training:
        if x.shape[0] < 2:
            raise ConfigurationError("batchnorm in train mode needs a batch of at least 2")
        mean = x.data.mean(axis=red)
        var = x.data.var(axis=red)
        m = state.momentum
        state.running_mean[...] = (1 - m) * state.running_mean + m * mean
        state.running_var[...] = (1 - m) * state.running_var + m * var * (n / (n - 1))
        state.num_batches += 1
    else:
        mean, var = state.running_mean, state.running_var
    invstd = (1.0 / np.sqrt(var + state.eps)).astype(x.dtype).reshape(bshape)
    xhat = (x.data - mean.astype(x.dtype).reshape(bshape)) * invstd
    out = xhat * gamma.data.reshape(bshape) + beta.data.reshape(bshape)

    def backward(g):
        if gamma.requires_grad:
            gamma._accumulate((g * xhat).sum(axis=red))
        if beta.requires_grad:
            beta._accumulate(g.sum(axis=red))
        if x.requires_grad:
            dxhat = g * gamma.data.reshape(bshape)
            if training:
                s1 = dxhat.sum(axis=red, keepdims=True)
                s2 = (dxhat * xhat).sum(axis=red, keepdims=True)
                dx = invstd / n * (n * dxhat - s1 - xhat * s2)
            else:
                dx = dxhat * invstd
            x._accumulate(dx)

    return _result(out.astype(x.dtype, copy=False), (x, gamma, beta), "batchnorm", backward)


# ---------------------------------------------------------------------------
# verification harness


def numeric_gradient(f: Callable[..., Tensor], points: Sequence[Tensor], step: float = 1e-5) -> list[np.ndarray]:
    """Central finite differences of scalar ``f(*points)`` w.r.t. each point."""
    grads = []
    for p in points:
        g = np.zeros(p.shape, dtype=np.float64)
        flat = p.data.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + step
            fp = float(f(*points).data)
            flat[i] = old - step
            fm = float(f(*points).data)
            flat[i] = old
            gflat[i] = (fp - fm) / (2 * step)
        grads.append(g)
    return grads


def grad_check(f: Callable[..., Tensor], point: Tensor | Sequence[Tensor], step: float = 1e-5) -> float:
    """Max element-wise relative error between reverse-mode and central-difference gradients.

    ``f`` is called as ``f(*points)`` and must return a single-element
    tensor. Relative error uses ``|a - n| / max(|a|, |n|, floor)`` with
    ``floor`` one thousandth of the largest gradient magnitude, so entries
    that are numerically zero are judged on an absolute scale.
    """
    points = [point] if isinstance(point, Tensor) else list(point)
    for p in points:
        p.requires_grad = True
        p.grad = None
    out = f(*points)
    if out.data.size != 1:
        raise ContractError(f"grad_check needs a scalar-valued function, got shape {out.shape}")
    out.backward()
    analytic = [np.zeros(p.shape) if p.grad is None else p.grad.astype(np.float64) for p in points]
    numeric = numeric_gradient(f, points, step)
    a = np.concatenate([x.ravel() for x in analytic])
    n = np.concatenate([x.ravel() for x in numeric])
    scale = max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0))
    if scale == 0.0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-3 * scale)
    return float(np.max(np.abs(a - n) / denom))
