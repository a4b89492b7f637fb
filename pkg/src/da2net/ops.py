"""Forward and reverse-mode implementations of the network primitives.

Grouped 2-D convolution, shared-kernel 1-D convolution across channels,
global average pooling, batch normalization, sigmoid/ReLU, the linear head,
and small glue ops (add, reshape, reduce_sum). Every primitive takes an
optional ``tape``; when given, it records a VJP closure so
:func:`backward` can propagate a scalar loss gradient to all inputs.

Convolution is cross-correlation (no kernel flip). Spatial output extents
follow ``floor((H + 2*padding - n) / stride) + 1`` and must be positive.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ShapeError
from .tape import OpTape, backward
from .tensor import Tensor

__all__ = [
    "Conv2dParams",
    "BatchNormParams",
    "OpTape",
    "backward",
    "conv2d_grouped",
    "conv1d_channel",
    "global_avg_pool",
    "batch_norm",
    "sigmoid",
    "relu",
    "linear",
    "add",
    "reshape",
    "reduce_sum",
]


@dataclass
class Conv2dParams:
    """Weights and hyperparameters of a grouped 2-D convolution.

    ``weight`` has shape (C_out, C_in/groups, n, n); with
    groups == C_in == C_out this is exactly depthwise convolution.
    """

    weight: Tensor
    bias: Tensor | None = None
    groups: int = 1
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        w = self.weight
        if w.ndim != 4:
            raise ShapeError(f"conv weight must be 4-D (C_out, C_in/groups, n, n), got {w.shape}")
        if w.shape[2] != w.shape[3]:
            raise ShapeError(f"conv kernel must be square, got {w.shape[2]}x{w.shape[3]}")
        if self.groups < 1:
            raise ShapeError(f"groups must be >= 1, got {self.groups}")
        if w.shape[0] % self.groups != 0:
            raise ShapeError(
                f"C_out={w.shape[0]} not divisible by groups={self.groups}")
        if self.bias is not None and self.bias.shape != (w.shape[0],):
            raise ShapeError(
                f"bias shape {self.bias.shape} does not match C_out={w.shape[0]}")
        if self.stride < 1:
            raise ShapeError(f"stride must be >= 1, got {self.stride}")
        if self.padding < 0:
            raise ShapeError(f"padding must be >= 0, got {self.padding}")

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1] * self.groups

    @property
    def kernel_size(self) -> int:
        return self.weight.shape[2]


@dataclass
class BatchNormParams:
    """Per-channel affine transform plus running statistics.

    ``momentum`` is the retention factor of the running-stat moving average:
    running <- momentum * running + (1 - momentum) * batch_stat.
    Running stats are replaced (fields rebound to fresh tensors) by
    train-mode :func:`batch_norm`; the tensors themselves stay immutable.
    """

    gamma: Tensor
    beta: Tensor
    running_mean: Tensor = field(default=None)  # type: ignore[assignment]
    running_var: Tensor = field(default=None)  # type: ignore[assignment]
    momentum: float = 0.9
    epsilon: float = 1e-5

    def __post_init__(self):
        c = self.gamma.shape
        if len(c) != 1:
            raise ShapeError(f"gamma must be 1-D, got shape {c}")
        if self.running_mean is None:
            self.running_mean = Tensor(np.zeros(c, dtype=self.gamma.dtype))
        if self.running_var is None:
            self.running_var = Tensor(np.ones(c, dtype=self.gamma.dtype))
        for name in ("beta", "running_mean", "running_var"):
            t = getattr(self, name)
            if t.shape != c:
                raise ShapeError(f"{name} shape {t.shape} does not match gamma shape {c}")
        if np.any(self.running_var.data < 0):
            raise ShapeError("running_var must be >= 0 elementwise")
        if not 0.0 < self.momentum < 1.0:
            raise ConfigError(f"momentum must be in (0,1), got {self.momentum}")
        if not self.epsilon > 0:
            raise ConfigError(f"epsilon must be positive, got {self.epsilon}")

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]


def _conv_out_extent(extent: int, kernel: int, stride: int, padding: int) -> int:
    out = (extent + 2 * padding - kernel) // stride + 1
    if out < 1:
        raise ShapeError(
            f"non-positive output extent: (H + 2*{padding} - {kernel})//{stride} + 1 = {out} "
            f"for input extent {extent}")
    return out


def conv2d_grouped(x: Tensor, p: Conv2dParams, tape: OpTape | None = None) -> Tensor:
    """Grouped 2-D cross-correlation of an NCHW tensor.

    Channels are split into `groups` contiguous blocks convolved
    independently; groups=1 is standard convolution, groups=C is depthwise.
    """
    if x.ndim != 4:
        raise ShapeError(f"conv input must be NCHW, got shape {x.shape}")
    n_batch, c_in, h, w_ext = x.shape
    if c_in % p.groups != 0:
        raise ShapeError(f"C_in={c_in} not divisible by groups={p.groups}")
    if c_in != p.in_channels:
        raise ShapeError(
            f"input has {c_in} channels but weights expect {p.in_channels} "
            f"({p.groups} groups x {p.weight.shape[1]} channels)")
    k = p.kernel_size
    ho = _conv_out_extent(h, k, p.stride, p.padding)
    wo = _conv_out_extent(w_ext, k, p.stride, p.padding)

    g, s, pad = p.groups, p.stride, p.padding
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    if g == c_in == p.out_channels:
        fwd, vjp_fn = _conv_depthwise(xp, p.weight.data, s, ho, wo)
    elif n_batch * c_in * ho * wo * k * k * xp.itemsize <= _IM2COL_BYTES:
        fwd, vjp_fn = _conv_im2col(xp, p.weight.data, g, s, ho, wo)
    else:
        fwd, vjp_fn = _conv_shift_add(xp, p.weight.data, g, s, ho, wo)
    out_arr = fwd
    if p.bias is not None:
        out_arr = out_arr + p.bias.data.reshape(1, -1, 1, 1)
    out = Tensor(out_arr)

    if tape is not None:
        inputs = (x, p.weight) if p.bias is None else (x, p.weight, p.bias)

        def vjp(grad):
            dxp, dweight = vjp_fn(grad)
            dx = dxp[:, :, pad:pad + h, pad:pad + w_ext]
            if p.bias is None:
                return dx, dweight
            return dx, dweight, grad.sum(axis=(0, 2, 3))

        tape.record("conv2d_grouped", inputs, out, vjp)
    return out


# im2col buffers above this size fall back to the loop strategy
_IM2COL_BYTES = 256 * 1024 * 1024


def _conv_depthwise(xp, w, s, ho, wo):
    """groups == C_in == C_out: per-channel fused shift-multiply-add."""
    n, c, _, _ = xp.shape
    k = w.shape[2]
    acc = np.zeros((n, c, ho, wo), dtype=xp.dtype)
    for ky in range(k):
        for kx in range(k):
            acc += xp[:, :, ky:ky + s * ho:s, kx:kx + s * wo:s] \
                * w[:, 0, ky, kx][None, :, None, None]

    def vjp_fn(grad):
        dw = np.zeros_like(w)
        dxp = np.zeros_like(xp)
        for ky in range(k):
            for kx in range(k):
                xs = xp[:, :, ky:ky + s * ho:s, kx:kx + s * wo:s]
                dw[:, 0, ky, kx] = (grad * xs).sum(axis=(0, 2, 3))
                dxp[:, :, ky:ky + s * ho:s, kx:kx + s * wo:s] += \
                    grad * w[:, 0, ky, kx][None, :, None, None]
        return dxp, dw

    return acc, vjp_fn


def _conv_im2col(xp, w, g, s, ho, wo):
    """Patch-gather then one batched GEMM per direction."""
    n, c_in, _, _ = xp.shape
    c_out, cg_in, k, _ = w.shape
    cg_out = c_out // g
    sw = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    sw = sw[:, :, ::s, ::s].reshape(n, g, cg_in, ho, wo, k, k)
    cols = np.ascontiguousarray(sw.transpose(1, 0, 3, 4, 2, 5, 6))
    cols = cols.reshape(g, n * ho * wo, cg_in * k * k)
    wm = w.reshape(g, cg_out, cg_in * k * k)
    prod = np.matmul(cols, wm.transpose(0, 2, 1))  # (g, n*ho*wo, cg_out)
    fwd = prod.reshape(g, n, ho, wo, cg_out).transpose(1, 0, 4, 2, 3)
    fwd = np.ascontiguousarray(fwd).reshape(n, c_out, ho, wo)

    def vjp_fn(grad):
        gg = grad.reshape(n, g, cg_out, ho, wo).transpose(1, 0, 3, 4, 2)
        gg = np.ascontiguousarray(gg).reshape(g, n * ho * wo, cg_out)
        dwm = np.matmul(gg.transpose(0, 2, 1), cols)
        dcols = np.matmul(gg, wm)
        dsw = dcols.reshape(g, n, ho, wo, cg_in, k, k).transpose(1, 0, 4, 2, 3, 5, 6)
        dxp_g = np.zeros((n, g, cg_in) + xp.shape[2:], dtype=xp.dtype)
        for ky in range(k):
            for kx in range(k):
                dxp_g[:, :, :, ky:ky + s * ho:s, kx:kx + s * wo:s] += dsw[..., ky, kx]
        return dxp_g.reshape(xp.shape), dwm.reshape(w.shape)

    return fwd, vjp_fn


def _conv_shift_add(xp, w, g, s, ho, wo):
    """k^2 grouped contractions; bounded memory for very large activations."""
    n, c_in, _, _ = xp.shape
    c_out, cg_in, k, _ = w.shape
    cg_out = c_out // g
    xg = xp.reshape(n, g, cg_in, xp.shape[2], xp.shape[3])
    wg = w.reshape(g, cg_out, cg_in, k, k)
    acc = np.zeros((n, g, cg_out, ho, wo), dtype=xp.dtype)
    for ky in range(k):
        for kx in range(k):
            xs = xg[:, :, :, ky:ky + s * ho:s, kx:kx + s * wo:s]
            acc += np.einsum("ngchw,goc->ngohw", xs, wg[:, :, :, ky, kx], optimize=True)
    fwd = acc.reshape(n, c_out, ho, wo)

    def vjp_fn(grad):
        gg = grad.reshape(n, g, cg_out, ho, wo)
        dw = np.zeros_like(wg)
        dxp = np.zeros_like(xg)
        for ky in range(k):
            for kx in range(k):
                xs = xg[:, :, :, ky:ky + s * ho:s, kx:kx + s * wo:s]
                dw[:, :, :, ky, kx] = np.einsum("ngchw,ngohw->goc", xs, gg, optimize=True)
                dxp[:, :, :, ky:ky + s * ho:s, kx:kx + s * wo:s] += np.einsum(
                    "ngohw,goc->ngchw", gg, wg[:, :, :, ky, kx], optimize=True)
        return dxp.reshape(xp.shape), dw.reshape(w.shape)

    return fwd, vjp_fn


def conv1d_channel(d: Tensor, kernel: Tensor, bias: Tensor | None = None,
                   tape: OpTape | None = None) -> Tensor:
    """Slide one shared odd-width kernel across the channel axis of (N, C).

    Zero padding of (alpha-1)/2 on each side keeps the channel count; the
    same weights combine every channel's neighborhood (weight sharing).
    """
    if d.ndim != 2:
        raise ShapeError(f"conv1d input must be (N, C), got shape {d.shape}")
    if kernel.ndim != 1:
        raise ShapeError(f"kernel must be 1-D, got shape {kernel.shape}")
    alpha = kernel.size
    if alpha % 2 == 0:
        raise ConfigError(f"alpha must be odd (alpha=2y+1), got {alpha}")
    if alpha < 3:
        raise ConfigError(f"alpha must be >= 3, got {alpha}")
    n_batch, c = d.shape
    if alpha > c:
        warnings.warn(f"alpha={alpha} exceeds channel count C={c}; "
                      "the window sees mostly zero padding", stacklevel=2)
    if bias is not None and bias.size != 1:
        raise ShapeError(f"conv1d bias must be a single scalar, got shape {bias.shape}")

    pad = (alpha - 1) // 2
    dp = np.pad(d.data, ((0, 0), (pad, pad)))
    kd = kernel.data
    acc = np.zeros_like(d.data)
    for i in range(alpha):
        acc += kd[i] * dp[:, i:i + c]
    if bias is not None:
        acc = acc + bias.data.reshape(())
    out = Tensor(acc)

    if tape is not None:
        inputs = (d, kernel) if bias is None else (d, kernel, bias)

        def vjp(grad):
            dk = np.empty_like(kd)
            ddp = np.zeros_like(dp)
            for i in range(alpha):
                dk[i] = np.sum(grad * dp[:, i:i + c])
                ddp[:, i:i + c] += kd[i] * grad
            dd = ddp[:, pad:pad + c]
            if bias is None:
                return dd, dk
            return dd, dk, grad.sum(keepdims=True).reshape(1)

        tape.record("conv1d_channel", inputs, out, vjp)
    return out


def global_avg_pool(x: Tensor, tape: OpTape | None = None) -> Tensor:
    """Mean over the spatial axes: (N, C, H, W) -> (N, C)."""
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool input must be NCHW, got shape {x.shape}")
    n_batch, c, h, w = x.shape
    out = Tensor(x.data.mean(axis=(2, 3)))
    if tape is not None:
        def vjp(grad):
            scaled = grad[:, :, None, None] / (h * w)
            return (np.broadcast_to(scaled, x.shape).astype(x.dtype, copy=True),)

        tape.record("global_avg_pool", (x,), out, vjp)
    return out


def batch_norm(x: Tensor, p: BatchNormParams, mode: str,
               tape: OpTape | None = None) -> Tensor:
    """Per-channel normalization with learnable scale and shift.

    Train mode normalizes by the batch statistics over (N, H, W) (population
    variance) and rebinds ``p.running_mean``/``p.running_var`` to the updated
    moving averages; eval mode uses the stored running statistics and is
    batch-size independent.
    """
    if x.ndim != 4:
        raise ShapeError(f"batch_norm input must be NCHW, got shape {x.shape}")
    if x.shape[1] != p.channels:
        raise ShapeError(f"input has {x.shape[1]} channels, params have {p.channels}")
    if mode not in ("train", "eval"):
        raise ConfigError(f"mode must be 'train' or 'eval', got {mode!r}")

    gamma = p.gamma.data.reshape(1, -1, 1, 1)
    beta = p.beta.data.reshape(1, -1, 1, 1)

    if mode == "train":
        n_batch, _, h, w = x.shape
        m = n_batch * h * w
        if m < 2:
            raise ShapeError(
                f"train-mode batch norm needs >= 2 values per channel, got {m} "
                "(variance undefined)")
        mu = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        inv_std = 1.0 / np.sqrt(var + p.epsilon)
        xhat = (x.data - mu.reshape(1, -1, 1, 1)) * inv_std.reshape(1, -1, 1, 1)
        out = Tensor(gamma * xhat + beta)

        mom = p.momentum
        p.running_mean = Tensor(
            (mom * p.running_mean.data + (1.0 - mom) * mu).astype(p.running_mean.dtype))
        p.running_var = Tensor(
            (mom * p.running_var.data + (1.0 - mom) * var).astype(p.running_var.dtype))

        if tape is not None:
            def vjp(grad):
                dgamma = np.einsum("nchw,nchw->c", grad, xhat)
                dbeta = grad.sum(axis=(0, 2, 3))
                dxhat = grad * gamma
                s1 = dxhat.sum(axis=(0, 2, 3), keepdims=True)
                s2 = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
                dx = (inv_std.reshape(1, -1, 1, 1) / m) * (m * dxhat - s1 - xhat * s2)
                return dx.astype(x.dtype), dgamma, dbeta

            tape.record("batch_norm", (x, p.gamma, p.beta), out, vjp)
        return out

    inv_std = 1.0 / np.sqrt(p.running_var.data + p.epsilon)
    xhat = (x.data - p.running_mean.data.reshape(1, -1, 1, 1)) * inv_std.reshape(1, -1, 1, 1)
    out = Tensor(gamma * xhat + beta)
    if tape is not None:
        def vjp(grad):
            dgamma = np.einsum("nchw,nchw->c", grad, xhat)
            dbeta = grad.sum(axis=(0, 2, 3))
            dx = grad * gamma * inv_std.reshape(1, -1, 1, 1)
            return dx.astype(x.dtype), dgamma, dbeta

        tape.record("batch_norm", (x, p.gamma, p.beta), out, vjp)
    return out


def sigmoid(x: Tensor, tape: OpTape | None = None) -> Tensor:
    """1 / (1 + exp(-x)), computed via exp of -|x| so large inputs never overflow."""
    v = x.data
    out_arr = np.empty_like(v)
    pos = v >= 0
    out_arr[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out_arr[~pos] = ev / (1.0 + ev)
    out = Tensor(out_arr)
    if tape is not None:
        def vjp(grad):
            return (grad * out_arr * (1.0 - out_arr),)

        tape.record("sigmoid", (x,), out, vjp)
    return out


def relu(x: Tensor, tape: OpTape | None = None) -> Tensor:
    """max(0, x) elementwise."""
    out = Tensor(np.maximum(x.data, 0))
    if tape is not None:
        mask = x.data > 0

        def vjp(grad):
            return (grad * mask,)

        tape.record("relu", (x,), out, vjp)
    return out


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           tape: OpTape | None = None) -> Tensor:
    """Affine map (N, F) @ weight(K, F)^T + bias(K) -> (N, K)."""
    if x.ndim != 2 or weight.ndim != 2:
        raise ShapeError(f"linear expects 2-D input and weight, got {x.shape} and {weight.shape}")
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(f"input features {x.shape[1]} do not match weight features {weight.shape[1]}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"bias shape {bias.shape} does not match out features {weight.shape[0]}")
    out_arr = x.data @ weight.data.T
    if bias is not None:
        out_arr = out_arr + bias.data
    out = Tensor(out_arr)
    if tape is not None:
        inputs = (x, weight) if bias is None else (x, weight, bias)

        def vjp(grad):
            dx = grad @ weight.data
            dw = grad.T @ x.data
            if bias is None:
                return dx, dw
            return dx, dw, grad.sum(axis=0)

        tape.record("linear", inputs, out, vjp)
    return out


def add(x: Tensor, y: Tensor, tape: OpTape | None = None) -> Tensor:
    """Elementwise sum of two same-shape tensors (residual join)."""
    if x.shape != y.shape:
        raise ShapeError(f"add needs matching shapes, got {x.shape} and {y.shape}")
    out = Tensor(x.data + y.data)
    if tape is not None:
        def vjp(grad):
            return grad, grad

        tape.record("add", (x, y), out, vjp)
    return out


def reshape(x: Tensor, shape, tape: OpTape | None = None) -> Tensor:
    """View x under a new shape with the same number of elements."""
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != x.size:
        raise ShapeError(f"cannot reshape {x.shape} ({x.size} elements) to {shape}")
    out = Tensor(x.data.reshape(shape))
    if tape is not None:
        def vjp(grad):
            return (grad.reshape(x.shape),)

        tape.record("reshape", (x,), out, vjp)
    return out


def reduce_sum(x: Tensor, tape: OpTape | None = None) -> Tensor:
    """Sum all elements to a single-element tensor."""
    out = Tensor(np.asarray([x.data.sum()], dtype=x.dtype))
    if tape is not None:
        def vjp(grad):
            return (np.full(x.shape, grad.reshape(-1)[0], dtype=x.dtype),)

        tape.record("reduce_sum", (x,), out, vjp)
    return out
