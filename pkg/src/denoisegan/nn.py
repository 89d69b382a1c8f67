"""Convolutional layers, batch norm and the residual block.

Convolution is cross-correlation computed as im2col + matmul. The
transposed convolution is its exact adjoint: it shares the weight layout
``(in_ch_of_conv, out_ch_of_conv, k, k)`` read the other way round, so
``<conv2d(x, W), y> == <x, conv2d_transpose(y, W)>`` with zero bias.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .rng import Rng
from .tensor import DimensionError, Tensor, _result, add, leaky_relu, relu

LEAKY_SLOPE = 0.2
BN_EPS = 1e-5
BN_MOMENTUM = 0.1
INIT_STD = 0.02


class DegenerateStatisticsError(ValueError):
    pass


# -- parameter containers ---------------------------------------------------
class Module:
    """Minimal parameter/buffer registry.

    Attributes that are Tensors with ``requires_grad`` count as parameters;
    attributes listed in ``_buffers`` are persistent non-learnable state;
    nested Modules (and lists of Modules) are walked recursively.
    """

    _buffers: tuple[str, ...] = ()

    def _children(self):
        for name, val in vars(self).items():
            if isinstance(val, Module):
                yield name, val
            elif isinstance(val, (list, tuple)):
                for i, v in enumerate(val):
                    if isinstance(v, Module):
                        yield f"{name}.{i}", v

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for name, val in vars(self).items():
            if isinstance(val, Tensor) and name not in self._buffers:
                out[prefix + name] = val
        for name, child in self._children():
            out.update(child.named_parameters(f"{prefix}{name}."))
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def named_buffers(self, prefix: str = "") -> dict[str, Tensor]:
        out = {prefix + b: getattr(self, b) for b in self._buffers}
        for name, child in self._children():
            out.update(child.named_buffers(f"{prefix}{name}."))
        return out

    def state(self, prefix: str = "") -> dict[str, Tensor]:
        """Parameters and buffers together, for checkpointing."""
        return {**self.named_parameters(prefix), **self.named_buffers(prefix)}

    def set_requires_grad(self, flag: bool) -> None:
        for p in self.parameters():
            p.requires_grad = flag

    def astype(self, dtype) -> "Module":
        for t in self.state().values():
            t.data = t.data.astype(dtype)
            t.grad = None
        return self

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


def _trunc_normal(rng: Rng, shape, std: float, mean: float = 0.0) -> np.ndarray:
    """Gaussian truncated at two standard deviations (redraw outliers)."""
    n = int(np.prod(shape))
    vals = rng.normal(n)
    bad = np.abs(vals) > 2.0
    while bad.any():
        vals[bad] = rng.normal(int(bad.sum()))
        bad = np.abs(vals) > 2.0
    return (mean + std * vals).reshape(shape).astype(np.float32)


class Conv2dParams(Module):
    def __init__(self, in_ch: int, out_ch: int, k: int, stride: int = 1, padding: int = 0,
                 rng: Rng | None = None, std: float = INIT_STD, transpose: bool = False):
        self.in_ch, self.out_ch, self.k = in_ch, out_ch, k
        self.stride, self.padding = stride, padding
        self.transpose = transpose
        shape = (in_ch, out_ch, k, k) if transpose else (out_ch, in_ch, k, k)
        w = _trunc_normal(rng, shape, std) if rng is not None else np.zeros(shape, np.float32)
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(np.zeros(out_ch, np.float32), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        if self.transpose:
            return conv2d_transpose(x, self.weight, self.bias, self.stride, self.padding)
        return conv2d(x, self.weight, self.bias, self.stride, self.padding)


class BatchNormParams(Module):
    _buffers = ("running_mean", "running_var")

    def __init__(self, channels: int, rng: Rng | None = None, eps: float = BN_EPS,
                 momentum: float = BN_MOMENTUM):
        self.channels = channels
        self.eps, self.momentum = eps, momentum
        gamma = _trunc_normal(rng, (channels,), INIT_STD, mean=1.0) if rng is not None \
            else np.ones(channels, np.float32)
        self.gamma = Tensor(gamma, requires_grad=True)
        self.beta = Tensor(np.zeros(channels, np.float32), requires_grad=True)
        self.running_mean = Tensor(np.zeros(channels, np.float32))
        self.running_var = Tensor(np.ones(channels, np.float32))
        self.training = True
        self.update_stats = True

    def __call__(self, x: Tensor) -> Tensor:
        return batchnorm(x, self)


# -- convolution kernels ----------------------------------------------------
def conv_out_size(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def conv_transpose_out_size(n: int, k: int, stride: int, pad: int) -> int:
    return (n - 1) * stride - 2 * pad + k


def _im2col(xp: np.ndarray, k: int, s: int, Ho: int, Wo: int) -> np.ndarray:
    """(C, B, Hp, Wp) padded input -> (C*k*k, B*Ho*Wo) patch matrix."""
    C, B = xp.shape[:2]
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, : (Ho - 1) * s + 1 : s, : (Wo - 1) * s + 1 : s]
    return np.ascontiguousarray(win.transpose(0, 4, 5, 1, 2, 3)).reshape(C * k * k, B * Ho * Wo)


def _col2im(cols: np.ndarray, shape: tuple[int, int, int, int], k: int, s: int, Ho: int, Wo: int) -> np.ndarray:
    """Scatter-add a (C*k*k, B*Ho*Wo) patch matrix into a (C, B, Hp, Wp) canvas."""
    C, B = shape[:2]
    cols = cols.reshape(C, k, k, B, Ho, Wo)
    out = np.zeros(shape, dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            out[:, :, i : i + s * (Ho - 1) + 1 : s, j : j + s * (Wo - 1) + 1 : s] += cols[:, i, j]
    return out


def _channels_first(a: np.ndarray) -> np.ndarray:
    # (B, C, H, W) <-> (C, B, H, W); free when B == 1
    return a.transpose(1, 0, 2, 3)


def _pad(a: np.ndarray, p: int) -> np.ndarray:
    return np.pad(a, ((0, 0), (0, 0), (p, p), (p, p))) if p else a


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    if x.ndim != 4:
        raise DimensionError(f"conv2d expects (B, C, H, W), got {x.shape}")
    B, C, H, W = x.shape
    Co, Ci, k, _ = weight.shape
    if C != Ci:
        raise DimensionError(f"conv2d: input has {C} channels, weight {weight.shape} expects {Ci}")
    Ho, Wo = conv_out_size(H, k, stride, padding), conv_out_size(W, k, stride, padding)
    if Ho < 1 or Wo < 1:
        raise DimensionError(f"conv2d: output size {Ho}x{Wo} < 1 for input {x.shape}, k={k}, s={stride}, p={padding}")
    p = padding
    xp = _pad(_channels_first(x.data), p)
    if stride == 1 and Co < C:
        return _conv2d_narrow(x, weight, bias, xp, k, p, Ho, Wo)
    cols = _im2col(xp, k, stride, Ho, Wo)
    wm = weight.data.reshape(Co, -1)
    out = wm @ cols
    if bias is not None:
        out += bias.data[:, None]
    out = np.ascontiguousarray(_channels_first(out.reshape(Co, B, Ho, Wo)))

    def rule(g):
        gm = np.ascontiguousarray(_channels_first(g)).reshape(Co, -1)
        gx = None
        if x.requires_grad:
            if stride == 1 and Co < C and k - 1 - p >= 0:
                # correlate the padded output gradient with the flipped kernel
                wf = weight.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(C, -1)
                gp = _pad(gm.reshape(Co, B, Ho, Wo), k - 1 - p)
                gx_cf = (wf @ _im2col(gp, k, 1, H, W)).reshape(C, B, H, W)
            else:
                canvas = _col2im(wm.T @ gm, xp.shape, k, stride, Ho, Wo)
                gx_cf = canvas[:, :, p : p + H, p : p + W] if p else canvas
            gx = _channels_first(gx_cf)
        gw = (gm @ cols.T).reshape(weight.shape) if weight.requires_grad else None
        grads = [gx, gw]
        if bias is not None:
            grads.append(gm.sum(axis=1) if bias.requires_grad else None)
        return grads

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _result(out, parents, rule, "conv2d")


def _conv2d_narrow(x, weight, bias, xp, k, p, Ho, Wo):
    """Stride-1 conv with fewer output than input channels.

    Multiplies the weights into the whole padded input first and then sums
    k*k shifted slices, so no patch matrix is built. The weight gradient
    does the same in reverse: the output gradient is placed at every shift
    in a padded canvas and multiplied once against the input.
    """
    B, C, H, W = x.shape
    Co = weight.shape[0]
    Hp, Wp = xp.shape[2:]
    xm = xp.reshape(C, -1)
    wstack = np.ascontiguousarray(weight.data.transpose(2, 3, 0, 1)).reshape(k * k * Co, C)
    z = (wstack @ xm).reshape(k, k, Co, B, Hp, Wp)
    out = np.zeros((Co, B, Ho, Wo), dtype=z.dtype)
    for i in range(k):
        for j in range(k):
            out += z[i, j, :, :, i : i + Ho, j : j + Wo]
    if bias is not None:
        out += bias.data.reshape(-1, 1, 1, 1)
    out = np.ascontiguousarray(_channels_first(out))

    def rule(g):
        gcf = _channels_first(g)
        gx = None
        if x.requires_grad:
            wf = weight.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(C, -1)
            gp = _pad(gcf, k - 1 - p) if k - 1 - p >= 0 else None
            if gp is not None:
                gx = _channels_first((wf @ _im2col(gp, k, 1, H, W)).reshape(C, B, H, W))
            else:
                gz = wstack.T @ _shift_canvas(gcf, k, Hp, Wp).reshape(k * k * Co, -1)
                gx = _channels_first(gz.reshape(C, B, Hp, Wp)[:, :, p : p + H, p : p + W])
        gw = None
        if weight.requires_grad:
            canvas = _shift_canvas(gcf, k, Hp, Wp).reshape(k * k * Co, -1)
            gw = (canvas @ xm.T).reshape(k, k, Co, C).transpose(2, 3, 0, 1)
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)) if bias.requires_grad else None)
        return grads

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _result(out, parents, rule, "conv2d")


def _shift_canvas(gcf, k, Hp, Wp):
    # (Co, B, Ho, Wo) -> (k, k, Co, B, Hp, Wp) with g placed at offset (i, j)
    Co, B, Ho, Wo = gcf.shape
    canvas = np.zeros((k, k, Co, B, Hp, Wp), dtype=gcf.dtype)
    for i in range(k):
        for j in range(k):
            canvas[i, j, :, :, i : i + Ho, j : j + Wo] = gcf
    return canvas


def conv2d_transpose(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    if x.ndim != 4:
        raise DimensionError(f"conv2d_transpose expects (B, C, H, W), got {x.shape}")
    B, C, H, W = x.shape
    Ci, Co, k, _ = weight.shape
    if C != Ci:
        raise DimensionError(f"conv2d_transpose: input has {C} channels, weight {weight.shape} expects {Ci}")
    Ho, Wo = conv_transpose_out_size(H, k, stride, padding), conv_transpose_out_size(W, k, stride, padding)
    if Ho < 1 or Wo < 1:
        raise DimensionError(f"conv2d_transpose: output size {Ho}x{Wo} < 1 for input {x.shape}")
    p = padding
    full = (Co, B, (H - 1) * stride + k, (W - 1) * stride + k)
    xm = np.ascontiguousarray(_channels_first(x.data)).reshape(Ci, -1)
    wm = weight.data.reshape(Ci, -1)
    canvas = _col2im(wm.T @ xm, full, k, stride, H, W)
    out = canvas[:, :, p : p + Ho, p : p + Wo]
    if bias is not None:
        out = out + bias.data.reshape(-1, 1, 1, 1)
    out = np.ascontiguousarray(_channels_first(out))

    def rule(g):
        gp = _pad(_channels_first(g), p)
        gcols = _im2col(gp, k, stride, H, W)
        gx = _channels_first((wm @ gcols).reshape(Ci, B, H, W)) if x.requires_grad else None
        gw = (xm @ gcols.T).reshape(weight.shape) if weight.requires_grad else None
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)) if bias.requires_grad else None)
        return grads

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _result(out, parents, rule, "conv2d_transpose")


def max_pool2x2(x: Tensor) -> Tensor:
    B, C, H, W = x.shape
    if H % 2 or W % 2:
        raise DimensionError(f"max_pool2x2 needs even spatial dims, got {x.shape}")
    blocks = x.data.reshape(B, C, H // 2, 2, W // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, H // 2, W // 2, 4)
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

    def rule(g):
        gb = np.zeros(blocks.shape, dtype=g.dtype)
        np.put_along_axis(gb, idx[..., None], g[..., None], axis=-1)
        return (gb.reshape(B, C, H // 2, W // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, H, W),)

    return _result(out, (x,), rule, "max_pool2x2")


# -- batch norm -------------------------------------------------------------
def batchnorm(x: Tensor, p: BatchNormParams) -> Tensor:
    """Per-channel normalization over batch, height and width.

    Train mode normalizes with batch statistics (biased variance) and, when
    ``p.update_stats`` is set, folds them into the running estimates with the
    unbiased variance. Eval mode uses the running estimates.
    """
    if x.ndim != 4 or x.shape[1] != p.channels:
        raise DimensionError(f"batchnorm: expected (B, {p.channels}, H, W), got {x.shape}")
    B, C, H, W = x.shape
    gamma = p.gamma.data.reshape(1, C, 1, 1)
    beta = p.beta.data.reshape(1, C, 1, 1)
    if not p.training:
        rm = p.running_mean.data.reshape(1, C, 1, 1).astype(x.dtype)
        rv = p.running_var.data.reshape(1, C, 1, 1).astype(x.dtype)
        inv = 1.0 / np.sqrt(rv + p.eps)
        xhat = (x.data - rm) * inv
        out = gamma * xhat + beta

        def rule_eval(g):
            return (g * gamma * inv, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3)))

        return _result(out.astype(x.dtype), (x, p.gamma, p.beta), rule_eval, "batchnorm_eval")

    n = B * H * W
    if n < 2:
        raise DegenerateStatisticsError(f"batchnorm needs batch*H*W >= 2 in train mode, got {n} for {x.shape}")
    # statistics on a (C, B*H*W) channel-major matrix; free when B == 1
    xm = _channels_first(x.data).reshape(C, n)
    mu = xm.mean(axis=1, keepdims=True)
    xc = xm - mu
    var = np.einsum("ij,ij->i", xc, xc)[:, None] / n
    inv = (1.0 / np.sqrt(var + p.eps)).astype(x.dtype)
    xhat = xc * inv
    g_col = p.gamma.data.reshape(C, 1).astype(x.dtype)
    out = _channels_first((g_col * xhat + p.beta.data.reshape(C, 1)).reshape(C, B, H, W))
    if p.update_stats:
        m = p.momentum
        rm, rv = p.running_mean.data, p.running_var.data
        p.running_mean.data = ((1 - m) * rm + m * mu.reshape(C)).astype(rm.dtype)
        p.running_var.data = ((1 - m) * rv + m * var.reshape(C) * (n / (n - 1))).astype(rv.dtype)

    def rule(g):
        gm = _channels_first(g).reshape(C, n)
        ggamma = np.einsum("ij,ij->i", gm, xhat)
        gbeta = gm.sum(axis=1)
        scale = g_col * inv
        gx = scale * (gm - (gbeta / n)[:, None] - xhat * (ggamma / n)[:, None])
        return _channels_first(gx.reshape(C, B, H, W)), ggamma, gbeta

    return _result(np.ascontiguousarray(out, dtype=x.dtype), (x, p.gamma, p.beta), rule, "batchnorm")


# -- residual block ---------------------------------------------------------
class ResidualBlockParams(Module):
    """conv3x3 -> BN -> ReLU -> conv3x3 -> BN, added back onto the input."""

    def __init__(self, channels: int, rng: Rng | None = None):
        self.channels = channels
        self.conv1 = Conv2dParams(channels, channels, 3, 1, 1, rng)
        self.bn1 = BatchNormParams(channels, rng)
        self.conv2 = Conv2dParams(channels, channels, 3, 1, 1, rng)
        self.bn2 = BatchNormParams(channels, rng)

    def branch(self, x: Tensor) -> Tensor:
        h = relu(self.bn1(self.conv1(x)))
        return self.bn2(self.conv2(h))

    def __call__(self, x: Tensor) -> Tensor:
        return residual_block(x, self)


def residual_block(x: Tensor, p: ResidualBlockParams) -> Tensor:
    if x.ndim != 4 or x.shape[1] != p.channels:
        raise DimensionError(f"residual_block: expected {p.channels} channels, got {x.shape}")
    return add(p.branch(x), x)


def set_training(module: Module, training: bool) -> None:
    for sub in _walk(module):
        if isinstance(sub, BatchNormParams):
            sub.training = training


def set_update_stats(module: Module, flag: bool) -> None:
    for sub in _walk(module):
        if isinstance(sub, BatchNormParams):
            sub.update_stats = flag


def _walk(module: Module):
    yield module
    for _, child in module._children():
        yield from _walk(child)


__all__ = [
    "BatchNormParams", "Conv2dParams", "DegenerateStatisticsError", "Module", "ResidualBlockParams",
    "batchnorm", "conv2d", "conv2d_transpose", "conv_out_size", "conv_transpose_out_size",
    "leaky_relu", "max_pool2x2", "relu", "residual_block", "set_training", "set_update_stats",
    "LEAKY_SLOPE",
]
