"""Network layers: strided convolution, transposed convolution, batch
normalization and activations, each with a hand-derived backward pass.

Convolution uses cross-correlation semantics (no kernel flip). The
transposed convolution is the exact adjoint of the forward convolution with
the same parameters: <conv(a), b> == <a, deconv(b)> for zero bias. Weights
are stored as (c0, c1, kh, kw); a forward convolution reads axis 0 as its
output channels, a transposed convolution reads axis 0 as its *input*
channels, which is what makes the two operations share one parameter block.

There is no autodiff tape here. Every backward pass is the analytic
gradient of sum-style losses through the layer, validated against central
finite differences in the test suite.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import ContractError, Tensor


@dataclass
class ConvParams:
    """Parameters shared by conv2d and deconv2d.

    weights: (c0, c1, kh, kw). Forward conv maps c1 -> c0 channels; a
    transposed conv maps c0 -> c1. The bias length must match the op's
    output channel count (c0 for conv, c1 for deconv).
    """

    weights: Tensor
    bias: Tensor
    stride: int = 1
    padding: int = 0


@dataclass
class LayerGrads:
    """Gradient bundle for one layer; shapes match the forward arguments."""

    grad_input: Tensor
    grad_weights: Tensor | None = None
    grad_bias: Tensor | None = None


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def deconv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size - 1) * stride - 2 * padding + kernel


def _pad2d(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def _windows(xp: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    """Strided (N, C, Ho, Wo, kh, kw) view over a padded input."""
    v = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return v[:, :, ::stride, ::stride]


def _correlate(x: np.ndarray, w: np.ndarray, stride: int, padding: int) -> np.ndarray:
    """out[n,o,i,j] = sum_{c,u,v} w[o,c,u,v] * xp[n,c,i*s+u,j*s+v]."""
    kh, kw = w.shape[2], w.shape[3]
    win = _windows(_pad2d(x, padding), kh, kw, stride)
    out = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))  # (N, Ho, Wo, O)
    return np.ascontiguousarray(np.moveaxis(out, 3, 1))


def _scatter(gy: np.ndarray, w: np.ndarray, stride: int, padding: int,
             out_hw: tuple) -> np.ndarray:
    """Adjoint of _correlate: accumulate gy back through the kernel taps.

    gy: (N, c0, Ho, Wo), w: (c0, c1, kh, kw) -> (N, c1, H, W) with
    H, W = out_hw. Overlapping windows are handled by one strided
    accumulation per kernel tap.
    """
    n, _, ho, wo = gy.shape
    c1, kh, kw = w.shape[1], w.shape[2], w.shape[3]
    h, wd = out_hw
    contrib = np.tensordot(gy, w, axes=([1], [0]))  # (N, Ho, Wo, c1, kh, kw)
    contrib = np.moveaxis(contrib, 3, 1)  # (N, c1, Ho, Wo, kh, kw)
    acc = np.zeros((n, c1, h + 2 * padding, wd + 2 * padding), dtype=gy.dtype)
    for u in range(kh):
        for v in range(kw):
            acc[:, :, u:u + stride * ho:stride,
                v:v + stride * wo:stride] += contrib[..., u, v]
    if padding:
        acc = acc[:, :, padding:padding + h, padding:padding + wd]
    return np.ascontiguousarray(acc)


def _check_conv_pre(x: Tensor, p: ConvParams, transposed: bool) -> tuple:
    if x.ndim != 4:
        raise ContractError(f"conv input must be NCHW, got shape {x.shape}")
    if p.weights.ndim != 4:
        raise ContractError(f"weights must be 4-d, got shape {p.weights.shape}")
    n, c, h, w = x.shape
    c0, c1, kh, kw = p.weights.shape
    in_ch = c0 if transposed else c1
    out_ch = c1 if transposed else c0
    if c != in_ch:
        raise ContractError(
            f"channel mismatch: input has {c} channels, weights expect {in_ch}")
    if p.bias.shape != (out_ch,):
        raise ContractError(
            f"bias shape {p.bias.shape} does not match {out_ch} output channels")
    if transposed:
        ho = deconv_output_size(h, kh, p.stride, p.padding)
        wo = deconv_output_size(w, kw, p.stride, p.padding)
    else:
        ho = conv_output_size(h, kh, p.stride, p.padding)
        wo = conv_output_size(w, kw, p.stride, p.padding)
    if ho < 1 or wo < 1:
        raise ContractError(
            f"non-positive output size {ho}x{wo} from input {h}x{w}, "
            f"kernel {kh}x{kw}, stride {p.stride}, padding {p.padding}")
    return ho, wo


def conv2d_forward(x: Tensor, p: ConvParams) -> Tensor:
    """Strided cross-correlation: (N, c1, H, W) -> (N, c0, H', W')."""
    _check_conv_pre(x, p, transposed=False)
    out = _correlate(x.array, p.weights.array, p.stride, p.padding)
    out += p.bias.array[None, :, None, None]
    return Tensor(out)


def conv2d_backward(x: Tensor, p: ConvParams, grad_output: Tensor) -> LayerGrads:
    """Gradients of a scalar loss through conv2d_forward.

    grad_bias[o]    = sum_{n,i,j} gy[n,o,i,j]
    grad_weights    = correlation of the padded input with gy
    grad_input      = gy scattered back through the kernel (the adjoint map)
    """
    ho, wo = _check_conv_pre(x, p, transposed=False)
    gy = grad_output.array
    if gy.shape != (x.shape[0], p.weights.shape[0], ho, wo):
        raise ContractError(
            f"grad_output shape {grad_output.shape} does not match forward "
            f"output {(x.shape[0], p.weights.shape[0], ho, wo)}")
    kh, kw = p.weights.shape[2], p.weights.shape[3]
    win = _windows(_pad2d(x.array, p.padding), kh, kw, p.stride)
    grad_w = np.tensordot(gy, win, axes=([0, 2, 3], [0, 2, 3]))  # (c0, c1, kh, kw)
    grad_b = gy.sum(axis=(0, 2, 3))
    grad_x = _scatter(gy, p.weights.array, p.stride, p.padding, x.shape[2:])
    return LayerGrads(Tensor(grad_x), Tensor(np.ascontiguousarray(grad_w)),
                      Tensor(grad_b))


def deconv2d_forward(x: Tensor, p: ConvParams) -> Tensor:
    """Transposed convolution: (N, c0, H, W) -> (N, c1, H'', W'')."""
    ho, wo = _check_conv_pre(x, p, transposed=True)
    out = _scatter(x.array, p.weights.array, p.stride, p.padding, (ho, wo))
    out += p.bias.array[None, :, None, None]
    return Tensor(out)


def deconv2d_backward(x: Tensor, p: ConvParams, grad_output: Tensor) -> LayerGrads:
    """Gradients through deconv2d_forward.

    Because deconv is the adjoint of conv, grad_input is a plain forward
    correlation of grad_output with the same weights, and grad_weights is
    the correlation of the input with windows of the padded grad_output.
    """
    ho, wo = _check_conv_pre(x, p, transposed=True)
    gy = grad_output.array
    if gy.shape != (x.shape[0], p.weights.shape[1], ho, wo):
        raise ContractError(
            f"grad_output shape {grad_output.shape} does not match forward "
            f"output {(x.shape[0], p.weights.shape[1], ho, wo)}")
    kh, kw = p.weights.shape[2], p.weights.shape[3]
    grad_x = _correlate(gy, p.weights.array, p.stride, p.padding)
    gy_win = _windows(_pad2d(gy, p.padding), kh, kw, p.stride)
    # grad_w[a,b,u,v] = sum_{n,i,j} x[n,a,i,j] * gyp[n,b,i*s+u,j*s+v]
    grad_w = np.tensordot(x.array, gy_win, axes=([0, 2, 3], [0, 2, 3]))
    grad_b = gy.sum(axis=(0, 2, 3))
    return LayerGrads(Tensor(grad_x), Tensor(np.ascontiguousarray(grad_w)),
                      Tensor(grad_b))


@dataclass
class BatchNormState:
    """Per-channel batch normalization parameters and running statistics."""

    gamma: Tensor
    beta: Tensor
    running_mean: Tensor
    running_var: Tensor
    epsilon: float = 1e-5
    momentum: float = 0.1

    @classmethod
    def init(cls, channels: int, epsilon: float = 1e-5, momentum: float = 0.1,
             dtype="float64") -> "BatchNormState":
        from .tensor import DTYPES
        dt = DTYPES.get(dtype, dtype)
        return cls(gamma=Tensor(np.ones(channels, dtype=dt)),
                   beta=Tensor(np.zeros(channels, dtype=dt)),
                   running_mean=Tensor(np.zeros(channels, dtype=dt)),
                   running_var=Tensor(np.ones(channels, dtype=dt)),
                   epsilon=epsilon, momentum=momentum)


def _bn_check(x: Tensor, s: BatchNormState, train: bool) -> None:
    if x.ndim != 4:
        raise ContractError(f"batchnorm input must be NCHW, got {x.shape}")
    c = x.shape[1]
    if s.gamma.shape != (c,):
        raise ContractError(
            f"batchnorm state has {s.gamma.shape[0]} channels, input has {c}")
    if train:
        count = x.shape[0] * x.shape[2] * x.shape[3]
        if count < 2:
            raise ContractError(
                f"train-mode batchnorm needs >= 2 elements per channel, got {count}")


def batchnorm2d_forward(x: Tensor, s: BatchNormState, *, train: bool,
                        update_running: bool = True) -> Tensor:
    """Normalize per channel over (N, H, W); train mode uses batch statistics.

    In train mode the running statistics are updated in place with
    new-stat weight `momentum` unless update_running is False (used when a
    network is driven for gradients only and must stay bit-unchanged).
    """
    _bn_check(x, s, train)
    xa = x.array
    if train:
        mean = xa.mean(axis=(0, 2, 3))
        var = xa.var(axis=(0, 2, 3))
        if update_running:
            m = s.momentum
            s.running_mean.array[:] = (1 - m) * s.running_mean.array + m * mean
            s.running_var.array[:] = (1 - m) * s.running_var.array + m * var
    else:
        mean = s.running_mean.array
        var = s.running_var.array
    inv_std = 1.0 / np.sqrt(var + s.epsilon)
    xhat = (xa - mean[None, :, None, None]) * inv_std[None, :, None, None]
    out = s.gamma.array[None, :, None, None] * xhat + s.beta.array[None, :, None, None]
    return Tensor(out.astype(xa.dtype, copy=False))


def batchnorm2d_backward(x: Tensor, s: BatchNormState, grad_output: Tensor, *,
                         train: bool) -> LayerGrads:
    """Gradients through batchnorm; grad_weights is d/dgamma, grad_bias d/dbeta.

    Train mode differentiates through the batch statistics; eval mode
    treats the running statistics as constants. Batch statistics are
    recomputed from x, so calling backward never touches running stats.
    """
    _bn_check(x, s, train)
    xa = x.array
    gy = grad_output.array
    if gy.shape != xa.shape:
        raise ContractError(f"grad_output shape {gy.shape} != input {xa.shape}")
    axes = (0, 2, 3)
    if train:
        m = xa.shape[0] * xa.shape[2] * xa.shape[3]
        mean = xa.mean(axis=axes)
        var = xa.var(axis=axes)
        inv_std = 1.0 / np.sqrt(var + s.epsilon)
        xc = xa - mean[None, :, None, None]
        xhat = xc * inv_std[None, :, None, None]
        dgamma = (gy * xhat).sum(axis=axes)
        dbeta = gy.sum(axis=axes)
        dxhat = gy * s.gamma.array[None, :, None, None]
        # classic batch-stat chain rule, folded form
        t1 = dxhat.sum(axis=axes)[None, :, None, None]
        t2 = (dxhat * xhat).sum(axis=axes)[None, :, None, None]
        dx = (inv_std[None, :, None, None] / m) * (m * dxhat - t1 - xhat * t2)
    else:
        inv_std = 1.0 / np.sqrt(s.running_var.array + s.epsilon)
        xhat = (xa - s.running_mean.array[None, :, None, None]) \
            * inv_std[None, :, None, None]
        dgamma = (gy * xhat).sum(axis=axes)
        dbeta = gy.sum(axis=axes)
        dx = gy * (s.gamma.array * inv_std)[None, :, None, None]
    return LayerGrads(Tensor(dx.astype(xa.dtype, copy=False)),
                      Tensor(dgamma), Tensor(dbeta))


ACTIVATIONS = ("leaky_relu", "relu", "tanh", "sigmoid")


def activation_forward(kind: str, x: Tensor, *, slope: float = 0.2) -> Tensor:
    xa = x.array
    if kind == "leaky_relu":
        return Tensor(np.where(xa >= 0, xa, slope * xa))
    if kind == "relu":
        return Tensor(np.maximum(xa, 0))
    if kind == "tanh":
        return Tensor(np.tanh(xa))
    if kind == "sigmoid":
        return Tensor(1.0 / (1.0 + np.exp(-xa)))
    raise ContractError(f"unknown activation {kind!r}")


def activation_backward(kind: str, x: Tensor, grad_output: Tensor, *,
                        slope: float = 0.2) -> Tensor:
    """Element-wise gradient; at the ReLU kinks x == 0 takes the positive slope."""
    xa = x.array
    gy = grad_output.array
    if gy.shape != xa.shape:
        raise ContractError(f"grad_output shape {gy.shape} != input {xa.shape}")
    if kind == "leaky_relu":
        return Tensor(gy * np.where(xa >= 0, 1.0, slope))
    if kind == "relu":
        return Tensor(gy * (xa >= 0))
    if kind == "tanh":
        t = np.tanh(xa)
        return Tensor(gy * (1.0 - t * t))
    if kind == "sigmoid":
        sg = 1.0 / (1.0 + np.exp(-xa))
        return Tensor(gy * sg * (1.0 - sg))
    raise ContractError(f"unknown activation {kind!r}")
