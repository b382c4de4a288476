"""Differentiable layer primitives.

All ops take and return :class:`~gradrep.autodiff.Tensor` values and register
their backward closures on the tape. Convolution runs as im2col + one matmul
per batch with a fixed reduction order (kernel-major, then spatial), so
repeated runs on the same machine are bit-identical.
"""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor
from .errors import ShapeError, UsageError


def _needs(*tensors) -> bool:
    return any(t.requires_grad or t._parents for t in tensors)


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def conv_output_hw(h: int, w: int, k_h: int, k_w: int, stride: int, padding: int):
    out_h = (h + 2 * padding - k_h) // stride + 1
    out_w = (w + 2 * padding - k_w) // stride + 1
    return out_h, out_w


def _im2col(xp: np.ndarray, k_h: int, k_w: int, stride: int, out_h: int, out_w: int):
    n, c, _, _ = xp.shape
    cols = np.empty((n, c, k_h, k_w, out_h, out_w), dtype=xp.dtype)
    for p in range(k_h):
        for q in range(k_w):
            cols[:, :, p, q] = xp[
                :, :, p : p + stride * out_h : stride, q : q + stride * out_w : stride
            ]
    return cols.reshape(n, c * k_h * k_w, out_h * out_w)


def _col2im(dcols, padded_shape, k_h, k_w, stride, out_h, out_w):
    n, c, hp, wp = padded_shape
    dxp = np.zeros(padded_shape, dtype=dcols.dtype)
    d6 = dcols.reshape(n, c, k_h, k_w, out_h, out_w)
    for p in range(k_h):
        for q in range(k_w):
            dxp[
                :, :, p : p + stride * out_h : stride, q : q + stride * out_w : stride
            ] += d6[:, :, p, q]
    return dxp


def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0,
           bias: Tensor | None = None) -> Tensor:
    """2-D convolution (cross-correlation) with zero padding.

    ``x`` is (n, c_in, h, w), ``w`` is (c_out, c_in, k_h, k_w); output is
    (n, c_out, (h+2p-k_h)//s + 1, (w+2p-k_w)//s + 1).
    """
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError(
            f"conv2d expects rank-4 input and kernel, got {x.data.shape} and {w.data.shape}"
        )
    n, c_in, h, wd = x.data.shape
    c_out, kc_in, k_h, k_w = w.data.shape
    if c_in != kc_in:
        raise ShapeError(
            f"conv2d channel mismatch: input shape {x.data.shape} has {c_in} channels, "
            f"kernel shape {w.data.shape} expects {kc_in}"
        )
    if stride < 1 or padding < 0:
        raise ShapeError(f"conv2d needs stride >= 1 and padding >= 0, got {stride}, {padding}")
    out_h, out_w = conv_output_hw(h, wd, k_h, k_w, stride, padding)
    if out_h < 1 or out_w < 1:
        raise ShapeError(
            f"conv2d output collapses: input {x.data.shape}, kernel {w.data.shape}, "
            f"stride {stride}, padding {padding}"
        )

    if padding:
        xp = np.zeros((n, c_in, h + 2 * padding, wd + 2 * padding), dtype=x.data.dtype)
        xp[:, :, padding : padding + h, padding : padding + wd] = x.data
    else:
        xp = x.data
    cols = _im2col(xp, k_h, k_w, stride, out_h, out_w)
    w2 = w.data.reshape(c_out, c_in * k_h * k_w)
    out2 = np.matmul(w2, cols)  # (n, c_out, out_h*out_w)
    out_data = out2.reshape(n, c_out, out_h, out_w)
    if bias is not None:
        out_data = out_data + bias.data.reshape(1, c_out, 1, 1)

    parents = (x, w) if bias is None else (x, w, bias)
    if not _needs(*parents):
        return Tensor(out_data)

    def backward(g):
        g2 = g.reshape(n, c_out, out_h * out_w)
        if w.requires_grad or w._parents:
            dw2 = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0)
            w.accumulate_grad(dw2.reshape(w.data.shape))
        if x.requires_grad or x._parents:
            dcols = np.matmul(w2.T, g2)
            dxp = _col2im(dcols, xp.shape, k_h, k_w, stride, out_h, out_w)
            if padding:
                dxp = dxp[:, :, padding : padding + h, padding : padding + wd]
            x.accumulate_grad(dxp)
        if bias is not None and (bias.requires_grad or bias._parents):
            bias.accumulate_grad(g.sum(axis=(0, 2, 3)))

    return Tensor(out_data, parents=parents, backward=backward)


# ---------------------------------------------------------------------------
# elementwise / channelwise
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"add shape mismatch: {a.data.shape} vs {b.data.shape}")
    out_data = a.data + b.data
    if not _needs(a, b):
        return Tensor(out_data)

    def backward(g):
        if a.requires_grad or a._parents:
            a.accumulate_grad(g)
        if b.requires_grad or b._parents:
            b.accumulate_grad(g)

    return Tensor(out_data, parents=(a, b), backward=backward)


def relu(x: Tensor) -> Tensor:
    out_data = np.maximum(x.data, 0.0)
    if not _needs(x):
        return Tensor(out_data)

    mask = x.data > 0

    def backward(g):
        x.accumulate_grad(g * mask)

    return Tensor(out_data, parents=(x,), backward=backward)


def channel_scale(x: Tensor, scale: Tensor) -> Tensor:
    """Multiply each channel of (n, c, h, w) input by a length-c vector."""
    c = x.data.shape[1]
    if scale.data.shape != (c,):
        raise ShapeError(
            f"channel_scale: input shape {x.data.shape} needs scale of shape ({c},), "
            f"got {scale.data.shape}"
        )
    s4 = scale.data.reshape(1, c, 1, 1)
    out_data = x.data * s4
    if not _needs(x, scale):
        return Tensor(out_data)

    def backward(g):
        if x.requires_grad or x._parents:
            x.accumulate_grad(g * s4)
        if scale.requires_grad or scale._parents:
            scale.accumulate_grad((g * x.data).sum(axis=(0, 2, 3)))

    return Tensor(out_data, parents=(x, scale), backward=backward)


# ---------------------------------------------------------------------------
# batch normalization
# ---------------------------------------------------------------------------

def batchnorm_train(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5):
    """Train-mode BN over (n, h, w) per channel.

    Returns (out, batch_mean, batch_var_population); the caller updates its
    running statistics from the returned batch stats. Batches of fewer than
    two samples are rejected (batch variance is not meaningful there).
    """
    n, c, h, w = x.data.shape
    if n < 2:
        raise UsageError(f"batchnorm in train mode needs batch size >= 2, got {n}")
    m = n * h * w
    mu = x.data.mean(axis=(0, 2, 3))
    xc = x.data - mu.reshape(1, c, 1, 1)
    var = (xc * xc).mean(axis=(0, 2, 3))
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv_std.reshape(1, c, 1, 1)
    out_data = gamma.data.reshape(1, c, 1, 1) * xhat + beta.data.reshape(1, c, 1, 1)

    if not _needs(x, gamma, beta):
        return Tensor(out_data), mu, var

    def backward(g):
        if gamma.requires_grad or gamma._parents:
            gamma.accumulate_grad((g * xhat).sum(axis=(0, 2, 3)))
        if beta.requires_grad or beta._parents:
            beta.accumulate_grad(g.sum(axis=(0, 2, 3)))
        if x.requires_grad or x._parents:
            gxh = (g * xhat).sum(axis=(0, 2, 3)) / m
            gm = g.sum(axis=(0, 2, 3)) / m
            coeff = (gamma.data * inv_std).reshape(1, c, 1, 1)
            dx = coeff * (g - gm.reshape(1, c, 1, 1) - xhat * gxh.reshape(1, c, 1, 1))
            x.accumulate_grad(dx)

    out = Tensor(out_data, parents=(x, gamma, beta), backward=backward)
    return out, mu, var


def batchnorm_eval(x: Tensor, gamma: Tensor, beta: Tensor,
                   running_mean: np.ndarray, running_var: np.ndarray,
                   eps: float = 1e-5) -> Tensor:
    """Eval-mode BN: per-channel affine map from frozen running statistics."""
    c = x.data.shape[1]
    inv_std = 1.0 / np.sqrt(running_var + eps)
    scale = (gamma.data * inv_std).reshape(1, c, 1, 1)
    shift = (beta.data - gamma.data * running_mean * inv_std).reshape(1, c, 1, 1)
    out_data = x.data * scale + shift
    if not _needs(x, gamma, beta):
        return Tensor(out_data)

    xhat = (x.data - running_mean.reshape(1, c, 1, 1)) * inv_std.reshape(1, c, 1, 1)

    def backward(g):
        if gamma.requires_grad or gamma._parents:
            gamma.accumulate_grad((g * xhat).sum(axis=(0, 2, 3)))
        if beta.requires_grad or beta._parents:
            beta.accumulate_grad(g.sum(axis=(0, 2, 3)))
        if x.requires_grad or x._parents:
            x.accumulate_grad(g * scale)

    return Tensor(out_data, parents=(x, gamma, beta), backward=backward)


# ---------------------------------------------------------------------------
# pooling, linear, losses
# ---------------------------------------------------------------------------

def global_avg_pool(x: Tensor) -> Tensor:
    """(n, c, h, w) -> (n, c) spatial mean."""
    n, c, h, w = x.data.shape
    out_data = x.data.mean(axis=(2, 3))
    if not _needs(x):
        return Tensor(out_data)

    def backward(g):
        x.accumulate_grad(
            np.broadcast_to(g.reshape(n, c, 1, 1) / (h * w), x.data.shape).copy()
        )

    return Tensor(out_data, parents=(x,), backward=backward)


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """(n, d) @ (k, d).T + (k,)."""
    if x.data.ndim != 2 or x.data.shape[1] != w.data.shape[1]:
        raise ShapeError(
            f"linear: input shape {x.data.shape} incompatible with weight {w.data.shape}"
        )
    out_data = x.data @ w.data.T + b.data
    if not _needs(x, w, b):
        return Tensor(out_data)

    def backward(g):
        if w.requires_grad or w._parents:
            w.accumulate_grad(g.T @ x.data)
        if b.requires_grad or b._parents:
            b.accumulate_grad(g.sum(axis=0))
        if x.requires_grad or x._parents:
            x.accumulate_grad(g @ w.data)

    return Tensor(out_data, parents=(x, w, b), backward=backward)


def cross_entropy(logits: Tensor, labels: np.ndarray, label_smoothing: float = 0.0) -> Tensor:
    """Mean softmax cross-entropy over the batch with optional label smoothing."""
    n, k = logits.data.shape
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise ShapeError(f"cross_entropy: logits {logits.data.shape} need {n} labels, "
                         f"got shape {labels.shape}")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsumexp
    target = np.full((n, k), label_smoothing / k, dtype=logits.data.dtype)
    target[np.arange(n), labels] += 1.0 - label_smoothing
    out_data = -(target * logp).sum() / n
    if not _needs(logits):
        return Tensor(out_data)

    softmax = np.exp(logp)

    def backward(g):
        logits.accumulate_grad(g * (softmax - target) / n)

    return Tensor(out_data, parents=(logits,), backward=backward)


def mse_loss(pred: Tensor, target: np.ndarray) -> Tensor:
    """Mean squared error against a constant target array."""
    target = np.asarray(target, dtype=pred.data.dtype)
    if target.shape != pred.data.shape:
        raise ShapeError(f"mse_loss shape mismatch: {pred.data.shape} vs {target.shape}")
    diff = pred.data - target
    out_data = (diff * diff).mean()
    if not _needs(pred):
        return Tensor(out_data)

    def backward(g):
        pred.accumulate_grad(g * 2.0 * diff / diff.size)

    return Tensor(out_data, parents=(pred,), backward=backward)


def weighted_sum(x: Tensor, weights: np.ndarray) -> Tensor:
    """Scalar sum(x * weights) for a constant weight array."""
    weights = np.asarray(weights, dtype=x.data.dtype)
    if weights.shape != x.data.shape:
        raise ShapeError(f"weighted_sum shape mismatch: {x.data.shape} vs {weights.shape}")
    out_data = (x.data * weights).sum()
    if not _needs(x):
        return Tensor(out_data)

    def backward(g):
        x.accumulate_grad(g * weights)

    return Tensor(out_data, parents=(x,), backward=backward)


def tsum(x: Tensor) -> Tensor:
    """Scalar sum of all elements."""
    out_data = x.data.sum()
    if not _needs(x):
        return Tensor(out_data)

    def backward(g):
        x.accumulate_grad(np.broadcast_to(g, x.data.shape).copy())

    return Tensor(out_data, parents=(x,), backward=backward)
