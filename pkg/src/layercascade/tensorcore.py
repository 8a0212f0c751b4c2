"""Dense tensor kernels on NCHW numpy arrays.

Activations are plain ``ndarray`` objects; trainable tensors are wrapped in
:class:`Param` so they can carry a gradient slot and a frozen flag. Every
backward function is written by hand, there is no autograd graph.

Convolution lowers to im2col + one matrix multiply. The column layout is
``(kh, kw, c)`` for both the dense and the region path, so a dot product is
always accumulated kernel-row-major.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np

from .errors import ConfigError, StateError

IGNORE_LABEL = 255

_threadpool_limiter = None


def set_threads(n: int | None) -> None:
    """Limit BLAS threads. ``None`` or 1 is deterministic mode."""
    global _threadpool_limiter
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover
        return
    if _threadpool_limiter is not None:
        _threadpool_limiter.restore_original_limits()
        _threadpool_limiter = None
    _threadpool_limiter = threadpool_limits(limits=n or 1)


@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel: tuple[int, int] = (3, 3)
    stride: int = 1
    dilation: int = 1
    padding: int = 0
    has_bias: bool = True

    def __post_init__(self):
        if isinstance(self.kernel, int):
            object.__setattr__(self, "kernel", (self.kernel, self.kernel))
        else:
            object.__setattr__(self, "kernel", tuple(self.kernel))
        if self.in_channels < 1 or self.out_channels < 1:
            raise ConfigError(f"channels must be positive: {self}")
        if min(self.kernel) < 1 or self.stride < 1 or self.dilation < 1:
            raise ConfigError(f"kernel/stride/dilation must be positive: {self}")
        if self.padding < 0:
            raise ConfigError(f"padding must be non-negative: {self}")

    @classmethod
    def same(cls, cin, cout, k=3, dilation=1, has_bias=True):
        """Stride-1 conv whose output keeps the input's spatial size."""
        if k % 2 == 0:
            raise ConfigError("'same' padding needs an odd kernel")
        return cls(cin, cout, (k, k), 1, dilation, dilation * (k - 1) // 2, has_bias)

    def output_size(self, h: int, w: int) -> tuple[int, int]:
        kh, kw = self.kernel
        ho = (h + 2 * self.padding - self.dilation * (kh - 1) - 1) // self.stride + 1
        wo = (w + 2 * self.padding - self.dilation * (kw - 1) - 1) // self.stride + 1
        if ho < 1 or wo < 1:
            raise ConfigError(f"non-positive output size {ho}x{wo} for input {h}x{w} and {self}")
        return ho, wo

    @property
    def weight_shape(self):
        return (self.out_channels, self.in_channels) + self.kernel


@dataclass(eq=False)
class Param:
    """A trainable tensor with a gradient slot."""

    name: str
    data: np.ndarray
    grad: np.ndarray | None = None
    frozen: bool = False

    def zero_grad(self):
        self.grad = None

    def accumulate(self, g):
        if g.shape != self.data.shape:
            raise ConfigError(f"gradient shape {g.shape} != param shape {self.data.shape} ({self.name})")
        if self.grad is None:
            self.grad = g.astype(self.data.dtype, copy=True)
        else:
            self.grad += g


# ---------------------------------------------------------------------------
# convolution


def _check_conv(x, spec, weights):
    if x.ndim != 4:
        raise ConfigError(f"expected NCHW input, got shape {x.shape}")
    if tuple(weights.shape) != spec.weight_shape:
        raise ConfigError(f"weights shape {weights.shape} != {spec.weight_shape}")
    if x.shape[1] != spec.in_channels:
        raise ConfigError(f"input has {x.shape[1]} channels, spec expects {spec.in_channels}")
    return spec.output_size(x.shape[2], x.shape[3])


def pad_nhwc(x: np.ndarray, padding: int) -> np.ndarray:
    """NCHW -> zero-padded, contiguous NHWC."""
    n, c, h, w = x.shape
    out = np.zeros((n, h + 2 * padding, w + 2 * padding, c), dtype=x.dtype)
    out[:, padding:padding + h, padding:padding + w, :] = x.transpose(0, 2, 3, 1)
    return out


def im2col(x: np.ndarray, spec: ConvSpec) -> np.ndarray:
    """Dense column matrix of shape (n*ho*wo, kh*kw*c)."""
    n, c, h, w = x.shape
    ho, wo = spec.output_size(h, w)
    kh, kw = spec.kernel
    s, d = spec.stride, spec.dilation
    xp = pad_nhwc(x, spec.padding)
    cols = np.empty((n, ho, wo, kh, kw, c), dtype=x.dtype)
    for i in range(kh):
        r0 = i * d
        for j in range(kw):
            c0 = j * d
            cols[:, :, :, i, j, :] = xp[:, r0:r0 + s * (ho - 1) + 1:s, c0:c0 + s * (wo - 1) + 1:s, :]
    return cols.reshape(n * ho * wo, kh * kw * c)


def col2im(grad_cols: np.ndarray, x_shape, spec: ConvSpec) -> np.ndarray:
    """Adjoint of :func:`im2col`; returns an NCHW gradient."""
    n, c, h, w = x_shape
    ho, wo = spec.output_size(h, w)
    kh, kw = spec.kernel
    s, d, p = spec.stride, spec.dilation, spec.padding
    g = grad_cols.reshape(n, ho, wo, kh, kw, c)
    gp = np.zeros((n, h + 2 * p, w + 2 * p, c), dtype=grad_cols.dtype)
    for i in range(kh):
        r0 = i * d
        for j in range(kw):
            c0 = j * d
            gp[:, r0:r0 + s * (ho - 1) + 1:s, c0:c0 + s * (wo - 1) + 1:s, :] += g[:, :, :, i, j, :]
    return np.ascontiguousarray(gp[:, p:p + h, p:p + w, :].transpose(0, 3, 1, 2))


def weight_matrix(weights: np.ndarray) -> np.ndarray:
    """(out, in, kh, kw) -> (out, kh*kw*in), matching the im2col column order."""
    o = weights.shape[0]
    return weights.transpose(0, 2, 3, 1).reshape(o, -1)


def conv2d_forward(x, spec: ConvSpec, weights, bias=None, return_cols=False):
    ho, wo = _check_conv(x, spec, weights)
    if bias is not None and bias.shape != (spec.out_channels,):
        raise ConfigError(f"bias shape {bias.shape} != ({spec.out_channels},)")
    cols = im2col(x, spec)
    out = cols @ weight_matrix(weights).T
    if bias is not None:
        out += bias
    out = np.ascontiguousarray(out.reshape(x.shape[0], ho, wo, spec.out_channels).transpose(0, 3, 1, 2))
    if return_cols:
        return out, cols
    return out


def conv2d_backward(grad_out, saved_x, spec: ConvSpec, weights, cols=None):
    """Returns ``(grad_x, grad_w, grad_b)``; ``cols`` skips recomputing im2col."""
    if saved_x is None:
        raise StateError("conv2d_backward needs the saved forward input")
    ho, wo = _check_conv(saved_x, spec, weights)
    n = saved_x.shape[0]
    if grad_out.shape != (n, spec.out_channels, ho, wo):
        raise ConfigError(f"grad_out shape {grad_out.shape} != {(n, spec.out_channels, ho, wo)}")
    if cols is None:
        cols = im2col(saved_x, spec)
    g = grad_out.transpose(0, 2, 3, 1).reshape(-1, spec.out_channels)
    grad_wm = g.T @ cols
    kh, kw = spec.kernel
    grad_w = np.ascontiguousarray(
        grad_wm.reshape(spec.out_channels, kh, kw, spec.in_channels).transpose(0, 3, 1, 2))
    grad_b = g.sum(axis=0)
    grad_x = col2im(g @ weight_matrix(weights), saved_x.shape, spec)
    return grad_x, grad_w, grad_b


# ---------------------------------------------------------------------------
# pointwise ops


def relu_forward(x):
    return np.maximum(x, 0)


def relu_backward(grad_out, saved_x):
    return np.where(saved_x > 0, grad_out, 0).astype(grad_out.dtype, copy=False)


def affine_forward(x, scale, shift):
    """Frozen batch-norm: per-channel ``x * scale + shift``."""
    return x * scale[None, :, None, None] + shift[None, :, None, None]


def affine_backward(grad_out, saved_x, scale):
    grad_x = grad_out * scale[None, :, None, None]
    grad_scale = (grad_out * saved_x).sum(axis=(0, 2, 3))
    grad_shift = grad_out.sum(axis=(0, 2, 3))
    return grad_x, grad_scale, grad_shift


def elementwise_add(a, b):
    if a.shape != b.shape:
        raise ConfigError(f"shape mismatch {a.shape} vs {b.shape}")
    return a + b


def channel_concat(tensors: Iterable[np.ndarray]):
    tensors = list(tensors)
    spatial = {(t.shape[0],) + t.shape[2:] for t in tensors}
    if len(spatial) != 1:
        raise ConfigError(f"cannot concat shapes {[t.shape for t in tensors]}")
    return np.concatenate(tensors, axis=1)


def softmax_channels(logits):
    if logits.shape[1] < 2:
        raise ConfigError("softmax needs at least 2 channels")
    z = logits - logits.max(axis=1, keepdims=True)
    np.exp(z, out=z)
    z /= z.sum(axis=1, keepdims=True)
    return z


def masked_cross_entropy(probs, targets, contrib_mask=None, ignore_label=IGNORE_LABEL):
    """Mean of ``-log p[target]`` over contributing, non-ignored pixels.

    Returns ``(loss, grad_logits)`` where the gradient is taken with respect
    to the logits that produced ``probs``. It is exactly 0.0 at every
    non-contributing pixel. An empty contributing set gives ``(0.0, zeros)``.
    """
    n, k, h, w = probs.shape
    if targets.shape != (n, h, w):
        raise ConfigError(f"targets shape {targets.shape} != {(n, h, w)}")
    valid = targets != ignore_label
    if contrib_mask is not None:
        if contrib_mask.shape != (n, h, w):
            raise ConfigError(f"mask shape {contrib_mask.shape} != {(n, h, w)}")
        valid &= contrib_mask
    count = int(valid.sum())
    grad = np.zeros_like(probs)
    if count == 0:
        return 0.0, grad
    if targets[valid].max() >= k:
        raise ConfigError(f"target label >= class count {k}")
    safe_t = np.where(valid, targets, 0).astype(np.intp)
    p_t = np.take_along_axis(probs, safe_t[:, None], axis=1)[:, 0]
    tiny = np.finfo(probs.dtype).tiny
    loss = float(-np.log(np.maximum(p_t[valid], tiny)).astype(np.float64).sum() / count)
    onehot = np.zeros_like(probs)
    np.put_along_axis(onehot, safe_t[:, None], 1, axis=1)
    grad = np.where(valid[:, None], (probs - onehot) / probs.dtype.type(count), probs.dtype.type(0))
    return loss, grad


def downsample_labels(labels, factor: int):
    """Nearest-neighbour label decimation, sampling each cell's centre."""
    if factor == 1:
        return labels
    off = factor // 2
    return labels[..., off::factor, off::factor]


def upsample_labels(labels, factor: int):
    if factor == 1:
        return labels
    return labels.repeat(factor, axis=-2).repeat(factor, axis=-1)


# ---------------------------------------------------------------------------
# initialisation and optimisation


def he_normal(rng, shape, dtype=np.float32):
    fan_in = int(np.prod(shape[1:]))
    return (rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)).astype(dtype)


@dataclass
class OptimizerState:
    learning_rate: float
    momentum: float = 0.9
    weight_decay: float = 5e-4
    velocity: dict[str, np.ndarray] = field(default_factory=dict)


def sgd_step(params: Iterable[Param], state: OptimizerState) -> None:
    """In-place momentum SGD.

    ``v <- momentum * v + grad + weight_decay * param``; ``param <- param - lr * v``.
    Frozen params and params without a gradient are left untouched.
    """
    dt = None
    for p in params:
        if p.frozen or p.grad is None:
            continue
        dt = p.data.dtype.type
        g = p.grad + dt(state.weight_decay) * p.data if state.weight_decay else p.grad
        v = state.velocity.get(p.name)
        if v is None:
            v = np.zeros_like(p.data)
        elif v.shape != p.data.shape:
            raise ConfigError(f"velocity shape {v.shape} != param shape {p.data.shape} ({p.name})")
        v = dt(state.momentum) * v + g
        state.velocity[p.name] = v
        p.data -= dt(state.learning_rate) * v


# ---------------------------------------------------------------------------
# verification


def grad_check(forward: Callable[..., np.ndarray],
               backward: Callable[..., dict],
               arrays: dict[str, np.ndarray],
               step: float = 1e-5,
               seed: int = 0) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``forward(**arrays)`` returns an array ``y``; ``backward(g, **arrays)``
    returns a dict of gradients of ``sum(g * y)`` for each differentiated
    name. The scalar probed is ``sum(r * y)`` with a seeded random ``r``.
    Relative error per tensor is ``max|a - n| / max(max|a|, max|n|)``.
    """
    for name, a in arrays.items():
        if a.dtype != np.float64:
            raise ConfigError(f"grad_check needs float64 inputs ({name} is {a.dtype})")
    rng = np.random.default_rng(seed)
    arrays = {k: v.copy() for k, v in arrays.items()}
    y = forward(**arrays)
    r = rng.standard_normal(y.shape)
    analytic = backward(r, **arrays)
    worst = 0.0
    for name, ga in analytic.items():
        a = arrays[name]
        num = np.zeros_like(a)
        flat, nflat = a.reshape(-1), num.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = float(np.sum(r * forward(**arrays)))
            flat[i] = orig - step
            fm = float(np.sum(r * forward(**arrays)))
            flat[i] = orig
            nflat[i] = (fp - fm) / (2 * step)
        scale = max(np.abs(ga).max(initial=0.0), np.abs(num).max(initial=0.0))
        if scale == 0.0:
            continue
        worst = max(worst, float(np.abs(ga - num).max() / scale))
    return worst
