"""Region convolution: convolve only at the active pixels of a binary mask.

Masks are boolean arrays of shape ``(n, h, w)`` (a single ``(h, w)`` grid is
broadcast over the batch). Inside a region convolution the input is zeroed
outside the mask before the window is read, and the output is zero outside
the mask, i.e. ``rc(x, M) == mask(conv(mask(x, M)), M)``.

Sparse evaluation gathers the active output coordinates, builds im2col rows
for those coordinates only, does one matrix multiply and scatters back.
Above ``DENSE_FALLBACK_DENSITY`` the gather costs more than it saves, so
the dense kernel is run on the masked input instead.
"""
from __future__ import annotations

from typing import Callable

import numpy as np

from .errors import ConfigError
from .tensorcore import (
    ConvSpec,
    conv2d_backward,
    conv2d_forward,
    pad_nhwc,
    weight_matrix,
)

DENSE_FALLBACK_DENSITY = 0.75


def as_batch_mask(mask, x_shape) -> np.ndarray:
    n, _, h, w = x_shape
    mask = np.asarray(mask, dtype=bool)
    if mask.shape == (h, w):
        mask = np.broadcast_to(mask, (n, h, w))
    if mask.shape != (n, h, w):
        raise ConfigError(f"mask shape {mask.shape} does not match input {x_shape}")
    return mask


def apply_mask(x, mask):
    """Zero every channel of ``x`` outside ``mask`` (NCHW, mask NHW)."""
    return np.where(mask[:, None], x, x.dtype.type(0))


def complement(mask):
    return ~np.asarray(mask, dtype=bool)


def _check_rc(x, mask, spec):
    if spec.stride != 1:
        raise ConfigError("region convolution requires stride 1")
    mask = as_batch_mask(mask, x.shape)
    ho, wo = spec.output_size(x.shape[2], x.shape[3])
    if (ho, wo) != x.shape[2:]:
        raise ConfigError(f"region convolution must preserve spatial size, got {ho}x{wo} from {x.shape[2:]}")
    return mask


def _use_dense(mask, density_threshold):
    return mask.mean() > density_threshold


def region_conv_forward(x, mask, spec: ConvSpec, weights, bias=None, *,
                        density_threshold=DENSE_FALLBACK_DENSITY, return_cache=False):
    mask = _check_rc(x, mask, spec)
    if weights.shape != spec.weight_shape:
        raise ConfigError(f"weights shape {weights.shape} != {spec.weight_shape}")
    n, _, h, w = x.shape
    o = spec.out_channels
    if _use_dense(mask, density_threshold):
        xm = x if mask.all() else apply_mask(x, mask)
        out, cols = conv2d_forward(xm, spec, weights, bias, return_cols=True)
        if not mask.all():
            out = apply_mask(out, mask)
        cache = ("dense", mask, xm, cols)
    else:
        idx = np.nonzero(mask)
        b, r, c = idx
        kh, kw = spec.kernel
        d = spec.dilation
        xp = pad_nhwc(apply_mask(x, mask), spec.padding)
        cols = np.empty((b.size, kh, kw, spec.in_channels), dtype=x.dtype)
        for i in range(kh):
            for j in range(kw):
                cols[:, i, j, :] = xp[b, r + i * d, c + j * d]
        cols = cols.reshape(b.size, kh * kw * spec.in_channels)
        vals = cols @ weight_matrix(weights).T
        if bias is not None:
            vals += bias
        out = np.zeros((n, o, h, w), dtype=x.dtype)
        out[b, :, r, c] = vals
        cache = ("sparse", mask, idx, cols)
    if return_cache:
        return out, cache
    return out


def region_conv_backward(grad_out, saved_x, mask, spec: ConvSpec, weights, cache=None, *,
                         density_threshold=DENSE_FALLBACK_DENSITY):
    """Gradients of ``mask(conv(mask(x)))``; ``grad_x`` is zero outside the mask."""
    if cache is None:
        _, cache = region_conv_forward(saved_x, mask, spec, weights,
                                       density_threshold=density_threshold, return_cache=True)
    mode, mask = cache[0], cache[1]
    if mode == "dense":
        xm, cols = cache[2], cache[3]
        full = mask.all()
        g = grad_out if full else apply_mask(grad_out, mask)
        gx, gw, gb = conv2d_backward(g, xm, spec, weights, cols=cols)
        if not full:
            gx = apply_mask(gx, mask)
        return gx, gw, gb
    (b, r, c), cols = cache[2], cache[3]
    kh, kw = spec.kernel
    d, p = spec.dilation, spec.padding
    n, cin, h, w = saved_x.shape
    g = grad_out[b, :, r, c]
    gw = np.ascontiguousarray(
        (g.T @ cols).reshape(spec.out_channels, kh, kw, cin).transpose(0, 3, 1, 2))
    gb = g.sum(axis=0)
    gcols = (g @ weight_matrix(weights)).reshape(b.size, kh, kw, cin)
    gp = np.zeros((n, h + 2 * p, w + 2 * p, cin), dtype=grad_out.dtype)
    for i in range(kh):
        for j in range(kw):
            # distinct active pixels hit distinct targets for a fixed offset
            gp[b, r + i * d, c + j * d] += gcols[:, i, j, :]
    gx = gp[:, p:p + h, p:p + w, :].transpose(0, 3, 1, 2)
    return apply_mask(gx, mask), gw, gb


def oracle_region_conv(x, mask, spec, weights, bias=None):
    """Reference definition: mask the input, dense conv, mask the output."""
    mask = as_batch_mask(mask, x.shape)
    return apply_mask(conv2d_forward(apply_mask(x, mask), spec, weights, bias), mask)


def masked_residual(x, mask, body: Callable[[np.ndarray, np.ndarray], np.ndarray]):
    """``x`` outside the mask (bit-exact); ``x + body(masked x)`` inside."""
    mask = as_batch_mask(mask, x.shape)
    y = body(apply_mask(x, mask), mask)
    if y.shape != x.shape:
        raise ConfigError(f"residual body changed shape {x.shape} -> {y.shape}")
    return np.where(mask[:, None], x + y, x)


def mask_from_confidence(probs, rho: float, active):
    """Split ``active`` into pixels that exit here and pixels forwarded on.

    A pixel exits when its top class probability is ``>= rho``. ``rho == 1``
    disables exiting altogether (float rounding can produce a probability of
    exactly 1.0, which must still not exit).
    """
    if not 0.0 < rho <= 1.0:
        raise ConfigError(f"rho must lie in (0, 1], got {rho}")
    active = np.asarray(active, dtype=bool)
    n, _, h, w = probs.shape
    if active.shape == (h, w):
        active = np.broadcast_to(active, (n, h, w))
    if rho == 1.0:
        exit_mask = np.zeros_like(active)
    else:
        exit_mask = active & (probs.max(axis=1) >= rho)
    return exit_mask, active & ~exit_mask


def flop_count(spec: ConvSpec, active_count: int) -> int:
    """Multiply-accumulates counted as 2 flops, plus one add per biased output."""
    if active_count < 0:
        raise ConfigError("active_count must be non-negative")
    kh, kw = spec.kernel
    flops = 2 * kh * kw * spec.in_channels * spec.out_channels * active_count
    if spec.has_bias:
        flops += spec.out_channels * active_count
    return int(flops)

