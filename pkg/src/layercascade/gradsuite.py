"""Finite-difference checks for every differentiable op, one seed at a time.

Each checker builds a small random float64 problem from its seed and
returns the max relative error reported by :func:`tensorcore.grad_check`.
"""
from __future__ import annotations

import numpy as np

from .layers import Conv, ReLU, ResidualBlock, Sequential
from .regionconv import region_conv_backward, region_conv_forward
from .tensorcore import (
    ConvSpec,
    Param,
    affine_backward,
    affine_forward,
    conv2d_backward,
    conv2d_forward,
    grad_check,
    masked_cross_entropy,
    relu_backward,
    relu_forward,
    softmax_channels,
)

STEP = 1e-5
TOLERANCE = 1e-3


def _away_from_zero(rng, shape, margin=0.05):
    # keep relu inputs off the kink
    x = rng.standard_normal(shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * margin + x, x)


def _conv(seed, dilation):
    rng = np.random.default_rng(seed)
    cin, cout = int(rng.integers(1, 4)), int(rng.integers(1, 4))
    spec = ConvSpec.same(cin, cout, 3, dilation)
    arrays = {"x": rng.standard_normal((2, cin, 6, 5)), "w": rng.standard_normal(spec.weight_shape),
              "b": rng.standard_normal(cout)}

    def fwd(x, w, b):
        return conv2d_forward(x, spec, w, b)

    def bwd(g, x, w, b):
        gx, gw, gb = conv2d_backward(g, x, spec, w)
        return {"x": gx, "w": gw, "b": gb}

    return grad_check(fwd, bwd, arrays, STEP, seed)


def check_conv(seed):
    return _conv(seed, 1)


def check_dilated_conv(seed):
    return _conv(seed, 2)


def check_region_conv(seed):
    rng = np.random.default_rng(seed)
    spec = ConvSpec.same(2, 3, 3, int(rng.integers(1, 3)))
    mask = rng.random((2, 6, 6)) < rng.uniform(0.2, 0.9)
    arrays = {"x": rng.standard_normal((2, 2, 6, 6)), "w": rng.standard_normal(spec.weight_shape),
              "b": rng.standard_normal(3)}

    def fwd(x, w, b):
        return region_conv_forward(x, mask, spec, w, b)

    def bwd(g, x, w, b):
        gx, gw, gb = region_conv_backward(g, x, mask, spec, w)
        return {"x": gx, "w": gw, "b": gb}

    return grad_check(fwd, bwd, arrays, STEP, seed)


def check_masked_residual(seed):
    rng = np.random.default_rng(seed)
    mask = rng.random((1, 6, 6)) < rng.uniform(0.2, 0.9)
    spec = ConvSpec.same(2, 2, 3, int(rng.integers(1, 3)))
    arrays = {"x": rng.standard_normal((1, 2, 6, 6)), "w1": rng.standard_normal(spec.weight_shape),
              "w2": rng.standard_normal(spec.weight_shape)}

    def build(w1, w2):
        return ResidualBlock(Sequential([ReLU(), Conv(spec, Param("w1", w1), Param("b1", np.zeros(2))),
                                         ReLU(), Conv(spec, Param("w2", w2), Param("b2", np.zeros(2)))]))

    def fwd(x, w1, w2):
        return build(w1, w2).forward(x, mask)

    def bwd(g, x, w1, w2):
        blk = build(w1, w2)
        blk.forward(x, mask)
        gx = blk.backward(g)
        c1, c2 = blk.conv_layers()
        return {"x": gx, "w1": c1.weight.grad, "w2": c2.weight.grad}

    return grad_check(fwd, bwd, arrays, STEP, seed)


def check_relu(seed):
    rng = np.random.default_rng(seed)
    return grad_check(relu_forward, lambda g, x: {"x": relu_backward(g, x)},
                      {"x": _away_from_zero(rng, (2, 3, 4, 4))}, STEP, seed)


def check_affine(seed):
    rng = np.random.default_rng(seed)
    arrays = {"x": rng.standard_normal((2, 3, 4, 4)), "scale": rng.standard_normal(3),
              "shift": rng.standard_normal(3)}

    def bwd(g, x, scale, shift):
        gx, gs, gt = affine_backward(g, x, scale)
        return {"x": gx, "scale": gs, "shift": gt}

    return grad_check(affine_forward, bwd, arrays, STEP, seed)


def check_softmax_ce(seed):
    rng = np.random.default_rng(seed)
    k = int(rng.integers(2, 5))
    targets = rng.integers(0, k, size=(2, 4, 4)).astype(np.uint8)
    targets[rng.random(targets.shape) < 0.1] = 255
    contrib = rng.random(targets.shape) < 0.7

    def fwd(logits):
        return np.array(masked_cross_entropy(softmax_channels(logits), targets, contrib)[0])

    def bwd(g, logits):
        return {"logits": g * masked_cross_entropy(softmax_channels(logits), targets, contrib)[1]}

    return grad_check(fwd, bwd, {"logits": 2.0 * rng.standard_normal((2, k, 4, 4))}, STEP, seed)


CHECKS = {
    "conv": check_conv,
    "dilated_conv": check_dilated_conv,
    "region_conv": check_region_conv,
    "masked_residual": check_masked_residual,
    "relu": check_relu,
    "affine": check_affine,
    "softmax_ce": check_softmax_ce,
}


def run_suite(seeds=20, ops=None, tolerance=TOLERANCE):
    """Rows of ``(op, seeds, max_rel_error, passed)``."""
    rows = []
    for name in ops or CHECKS:
        worst = max(CHECKS[name](s) for s in range(seeds))
        rows.append((name, seeds, worst, worst < tolerance))
    return rows
