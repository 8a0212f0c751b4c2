"""Stateful layer objects with hand-written backward passes.

Every layer takes an optional boolean ``mask`` of shape ``(n, h, w)``. With
a mask, convolutions run as region convolutions and residual blocks become
masked residuals; without one they are ordinary dense layers. ``forward``
caches what ``backward`` needs, so a layer instance handles one pass at a
time.
"""
from __future__ import annotations

import numpy as np

from .errors import ConfigError, StateError
from .regionconv import (
    apply_mask,
    flop_count,
    masked_residual,
    region_conv_backward,
    region_conv_forward,
)
from .tensorcore import (
    ConvSpec,
    Param,
    affine_backward,
    affine_forward,
    conv2d_backward,
    conv2d_forward,
    relu_backward,
    relu_forward,
)


class Layer:
    def params(self):
        return []

    def conv_layers(self):
        return []

    def set_frozen(self, frozen: bool):
        for p in self.params():
            p.frozen = frozen


class Conv(Layer):
    def __init__(self, spec: ConvSpec, weight: Param, bias: Param | None = None):
        if weight.data.shape != spec.weight_shape:
            raise ConfigError(f"{weight.name}: shape {weight.data.shape} != {spec.weight_shape}")
        if spec.has_bias != (bias is not None):
            raise ConfigError(f"{weight.name}: bias presence disagrees with spec")
        self.spec = spec
        self.weight = weight
        self.bias = bias
        self.last_flops = 0
        self._cache = None

    def params(self):
        return [self.weight] + ([self.bias] if self.bias is not None else [])

    def conv_layers(self):
        return [self]

    def forward(self, x, mask=None):
        b = self.bias.data if self.bias is not None else None
        if mask is None:
            out, cols = conv2d_forward(x, self.spec, self.weight.data, b, return_cols=True)
            self.last_flops = flop_count(self.spec, out.shape[0] * out.shape[2] * out.shape[3])
            self._cache = (x, None, cols)
        else:
            out, cache = region_conv_forward(x, mask, self.spec, self.weight.data, b, return_cache=True)
            self.last_flops = flop_count(self.spec, int(np.count_nonzero(mask)))
            self._cache = (x, mask, cache)
        return out

    def backward(self, grad_out):
        if self._cache is None:
            raise StateError("Conv.backward called before forward")
        x, mask, cache = self._cache
        if mask is None:
            gx, gw, gb = conv2d_backward(grad_out, x, self.spec, self.weight.data, cols=cache)
        else:
            gx, gw, gb = region_conv_backward(grad_out, x, mask, self.spec, self.weight.data, cache)
        if not self.weight.frozen:
            self.weight.accumulate(gw)
            if self.bias is not None:
                self.bias.accumulate(gb)
        return gx


class Affine(Layer):
    """Per-channel scale and shift; the frozen stand-in for batch norm."""

    def __init__(self, scale: Param, shift: Param, frozen: bool = True):
        self.scale = scale
        self.shift = shift
        scale.frozen = shift.frozen = frozen
        self._x = None

    def params(self):
        return [self.scale, self.shift]

    def forward(self, x, mask=None):
        self._x = x
        return affine_forward(x, self.scale.data, self.shift.data)

    def backward(self, grad_out):
        if self._x is None:
            raise StateError("Affine.backward called before forward")
        gx, gs, gt = affine_backward(grad_out, self._x, self.scale.data)
        if not self.scale.frozen:
            self.scale.accumulate(gs)
        if not self.shift.frozen:
            self.shift.accumulate(gt)
        return gx


class ReLU(Layer):
    def __init__(self):
        self._x = None

    def forward(self, x, mask=None):
        self._x = x
        return relu_forward(x)

    def backward(self, grad_out):
        if self._x is None:
            raise StateError("ReLU.backward called before forward")
        return relu_backward(grad_out, self._x)


class Sequential(Layer):
    def __init__(self, layers):
        self.layers = list(layers)

    def params(self):
        return [p for layer in self.layers for p in layer.params()]

    def conv_layers(self):
        return [c for layer in self.layers for c in layer.conv_layers()]

    def forward(self, x, mask=None):
        for layer in self.layers:
            x = layer.forward(x, mask)
        return x

    def backward(self, grad_out):
        g = grad_out
        for layer in reversed(self.layers):
            g = layer.backward(g)
        return g


class ResidualBlock(Layer):
    """Pre-activation block ``x + conv(relu(affine(conv(relu(affine(x))))))``.

    With a mask this is the masked residual: pixels outside the mask are
    copied through unchanged.
    """

    def __init__(self, body: Sequential):
        self.body = body
        self._mask = None
        self._ran = False

    def params(self):
        return self.body.params()

    def conv_layers(self):
        return self.body.conv_layers()

    def forward(self, x, mask=None):
        self._mask = mask
        self._ran = True
        if mask is None:
            return x + self.body.forward(x)
        return masked_residual(x, mask, self.body.forward)

    def backward(self, grad_out):
        if not self._ran:
            raise StateError("ResidualBlock.backward called before forward")
        g_in = grad_out if self._mask is None else apply_mask(grad_out, self._mask)
        g_body = self.body.backward(g_in)
        if self._mask is not None:
            g_body = apply_mask(g_body, self._mask)
        return grad_out + g_body
