import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from conftest import naive_conv
from layercascade.errors import ConfigError, StateError
from layercascade.tensorcore import (
    ConvSpec,
    OptimizerState,
    Param,
    affine_backward,
    affine_forward,
    channel_concat,
    conv2d_backward,
    conv2d_forward,
    downsample_labels,
    grad_check,
    masked_cross_entropy,
    relu_backward,
    relu_forward,
    sgd_step,
    softmax_channels,
)


def test_conv_center_of_ones_kernel():
    x = np.arange(1, 10, dtype=np.float64).reshape(1, 1, 3, 3)
    spec = ConvSpec(1, 1, (3, 3), padding=1, has_bias=False)
    out = conv2d_forward(x, spec, np.ones((1, 1, 3, 3)))
    assert out.shape == (1, 1, 3, 3)
    assert out[0, 0, 1, 1] == 45.0
    # corner: 1+2+4+5
    assert out[0, 0, 0, 0] == 12.0


def test_identity_and_zero_kernels(rng):
    x = rng.standard_normal((2, 1, 5, 4))
    spec = ConvSpec(1, 1, (1, 1), has_bias=False)
    np.testing.assert_array_equal(conv2d_forward(x, spec, np.ones((1, 1, 1, 1))), x)
    spec3 = ConvSpec(1, 3, (3, 3), padding=1, has_bias=False)
    assert not conv2d_forward(x, spec3, np.zeros((3, 1, 3, 3))).any()


def test_ones_1x1_sums_channels(rng):
    x = rng.integers(-5, 5, size=(2, 4, 3, 3)).astype(np.float32)
    out = conv2d_forward(x, ConvSpec(4, 1, (1, 1), has_bias=False), np.ones((1, 4, 1, 1), np.float32))
    np.testing.assert_array_equal(out[:, 0], x.sum(axis=1))


@pytest.mark.parametrize("stride,dilation,padding", [(1, 1, 0), (1, 1, 1), (2, 1, 1), (1, 2, 2), (2, 3, 1)])
def test_conv_matches_direct_loops(rng, stride, dilation, padding):
    x = rng.standard_normal((2, 3, 7, 6))
    w = rng.standard_normal((4, 3, 3, 3))
    b = rng.standard_normal(4)
    spec = ConvSpec(3, 4, (3, 3), stride, dilation, padding)
    np.testing.assert_allclose(conv2d_forward(x, spec, w, b),
                               naive_conv(x, w, b, stride, dilation, padding), atol=1e-12)


def test_conv_output_size_formula():
    spec = ConvSpec(1, 1, (3, 3), stride=2, dilation=2, padding=1)
    # floor((9 + 2 - 4 - 1) / 2) + 1 = 4
    assert spec.output_size(9, 9) == (4, 4)
    with pytest.raises(ConfigError):
        ConvSpec(1, 1, (5, 5)).output_size(3, 3)


def test_conv_shape_errors(rng):
    spec = ConvSpec(2, 3, (3, 3), padding=1)
    with pytest.raises(ConfigError):
        conv2d_forward(rng.standard_normal((1, 3, 4, 4)), spec, rng.standard_normal(spec.weight_shape))
    with pytest.raises(ConfigError):
        conv2d_forward(rng.standard_normal((1, 2, 4, 4)), spec, rng.standard_normal((3, 2, 1, 1)))
    with pytest.raises(StateError):
        conv2d_backward(np.zeros((1, 3, 4, 4)), None, spec, rng.standard_normal(spec.weight_shape))


def test_conv_backward_scalar():
    spec = ConvSpec(1, 1, (1, 1), has_bias=False)
    x = np.full((1, 1, 1, 1), 3.0)
    w = np.full((1, 1, 1, 1), -2.0)
    gx, gw, gb = conv2d_backward(np.full((1, 1, 1, 1), 5.0), x, spec, w)
    assert gw.item() == 15.0 and gx.item() == -10.0 and gb.item() == 5.0


def test_conv_backward_zero_grad(rng):
    spec = ConvSpec(3, 4, (3, 3), padding=1)
    x = rng.standard_normal((2, 3, 5, 5))
    gx, gw, gb = conv2d_backward(np.zeros((2, 4, 5, 5)), x, spec, rng.standard_normal(spec.weight_shape))
    assert not gx.any() and not gw.any() and not gb.any()


def _conv_check(spec, x_shape, seed):
    rng = np.random.default_rng(seed)
    arrays = {"x": rng.standard_normal(x_shape), "w": rng.standard_normal(spec.weight_shape),
              "b": rng.standard_normal(spec.out_channels)}

    def fwd(x, w, b):
        return conv2d_forward(x, spec, w, b)

    def bwd(g, x, w, b):
        gx, gw, gb = conv2d_backward(g, x, spec, w)
        return {"x": gx, "w": gw, "b": gb}

    return grad_check(fwd, bwd, arrays, step=1e-5, seed=seed)


def test_conv_gradcheck_random():
    assert _conv_check(ConvSpec(3, 4, (3, 3), padding=1), (2, 3, 5, 5), 0) < 1e-4


def test_gradcheck_linear_op_is_exact():
    assert _conv_check(ConvSpec(2, 3, (1, 1)), (1, 2, 3, 3), 1) < 1e-10


def test_gradcheck_dilated():
    assert _conv_check(ConvSpec(2, 2, (3, 3), dilation=2, padding=2), (1, 2, 6, 6), 2) < 1e-4


def test_gradcheck_strided():
    assert _conv_check(ConvSpec(2, 3, (3, 3), stride=2, padding=1), (1, 2, 7, 7), 3) < 1e-4


def test_gradcheck_rejects_float32():
    with pytest.raises(ConfigError):
        grad_check(lambda x: x, lambda g, x: {"x": g}, {"x": np.zeros(3, np.float32)})


def test_softmax_cases():
    p = softmax_channels(np.zeros((1, 3, 1, 1)))
    np.testing.assert_allclose(p[0, :, 0, 0], [1 / 3] * 3, atol=1e-15)
    p = softmax_channels(np.array([math.log(2), 0, 0]).reshape(1, 3, 1, 1))
    np.testing.assert_allclose(p[0, :, 0, 0], [0.5, 0.25, 0.25], atol=1e-15)
    with pytest.raises(ConfigError):
        softmax_channels(np.zeros((1, 1, 2, 2)))


@given(hnp.arrays(np.float64, (2, 4, 3, 3), elements=st.floats(-50, 50)),
       hnp.arrays(np.float64, (2, 1, 3, 3), elements=st.floats(-1000, 1000)))
def test_softmax_rows_and_shift_invariance(logits, shift):
    p = softmax_channels(logits)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-6)
    assert np.isfinite(p).all()
    np.testing.assert_allclose(softmax_channels(logits + shift), p, atol=1e-6)


def test_softmax_float32_rows():
    x = np.random.default_rng(0).standard_normal((3, 5, 4, 4)).astype(np.float32) * 30
    assert np.abs(softmax_channels(x).sum(axis=1) - 1).max() < 1e-6


def test_cross_entropy_closed_forms():
    probs = np.zeros((1, 4, 1, 1))
    probs[0, 2] = 1.0
    loss, _ = masked_cross_entropy(probs, np.array([[[2]]]))
    assert loss == 0.0
    k = 5
    loss, _ = masked_cross_entropy(np.full((1, k, 1, 1), 1 / k), np.array([[[3]]]))
    assert loss == pytest.approx(math.log(k), abs=1e-12)


def test_cross_entropy_empty_mask_sentinel(rng):
    probs = softmax_channels(rng.standard_normal((2, 3, 4, 4)))
    labels = rng.integers(0, 3, (2, 4, 4))
    loss, g = masked_cross_entropy(probs, labels, np.zeros((2, 4, 4), bool))
    assert loss == 0.0 and not g.any()
    loss, g = masked_cross_entropy(probs, np.full((2, 4, 4), 255))
    assert loss == 0.0 and not g.any()


@given(st.integers(0, 10_000))
def test_cross_entropy_grad_bit_zero_outside(seed):
    rng = np.random.default_rng(seed)
    probs = softmax_channels(rng.standard_normal((2, 3, 5, 5)).astype(np.float32))
    labels = rng.integers(0, 3, (2, 5, 5))
    labels[rng.random((2, 5, 5)) < 0.2] = 255
    mask = rng.random((2, 5, 5)) < 0.5
    _, g = masked_cross_entropy(probs, labels, mask)
    outside = ~mask | (labels == 255)
    assert np.all(g.transpose(0, 2, 3, 1)[outside] == 0.0)
    assert not np.signbit(g.transpose(0, 2, 3, 1)[outside]).any()


def test_cross_entropy_value_is_mean_over_contributing(rng):
    probs = softmax_channels(rng.standard_normal((1, 3, 2, 2)))
    labels = np.array([[[0, 1], [2, 255]]])
    mask = np.array([[[True, True], [False, True]]])
    loss, _ = masked_cross_entropy(probs, labels, mask)
    expect = -(math.log(probs[0, 0, 0, 0]) + math.log(probs[0, 1, 0, 1])) / 2
    assert loss == pytest.approx(expect, rel=1e-12)


@pytest.mark.parametrize("seed", range(3))
def test_softmax_ce_gradcheck(seed):
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 4, (2, 3, 3))
    mask = rng.random((2, 3, 3)) < 0.7

    def fwd(z):
        return np.array([masked_cross_entropy(softmax_channels(z), labels, mask)[0]])

    def bwd(g, z):
        return {"z": g[0] * masked_cross_entropy(softmax_channels(z), labels, mask)[1]}

    assert grad_check(fwd, bwd, {"z": rng.standard_normal((2, 4, 3, 3))}, seed=seed) < 1e-4


def test_relu_and_affine(rng):
    x = rng.standard_normal((2, 3, 4, 4))
    np.testing.assert_array_equal(relu_forward(x), np.where(x > 0, x, 0))
    g = rng.standard_normal(x.shape)
    np.testing.assert_array_equal(relu_backward(g, x), np.where(x > 0, g, 0))
    scale, shift = rng.standard_normal(3), rng.standard_normal(3)
    y = affine_forward(x, scale, shift)
    np.testing.assert_allclose(y[:, 1], x[:, 1] * scale[1] + shift[1])
    gx, gs, gt = affine_backward(g, x, scale)
    np.testing.assert_allclose(gt, g.sum(axis=(0, 2, 3)))
    np.testing.assert_allclose(gs, (g * x).sum(axis=(0, 2, 3)))
    np.testing.assert_allclose(gx, g * scale[None, :, None, None])


def test_channel_concat_and_downsample():
    a, b = np.zeros((1, 2, 3, 3)), np.ones((1, 1, 3, 3))
    assert channel_concat([a, b]).shape == (1, 3, 3, 3)
    with pytest.raises(ConfigError):
        channel_concat([a, np.ones((1, 1, 2, 3))])
    lab = np.arange(64).reshape(8, 8)
    np.testing.assert_array_equal(downsample_labels(lab, 4), [[18, 22], [50, 54]])


def test_sgd_plain_descent():
    p = Param("w", np.array([1.0, -2.0]))
    p.grad = np.array([0.5, 0.5])
    sgd_step([p], OptimizerState(0.1, momentum=0.0, weight_decay=0.0))
    np.testing.assert_allclose(p.data, [0.95, -2.05])


def test_sgd_fixed_point_and_frozen():
    p = Param("w", np.array([1.0]))
    p.grad = np.array([0.0])
    sgd_step([p], OptimizerState(0.1, 0.9, 0.0))
    assert p.data[0] == 1.0
    q = Param("q", np.array([1.0]), grad=np.array([1.0]), frozen=True)
    sgd_step([q], OptimizerState(0.1, 0.9, 0.1))
    assert q.data[0] == 1.0


def test_sgd_momentum_hand_iteration():
    # v1 = 1, p1 = 0.9; v2 = 0.9 + 1 = 1.9, p2 = 0.9 - 0.19 = 0.71
    p = Param("w", np.array([1.0]))
    state = OptimizerState(0.1, 0.9, 0.0)
    p.grad = np.array([1.0])
    sgd_step([p], state)
    assert p.data[0] == pytest.approx(0.9, abs=1e-15)
    sgd_step([p], state)
    assert p.data[0] == pytest.approx(0.71, abs=1e-15)
    assert state.velocity["w"].shape == p.data.shape


def test_sgd_weight_decay_term():
    p = Param("w", np.array([2.0]), grad=np.array([0.0]))
    sgd_step([p], OptimizerState(0.5, 0.0, 0.1))
    assert p.data[0] == pytest.approx(2.0 - 0.5 * 0.2)


def test_conv_deterministic_bit_exact(rng):
    x = rng.standard_normal((2, 8, 9, 9)).astype(np.float32)
    spec = ConvSpec(8, 8, (3, 3), dilation=2, padding=2)
    w = rng.standard_normal(spec.weight_shape).astype(np.float32)
    a, b = conv2d_forward(x, spec, w), conv2d_forward(x.copy(), spec, w.copy())
    assert a.tobytes() == b.tobytes()
