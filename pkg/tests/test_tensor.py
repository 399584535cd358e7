"""Tensor kernel tests against naive loop oracles."""

import numpy as np
import numpy.testing as npt
import pytest

from mlcseg import tensor
from mlcseg.tensor import ConvSpec


def conv_naive(x, w, bias, spec):
    """Direct six-loop convolution, the oracle for the im2col path."""
    n, cin, h, wd = x.shape
    (kh, kw), (sh, sw) = spec.kernel, spec.stride
    (ph, pw), (dh, dw) = spec.padding, spec.dilation
    ho, wo = spec.out_hw(h, wd)
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    out = np.zeros((n, spec.out_channels, ho, wo), dtype=np.float64)
    for b in range(n):
        for o in range(spec.out_channels):
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0
                    for c in range(cin):
                        for u in range(kh):
                            for v in range(kw):
                                acc += xp[b, c, i * sh + u * dh, j * sw + v * dw] * w[o, c, u, v]
                    out[b, o, i, j] = acc
    if bias is not None:
        out += bias[None, :, None, None]
    return out


CONV_SWEEP = [(s, p, d) for s in (1, 2) for p in (0, 1, 2) for d in (1, 2)]


@pytest.mark.parametrize("stride,pad,dil", CONV_SWEEP)
def test_conv2d_matches_naive_loop(stride, pad, dil):
    rng = np.random.default_rng(stride * 100 + pad * 10 + dil)
    spec = ConvSpec(3, 4, 3, stride=stride, padding=pad, dilation=dil, has_bias=True)
    x = rng.normal(size=(2, 3, 9, 8))
    w = rng.normal(size=spec.weight_shape)
    b = rng.normal(size=4)
    got = tensor.conv2d(x, w, b, spec)
    npt.assert_allclose(got, conv_naive(x, w, b, spec), rtol=1e-12, atol=1e-12)


def test_conv2d_output_shapes():
    assert ConvSpec(1, 1, 1, stride=2).out_hw(64, 64) == (32, 32)
    assert ConvSpec(3, 32, 7, stride=2, padding=3).out_hw(480, 320) == (240, 160)
    # floor((10 - 2*(3-1) - 1)/1) + 1 with dilation 2, no padding
    assert ConvSpec(1, 1, 3, dilation=2).out_hw(10, 10) == (6, 6)
    with pytest.raises(ValueError, match="not positive"):
        ConvSpec(1, 1, 7).out_hw(4, 4)


def test_conv2d_dilation_equals_zero_inflated_kernel():
    # A rate-d kernel is a (d*(k-1)+1) kernel with zeros between the taps.
    rng = np.random.default_rng(7)
    x = rng.normal(size=(1, 2, 12, 12))
    w = rng.normal(size=(3, 2, 3, 3))
    inflated = np.zeros((3, 2, 5, 5))
    inflated[:, :, ::2, ::2] = w
    a = tensor.conv2d(x, w, None, ConvSpec(2, 3, 3, dilation=2))
    b = tensor.conv2d(x, inflated, None, ConvSpec(2, 3, 5))
    npt.assert_allclose(a, b, rtol=1e-12, atol=0)


def test_conv2d_validation():
    spec = ConvSpec(3, 4, 3)
    x = np.zeros((1, 2, 8, 8), dtype=np.float32)
    with pytest.raises(ValueError, match="channels"):
        tensor.conv2d(x, np.zeros(spec.weight_shape, dtype=np.float32), None, spec)
    x = np.zeros((1, 3, 8, 8), dtype=np.float32)
    with pytest.raises(ValueError, match="weight shape"):
        tensor.conv2d(x, np.zeros((4, 3, 5, 5), dtype=np.float32), None, spec)
    with pytest.raises(ValueError, match="dtype"):
        tensor.conv2d(x, np.zeros(spec.weight_shape, dtype=np.float64), None, spec)
    with pytest.raises(ValueError, match="bias"):
        tensor.conv2d(x, np.zeros(spec.weight_shape, dtype=np.float32),
                      np.zeros(4, dtype=np.float32), spec)
    spec_b = ConvSpec(3, 4, 3, has_bias=True)
    with pytest.raises(ValueError, match="bias"):
        tensor.conv2d(x, np.zeros(spec_b.weight_shape, dtype=np.float32), None, spec_b)
    with pytest.raises(ValueError, match="rank-4"):
        tensor.conv2d(np.zeros((3, 8, 8), dtype=np.float32),
                      np.zeros(spec.weight_shape, dtype=np.float32), None, spec)


def test_im2col_col2im_adjoint():
    # <im2col(x), C> == <x, col2im(C)> pins the scatter as the exact adjoint.
    rng = np.random.default_rng(3)
    for stride, pad, dil in [(1, 0, 1), (2, 1, 1), (1, 2, 2), (2, 2, 2)]:
        spec = ConvSpec(2, 1, 3, stride=stride, padding=pad, dilation=dil)
        x = rng.normal(size=(2, 2, 8, 9))
        cols, ho, wo = tensor.im2col(x, spec)
        c = rng.normal(size=cols.shape)
        lhs = float(np.sum(cols * c))
        rhs = float(np.sum(x * tensor.col2im(c, x.shape, spec, ho, wo)))
        assert abs(lhs - rhs) < 1e-9 * max(1.0, abs(lhs))


def test_bilinear_factor_one_is_bit_identity():
    rng = np.random.default_rng(11)
    x = rng.normal(size=(2, 3, 7, 5)).astype(np.float32)
    out = tensor.bilinear_upsample(x, 1)
    assert np.array_equal(out, x)


def test_bilinear_constant_preserved_exactly():
    x = np.full((1, 2, 5, 5), 0.37, dtype=np.float32)
    out = tensor.bilinear_upsample(x, 3)
    assert out.shape == (1, 2, 15, 15)
    assert np.all(out == np.float32(0.37))


def test_bilinear_known_column():
    # Length 2 to length 4 with aligned corners samples at 0, 1/3, 2/3, 1.
    x = np.array([0.0, 3.0]).reshape(1, 1, 2, 1)
    out = tensor.bilinear_upsample(x, 2)
    npt.assert_allclose(out[0, 0, :, 0], [0.0, 1.0, 2.0, 3.0], rtol=0, atol=1e-15)


def test_bilinear_endpoints_exact():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(1, 1, 4, 4)).astype(np.float32)
    out = tensor.bilinear_upsample(x, 4)
    assert out[0, 0, 0, 0] == x[0, 0, 0, 0]
    assert out[0, 0, -1, -1] == x[0, 0, -1, -1]


def test_interp_matrix_matches_resize():
    rng = np.random.default_rng(13)
    for length, out_length in [(2, 4), (4, 4), (3, 7), (5, 2), (1, 3)]:
        m = tensor.interp_matrix(length, out_length)
        npt.assert_allclose(m.sum(axis=1), np.ones(out_length), rtol=0, atol=1e-15)
        x = rng.normal(size=(1, 1, length, 1))
        direct = tensor.bilinear_resize(x, out_length, 1)[0, 0, :, 0]
        npt.assert_allclose(m @ x[0, 0, :, 0], direct, rtol=1e-12, atol=1e-12)


def test_nearest_resize_keeps_binary():
    rng = np.random.default_rng(17)
    m = (rng.random((1, 1, 10, 12)) < 0.4).astype(np.float32)
    for oh, ow in [(5, 6), (20, 24), (7, 13)]:
        out = tensor.nearest_resize(m, oh, ow)
        assert out.shape == (1, 1, oh, ow)
        assert set(np.unique(out)) <= {0.0, 1.0}


def test_concat_channels():
    rng = np.random.default_rng(19)
    a = rng.normal(size=(2, 3, 4, 4))
    b = rng.normal(size=(2, 5, 4, 4))
    out = tensor.concat_channels([a, b])
    assert out.shape == (2, 8, 4, 4)
    npt.assert_array_equal(out[:, :3], a)
    npt.assert_array_equal(out[:, 3:], b)
    with pytest.raises(ValueError, match="mismatch"):
        tensor.concat_channels([a, rng.normal(size=(2, 5, 5, 4))])
    with pytest.raises(ValueError, match="at least one"):
        tensor.concat_channels([])


def test_pointwise_ops():
    x = np.array([[-1.0, 0.0, 2.0]])[None, None]
    npt.assert_array_equal(tensor.relu(x), [[[[0.0, 0.0, 2.0]]]])
    npt.assert_allclose(tensor.scale(x, 2.5), x * 2.5)
    npt.assert_allclose(tensor.add(x, x), 2 * x)
    with pytest.raises(ValueError, match="shape mismatch"):
        tensor.add(np.zeros((1, 2)), np.zeros((2, 1)))


def test_sigmoid_values_and_range():
    x = np.array([-2.0, -0.5, 0.0, 0.5, 2.0])
    npt.assert_allclose(tensor.sigmoid(x), 1.0 / (1.0 + np.exp(-x)), rtol=1e-12)
    extreme = tensor.sigmoid(np.array([-1000.0, 1000.0, -50.0, 50.0]))
    assert np.all(extreme > 0.0) and np.all(extreme < 1.0)
    assert extreme[0] == tensor.SIGMOID_CLAMP
    assert extreme[1] == 1.0 - tensor.SIGMOID_CLAMP


def test_dropout_identity_cases():
    rng = np.random.default_rng(23)
    x = rng.normal(size=(2, 3, 4, 4)).astype(np.float32)
    npt.assert_array_equal(tensor.dropout(x, 0.0, 0, training=True), x)
    npt.assert_array_equal(tensor.dropout(x, 0.9, 0, training=False), x)
    with pytest.raises(ValueError, match="rate"):
        tensor.dropout(x, 1.0, 0, training=True)


def test_dropout_mask_statistics():
    # Inverted scaling keeps the expectation at the input value.
    rate = 0.5
    masks = np.stack([tensor.dropout_mask((64, 64), rate, seed) for seed in range(50)])
    assert set(np.unique(masks)) == {0.0, 1.0 / (1.0 - rate)}
    assert abs(masks.mean() - 1.0) < 0.02


def test_channel_stats_biased_variance():
    rng = np.random.default_rng(29)
    x = rng.normal(size=(3, 4, 5, 6))
    mean, var = tensor.channel_stats(x)
    flat = x.transpose(1, 0, 2, 3).reshape(4, -1)
    npt.assert_allclose(mean, flat.mean(axis=1), rtol=1e-12)
    npt.assert_allclose(var, flat.var(axis=1, ddof=0), rtol=1e-12)
    assert not np.allclose(var, flat.var(axis=1, ddof=1))


def test_batchnorm_training_normalizes():
    rng = np.random.default_rng(31)
    x = rng.normal(2.0, 3.0, size=(4, 3, 8, 8))
    out = tensor.batchnorm2d(x, np.ones(3), np.zeros(3), training=True)
    flat = out.transpose(1, 0, 2, 3).reshape(3, -1)
    npt.assert_allclose(flat.mean(axis=1), 0.0, atol=1e-10)
    npt.assert_allclose(flat.var(axis=1), 1.0, atol=1e-3)


def test_batchnorm_running_stats_ema():
    rng = np.random.default_rng(37)
    x = rng.normal(1.5, 2.0, size=(2, 2, 6, 6))
    rm = np.zeros(2)
    rv = np.ones(2)
    mean, var = tensor.channel_stats(x)
    tensor.batchnorm2d(x, np.ones(2), np.zeros(2), rm, rv, training=True, momentum=0.1)
    npt.assert_allclose(rm, 0.1 * mean, rtol=1e-12)
    npt.assert_allclose(rv, 0.9 * 1.0 + 0.1 * var, rtol=1e-12)


def test_batchnorm_inference_uses_running_stats():
    rng = np.random.default_rng(41)
    x = rng.normal(size=(2, 2, 4, 4))
    rm = np.array([0.5, -0.5])
    rv = np.array([2.0, 0.5])
    gamma = np.array([1.5, 0.8])
    beta = np.array([0.1, -0.2])
    out = tensor.batchnorm2d(x, gamma, beta, rm, rv, training=False)
    expect = (x - rm[None, :, None, None]) / np.sqrt(rv + tensor.BN_EPS)[None, :, None, None]
    expect = expect * gamma[None, :, None, None] + beta[None, :, None, None]
    npt.assert_allclose(out, expect, rtol=1e-12)
    with pytest.raises(ValueError, match="running"):
        tensor.batchnorm2d(x, gamma, beta, None, None, training=False)
