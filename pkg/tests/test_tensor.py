import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import dilate_kernel, naive_conv2d
from swidernet.tensor import (
    ConvKernel,
    DegenerateShapeError,
    ShapeMismatchError,
    Tensor,
    activation,
    avg_pool2d,
    batch_norm_inference,
    bilinear_resize,
    concat,
    conv2d,
    conv_output_size,
    fully_connected,
    global_avg_pool,
    grad_check,
    hard_sigmoid,
    kink_probe,
    relu,
    sigmoid,
)


def naive_avg_pool(x, window, stride, padding):
    n, c, h, w = x.shape
    oh = (h + 2 * padding - window) // stride + 1
    ow = (w + 2 * padding - window) // stride + 1
    out = np.zeros((n, c, oh, ow))
    for i in range(oh):
        for j in range(ow):
            y0, x0 = i * stride - padding, j * stride - padding
            ys = slice(max(y0, 0), min(y0 + window, h))
            xs = slice(max(x0, 0), min(x0 + window, w))
            out[:, :, i, j] = x[:, :, ys, xs].mean(axis=(2, 3))
    return out


@pytest.mark.parametrize("stride,rate,groups", [(1, 1, 1), (2, 1, 1), (1, 2, 1), (2, 3, 1), (1, 2, 2), (1, 1, 4)])
def test_conv2d_matches_loop_oracle(rng, stride, rate, groups):
    x = rng.standard_normal((2, 4, 9, 8))
    w = rng.standard_normal((4, 4 // groups, 3, 3))
    b = rng.standard_normal(4)
    got = conv2d(x, ConvKernel(w, b, stride=stride, rate=rate, groups=groups)).data
    np.testing.assert_allclose(got, naive_conv2d(x, w, b, stride, rate, groups), atol=1e-10)


@pytest.mark.parametrize("rate", [1, 2, 3, 6])
def test_atrous_equals_zero_inserted_kernel(rng, rate):
    x = rng.standard_normal((1, 3, 11, 11)).astype(np.float32)
    w = rng.standard_normal((2, 3, 3, 3)).astype(np.float32)
    atrous = conv2d(x, ConvKernel(w, rate=rate)).data
    dense = conv2d(x, ConvKernel(dilate_kernel(w, rate))).data
    assert np.max(np.abs(atrous - dense)) < 1e-6


def test_conv_example_size():
    # a 3x3 stride-2 conv on 65 gives 33
    assert conv_output_size(65, 3, 2, 1, 1) == 33


@given(size=st.integers(1, 80), k=st.sampled_from([1, 3, 5]), stride=st.sampled_from([1, 2]),
       rate=st.integers(1, 4))
def test_default_padding_size_law(size, k, stride, rate):
    pad = rate * (k - 1) // 2
    assert conv_output_size(size, k, stride, rate, pad) == -(-size // stride)


def test_conv_rejects_bad_shapes(rng):
    with pytest.raises(ShapeMismatchError):
        conv2d(rng.standard_normal((1, 3, 5, 5)), ConvKernel(rng.standard_normal((2, 4, 3, 3))))
    with pytest.raises(ValueError):
        ConvKernel(np.zeros((1, 1, 2, 2)))
    with pytest.raises(ValueError):
        ConvKernel(np.zeros((1, 1, 3, 3)), stride=3)
    with pytest.raises(ShapeMismatchError):
        ConvKernel(np.zeros((3, 1, 3, 3)), groups=2)


def test_float32_forward_preserved(rng):
    x = rng.standard_normal((1, 2, 5, 5)).astype(np.float32)
    w = rng.standard_normal((2, 2, 3, 3)).astype(np.float32)
    assert conv2d(x, ConvKernel(w)).dtype == np.float32


@pytest.mark.parametrize("window,stride,padding", [(3, 1, 1), (5, 1, 2), (3, 2, 1), (2, 2, 0)])
def test_avg_pool_matches_loop_oracle(rng, window, stride, padding):
    x = rng.standard_normal((2, 3, 7, 6))
    np.testing.assert_allclose(avg_pool2d(x, window, stride, padding).data,
                               naive_avg_pool(x, window, stride, padding), atol=1e-12)


def test_global_pool_and_fc(rng):
    x = rng.standard_normal((2, 3, 4, 5))
    z = global_avg_pool(x)
    assert z.shape == (2, 3, 1, 1)
    np.testing.assert_allclose(z.data[:, :, 0, 0], x.mean(axis=(2, 3)))
    w, b = rng.standard_normal((4, 3)), rng.standard_normal(4)
    np.testing.assert_allclose(fully_connected(z, w, b).data[:, :, 0, 0], z.data[:, :, 0, 0] @ w.T + b)
    with pytest.raises(ShapeMismatchError):
        fully_connected(x, w, b)


def test_activations():
    v = np.array([-4.0, -3.0, -1.0, 0.0, 1.0, 3.0, 7.0])
    np.testing.assert_array_equal(relu(v).data, [0, 0, 0, 0, 1, 3, 7])
    np.testing.assert_array_equal(activation("relu6", v).data, [0, 0, 0, 0, 1, 3, 6])
    np.testing.assert_allclose(hard_sigmoid(v).data, [0, 0, 2 / 6, 0.5, 4 / 6, 1, 1])
    np.testing.assert_allclose(sigmoid(v).data, 1 / (1 + np.exp(-v)))
    with pytest.raises(ValueError):
        activation("gelu", v)


def test_batch_norm_formula(rng):
    x = rng.standard_normal((2, 3, 4, 4))
    mean, var = rng.standard_normal(3), rng.uniform(0.5, 2, 3)
    gamma, beta = rng.standard_normal(3), rng.standard_normal(3)
    got = batch_norm_inference(x, mean, var, gamma, beta, eps=1e-3).data
    r = lambda a: a.reshape(1, 3, 1, 1)  # noqa: E731
    np.testing.assert_allclose(got, r(gamma) * (x - r(mean)) / np.sqrt(r(var) + 1e-3) + r(beta))
    with pytest.raises(ValueError):
        batch_norm_inference(x, mean, -var, gamma, beta)


def test_bilinear_resize(rng):
    x = rng.standard_normal((1, 2, 5, 5))
    np.testing.assert_array_equal(bilinear_resize(x, 5, 5).data, x)
    up = bilinear_resize(x, 9, 9).data
    assert up.shape == (1, 2, 9, 9)
    const = np.full((1, 1, 3, 4), 2.5)
    np.testing.assert_allclose(bilinear_resize(const, 7, 11).data, 2.5)
    # half-pixel sampling: upsampling by 2 then averaging 2x2 blocks is smoothing, not identity,
    # but a linear ramp is reproduced exactly away from the borders
    ramp = np.arange(8, dtype=float).reshape(1, 1, 1, 8).repeat(2, axis=2)
    out = bilinear_resize(ramp, 2, 16).data[0, 0, 0]
    np.testing.assert_allclose(np.diff(out[1:-1]), 0.5)
    with pytest.raises(DegenerateShapeError):
        bilinear_resize(x, 0, 3)


def test_concat_and_backward():
    a = Tensor(np.ones((1, 2, 2, 2)), requires_grad=True)
    b = Tensor(np.full((1, 3, 2, 2), 2.0), requires_grad=True)
    out = concat([a, b])
    assert out.shape == (1, 5, 2, 2)
    (out * 3.0).sum().backward()
    np.testing.assert_array_equal(a.grad, 3.0)
    np.testing.assert_array_equal(b.grad, 3.0)


def test_no_graph_without_grad(rng):
    out = relu(rng.standard_normal((1, 1, 2, 2)))
    assert not out.requires_grad and out._parents == ()


def test_grad_check_detects_wrong_gradient():
    from swidernet.tensor import _result

    def bad_square(x):
        return _result(x.data ** 2, (x,), lambda g: (g * x.data,))  # missing factor 2

    assert grad_check(bad_square, [np.array([1.0, 2.0, -3.0])]) > 0.1


def test_grad_check_bilinear_and_bn(rng):
    assert grad_check(lambda x: bilinear_resize(x, 7, 5), [rng.standard_normal((1, 2, 4, 3))]) < 1e-6
    mean, var = rng.standard_normal(3), rng.uniform(0.5, 2, 3)
    assert grad_check(lambda x, g, b: batch_norm_inference(x, mean, var, g, b),
                      [rng.standard_normal((2, 3, 3, 3)), rng.standard_normal(3), rng.standard_normal(3)]) < 1e-6


def test_kink_probe_reports_distance():
    with kink_probe() as log:
        relu(np.array([0.5, -0.25, 2.0]))
        hard_sigmoid(np.array([2.9]))
    assert log == [0.25, pytest.approx(5.9), pytest.approx(0.1)]
    relu(np.array([1.0]))
    assert len(log) == 3
