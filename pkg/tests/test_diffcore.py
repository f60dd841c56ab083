import math

import numpy as np
import pytest
import torch

from licrobust import diffcore as dc


def naive_conv(x, k, stride, pad):
    """Direct loop cross-correlation, NCHW / OIHW, zero padding."""
    n, c, h, w = x.shape
    o, _, kh, kw = k.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    out = np.zeros((n, o, oh, ow))
    for b in range(n):
        for oc in range(o):
            for i in range(oh):
                for j in range(ow):
                    patch = xp[b, :, i * stride : i * stride + kh, j * stride : j * stride + kw]
                    out[b, oc, i, j] = (patch * k[oc]).sum()
    return out


@pytest.mark.parametrize("stride,pad", [(1, 1), (2, 2), (2, 0)])
def test_conv2d_matches_direct_loops(stride, pad):
    rng = np.random.default_rng(0)
    x = rng.normal(size=(2, 3, 9, 8))
    k = rng.normal(size=(4, 3, 5, 5))
    got = dc.conv2d(torch.from_numpy(x), torch.from_numpy(k), stride, pad).numpy()
    np.testing.assert_allclose(got, naive_conv(x, k, stride, pad), rtol=1e-10, atol=1e-10)


def test_conv2d_hand_example():
    x = torch.arange(9.0, dtype=torch.float64).reshape(1, 1, 3, 3)
    k = torch.ones(1, 1, 2, 2, dtype=torch.float64)
    out = dc.conv2d(x, k)
    assert out.squeeze().tolist() == [[8.0, 12.0], [20.0, 24.0]]


def test_transpose_is_adjoint():
    g = torch.Generator().manual_seed(1)
    k = torch.randn(6, 4, 5, 5, generator=g, dtype=torch.float64)
    x = torch.randn(2, 4, 16, 16, generator=g, dtype=torch.float64)
    y = torch.randn(2, 6, 8, 8, generator=g, dtype=torch.float64)
    lhs = (dc.conv2d(x, k, 2, 2) * y).sum()
    rhs = (x * dc.conv2d_transpose(y, k, 2, 2, output_padding=1)).sum()
    assert abs(float(lhs - rhs)) < 1e-9 * abs(float(lhs))


def test_transpose_default_doubles_size():
    k = torch.randn(5, 3, 5, 5)
    out = dc.conv2d_transpose(torch.randn(1, 5, 4, 6), k, 2, 2)
    assert out.shape == (1, 3, 8, 12)


def test_conv_shape_errors():
    with pytest.raises(dc.ShapeError):
        dc.conv2d(torch.randn(1, 3, 8, 8), torch.randn(4, 2, 3, 3))
    with pytest.raises(dc.ShapeError):
        dc.conv2d(torch.randn(3, 8, 8), torch.randn(4, 3, 3, 3))
    with pytest.raises(dc.ShapeError):
        dc.conv2d_transpose(torch.randn(1, 3, 8, 8), torch.randn(4, 3, 3, 3), 2, 1)


def test_gdn_hand_values():
    x = torch.tensor([2.0, -1.0], dtype=torch.float64).view(1, 2, 1, 1)
    beta = torch.tensor([1.0, 0.5], dtype=torch.float64)
    gamma = torch.tensor([[1.0, 0.0], [0.5, 2.0]], dtype=torch.float64)
    # channel 0: 2 / sqrt(1 + 4); channel 1: -1 / sqrt(0.5 + 0.5*4 + 2*1)
    fwd = dc.gdn(x, beta, gamma).view(-1).tolist()
    assert fwd == pytest.approx([0.8944271909999159, -0.4714045207910317], abs=1e-12)
    inv = dc.gdn(x, beta, gamma, inverse=True).view(-1).tolist()
    assert inv == pytest.approx([4.47213595499958, -2.1213203435596424], abs=1e-12)


def test_gdn_rejects_nonpositive_beta():
    with pytest.raises(ValueError):
        dc.gdn(torch.ones(1, 2, 1, 1), torch.tensor([1.0, 0.0]), torch.eye(2))


def test_quantize_modes():
    x = torch.tensor([0.4, 0.6, -1.5, 2.49])
    assert dc.quantize(x, "round").tolist() == [0.0, 1.0, -2.0, 2.0]
    x = x.clone().requires_grad_(True)
    y = dc.quantize(x, "round_ste")
    (g,) = torch.autograd.grad(y.sum(), [x])
    assert g.tolist() == [1.0, 1.0, 1.0, 1.0]
    noisy = dc.quantize(torch.zeros(10000), "noise", torch.Generator().manual_seed(0))
    assert float(noisy.min()) >= -0.5 and float(noisy.max()) <= 0.5
    assert abs(float(noisy.mean())) < 0.01
    with pytest.raises(ValueError):
        dc.quantize(torch.zeros(3), "noise")
    with pytest.raises(ValueError):
        dc.quantize(torch.zeros(3), "floor")


def test_lower_bound_gradient_rule():
    x = torch.tensor([0.5, 2.0], requires_grad=True)
    y = dc.lower_bound(x, 1.0)
    assert y.tolist() == [1.0, 2.0]
    # pushing y up is blocked below the bound, pulling down is not
    (g,) = torch.autograd.grad((y * torch.tensor([1.0, 1.0])).sum(), [x])
    assert g.tolist() == [0.0, 1.0]
    (g,) = torch.autograd.grad(dc.lower_bound(x, 1.0).mul(-1).sum(), [x])
    assert g.tolist() == [-1.0, -1.0]


def test_backward_errors_and_zero_grads():
    a = torch.tensor(2.0, requires_grad=True)
    b = torch.tensor(3.0, requires_grad=True)
    root = a * a
    ga, gb = dc.backward(root, [a, b])
    assert float(ga) == 4.0 and float(gb) == 0.0
    with pytest.raises(dc.GraphReusedError):
        dc.backward(root)
    with pytest.raises(dc.ShapeError):
        dc.backward(torch.ones(2, requires_grad=True) * 2)


def test_nonfinite_detection():
    x = torch.tensor([[[[1.0]]]])
    k = torch.tensor([[[[math.inf]]]])
    with pytest.raises(dc.NonFiniteError) as err:
        dc.conv2d(x, k)
    assert "conv2d" in str(err.value)
    with dc.allow_nonfinite():
        assert math.isinf(float(dc.conv2d(x, k)))


def test_rms_and_sum64():
    t = torch.tensor([[3.0, 4.0], [0.0, 0.0]])
    assert dc.rms(t).tolist() == pytest.approx([math.sqrt(12.5), 0.0])
    assert float(dc.rms(t, per_sample=False)) == pytest.approx(math.sqrt(25 / 4))
    s = dc.sum64(torch.full((10**6,), 0.1, dtype=torch.float32))
    assert s.dtype == torch.float64 and abs(float(s) - 1e5 * 1.0000000149011612) < 1e-6


@pytest.mark.parametrize("stride", [1, 2])
def test_fd_conv_and_transpose(stride):
    g = torch.Generator().manual_seed(2)
    x = torch.randn(1, 3, 6, 6, generator=g, dtype=torch.float64)
    k = torch.randn(4, 3, 3, 3, generator=g, dtype=torch.float64)
    b = torch.randn(4, generator=g, dtype=torch.float64)
    w = torch.randn(1, 4, *dc.conv2d(x, k, stride, 1).shape[-2:], generator=g, dtype=torch.float64)
    f = lambda x, k, b: (dc.conv2d(x, k, stride, 1, b) * w).sum()
    assert dc.finite_difference_check(f, [x, k, b]) <= 1e-3
    y = torch.randn(1, 4, 3, 3, generator=g, dtype=torch.float64)
    v = torch.randn(1, 3, 3 * stride, 3 * stride, generator=g, dtype=torch.float64)
    ft = lambda y, k: (dc.conv2d_transpose(y, k, stride, 1) * v).sum()
    assert dc.finite_difference_check(ft, [y, k]) <= 1e-3


@pytest.mark.parametrize("inverse", [False, True])
def test_fd_gdn(inverse):
    g = torch.Generator().manual_seed(3)
    x = torch.randn(2, 3, 4, 4, generator=g, dtype=torch.float64)
    beta = torch.rand(3, generator=g, dtype=torch.float64) + 0.5
    gamma = torch.rand(3, 3, generator=g, dtype=torch.float64) * 0.2
    w = torch.randn(2, 3, 4, 4, generator=g, dtype=torch.float64)
    f = lambda x, beta, gamma: (dc.gdn(x, beta, gamma, inverse) * w).sum()
    assert dc.finite_difference_check(f, [x, beta, gamma]) <= 1e-3


def test_fd_check_catches_a_wrong_gradient():
    class Bad(torch.autograd.Function):
        @staticmethod
        def forward(ctx, x):
            return x * x

        @staticmethod
        def backward(ctx, g):
            return g  # should be 2x * g

    x = torch.tensor([1.5, -0.7], dtype=torch.float64)
    f = lambda t: Bad.apply(t).sum() if t.dtype == torch.float64 and t.requires_grad else (t * t).sum()
    assert dc.finite_difference_check(f, [x]) > 0.1
