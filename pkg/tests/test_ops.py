import math

import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from lidarmos import ops

from oracles import conv2d_loop


def test_conv_ones_center_is_nine():
    x = torch.ones(1, 1, 3, 3)
    out = ops.conv2d(x, torch.ones(1, 1, 3, 3), padding=1, circular_width=False)
    assert out[0, 0, 1, 1].item() == 9.0


def test_conv_identity_kernel():
    x = torch.randn(2, 3, 5, 7)
    w = torch.eye(3).view(3, 3, 1, 1)
    torch.testing.assert_close(ops.conv2d(x, w), x)


@pytest.mark.parametrize("circular", [False, True])
def test_dilated_conv_matches_loop_oracle(circular, double):
    g = torch.Generator().manual_seed(3)
    x = torch.randn(2, 3, 5, 7, generator=g)
    w = torch.randn(4, 3, 3, 3, generator=g)
    b = torch.randn(4, generator=g)
    got = ops.conv2d(x, w, b, dilation=2, padding=2, circular_width=circular).numpy()
    ref = conv2d_loop(x.numpy(), w.numpy(), b.numpy(), dilation=2, pad=2, circular=circular)
    np.testing.assert_allclose(got, ref, atol=1e-6)


def test_conv_errors():
    with pytest.raises(ValueError):
        ops.conv2d(torch.zeros(1, 2, 4, 4), torch.zeros(1, 3, 3, 3))
    with pytest.raises(ValueError):
        ops.conv2d(torch.zeros(1, 3, 4, 4), torch.zeros(1, 3, 3, 3), dilation=0)


def test_circular_padding_wraps_width_only():
    x = torch.arange(12.0).view(1, 1, 3, 4)
    p = ops.pad2d(x, 1, 1, True)
    assert p.shape == (1, 1, 5, 6)
    assert torch.all(p[0, 0, 0] == 0) and torch.all(p[0, 0, -1] == 0)
    torch.testing.assert_close(p[0, 0, 1:-1, 0], x[0, 0, :, -1])
    torch.testing.assert_close(p[0, 0, 1:-1, -1], x[0, 0, :, 0])


def test_softpool_equal_values():
    x = torch.full((1, 1, 2, 2), 3.25)
    assert ops.softpool2d(x).item() == pytest.approx(3.25)


def test_softpool_closed_form():
    x = torch.tensor([[[[0.0, math.log(3.0)], [0.0, math.log(3.0)]]]], dtype=torch.float64)
    # weights e^0 = 1 and e^ln3 = 3
    assert ops.softpool2d(x).item() == pytest.approx(0.75 * math.log(3.0), rel=1e-12)


@given(hnp.arrays(np.float64, (1, 2, 4, 6), elements=st.floats(-50, 50)))
def test_softpool_bounded_by_window(a):
    x = torch.from_numpy(a)
    out = ops.softpool2d(x)
    lo = -torch.nn.functional.max_pool2d(-x, 2)
    hi = torch.nn.functional.max_pool2d(x, 2)
    assert torch.all(out >= lo - 1e-9) and torch.all(out <= hi + 1e-9)


def test_softpool_large_inputs_stay_finite():
    x = torch.tensor([[[[1000.0, 999.0], [-1000.0, 0.0]]]])
    assert torch.isfinite(ops.softpool2d(x)).all()


def test_softpool_divisibility():
    with pytest.raises(ValueError):
        ops.softpool2d(torch.zeros(1, 1, 3, 4))


def test_pixel_shuffle_ordering():
    x = torch.tensor([1.0, 2.0, 3.0, 4.0]).view(1, 4, 1, 1)
    out = ops.pixel_shuffle(x, 2)
    assert out.shape == (1, 1, 2, 2)
    assert out[0, 0].tolist() == [[1.0, 2.0], [3.0, 4.0]]


def test_pixel_shuffle_identity_and_inverse():
    x = torch.randn(2, 8, 3, 5)
    torch.testing.assert_close(ops.pixel_shuffle(x, 1), x)
    y = ops.pixel_shuffle(x, 2)
    # space-to-depth by hand
    n, c, h, w = y.shape
    back = y.view(n, c, h // 2, 2, w // 2, 2).permute(0, 1, 3, 5, 2, 4).reshape(n, c * 4, h // 2, w // 2)
    torch.testing.assert_close(back, x)


def test_pixel_shuffle_divisibility():
    with pytest.raises(ValueError):
        ops.pixel_shuffle(torch.zeros(1, 3, 2, 2), 2)


def test_sigmoid_softmax_basics():
    assert ops.sigmoid(torch.tensor(0.0)).item() == 0.5
    s = ops.softmax(torch.full((1, 5, 2, 2), 1.7), dim=1)
    torch.testing.assert_close(s, torch.full_like(s, 0.2))
    torch.testing.assert_close(ops.softmax(torch.randn(3, 4), dim=1).sum(1), torch.ones(3))
    with pytest.raises(IndexError):
        ops.softmax(torch.zeros(2, 2), dim=2)


def test_dropout_eval_is_identity():
    x = torch.randn(4, 10)
    torch.testing.assert_close(ops.dropout(x, 0.5, training=False), x)
    m = torch.nn.Dropout(0.5).eval()
    torch.testing.assert_close(m(x), x)


def test_backward_accumulates_and_checks_scalar():
    w = torch.randn(5, requires_grad=True)
    x = torch.randn(5)
    ops.backward((w * x).sum())
    torch.testing.assert_close(w.grad, x)
    ops.backward((w * x).sum())
    torch.testing.assert_close(w.grad, 2 * x)
    with pytest.raises(ValueError):
        ops.backward(w * x)


def test_unreachable_grad_untouched():
    a = torch.randn(3, requires_grad=True)
    b = torch.randn(3, requires_grad=True)
    ops.backward((a * 2).sum())
    assert b.grad is None


def test_forward_deterministic():
    torch.manual_seed(0)
    conv = ops.Conv2d(3, 4, 3, padding=1)
    x = torch.randn(1, 3, 8, 16)
    assert torch.equal(conv(x), conv(x))
