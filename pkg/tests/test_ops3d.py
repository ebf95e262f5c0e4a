import numpy as np
import pytest
from oracles import conv3d_loops

from ssmm import ops3d as O
from ssmm import tensor as T
from ssmm.tensor import DimensionError, Tensor


def test_all_ones_conv():
    out = O.conv3d(Tensor(np.ones((1, 1, 3, 3, 3))), Tensor(np.ones((1, 1, 2, 2, 2))))
    assert out.shape == (1, 1, 2, 2, 2)
    np.testing.assert_array_equal(out.data, 8.0)


def test_zero_kernel():
    x = np.random.default_rng(0).normal(size=(2, 2, 4, 4, 4))
    out = O.conv3d(Tensor(x), Tensor(np.zeros((3, 2, 3, 3, 3))), padding=1)
    np.testing.assert_array_equal(out.data, 0.0)


@pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 1), ((1, 2, 1), (0, 1, 1))])
def test_conv_matches_loop_oracle(stride, padding):
    rng = np.random.default_rng(1)
    x, w = rng.normal(size=(1, 2, 4, 4, 4)), rng.normal(size=(3, 2, 2, 2, 2))
    got = O.conv3d(Tensor(x), Tensor(w), stride, padding).data
    s = stride if isinstance(stride, tuple) else (stride,) * 3
    p = padding if isinstance(padding, tuple) else (padding,) * 3
    np.testing.assert_allclose(got, conv3d_loops(x, w, s, p), atol=1e-12)


def test_conv_errors():
    with pytest.raises(DimensionError, match=r"\(1, 2, 4, 4, 4\).*\(1, 3, 2, 2, 2\)"):
        O.conv3d(Tensor(np.ones((1, 2, 4, 4, 4))), Tensor(np.ones((1, 3, 2, 2, 2))))
    with pytest.raises(DimensionError):
        O.conv3d(Tensor(np.ones((1, 1, 2, 2, 2))), Tensor(np.ones((1, 1, 3, 3, 3))))
    with pytest.raises(ValueError):
        O.conv3d(Tensor(np.ones((1, 1, 4, 4, 4))), Tensor(np.ones((1, 1, 2, 2, 2))), stride=0)


def test_pooling_values():
    x = np.arange(64.0).reshape(1, 1, 4, 4, 4)
    avg = O.avg_pool3d(Tensor(x), 2).data
    mx = O.max_pool3d(Tensor(x), 2).data
    assert avg.shape == mx.shape == (1, 1, 2, 2, 2)
    assert avg[0, 0, 0, 0, 0] == np.mean(x[0, 0, :2, :2, :2])
    assert mx[0, 0, 1, 1, 1] == 63.0
    np.testing.assert_allclose(O.global_avg_pool3d(Tensor(x)).data, [[31.5]])


def test_max_pool_tie_shares_gradient():
    x = Tensor(np.ones((1, 1, 2, 2, 2)), requires_grad=True)
    T.tsum(O.max_pool3d(x, 2)).backward()
    np.testing.assert_allclose(x.grad, 1.0 / 8.0)


def test_trilinear_constant_field_exact():
    out = O.trilinear_resize(np.full((3, 3, 3), 0.37), (24, 24, 24))
    assert out.shape == (24, 24, 24)
    assert np.all(out == 0.37)


def test_trilinear_identity_and_range():
    v = np.random.default_rng(2).random((5, 6, 7))
    np.testing.assert_allclose(O.trilinear_resize(v, v.shape), v, atol=1e-15)
    up = O.trilinear_resize(v, (11, 13, 9))
    assert up.min() >= v.min() - 1e-15 and up.max() <= v.max() + 1e-15
