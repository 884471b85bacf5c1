import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from earlyexit import tensor
from earlyexit.errors import DimensionError
from earlyexit.tensor import conv2d, conv2d_backward, matmul, maxpool2d, maxpool2d_backward

from oracles import conv2d_loops, matmul_loops, maxpool_loops


def test_matmul_identity_and_zero():
    rng = np.random.default_rng(0)
    m = rng.standard_normal((3, 4))
    np.testing.assert_array_equal(matmul(np.eye(3), m), m)
    np.testing.assert_array_equal(matmul(np.zeros((2, 3)), rng.standard_normal((3, 4))), np.zeros((2, 4)))


def test_matmul_matches_triple_loop():
    rng = np.random.default_rng(1)
    a = rng.standard_normal((4, 5))
    b = rng.standard_normal((5, 6))
    assert np.max(np.abs(matmul(a, b) - matmul_loops(a, b))) <= 1e-12


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(4, 5\)"):
        matmul(np.ones((2, 3)), np.ones((4, 5)))


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 8), st.integers(1, 8), st.integers(1, 8), st.integers(1, 8), st.integers(0, 2**31 - 1))
def test_matmul_associativity(m, k, p, n, seed):
    rng = np.random.default_rng(seed)
    a, b, c = (rng.uniform(-1, 1, s) for s in ((m, k), (k, p), (p, n)))
    assert np.max(np.abs(matmul(matmul(a, b), c) - matmul(a, matmul(b, c)))) <= 1e-8


def test_conv_all_ones():
    out = conv2d(np.ones((1, 1, 3, 3)), np.ones((1, 1, 2, 2)), np.zeros(1))
    np.testing.assert_array_equal(out, np.full((1, 1, 2, 2), 4.0))


def test_conv_identity_kernel():
    x = np.random.default_rng(2).standard_normal((2, 1, 5, 4))
    np.testing.assert_array_equal(conv2d(x, np.ones((1, 1, 1, 1)), np.zeros(1)), x)


def test_conv_strided_padded_matches_oracle():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((2, 3, 8, 8))
    k = rng.standard_normal((4, 3, 5, 5))
    b = rng.standard_normal(4)
    out = conv2d(x, k, b, stride=2, padding=2)
    assert out.shape == (2, 4, 4, 4)
    assert np.max(np.abs(out - conv2d_loops(x, k, b, 2, 2))) <= 1e-10


def _shape_grid():
    rng = np.random.default_rng(4)
    cases = []
    for n, c, h, w, k, s, p in itertools.product((1, 3), (1, 3), (3, 9), (4, 9), (1, 3, 5), (1, 3), (0, 2)):
        if k <= h + 2 * p and k <= w + 2 * p:
            cases.append((n, c, h, w, k, s, p, int(rng.integers(1, 4))))
    return cases


@pytest.mark.parametrize("n,c,h,w,k,s,p,cout", _shape_grid())
def test_conv_oracle_shape_grid(n, c, h, w, k, s, p, cout):
    rng = np.random.default_rng(n * 1000 + c * 100 + h * 10 + w + k + s + p)
    x = rng.standard_normal((n, c, h, w))
    kern = rng.standard_normal((cout, c, k, k))
    b = rng.standard_normal(cout)
    assert np.max(np.abs(conv2d(x, kern, b, s, p) - conv2d_loops(x, kern, b, s, p))) <= 1e-10


def test_conv_linearity():
    rng = np.random.default_rng(5)
    x, y = rng.standard_normal((2, 2, 2, 7, 6))
    k = rng.standard_normal((3, 2, 3, 3))
    lhs = conv2d(1.7 * x - 0.4 * y, k, None, 1, 1)
    rhs = 1.7 * conv2d(x, k, None, 1, 1) - 0.4 * conv2d(y, k, None, 1, 1)
    assert np.max(np.abs(lhs - rhs)) <= 1e-10


def test_conv_kernel_too_large():
    with pytest.raises(DimensionError):
        conv2d(np.ones((1, 1, 3, 3)), np.ones((1, 1, 4, 4)))
    # padding makes it fit
    assert conv2d(np.ones((1, 1, 3, 3)), np.ones((1, 1, 4, 4)), padding=1).shape == (1, 1, 2, 2)


def test_conv_preserves_float32():
    x = np.ones((1, 2, 5, 5), dtype=np.float32)
    k = np.ones((3, 2, 3, 3), dtype=np.float32)
    assert conv2d(x, k, np.zeros(3, np.float32)).dtype == np.float32


def test_conv_backward_is_adjoint():
    # <conv(x), g> = <x, dx> + <k, dk> + <b, db> follows from linearity in each argument
    rng = np.random.default_rng(6)
    x = rng.standard_normal((2, 3, 7, 6))
    k = rng.standard_normal((4, 3, 3, 2))
    out = conv2d(x, k, None, 2, 1)
    g = rng.standard_normal(out.shape)
    dx, dk, db = conv2d_backward(x, k, g, 2, 1)
    assert np.isclose(np.sum(out * g), np.sum(x * dx), rtol=1e-12)
    assert np.isclose(np.sum(out * g), np.sum(k * dk), rtol=1e-12)
    np.testing.assert_allclose(db, g.sum(axis=(0, 2, 3)))


def test_maxpool_constant_ties_pick_first():
    out, idx = maxpool2d(np.full((1, 1, 4, 4), 3.0), 2, 2)
    np.testing.assert_array_equal(out, np.full((1, 1, 2, 2), 3.0))
    np.testing.assert_array_equal(idx[0, 0], [[0, 2], [8, 10]])


def test_maxpool_small():
    out, idx = maxpool2d(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]), 2, 2)
    np.testing.assert_array_equal(out, [[[[4.0]]]])
    assert idx[0, 0, 0, 0] == 3


@pytest.mark.parametrize("window,stride", [(2, 2), (3, 1), (2, 1), (3, 3), (1, 1), (3, 2)])
def test_maxpool_matches_oracle(window, stride):
    rng = np.random.default_rng(window * 10 + stride)
    x = rng.standard_normal((2, 3, 7, 9))
    out, idx = maxpool2d(x, window, stride)
    ref, ref_idx = maxpool_loops(x, window, stride)
    np.testing.assert_array_equal(out, ref)
    np.testing.assert_array_equal(idx, ref_idx)
    fast, none = maxpool2d(x, window, stride, return_index=False)
    assert none is None
    np.testing.assert_array_equal(fast, ref)


def test_maxpool_ties_match_oracle_on_integer_grid():
    x = np.random.default_rng(8).integers(0, 3, (2, 2, 6, 6)).astype(float)
    for window, stride in [(2, 2), (3, 1)]:
        out, idx = maxpool2d(x, window, stride)
        ref, ref_idx = maxpool_loops(x, window, stride)
        np.testing.assert_array_equal(out, ref)
        np.testing.assert_array_equal(idx, ref_idx)


def test_maxpool_window_too_large():
    with pytest.raises(DimensionError):
        maxpool2d(np.ones((1, 1, 2, 3)), 3)


@pytest.mark.parametrize("window,stride", [(2, 2), (3, 1)])
def test_maxpool_backward_routes_to_argmax(window, stride):
    rng = np.random.default_rng(9)
    x = rng.standard_normal((2, 2, 6, 6))
    out, idx = maxpool2d(x, window, stride)
    g = rng.standard_normal(out.shape)
    dx = maxpool2d_backward(g, idx, x.shape, window, stride)
    ref = np.zeros_like(x)
    for b, c, i, j in np.ndindex(out.shape):
        r, q = divmod(idx[b, c, i, j], x.shape[3])
        ref[b, c, r, q] += g[b, c, i, j]
    np.testing.assert_allclose(dx, ref, atol=1e-15)


@pytest.fixture(params=["rows", "planes"])
def conv_layout(request, monkeypatch):
    rows = request.param == "rows"
    monkeypatch.setattr(tensor, "PLANES_MIN_OUTPUT", 10**9 if rows else 0)
    monkeypatch.setattr(tensor, "PLANES_MAX_CHANNELS", 0 if rows else 10**9)
    return request.param


@pytest.mark.parametrize("s,p", [(1, 0), (2, 1), (3, 2)])
def test_conv_layouts_match_oracle(conv_layout, s, p):
    rng = np.random.default_rng(11 + s)
    x = rng.standard_normal((2, 3, 9, 8))
    k = rng.standard_normal((4, 3, 3, 3))
    b = rng.standard_normal(4)
    assert np.max(np.abs(conv2d(x, k, b, s, p) - conv2d_loops(x, k, b, s, p))) <= 1e-10
    out = conv2d(x, k, None, s, p)
    g = rng.standard_normal(out.shape)
    dx, dk, db = conv2d_backward(x, k, g, s, p)
    assert np.isclose(np.sum(out * g), np.sum(x * dx), rtol=1e-12)
    assert np.isclose(np.sum(out * g), np.sum(k * dk), rtol=1e-12)
    np.testing.assert_allclose(db, g.sum(axis=(0, 2, 3)))
    none, dk2, _ = conv2d_backward(x, k, g, s, p, input_grad=False)
    assert none is None
    np.testing.assert_array_equal(dk2, dk)


def test_large_plane_uses_planes_layout():
    # 28x28 input with a 5x5 kernel gives a 576-element output plane
    x = np.random.default_rng(12).standard_normal((1, 1, 28, 28))
    k = np.random.default_rng(13).standard_normal((2, 1, 5, 5))
    assert tensor._use_planes(x.shape, k.shape, 1, 0)[0]
    assert tensor._use_planes((1, 20, 12, 12), (10, 20, 3, 3), 1, 0)[0]  # few channels
    assert not tensor._use_planes((1, 20, 12, 12), (50, 20, 5, 5), 1, 0)[0]
    assert np.max(np.abs(conv2d(x, k) - conv2d_loops(x, k, None, 1, 0))) <= 1e-10
