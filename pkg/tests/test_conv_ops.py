import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from irdseg.conv_ops import (
    DepthGuidance,
    GuidedConvParams,
    compose_kernel,
    da_shape_conv_backward,
    da_shape_conv_forward,
    decompose_kernel,
    depth_aware_conv_backward,
    depth_aware_conv_forward,
    depth_similarity,
    shape_conv_backward,
    shape_conv_forward,
)
from irdseg.tensor import ConvGeometry, conv2d, conv2d_backward, finite_diff_grad
from oracles import naive_composed_kernel, naive_guided_conv, rel_err

GEOM3 = ConvGeometry(3, 3, 1, 1)


def _random_params(r, cin, cout, alpha=1.0):
    k = r.normal(size=(3, 3, cin, cout))
    return GuidedConvParams(k, r.normal(1.0, 0.3, size=(cin, cout)), np.eye(9) + 0.2 * r.normal(size=(9, 9)), alpha)


# decomposition / composition


def test_decompose_constant_kernel():
    base, shape = decompose_kernel(np.ones((3, 3, 1, 1)))
    assert base.tolist() == [[1.0]]
    assert not shape.any()


def test_decompose_arithmetic_mean():
    k = np.arange(1.0, 10.0).reshape(3, 3, 1, 1)
    base, shape = decompose_kernel(k)
    assert base[0, 0] == 5.0
    assert shape.reshape(-1).tolist() == [-4, -3, -2, -1, 0, 1, 2, 3, 4]


def test_decompose_random_kernel(rng):
    k = rng.normal(size=(5, 5, 2, 3))
    base, shape = decompose_kernel(k)
    assert np.abs(shape.mean(axis=(0, 1))).max() <= 1e-15
    np.testing.assert_allclose(base + shape, k, atol=1e-15, rtol=0)


def test_compose_identity_reproduces_kernel(rng):
    k = rng.normal(size=(3, 3, 2, 4))
    np.testing.assert_allclose(compose_kernel(GuidedConvParams.identity(k)), k, atol=1e-15, rtol=0)


def test_compose_annihilation(rng):
    k = rng.normal(size=(3, 3, 2, 2))
    p = GuidedConvParams(k, np.zeros((2, 2)), np.zeros((9, 9)))
    assert not compose_kernel(p).any()


def test_compose_scaled_base_hand_values():
    values = np.arange(1.0, 10.0)
    p = GuidedConvParams(values.reshape(3, 3, 1, 1), np.full((1, 1), 2.0), np.eye(9))
    # tap d gets 2*5 + (v_d - 5) = v_d + 5
    assert compose_kernel(p).reshape(-1).tolist() == [6, 7, 8, 9, 10, 11, 12, 13, 14]


def test_compose_matches_loop_oracle(rng):
    p = _random_params(rng, 2, 3)
    np.testing.assert_allclose(
        compose_kernel(p), naive_composed_kernel(p.kernel, p.w_base, p.w_shape), atol=1e-13, rtol=0
    )


def test_params_validation(rng):
    k = rng.normal(size=(3, 3, 2, 2))
    with pytest.raises(ValueError):
        GuidedConvParams(k, np.ones((2, 2)), np.eye(4))
    with pytest.raises(ValueError):
        GuidedConvParams(k, np.ones((2, 3)), np.eye(9))
    with pytest.raises(ValueError):
        GuidedConvParams.identity(k, alpha=-1.0)


# shape convolution


def test_shape_conv_identity_reduces_to_conv(rng):
    x = rng.normal(size=(8, 8, 2))
    k = rng.normal(size=(3, 3, 2, 3))
    np.testing.assert_allclose(
        shape_conv_forward(x, GuidedConvParams.identity(k), GEOM3), conv2d(x, k, GEOM3), atol=1e-12, rtol=0
    )


def test_shape_conv_constant_input_is_constant_inside(rng):
    p = _random_params(rng, 2, 3)
    out = shape_conv_forward(np.full((8, 8, 2), 1.7), p, GEOM3)
    interior = out[1:-1, 1:-1]
    np.testing.assert_allclose(interior, np.broadcast_to(interior[0, 0], interior.shape), atol=1e-12)


def test_shape_conv_matches_patch_space_loop(rng):
    x = rng.normal(size=(8, 8, 2))
    p = _random_params(rng, 2, 3)
    oracle = naive_guided_conv(x, naive_composed_kernel(p.kernel, p.w_base, p.w_shape), 1, 1)
    np.testing.assert_allclose(shape_conv_forward(x, p, GEOM3), oracle, atol=1e-12, rtol=0)


# depth similarity


def test_similarity_constant_depth_and_zero_alpha(rng):
    assert np.all(depth_similarity(np.full((5, 5), 2.0), 3.0, GEOM3) == 1.0)
    assert np.all(depth_similarity(rng.uniform(0.5, 4, size=(5, 5)), 0.0, GEOM3) == 1.0)


def test_similarity_ln2_gap_gives_half():
    depth = np.ones((3, 3))
    depth[1, 2] = 1.0 + math.log(2.0)
    sim = depth_similarity(depth, 1.0, ConvGeometry(3, 3))
    # center pixel (1, 1), tap (1, 2) is index 5
    assert sim[0, 0, 5] == pytest.approx(0.5, abs=1e-15)
    assert sim[0, 0, 4] == 1.0


def test_similarity_padding_taps_are_one():
    depth = np.arange(1.0, 10.0).reshape(3, 3)
    sim = depth_similarity(depth, 5.0, GEOM3)
    # corner output (0, 0): taps in row 0 and column 0 of the window are padding
    assert np.all(sim[0, 0, [0, 1, 2, 3, 6]] == 1.0)
    assert np.all(sim[0, 0, [5, 7, 8]] < 1.0)


def test_similarity_rejects_negative_alpha():
    with pytest.raises(ValueError):
        depth_similarity(np.ones((3, 3)), -0.1, GEOM3)


@settings(max_examples=50, deadline=None)
@given(
    a=st.floats(0, 10), b=st.floats(0, 10), alpha=st.floats(0, 50)
)
def test_similarity_range_and_symmetry(a, b, alpha):
    d1 = np.array([[a, b]])
    d2 = np.array([[b, a]])
    geom = ConvGeometry(1, 3, 1, 0)
    s1 = depth_similarity(np.hstack([d1, [[a]]]), alpha, geom)[0, 0, 0]
    s2 = depth_similarity(np.hstack([d2, [[b]]]), alpha, geom)[0, 0, 0]
    assert 0.0 < s1 <= 1.0
    assert s1 == s2
    assert (s1 == 1.0) == (alpha == 0 or a == b or alpha * abs(a - b) < 1e-16)


def test_depth_guidance_defaults_and_validation():
    g = DepthGuidance(np.array([[0.0, 1.5]]))
    assert g.validity.tolist() == [[0.0, 1.0]]
    with pytest.raises(ValueError):
        DepthGuidance(np.array([[-1.0]]))


# depth-aware convolution


def test_depth_aware_reductions(rng):
    x = rng.normal(size=(7, 7, 2))
    k = rng.normal(size=(3, 3, 2, 2))
    depth = rng.uniform(0.5, 4.0, size=(7, 7))
    np.testing.assert_array_equal(depth_aware_conv_forward(x, k, depth, 0.0, GEOM3), conv2d(x, k, GEOM3))
    np.testing.assert_array_equal(
        depth_aware_conv_forward(x, k, np.full((7, 7), 2.5), 10.0, GEOM3), conv2d(x, k, GEOM3)
    )


@pytest.mark.parametrize("stride,pad,size", [(1, 1, 7), (1, 0, 6), (2, 1, 9)])
def test_depth_aware_matches_literal_sum(rng, stride, pad, size):
    x = rng.normal(size=(size, size, 2))
    k = rng.normal(size=(3, 3, 2, 3))
    depth = rng.uniform(0.5, 4.0, size=(size, size))
    geom = ConvGeometry.for_kernel(k, stride, pad)
    got = depth_aware_conv_forward(x, k, DepthGuidance(depth), 1.0, geom)
    np.testing.assert_allclose(got, naive_guided_conv(x, k, stride, pad, depth, 1.0), atol=1e-12, rtol=0)


def test_depth_aware_spatial_mismatch(rng):
    with pytest.raises(ValueError, match="does not match"):
        depth_aware_conv_forward(np.zeros((5, 5, 1)), np.zeros((3, 3, 1, 1)), np.ones((4, 5)), 1.0, GEOM3)


def test_guidance_monotone_in_alpha(rng):
    # single nonzero tap off-center, positive input: output magnitude shrinks as alpha grows
    x = rng.uniform(0.1, 1.0, size=(6, 6, 1))
    k = np.zeros((3, 3, 1, 1))
    k[0, 2, 0, 0] = -1.3
    depth = rng.uniform(0.5, 4.0, size=(6, 6))
    mags = [np.abs(depth_aware_conv_forward(x, k, depth, a, GEOM3)) for a in (0.0, 0.1, 0.5, 1.0, 3.0, 10.0)]
    for lo, hi in zip(mags[1:], mags[:-1]):
        assert np.all(lo <= hi)


# DA-ShapeConv


def test_da_shape_reductions(rng):
    x = rng.normal(size=(8, 8, 3))
    depth = rng.uniform(0.5, 4.0, size=(8, 8))
    k = rng.normal(size=(3, 3, 3, 2))
    ident0 = GuidedConvParams.identity(k, alpha=0.0)
    np.testing.assert_allclose(da_shape_conv_forward(x, ident0, depth, GEOM3), conv2d(x, k, GEOM3), atol=1e-12)
    p = _random_params(rng, 3, 2, alpha=0.0)
    np.testing.assert_allclose(
        da_shape_conv_forward(x, p, depth, GEOM3), shape_conv_forward(x, p, GEOM3), atol=1e-12, rtol=0
    )
    for alpha in (0.3, 1.0, 4.0):
        ident = GuidedConvParams.identity(k, alpha=alpha)
        np.testing.assert_allclose(
            da_shape_conv_forward(x, ident, depth, GEOM3),
            depth_aware_conv_forward(x, k, depth, alpha, GEOM3),
            atol=1e-12,
            rtol=0,
        )


def test_da_shape_matches_literal_sum(rng):
    x = rng.normal(size=(6, 6, 2))
    depth = rng.uniform(0.5, 4.0, size=(6, 6))
    p = _random_params(rng, 2, 2, alpha=0.7)
    oracle = naive_guided_conv(x, naive_composed_kernel(p.kernel, p.w_base, p.w_shape), 1, 1, depth, 0.7)
    np.testing.assert_allclose(da_shape_conv_forward(x, p, depth, GEOM3), oracle, atol=1e-12, rtol=0)


def test_backward_zero_grad_out(rng):
    x = rng.normal(size=(5, 5, 2))
    depth = rng.uniform(0.5, 4.0, size=(5, 5))
    p = _random_params(rng, 2, 2)
    grads = da_shape_conv_backward(x, p, depth, GEOM3, np.zeros((5, 5, 2)))
    assert all(not g.any() for g in grads)


def test_backward_reduces_to_transposed_conv(rng):
    x = rng.normal(size=(6, 6, 2))
    k = rng.normal(size=(3, 3, 2, 3))
    depth = rng.uniform(0.5, 4.0, size=(6, 6))
    g = rng.normal(size=(6, 6, 3))
    gx, gk, _, _ = da_shape_conv_backward(x, GuidedConvParams.identity(k, 0.0), depth, GEOM3, g)
    ref_x, ref_k = conv2d_backward(x, k, GEOM3, g)
    np.testing.assert_allclose(gx, ref_x, atol=1e-12)
    np.testing.assert_allclose(gk, ref_k, atol=1e-12)


def _fd_check(x, p, depth, geom, g, op):
    """Compare every analytic gradient of op against central differences."""

    def fwd(xx, kk, wb, ws):
        q = GuidedConvParams(kk, wb, ws, p.alpha)
        if op == "shape":
            return shape_conv_forward(xx, q, geom)
        if op == "depth-aware":
            return depth_aware_conv_forward(xx, kk, depth, p.alpha, geom)
        return da_shape_conv_forward(xx, q, depth, geom)

    if op == "shape":
        grads = shape_conv_backward(x, p, geom, g)
    elif op == "depth-aware":
        grads = depth_aware_conv_backward(x, p.kernel, depth, p.alpha, geom, g)
    else:
        grads = da_shape_conv_backward(x, p, depth, geom, g)
    args = [x, p.kernel, p.w_base, p.w_shape]
    errs = []
    for i, analytic in enumerate(grads):
        def f(v, i=i):
            a = list(args)
            a[i] = v
            return np.sum(g * fwd(*a))

        errs.append(rel_err(analytic, finite_diff_grad(f, args[i], 1e-5)))
    return errs


@pytest.mark.parametrize("op", ["shape", "depth-aware", "da-shape"])
@pytest.mark.parametrize("seed", range(3))
def test_backward_matches_finite_differences(op, seed):
    r = np.random.default_rng(100 + seed)
    x = r.normal(size=(5, 5, 2))
    depth = r.uniform(0.5, 4.0, size=(5, 5))
    p = _random_params(r, 2, 2, alpha=1.0)
    geom = ConvGeometry(3, 3, 2, 1) if seed == 2 else GEOM3
    out = da_shape_conv_forward(x, p, depth, geom)
    g = r.normal(size=out.shape)
    assert max(_fd_check(x, p, depth, geom, g, op)) <= 1e-4
