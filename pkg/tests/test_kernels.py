"""Both kernel backends against scipy's correlate and the adjoint identities."""
import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import ndimage

from zssmnet.nn import backend


def conv_oracle(x, w, b):
    n, ci = x.shape[:2]
    out = np.zeros((n, w.shape[0]) + x.shape[2:])
    for a in range(n):
        for o in range(w.shape[0]):
            acc = np.full(x.shape[2:], float(b[o]))
            for c in range(ci):
                acc += ndimage.correlate(x[a, c].astype(np.float64), w[o, c].astype(np.float64),
                                         mode="constant", cval=0.0)
            out[a, o] = acc
    return out


SHAPES = [((1, 2, 3, 5, 6), (3, 2, 3, 3, 3)),
          ((2, 3, 4, 4, 7), (5, 3, 1, 3, 3)),
          ((1, 5, 2, 3, 3), (4, 5, 3, 3, 3)),
          ((1, 1, 1, 1, 1), (1, 1, 3, 3, 3))]


@pytest.mark.parametrize("xs,ws", SHAPES)
@pytest.mark.parametrize("dtype,tol", [(np.float64, 1e-12), (np.float32, 1e-5)])
def test_conv_forward_matches_correlate(kernels, rng, xs, ws, dtype, tol):
    x = rng.standard_normal(xs).astype(dtype)
    w = rng.standard_normal(ws).astype(dtype)
    b = rng.standard_normal(ws[0]).astype(dtype)
    out = kernels.conv3d_forward(x, w, b)
    assert out.dtype == dtype
    np.testing.assert_allclose(out, conv_oracle(x, w, b), rtol=tol, atol=tol * 10)


@pytest.mark.parametrize("xs,ws", SHAPES)
def test_conv_adjoints(kernels, rng, xs, ws):
    x = rng.standard_normal(xs)
    w = rng.standard_normal(ws)
    g = rng.standard_normal((xs[0], ws[0]) + xs[2:])
    y = kernels.conv3d_forward(x, w, np.zeros(ws[0]))
    lhs = np.vdot(y, g)
    np.testing.assert_allclose(np.vdot(x, kernels.conv3d_grad_input(g, w)), lhs, rtol=1e-10)
    np.testing.assert_allclose(np.vdot(w, kernels.conv3d_grad_weight(x, g, w.shape)), lhs,
                               rtol=1e-10)


def test_backends_agree(rng):
    if len(backend.available()) < 2:
        pytest.skip("compiled backend not built")
    c, p = backend.get("compiled"), backend.get("python")
    x = rng.standard_normal((2, 6, 4, 8, 8)).astype(np.float32)
    w = rng.standard_normal((9, 6, 3, 3, 3)).astype(np.float32)
    b = rng.standard_normal(9).astype(np.float32)
    np.testing.assert_allclose(c.conv3d_forward(x, w, b), p.conv3d_forward(x, w, b), atol=1e-4)
    g = rng.standard_normal((2, 9, 4, 8, 8)).astype(np.float32)
    np.testing.assert_allclose(c.conv3d_grad_input(g, w), p.conv3d_grad_input(g, w), atol=1e-4)
    np.testing.assert_allclose(c.conv3d_grad_weight(x, g, w.shape),
                               p.conv3d_grad_weight(x, g, w.shape), rtol=1e-4, atol=1e-3)


def test_compiled_accepts_noncontiguous(rng):
    k = backend.get(backend.available()[0])
    x = rng.standard_normal((1, 2, 4, 6, 12))[..., ::2]
    w = rng.standard_normal((2, 2, 3, 3, 3))
    np.testing.assert_allclose(k.conv3d_forward(x, w, np.zeros(2)),
                               conv_oracle(np.ascontiguousarray(x), w, np.zeros(2)), atol=1e-10)


@given(st.sampled_from([(1, 1, 1), (1, 2, 2), (2, 2, 2), (2, 1, 2)]), st.integers(0, 2 ** 31))
def test_maxpool_matches_reshape(factors, seed):
    r = np.random.default_rng(seed)
    fz, fy, fx = factors
    x = r.standard_normal((2, 3, 2 * fz, 3 * fy, 2 * fx))
    for name in backend.available():
        k = backend.get(name)
        out, idx = k.maxpool3d_forward(x, factors)
        ref = x.reshape(2, 3, 2, fz, 3, fy, 2, fx).max(axis=(3, 5, 7))
        np.testing.assert_array_equal(out, ref)
        g = r.standard_normal(out.shape)
        gx = k.maxpool3d_backward(g, idx, factors)
        # gradient lands once per window, on a maximal element
        assert np.isclose(gx.sum(), g.sum())
        assert np.all((gx == 0) | (x == np.repeat(np.repeat(np.repeat(ref, fz, 2), fy, 3), fx, 4)))


def test_maxpool_ties_pick_first(kernels):
    x = np.ones((1, 1, 2, 2, 2))
    out, idx = kernels.maxpool3d_forward(x, (2, 2, 2))
    gx = kernels.maxpool3d_backward(np.ones_like(out), idx, (2, 2, 2))
    assert gx[0, 0, 0, 0, 0] == 1 and gx.sum() == 1
