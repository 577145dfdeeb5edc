"""Pure numpy implementations of the hot kernels.

Used when the compiled extension is unavailable, or when forced with
``ZSSMNET_BACKEND=python``. Every function here has a compiled twin in
``_kernels.pyx`` with the same signature and the same numerics up to
summation order.

Layout: activations are ``(N, C, Z, Y, X)`` C-contiguous; convolution
weights are ``(C_out, C_in, KZ, KY, KX)`` with odd kernel extents and
zero "same" padding.
"""
import numpy as np

NAME = "python"


def _pads(w_shape):
    return tuple(k // 2 for k in w_shape[2:])


def _taps(w_shape):
    kz, ky, kx = w_shape[2:]
    for tz in range(kz):
        for ty in range(ky):
            for tx in range(kx):
                yield tz, ty, tx


def conv3d_forward(x, w, b):
    n, ci, z, y, xx = x.shape
    co = w.shape[0]
    pz, py, px = _pads(w.shape)
    xp = np.pad(x, ((0, 0), (0, 0), (pz, pz), (py, py), (px, px)))
    out = np.empty((n, co, z * y * xx), dtype=x.dtype)
    out[...] = b[None, :, None]
    for tz, ty, tx in _taps(w.shape):
        win = xp[:, :, tz:tz + z, ty:ty + y, tx:tx + xx].reshape(n, ci, -1)
        out += np.matmul(w[:, :, tz, ty, tx], win)
    return out.reshape(n, co, z, y, xx)


def conv3d_grad_input(gout, w):
    n, co, z, y, xx = gout.shape
    ci = w.shape[1]
    pz, py, px = _pads(w.shape)
    gxp = np.zeros((n, ci, z + 2 * pz, y + 2 * py, xx + 2 * px), dtype=gout.dtype)
    g = gout.reshape(n, co, -1)
    for tz, ty, tx in _taps(w.shape):
        contrib = np.matmul(w[:, :, tz, ty, tx].T, g).reshape(n, ci, z, y, xx)
        gxp[:, :, tz:tz + z, ty:ty + y, tx:tx + xx] += contrib
    return np.ascontiguousarray(gxp[:, :, pz:pz + z, py:py + y, px:px + xx])


def conv3d_grad_weight(x, gout, w_shape):
    n, ci, z, y, xx = x.shape
    co = gout.shape[1]
    pz, py, px = _pads(w_shape)
    xp = np.pad(x, ((0, 0), (0, 0), (pz, pz), (py, py), (px, px)))
    gw = np.zeros(w_shape, dtype=x.dtype)
    g = gout.reshape(n, co, -1)
    for tz, ty, tx in _taps(w_shape):
        win = xp[:, :, tz:tz + z, ty:ty + y, tx:tx + xx].reshape(n, ci, -1)
        gw[:, :, tz, ty, tx] = np.einsum("nov,ncv->oc", g, win)
    return gw


def maxpool3d_forward(x, factors):
    """Non-overlapping max pool; returns the pooled array and the flat
    in-window argmax (first index on ties) needed by the backward pass."""
    fz, fy, fx = factors
    n, c, z, y, xx = x.shape
    v = x.reshape(n, c, z // fz, fz, y // fy, fy, xx // fx, fx)
    v = v.transpose(0, 1, 2, 4, 6, 3, 5, 7).reshape(n, c, z // fz, y // fy, xx // fx, -1)
    idx = np.argmax(v, axis=-1)
    out = np.take_along_axis(v, idx[..., None], axis=-1)[..., 0]
    return np.ascontiguousarray(out), idx.astype(np.int32)


def maxpool3d_backward(gout, idx, factors):
    fz, fy, fx = factors
    n, c, oz, oy, ox = gout.shape
    gw = np.zeros((n, c, oz, oy, ox, fz * fy * fx), dtype=gout.dtype)
    np.put_along_axis(gw, idx[..., None].astype(np.intp), gout[..., None], axis=-1)
    gw = gw.reshape(n, c, oz, oy, ox, fz, fy, fx).transpose(0, 1, 2, 5, 3, 6, 4, 7)
    return np.ascontiguousarray(gw.reshape(n, c, oz * fz, oy * fy, ox * fx))
