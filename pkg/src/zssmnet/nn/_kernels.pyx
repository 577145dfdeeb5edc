# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled convolution and pooling kernels.

Direct "same"-padded cross-correlation with the x axis innermost, so
every inner loop is a contiguous axpy or dot over one row. Work is split
over independent output planes, which keeps results bit-identical for
any thread count.
"""
import numpy as np
cimport numpy as cnp
from cython.parallel cimport prange

cnp.import_array()

NAME = "compiled"

ctypedef fused real:
    float
    double


cdef inline Py_ssize_t _imax(Py_ssize_t a, Py_ssize_t b) noexcept nogil:
    return a if a > b else b


cdef inline Py_ssize_t _imin(Py_ssize_t a, Py_ssize_t b) noexcept nogil:
    return a if a < b else b


DEF CB = 4  # output-row register block


def _conv_fwd(real[:, :, :, :, ::1] x, real[:, :, :, :, ::1] w, real[::1] b,
              real[:, :, :, :, ::1] out, int threads):
    cdef Py_ssize_t N = x.shape[0], CI = x.shape[1]
    cdef Py_ssize_t Z = x.shape[2], Y = x.shape[3], X = x.shape[4]
    cdef Py_ssize_t CO = w.shape[0], KZ = w.shape[2], KY = w.shape[3], KX = w.shape[4]
    cdef Py_ssize_t pz = KZ // 2, py = KY // 2, px = KX // 2
    cdef Py_ssize_t NB = (CO + CB - 1) // CB
    cdef Py_ssize_t job, n, cb, c0, nc, c, ci, tz, ty, tx, z, y, i, sz, sy, dx, x0, x1
    cdef real w0, w1, w2, w3, v
    cdef real* o0
    cdef real* o1
    cdef real* o2
    cdef real* o3
    cdef real* irow
    for job in prange(N * NB, nogil=True, num_threads=threads, schedule="static"):
        n = job // NB
        cb = job % NB
        c0 = cb * CB
        nc = _imin(CB, CO - c0)
        for z in range(Z):
            for y in range(Y):
                for c in range(nc):
                    o0 = &out[n, c0 + c, z, y, 0]
                    for i in range(X):
                        o0[i] = b[c0 + c]
                o0 = &out[n, c0, z, y, 0]
                if nc == CB:
                    o1 = &out[n, c0 + 1, z, y, 0]
                    o2 = &out[n, c0 + 2, z, y, 0]
                    o3 = &out[n, c0 + 3, z, y, 0]
                for ci in range(CI):
                    for tz in range(KZ):
                        sz = z + tz - pz
                        if sz < 0 or sz >= Z:
                            continue
                        for ty in range(KY):
                            sy = y + ty - py
                            if sy < 0 or sy >= Y:
                                continue
                            irow = &x[n, ci, sz, sy, 0]
                            for tx in range(KX):
                                dx = tx - px
                                x0 = _imax(0, -dx)
                                x1 = _imin(X, X - dx)
                                if nc == CB:
                                    w0 = w[c0, ci, tz, ty, tx]
                                    w1 = w[c0 + 1, ci, tz, ty, tx]
                                    w2 = w[c0 + 2, ci, tz, ty, tx]
                                    w3 = w[c0 + 3, ci, tz, ty, tx]
                                    for i in range(x0, x1):
                                        v = irow[i + dx]
                                        o0[i] = o0[i] + w0 * v
                                        o1[i] = o1[i] + w1 * v
                                        o2[i] = o2[i] + w2 * v
                                        o3[i] = o3[i] + w3 * v
                                else:
                                    for c in range(nc):
                                        w0 = w[c0 + c, ci, tz, ty, tx]
                                        o1 = &out[n, c0 + c, z, y, 0]
                                        for i in range(x0, x1):
                                            o1[i] = o1[i] + w0 * irow[i + dx]


def _conv_grad_in(real[:, :, :, :, ::1] gout, real[:, :, :, :, ::1] w,
                  real[:, :, :, :, ::1] gx, int threads):
    # gx[ci, z] = sum_co sum_t w[co, ci, t] * gout[co, z - d_t]
    cdef Py_ssize_t N = gout.shape[0], CO = gout.shape[1]
    cdef Py_ssize_t Z = gout.shape[2], Y = gout.shape[3], X = gout.shape[4]
    cdef Py_ssize_t CI = w.shape[1], KZ = w.shape[2], KY = w.shape[3], KX = w.shape[4]
    cdef Py_ssize_t pz = KZ // 2, py = KY // 2, px = KX // 2
    cdef Py_ssize_t NB = (CI + CB - 1) // CB
    cdef Py_ssize_t job, n, cb, c0, nc, c, co, tz, ty, tx, z, y, i, sz, sy, dx, x0, x1
    cdef real w0, w1, w2, w3, v
    cdef real* g0
    cdef real* g1
    cdef real* g2
    cdef real* g3
    cdef real* orow
    for job in prange(N * NB, nogil=True, num_threads=threads, schedule="static"):
        n = job // NB
        cb = job % NB
        c0 = cb * CB
        nc = _imin(CB, CI - c0)
        for z in range(Z):
            for y in range(Y):
                for c in range(nc):
                    g0 = &gx[n, c0 + c, z, y, 0]
                    for i in range(X):
                        g0[i] = 0
                g0 = &gx[n, c0, z, y, 0]
                if nc == CB:
                    g1 = &gx[n, c0 + 1, z, y, 0]
                    g2 = &gx[n, c0 + 2, z, y, 0]
                    g3 = &gx[n, c0 + 3, z, y, 0]
                for co in range(CO):
                    for tz in range(KZ):
                        sz = z - (tz - pz)
                        if sz < 0 or sz >= Z:
                            continue
                        for ty in range(KY):
                            sy = y - (ty - py)
                            if sy < 0 or sy >= Y:
                                continue
                            orow = &gout[n, co, sz, sy, 0]
                            for tx in range(KX):
                                dx = tx - px
                                x0 = _imax(0, dx)
                                x1 = _imin(X, X + dx)
                                if nc == CB:
                                    w0 = w[co, c0, tz, ty, tx]
                                    w1 = w[co, c0 + 1, tz, ty, tx]
                                    w2 = w[co, c0 + 2, tz, ty, tx]
                                    w3 = w[co, c0 + 3, tz, ty, tx]
                                    for i in range(x0, x1):
                                        v = orow[i - dx]
                                        g0[i] = g0[i] + w0 * v
                                        g1[i] = g1[i] + w1 * v
                                        g2[i] = g2[i] + w2 * v
                                        g3[i] = g3[i] + w3 * v
                                else:
                                    for c in range(nc):
                                        w0 = w[co, c0 + c, tz, ty, tx]
                                        g1 = &gx[n, c0 + c, z, y, 0]
                                        for i in range(x0, x1):
                                            g1[i] = g1[i] + w0 * orow[i - dx]


def _conv_grad_w(real[:, :, :, :, ::1] x, real[:, :, :, :, ::1] gout,
                 real[:, :, :, :, ::1] gw, int threads):
    cdef Py_ssize_t N = x.shape[0], CI = x.shape[1]
    cdef Py_ssize_t Z = x.shape[2], Y = x.shape[3], X = x.shape[4]
    cdef Py_ssize_t CO = gw.shape[0], KZ = gw.shape[2], KY = gw.shape[3], KX = gw.shape[4]
    cdef Py_ssize_t pz = KZ // 2, py = KY // 2, px = KX // 2
    cdef Py_ssize_t NB = (CO + CB - 1) // CB
    cdef Py_ssize_t job, cb, c0, nc, c, n, ci, tz, ty, tx, z, y, i, sz, sy, dx, x0, x1
    cdef real a0, a1, a2, a3, v
    cdef real* r0
    cdef real* r1
    cdef real* r2
    cdef real* r3
    cdef real* irow
    for job in prange(NB * CI, nogil=True, num_threads=threads, schedule="static"):
        cb = job // CI
        ci = job % CI
        c0 = cb * CB
        nc = _imin(CB, CO - c0)
        for tz in range(KZ):
            for ty in range(KY):
                for tx in range(KX):
                    dx = tx - px
                    x0 = _imax(0, -dx)
                    x1 = _imin(X, X - dx)
                    if nc == CB:
                        a0 = 0
                        a1 = 0
                        a2 = 0
                        a3 = 0
                        for n in range(N):
                            for z in range(Z):
                                sz = z + tz - pz
                                if sz < 0 or sz >= Z:
                                    continue
                                for y in range(Y):
                                    sy = y + ty - py
                                    if sy < 0 or sy >= Y:
                                        continue
                                    irow = &x[n, ci, sz, sy, 0]
                                    r0 = &gout[n, c0, z, y, 0]
                                    r1 = &gout[n, c0 + 1, z, y, 0]
                                    r2 = &gout[n, c0 + 2, z, y, 0]
                                    r3 = &gout[n, c0 + 3, z, y, 0]
                                    for i in range(x0, x1):
                                        v = irow[i + dx]
                                        a0 = a0 + r0[i] * v
                                        a1 = a1 + r1[i] * v
                                        a2 = a2 + r2[i] * v
                                        a3 = a3 + r3[i] * v
                        gw[c0, ci, tz, ty, tx] = a0
                        gw[c0 + 1, ci, tz, ty, tx] = a1
                        gw[c0 + 2, ci, tz, ty, tx] = a2
                        gw[c0 + 3, ci, tz, ty, tx] = a3
                    else:
                        for c in range(nc):
                            a0 = 0
                            for n in range(N):
                                for z in range(Z):
                                    sz = z + tz - pz
                                    if sz < 0 or sz >= Z:
                                        continue
                                    for y in range(Y):
                                        sy = y + ty - py
                                        if sy < 0 or sy >= Y:
                                            continue
                                        irow = &x[n, ci, sz, sy, 0]
                                        r0 = &gout[n, c0 + c, z, y, 0]
                                        for i in range(x0, x1):
                                            a0 = a0 + r0[i] * irow[i + dx]
                            gw[c0 + c, ci, tz, ty, tx] = a0


_THREADS = 1


def _c(a, dtype=None):
    return np.ascontiguousarray(a, dtype=dtype)


def set_threads(int n):
    global _THREADS
    _THREADS = max(1, n)


def conv3d_forward(x, w, b):
    x, w, b = _c(x), _c(w, x.dtype), _c(b, x.dtype)
    n, _, z, y, xx = x.shape
    out = np.empty((n, w.shape[0], z, y, xx), dtype=x.dtype)
    _conv_fwd(x, w, b, out, _THREADS)
    return out


def conv3d_grad_input(gout, w):
    gout, w = _c(gout), _c(w, gout.dtype)
    n, _, z, y, xx = gout.shape
    gx = np.empty((n, w.shape[1], z, y, xx), dtype=gout.dtype)
    _conv_grad_in(gout, w, gx, _THREADS)
    return gx


def conv3d_grad_weight(x, gout, w_shape):
    x, gout = _c(x), _c(gout, x.dtype)
    gw = np.empty(w_shape, dtype=x.dtype)
    _conv_grad_w(x, gout, gw, _THREADS)
    return gw


def _pool_fwd(real[:, :, :, :, ::1] x, real[:, :, :, :, ::1] out, int[:, :, :, :, ::1] idx,
              int fz, int fy, int fx):
    cdef Py_ssize_t NC = x.shape[0] * x.shape[1], C = x.shape[1]
    cdef Py_ssize_t OZ = out.shape[2], OY = out.shape[3], OX = out.shape[4]
    cdef Py_ssize_t job, n, c, oz, oy, ox, a, bb, cc
    cdef int k, best_k
    cdef real v, best
    for job in range(NC):
        n = job // C
        c = job % C
        for oz in range(OZ):
            for oy in range(OY):
                for ox in range(OX):
                    best = x[n, c, oz * fz, oy * fy, ox * fx]
                    best_k = 0
                    k = 0
                    for a in range(fz):
                        for bb in range(fy):
                            for cc in range(fx):
                                v = x[n, c, oz * fz + a, oy * fy + bb, ox * fx + cc]
                                if v > best:
                                    best = v
                                    best_k = k
                                k = k + 1
                    out[n, c, oz, oy, ox] = best
                    idx[n, c, oz, oy, ox] = best_k


def _pool_bwd(real[:, :, :, :, ::1] gout, int[:, :, :, :, ::1] idx, real[:, :, :, :, ::1] gx,
              int fz, int fy, int fx):
    cdef Py_ssize_t NC = gout.shape[0] * gout.shape[1], C = gout.shape[1]
    cdef Py_ssize_t OZ = gout.shape[2], OY = gout.shape[3], OX = gout.shape[4]
    cdef Py_ssize_t job, n, c, oz, oy, ox
    cdef int k, a, bb, cc
    for job in range(NC):
        n = job // C
        c = job % C
        for oz in range(OZ):
            for oy in range(OY):
                for ox in range(OX):
                    k = idx[n, c, oz, oy, ox]
                    a = k // (fy * fx)
                    bb = (k // fx) % fy
                    cc = k % fx
                    gx[n, c, oz * fz + a, oy * fy + bb, ox * fx + cc] = gout[n, c, oz, oy, ox]


def maxpool3d_forward(x, factors):
    x = _c(x)
    fz, fy, fx = factors
    n, c, z, y, xx = x.shape
    out = np.empty((n, c, z // fz, y // fy, xx // fx), dtype=x.dtype)
    idx = np.empty(out.shape, dtype=np.int32)
    _pool_fwd(x, out, idx, fz, fy, fx)
    return out, idx


def maxpool3d_backward(gout, idx, factors):
    gout, idx = _c(gout), _c(idx, np.int32)
    fz, fy, fx = factors
    n, c, oz, oy, ox = gout.shape
    gx = np.zeros((n, c, oz * fz, oy * fy, ox * fx), dtype=gout.dtype)
    _pool_bwd(gout, idx, gx, fz, fy, fx)
    return gx
