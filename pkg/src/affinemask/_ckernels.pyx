# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Direct-loop float32 kernels for convolution and max pooling.

Loops are ordered so the innermost one walks a contiguous output row, which
lets the compiler vectorize it. Accumulation order is fixed, so results are
reproducible run to run.
"""
import numpy as np


cdef inline Py_ssize_t _jlo(Py_ssize_t kj, int stride, int pad) nogil:
    # first output column whose input column j*stride - pad + kj is >= 0
    cdef Py_ssize_t t = pad - kj
    if t <= 0:
        return 0
    return (t + stride - 1) // stride


cdef inline Py_ssize_t _jhi(Py_ssize_t kj, int stride, int pad, Py_ssize_t W, Py_ssize_t OW) nogil:
    # one past the last output column whose input column is < W
    cdef Py_ssize_t t = W - 1 + pad - kj
    if t < 0:
        return 0
    t = t // stride + 1
    return t if t < OW else OW


def conv2d_forward(const float[:, :, :, ::1] x, const float[:, :, :, ::1] w,
                   int stride, int pad):
    cdef Py_ssize_t N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t F = w.shape[0], KH = w.shape[2], KW = w.shape[3]
    cdef Py_ssize_t OH = (H + 2 * pad - KH) // stride + 1
    cdef Py_ssize_t OW = (W + 2 * pad - KW) // stride + 1
    out = np.zeros((N, F, OH, OW), dtype=np.float32)
    cdef float[:, :, :, ::1] o = out
    cdef Py_ssize_t n, f, c, i, j, ki, kj, hi, jlo, jhi, off
    cdef float wv
    cdef float* orow
    cdef const float* xrow
    with nogil:
        for n in range(N):
            for f in range(F):
                for c in range(C):
                    for ki in range(KH):
                        for kj in range(KW):
                            wv = w[f, c, ki, kj]
                            jlo = _jlo(kj, stride, pad)
                            jhi = _jhi(kj, stride, pad, W, OW)
                            off = kj - pad
                            for i in range(OH):
                                hi = i * stride - pad + ki
                                if hi < 0 or hi >= H:
                                    continue
                                orow = &o[n, f, i, 0]
                                xrow = &x[n, c, hi, 0]
                                if stride == 1:
                                    for j in range(jlo, jhi):
                                        orow[j] += wv * xrow[j + off]
                                else:
                                    for j in range(jlo, jhi):
                                        orow[j] += wv * xrow[j * stride + off]
    return out


def conv2d_backward(const float[:, :, :, ::1] x, const float[:, :, :, ::1] w,
                    const float[:, :, :, ::1] gout, int stride, int pad):
    cdef Py_ssize_t N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t F = w.shape[0], KH = w.shape[2], KW = w.shape[3]
    cdef Py_ssize_t OH = gout.shape[2], OW = gout.shape[3]
    gx_arr = np.zeros((N, C, H, W), dtype=np.float32)
    gw_arr = np.zeros((F, C, KH, KW), dtype=np.float32)
    lane_arr = np.zeros(OW, dtype=np.float32)
    cdef float[:, :, :, ::1] gx = gx_arr
    cdef float[:, :, :, ::1] gw = gw_arr
    cdef float[::1] lane = lane_arr
    cdef Py_ssize_t n, f, c, i, j, ki, kj, hi, jlo, jhi, off
    cdef float wv, acc
    cdef const float* grow
    cdef const float* xrow
    cdef float* gxrow
    with nogil:
        for f in range(F):
            for c in range(C):
                for ki in range(KH):
                    for kj in range(KW):
                        wv = w[f, c, ki, kj]
                        jlo = _jlo(kj, stride, pad)
                        jhi = _jhi(kj, stride, pad, W, OW)
                        off = kj - pad
                        for j in range(OW):
                            lane[j] = 0.0
                        for n in range(N):
                            for i in range(OH):
                                hi = i * stride - pad + ki
                                if hi < 0 or hi >= H:
                                    continue
                                grow = &gout[n, f, i, 0]
                                xrow = &x[n, c, hi, 0]
                                gxrow = &gx[n, c, hi, 0]
                                if stride == 1:
                                    for j in range(jlo, jhi):
                                        lane[j] += grow[j] * xrow[j + off]
                                        gxrow[j + off] += grow[j] * wv
                                else:
                                    for j in range(jlo, jhi):
                                        lane[j] += grow[j] * xrow[j * stride + off]
                                        gxrow[j * stride + off] += grow[j] * wv
                        acc = 0.0
                        for j in range(OW):
                            acc = acc + lane[j]
                        gw[f, c, ki, kj] = acc
    return gx_arr, gw_arr


def conv2d_forward_s1(const float[:, :, :, ::1] x, const float[:, :, :, ::1] w, int pad):
    """Stride-1 forward on a zero-padded copy, accumulating into an output plane
    laid out with the padded row width so each kernel tap is one contiguous
    multiply-add sweep."""
    cdef Py_ssize_t N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t F = w.shape[0], KH = w.shape[2], KW = w.shape[3]
    cdef Py_ssize_t Hp = H + 2 * pad, Wp = W + 2 * pad
    cdef Py_ssize_t OH = Hp - KH + 1, OW = Wp - KW + 1
    cdef Py_ssize_t L = (OH - 1) * Wp + OW
    xp_arr = np.zeros((N, C, Hp, Wp), dtype=np.float32)
    xp_arr[:, :, pad:pad + H, pad:pad + W] = x
    wide_arr = np.zeros((N, F, OH, Wp), dtype=np.float32)
    cdef const float[:, :, :, ::1] xp = xp_arr
    cdef float[:, :, :, ::1] wide = wide_arr
    cdef Py_ssize_t n, f, c, ki, kj, t, shift
    cdef float wv
    cdef float* op
    cdef const float* xq
    with nogil:
        for n in range(N):
            for f in range(F):
                op = &wide[n, f, 0, 0]
                for c in range(C):
                    for ki in range(KH):
                        for kj in range(KW):
                            wv = w[f, c, ki, kj]
                            shift = ki * Wp + kj
                            xq = &xp[n, c, 0, 0] + shift
                            for t in range(L):
                                op[t] += wv * xq[t]
    return np.ascontiguousarray(wide_arr[:, :, :, :OW])


def conv2d_backward_s1(const float[:, :, :, ::1] x, const float[:, :, :, ::1] w,
                       const float[:, :, :, ::1] gout, int pad):
    cdef Py_ssize_t N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t F = w.shape[0], KH = w.shape[2], KW = w.shape[3]
    cdef Py_ssize_t Hp = H + 2 * pad, Wp = W + 2 * pad
    cdef Py_ssize_t OH = Hp - KH + 1, OW = Wp - KW + 1
    cdef Py_ssize_t L = (OH - 1) * Wp + OW
    xp_arr = np.zeros((N, C, Hp, Wp), dtype=np.float32)
    xp_arr[:, :, pad:pad + H, pad:pad + W] = x
    gwide_arr = np.zeros((N, F, OH, Wp), dtype=np.float32)
    gwide_arr[:, :, :, :OW] = gout
    gxp_arr = np.zeros((N, C, Hp, Wp), dtype=np.float32)
    gw_arr = np.zeros((F, C, KH, KW), dtype=np.float32)
    lane_arr = np.zeros(L, dtype=np.float32)
    cdef const float[:, :, :, ::1] xp = xp_arr
    cdef const float[:, :, :, ::1] gwide = gwide_arr
    cdef float[:, :, :, ::1] gxp = gxp_arr
    cdef float[:, :, :, ::1] gw = gw_arr
    cdef float[::1] lane = lane_arr
    cdef Py_ssize_t n, f, c, ki, kj, t, shift
    cdef float wv, acc
    cdef const float* gp
    cdef const float* xq
    cdef float* gq
    cdef float* ln = &lane[0]
    with nogil:
        for f in range(F):
            for c in range(C):
                for ki in range(KH):
                    for kj in range(KW):
                        wv = w[f, c, ki, kj]
                        shift = ki * Wp + kj
                        for t in range(L):
                            ln[t] = 0.0
                        for n in range(N):
                            gp = &gwide[n, f, 0, 0]
                            xq = &xp[n, c, 0, 0] + shift
                            gq = &gxp[n, c, 0, 0] + shift
                            for t in range(L):
                                ln[t] += gp[t] * xq[t]
                                gq[t] += gp[t] * wv
                        acc = 0.0
                        for t in range(L):
                            acc = acc + ln[t]
                        gw[f, c, ki, kj] = acc
    return np.ascontiguousarray(gxp_arr[:, :, pad:pad + H, pad:pad + W]), gw_arr


def maxpool2d_forward(const float[:, :, :, ::1] x, int k):
    cdef Py_ssize_t N = x.shape[0], C = x.shape[1]
    cdef Py_ssize_t OH = x.shape[2] // k, OW = x.shape[3] // k
    out = np.empty((N, C, OH, OW), dtype=np.float32)
    arg = np.empty((N, C, OH, OW), dtype=np.intp)
    cdef float[:, :, :, ::1] o = out
    cdef Py_ssize_t[:, :, :, ::1] a = arg
    cdef Py_ssize_t n, c, i, j, di, dj, best
    cdef float v, bv
    with nogil:
        for n in range(N):
            for c in range(C):
                for i in range(OH):
                    for j in range(OW):
                        bv = x[n, c, i * k, j * k]
                        best = 0
                        for di in range(k):
                            for dj in range(k):
                                v = x[n, c, i * k + di, j * k + dj]
                                if v > bv:
                                    bv = v
                                    best = di * k + dj
                        o[n, c, i, j] = bv
                        a[n, c, i, j] = best
    return out, arg


def maxpool2d_backward(const float[:, :, :, ::1] gout, const Py_ssize_t[:, :, :, ::1] arg,
                       int k, Py_ssize_t H, Py_ssize_t W):
    cdef Py_ssize_t N = gout.shape[0], C = gout.shape[1]
    cdef Py_ssize_t OH = gout.shape[2], OW = gout.shape[3]
    gx_arr = np.zeros((N, C, H, W), dtype=np.float32)
    cdef float[:, :, :, ::1] gx = gx_arr
    cdef Py_ssize_t n, c, i, j, b
    with nogil:
        for n in range(N):
            for c in range(C):
                for i in range(OH):
                    for j in range(OW):
                        b = arg[n, c, i, j]
                        gx[n, c, i * k + b // k, j * k + b % k] += gout[n, c, i, j]
    return gx_arr
