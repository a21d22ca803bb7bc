# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled twins of the kernels in ``_pykernels``.

Matrix products go through scipy's BLAS bindings; the element-wise work of
each kernel is fused into a single pass over the data.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log, tanh, INFINITY
from scipy.linalg.cython_blas cimport dgemm

cnp.import_array()

cdef double NEG_INF = -INFINITY


cdef inline double _lse2(double a, double b) nogil:
    cdef double m
    if a == NEG_INF:
        return b
    if b == NEG_INF:
        return a
    if a > b:
        return a + log(1.0 + exp(b - a))
    return b + log(1.0 + exp(a - b))


cdef inline double _sigmoid(double v) nogil:
    return 1.0 / (1.0 + exp(-v))


cdef inline double _tanh(double v) nogil:
    # exp is several times cheaper than libm tanh; absolute error stays ~1e-16
    if v > 20.0:
        return 1.0
    if v < -20.0:
        return -1.0
    return 1.0 - 2.0 / (exp(2.0 * v) + 1.0)


cdef void _gemm_rm(bint ta, bint tb, int M, int N, int K,
                   const double *A, int lda, const double *B, int ldb,
                   double beta, double *C) noexcept nogil:
    # Row-major C(MxN) = op(A) op(B) + beta*C, expressed as col-major C^T.
    cdef char ca = b'T' if ta else b'N'
    cdef char cb = b'T' if tb else b'N'
    cdef double alpha = 1.0
    cdef int ldc = N
    dgemm(&cb, &ca, &N, &M, &K, &alpha, <double *>B, &ldb, <double *>A, &lda, &beta, C, &ldc)


def logsumexp_rows(a):
    cdef const double[:, ::1] av = np.ascontiguousarray(a, dtype=np.float64)
    cdef Py_ssize_t n = av.shape[0], k = av.shape[1], i, j
    out = np.empty(n)
    cdef double[::1] ov = out
    cdef double m, s
    with nogil:
        for i in range(n):
            m = NEG_INF
            for j in range(k):
                if av[i, j] > m:
                    m = av[i, j]
            if m == NEG_INF:
                ov[i] = NEG_INF
                continue
            s = 0.0
            for j in range(k):
                s += exp(av[i, j] - m)
            ov[i] = m + log(s)
    return out


def oohmm_forward(log_trans, log_emit_seq, Py_ssize_t bos):
    cdef const double[:, ::1] lt = np.ascontiguousarray(log_trans, dtype=np.float64)
    cdef const double[:, ::1] le = np.ascontiguousarray(log_emit_seq, dtype=np.float64)
    cdef Py_ssize_t k = lt.shape[0], T = le.shape[0], t, u, v
    out = np.full((T + 1, k), -np.inf)
    cdef double[:, ::1] ov = out
    cdef double acc
    ov[0, bos] = 0.0
    with nogil:
        for t in range(T):
            for u in range(k):
                acc = NEG_INF
                for v in range(k):
                    acc = _lse2(acc, ov[t, v] + lt[v, u])
                ov[t + 1, u] = acc + le[t, u]
    return out


def oohmm_backward(log_trans, log_xmarg_seq):
    cdef const double[:, ::1] lt = np.ascontiguousarray(log_trans, dtype=np.float64)
    cdef const double[:, ::1] lx = np.ascontiguousarray(log_xmarg_seq, dtype=np.float64)
    cdef Py_ssize_t k = lt.shape[0], T = lx.shape[0], t, u, v
    out = np.zeros((T + 1, k))
    cdef double[:, ::1] ov = out
    cdef double acc
    with nogil:
        for t in range(T - 1, -1, -1):
            for u in range(k):
                acc = NEG_INF
                for v in range(k):
                    acc = _lse2(acc, lt[u, v] + lx[t, v] + ov[t + 1, v])
                ov[t, u] = acc
    return out


def oohmm_score_paths(log_trans, log_emit_xy, paths, Py_ssize_t bos):
    cdef const double[:, ::1] lt = np.ascontiguousarray(log_trans, dtype=np.float64)
    cdef const double[:, :, ::1] le = np.ascontiguousarray(log_emit_xy, dtype=np.float64)
    cdef cnp.int64_t[:, ::1] pv = np.ascontiguousarray(paths, dtype=np.int64)
    cdef Py_ssize_t N = pv.shape[0], T = pv.shape[1], k = lt.shape[0]
    cdef Py_ssize_t i, t, u, v
    out = np.empty(N)
    cdef double[::1] ov = out
    cdef double[::1] cur = np.empty(k)
    cdef double[::1] nxt = np.empty(k)
    cdef double acc, m
    with nogil:
        for i in range(N):
            for u in range(k):
                cur[u] = NEG_INF
            cur[bos] = 0.0
            for t in range(T):
                for u in range(k):
                    m = NEG_INF
                    for v in range(k):
                        if cur[v] + lt[v, u] > m:
                            m = cur[v] + lt[v, u]
                    if m == NEG_INF:
                        nxt[u] = NEG_INF
                        continue
                    acc = 0.0
                    for v in range(k):
                        acc += exp(cur[v] + lt[v, u] - m)
                    nxt[u] = m + log(acc) + le[t, pv[i, t], u]
                for u in range(k):
                    cur[u] = nxt[u]
            acc = NEG_INF
            for u in range(k):
                acc = _lse2(acc, cur[u])
            ov[i] = acc
    return out


def gru_forward(x, h, W, U, b):
    cdef const double[:, ::1] xv = np.ascontiguousarray(x, dtype=np.float64)
    cdef const double[:, ::1] hv = np.ascontiguousarray(h, dtype=np.float64)
    cdef double[:, ::1] Wv = np.ascontiguousarray(W, dtype=np.float64)
    cdef double[:, ::1] Uv = np.ascontiguousarray(U, dtype=np.float64)
    cdef const double[::1] bv = np.ascontiguousarray(b, dtype=np.float64)
    cdef int N = hv.shape[0], d = hv.shape[1], nin = xv.shape[1]
    cdef int d3 = 3 * d
    if Wv.shape[0] != nin or Wv.shape[1] != d3 or Uv.shape[0] != d or Uv.shape[1] != d3:
        raise ValueError("GRU weight shapes do not match input/hidden sizes")
    a = np.empty((N, d3))
    c = np.empty((N, d3))
    cdef double[:, ::1] av = a
    cdef double[:, ::1] cv = c
    h_new = np.empty((N, d))
    z = np.empty((N, d))
    r = np.empty((N, d))
    n = np.empty((N, d))
    hn = np.empty((N, d))
    cdef double[:, ::1] hnv = h_new
    cdef double[:, ::1] zv = z
    cdef double[:, ::1] rv = r
    cdef double[:, ::1] nv = n
    cdef double[:, ::1] hcv = hn
    cdef Py_ssize_t i, j
    cdef double zz, rr, nn
    with nogil:
        if N > 0:
            if nin > 0:
                _gemm_rm(False, False, N, d3, nin, &xv[0, 0], nin, &Wv[0, 0], d3, 0.0, &av[0, 0])
            else:
                for i in range(N):
                    for j in range(d3):
                        av[i, j] = 0.0
            _gemm_rm(False, False, N, d3, d, &hv[0, 0], d, &Uv[0, 0], d3, 0.0, &cv[0, 0])
        for i in range(N):
            for j in range(d):
                zz = _sigmoid(av[i, j] + bv[j] + cv[i, j])
                rr = _sigmoid(av[i, d + j] + bv[d + j] + cv[i, d + j])
                nn = _tanh(av[i, 2 * d + j] + bv[2 * d + j] + rr * cv[i, 2 * d + j])
                zv[i, j] = zz
                rv[i, j] = rr
                nv[i, j] = nn
                hcv[i, j] = cv[i, 2 * d + j]
                hnv[i, j] = zz * hv[i, j] + (1.0 - zz) * nn
    return h_new, z, r, n, hn


def gru_expand(xa, hc, h):
    cdef const double[:, ::1] av = np.ascontiguousarray(xa, dtype=np.float64)
    cdef const double[:, ::1] cv = np.ascontiguousarray(hc, dtype=np.float64)
    cdef const double[:, ::1] hv = np.ascontiguousarray(h, dtype=np.float64)
    cdef Py_ssize_t M = hv.shape[0], d = hv.shape[1], Y = av.shape[0], i, y, j
    if av.shape[1] != 3 * d or cv.shape[1] != 3 * d or cv.shape[0] != M:
        raise ValueError("projection shapes do not match the hidden size")
    out = np.empty((M, Y, d))
    cdef double[:, :, ::1] ov = out
    cdef double zz, rr, nn
    with nogil:
        for i in range(M):
            for y in range(Y):
                for j in range(d):
                    zz = _sigmoid(av[y, j] + cv[i, j])
                    rr = _sigmoid(av[y, d + j] + cv[i, d + j])
                    nn = _tanh(av[y, 2 * d + j] + rr * cv[i, 2 * d + j])
                    ov[i, y, j] = nn + zz * (hv[i, j] - nn)
    return out


def gru_backward(dh_new, x, h, W, U, z, r, n, hn):
    cdef const double[:, ::1] gv = np.ascontiguousarray(dh_new, dtype=np.float64)
    cdef const double[:, ::1] xv = np.ascontiguousarray(x, dtype=np.float64)
    cdef const double[:, ::1] hv = np.ascontiguousarray(h, dtype=np.float64)
    cdef double[:, ::1] Wv = np.ascontiguousarray(W, dtype=np.float64)
    cdef double[:, ::1] Uv = np.ascontiguousarray(U, dtype=np.float64)
    cdef const double[:, ::1] zv = np.ascontiguousarray(z, dtype=np.float64)
    cdef const double[:, ::1] rv = np.ascontiguousarray(r, dtype=np.float64)
    cdef const double[:, ::1] nv = np.ascontiguousarray(n, dtype=np.float64)
    cdef const double[:, ::1] hcv = np.ascontiguousarray(hn, dtype=np.float64)
    cdef int N = hv.shape[0], d = hv.shape[1], nin = xv.shape[1]
    cdef int d3 = 3 * d
    da = np.empty((N, d3))
    dc = np.empty((N, d3))
    dx = np.zeros((N, nin))
    dh = np.empty((N, d))
    dW = np.zeros((nin, d3))
    dU = np.zeros((d, d3))
    db = np.zeros(d3)
    cdef double[:, ::1] dav = da
    cdef double[:, ::1] dcv = dc
    cdef double[:, ::1] dxv = dx
    cdef double[:, ::1] dhv = dh
    cdef double[:, ::1] dWv = dW
    cdef double[:, ::1] dUv = dU
    cdef double[::1] dbv = db
    cdef Py_ssize_t i, j
    cdef double g, zz, rr, nn, dn_pre, dr_pre, dz_pre
    with nogil:
        for i in range(N):
            for j in range(d):
                g = gv[i, j]
                zz = zv[i, j]
                rr = rv[i, j]
                nn = nv[i, j]
                dn_pre = g * (1.0 - zz) * (1.0 - nn * nn)
                dr_pre = dn_pre * hcv[i, j] * rr * (1.0 - rr)
                dz_pre = g * (hv[i, j] - nn) * zz * (1.0 - zz)
                dav[i, j] = dz_pre
                dav[i, d + j] = dr_pre
                dav[i, 2 * d + j] = dn_pre
                dcv[i, j] = dz_pre
                dcv[i, d + j] = dr_pre
                dcv[i, 2 * d + j] = dn_pre * rr
                dhv[i, j] = g * zz
        for i in range(N):
            for j in range(d3):
                dbv[j] += dav[i, j]
        if N > 0:
            # dh += dc @ U^T ; dx = da @ W^T ; dW = x^T da ; dU = h^T dc
            _gemm_rm(False, True, N, d, d3, &dcv[0, 0], d3, &Uv[0, 0], d3, 1.0, &dhv[0, 0])
            _gemm_rm(True, False, d, d3, N, &hv[0, 0], d, &dcv[0, 0], d3, 0.0, &dUv[0, 0])
            if nin > 0:
                _gemm_rm(False, True, N, nin, d3, &dav[0, 0], d3, &Wv[0, 0], d3, 0.0, &dxv[0, 0])
                _gemm_rm(True, False, nin, d3, N, &xv[0, 0], nin, &dav[0, 0], d3, 0.0, &dWv[0, 0])
    return dx, dh, dW, dU, db


def cumulative_inversion(weights, uniforms):
    cdef const double[::1] wv = np.ascontiguousarray(weights, dtype=np.float64)
    cdef const double[::1] uv = np.ascontiguousarray(uniforms, dtype=np.float64)
    cdef Py_ssize_t n = wv.shape[0], m = uv.shape[0], i, lo, hi, mid, last = -1
    cdef double total = 0.0
    cdef double[::1] cdf = np.empty(n)
    for i in range(n):
        total += wv[i]
        cdf[i] = total
        if wv[i] > 0:
            last = i
    if last < 0:
        raise ValueError("all weights are zero")
    out = np.empty(m, dtype=np.int64)
    cdef cnp.int64_t[::1] ov = out
    cdef double target
    with nogil:
        for i in range(n):
            cdf[i] = cdf[i] / total
        for i in range(m):
            target = uv[i]
            lo = 0
            hi = n
            while lo < hi:
                mid = (lo + hi) // 2
                if cdf[mid] <= target:
                    lo = mid + 1
                else:
                    hi = mid
            ov[i] = lo if lo < last else last
    return out
