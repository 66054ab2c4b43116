# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
# cython: language_level=3
"""Compiled hot loops: im2col convolution over BLAS and layered geodesic seed growth."""

import numpy as np


from scipy.linalg.cython_blas cimport dgemm


cdef void _gemm(char ta, char tb, int m, int n, int k, double* A, int lda,
                double* B, int ldb, double beta, double* C, int ldc) noexcept nogil:
    # row-major C = op(A) @ op(B) via the column-major transpose identity
    cdef double one = 1.0
    dgemm(&tb, &ta, &n, &m, &k, &one, B, &ldb, A, &lda, &beta, C, &ldc)


cdef void _im2col(const double[:, :, ::1] x, double[:, ::1] cols, int K, int stride,
                  Py_ssize_t Ho, Py_ssize_t Wo) noexcept nogil:
    cdef Py_ssize_t C = x.shape[0], c, u, v, i, j, row
    for c in range(C):
        for u in range(K):
            for v in range(K):
                row = (c * K + u) * K + v
                for i in range(Ho):
                    for j in range(Wo):
                        cols[row, i * Wo + j] = x[c, i * stride + u, j * stride + v]


cdef void _col2im(const double[:, ::1] cols, double[:, :, ::1] gx, int K, int stride,
                  Py_ssize_t Ho, Py_ssize_t Wo) noexcept nogil:
    cdef Py_ssize_t C = gx.shape[0], c, u, v, i, j, row
    for c in range(C):
        for u in range(K):
            for v in range(K):
                row = (c * K + u) * K + v
                for i in range(Ho):
                    for j in range(Wo):
                        gx[c, i * stride + u, j * stride + v] += cols[row, i * Wo + j]


def conv2d_forward(const double[:, :, :, ::1] x, const double[:, :, :, ::1] w, int stride):
    cdef Py_ssize_t N = x.shape[0], C = x.shape[1], Hp = x.shape[2], Wp = x.shape[3]
    cdef Py_ssize_t O = w.shape[0], K = w.shape[2]
    cdef Py_ssize_t Ho = (Hp - K) // stride + 1
    cdef Py_ssize_t Wo = (Wp - K) // stride + 1
    cdef Py_ssize_t Kc = C * K * K, P = Ho * Wo, n
    out = np.empty((N, O, Ho, Wo))
    cdef double[:, :, :, ::1] y = out
    cols_arr = np.empty((Kc, P))
    cdef double[:, ::1] cols = cols_arr
    wflat = np.ascontiguousarray(np.asarray(w).reshape(O, Kc))
    cdef double[:, ::1] wf = wflat
    with nogil:
        for n in range(N):
            _im2col(x[n], cols, K, stride, Ho, Wo)
            _gemm(b'N', b'N', O, P, Kc, &wf[0, 0], Kc, &cols[0, 0], P, 0.0, &y[n, 0, 0, 0], P)
    return out


def conv2d_backward(const double[:, :, :, ::1] x, const double[:, :, :, ::1] w,
                    const double[:, :, :, ::1] gout, int stride):
    cdef Py_ssize_t N = x.shape[0], C = x.shape[1], Hp = x.shape[2], Wp = x.shape[3]
    cdef Py_ssize_t O = w.shape[0], K = w.shape[2]
    cdef Py_ssize_t Ho = gout.shape[2], Wo = gout.shape[3]
    cdef Py_ssize_t Kc = C * K * K, P = Ho * Wo, n
    gx_arr = np.zeros((N, C, Hp, Wp))
    gw_arr = np.zeros((O, C, K, K))
    cdef double[:, :, :, ::1] gx = gx_arr
    cdef double[:, :, :, ::1] gw = gw_arr
    cols_arr = np.empty((Kc, P))
    gcols_arr = np.empty((Kc, P))
    cdef double[:, ::1] cols = cols_arr
    cdef double[:, ::1] gcols = gcols_arr
    wflat = np.ascontiguousarray(np.asarray(w).reshape(O, Kc))
    cdef double[:, ::1] wf = wflat
    gout_c = np.ascontiguousarray(gout)
    cdef double[:, :, :, ::1] g = gout_c
    with nogil:
        for n in range(N):
            _im2col(x[n], cols, K, stride, Ho, Wo)
            # grad_w += g_n (O,P) @ cols^T (P,Kc)
            _gemm(b'N', b'T', O, Kc, P, &g[n, 0, 0, 0], P, &cols[0, 0], P, 1.0, &gw[0, 0, 0, 0], Kc)
            # gcols = W^T (Kc,O) @ g_n (O,P)
            _gemm(b'T', b'N', Kc, P, O, &wf[0, 0], Kc, &g[n, 0, 0, 0], P, 0.0, &gcols[0, 0], P)
            _col2im(gcols, gx[n], K, stride, Ho, Wo)
    return gx_arr, gw_arr


def geodesic_grow(const int[:, ::1] seeds, const unsigned char[:, ::1] fg):
    cdef Py_ssize_t H = seeds.shape[0], W = seeds.shape[1]
    out = np.array(seeds, dtype=np.int32, copy=True)
    cdef int[:, ::1] lab = out
    cand_arr = np.zeros((H, W), dtype=np.int32)
    cdef int[:, ::1] cand = cand_arr
    front_arr = np.empty(H * W, dtype=np.intp)
    nxt_arr = np.empty(H * W, dtype=np.intp)
    cdef Py_ssize_t[::1] front = front_arr
    cdef Py_ssize_t[::1] nxt = nxt_arr
    cdef Py_ssize_t nf = 0, nn, k, p, r, c, q, rr, cc, d
    cdef int l
    cdef Py_ssize_t dr[4]
    cdef Py_ssize_t dc[4]
    dr[0] = -1; dr[1] = 1; dr[2] = 0; dr[3] = 0
    dc[0] = 0; dc[1] = 0; dc[2] = -1; dc[3] = 1
    with nogil:
        for r in range(H):
            for c in range(W):
                if lab[r, c] > 0:
                    front[nf] = r * W + c
                    nf += 1
        while nf > 0:
            nn = 0
            for k in range(nf):
                p = front[k]
                r = p // W
                c = p % W
                l = lab[r, c]
                for d in range(4):
                    rr = r + dr[d]
                    cc = c + dc[d]
                    if rr < 0 or rr >= H or cc < 0 or cc >= W:
                        continue
                    if fg[rr, cc] == 0 or lab[rr, cc] != 0:
                        continue
                    if cand[rr, cc] == 0:
                        cand[rr, cc] = l
                        nxt[nn] = rr * W + cc
                        nn += 1
                    elif l < cand[rr, cc]:
                        cand[rr, cc] = l
            for k in range(nn):
                q = nxt[k]
                rr = q // W
                cc = q % W
                lab[rr, cc] = cand[rr, cc]
                front[k] = q
            nf = nn
    return out
