# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Fused per-sample backprop + exact Hessian trace of the potential.

Layer activations arrive precomputed (vectorized tanh is far cheaper in
numpy than libm calls in a scalar loop). Each sample owns one Jacobian
buffer, stored transposed as (d x m) and overwritten layer by layer; for
larger d the hidden-layer product K_i J goes through BLAS dgemm.
"""
import numpy as np
cimport numpy as cnp
from scipy.linalg.cython_blas cimport dgemm

cnp.import_array()

# below this spatial dimension a plain loop beats the dgemm call overhead
DEF GEMM_MIN_D = 8


def grad_trace(double[:, ::1] S, double[:, :, ::1] th, double[:, ::1] K0,
               double[:, :, ::1] K, double[::1] w, double[:, ::1] A, double[::1] b,
               double h, double trA):
    """th[n, i, :] = tanh of layer-i pre-activation for sample n."""
    cdef Py_ssize_t N = S.shape[0], d1 = S.shape[1], d = d1 - 1
    cdef Py_ssize_t m = K0.shape[0], M = K.shape[0], r = A.shape[0]
    cdef Py_ssize_t n, i, j, k, l
    cdef double acc, tr, ti, g

    grad_np = np.empty((N, d1))
    trace_np = np.empty(N)
    cdef double[:, ::1] grad = grad_np
    cdef double[::1] trace = trace_np

    cdef double[:, ::1] z = np.empty((M + 2, m))
    cdef double[::1] As = np.empty(r)
    cdef double[::1] k0sq = np.zeros(m)
    cdef double[:, ::1] Jt = np.empty((d, m))
    cdef double[:, ::1] KJt = np.empty((d, m))
    cdef double[::1] sq = np.empty(m)

    cdef char tr_n = b'N', tr_t = b'T'
    cdef int id_ = <int>d, im = <int>m
    cdef double one = 1.0, zero = 0.0

    for j in range(m):
        acc = 0.0
        for k in range(d):
            acc += K0[j, k] * K0[j, k]
        k0sq[j] = acc

    for n in range(N):
        # backpropagate w through the hidden layers
        for j in range(m):
            z[M + 1, j] = w[j]
        for i in range(M, 0, -1):
            for l in range(m):
                z[i, l] = z[i + 1, l]
            for j in range(m):
                g = h * th[n, i, j] * z[i + 1, j]
                for l in range(m):
                    z[i, l] += g * K[i - 1, j, l]
        for l in range(r):
            acc = 0.0
            for k in range(d1):
                acc += A[l, k] * S[n, k]
            As[l] = acc
        for k in range(d1):
            grad[n, k] = b[k]
        for l in range(r):
            g = As[l]
            for k in range(d1):
                grad[n, k] += g * A[l, k]
        for j in range(m):
            g = th[n, 0, j] * z[1, j]
            for k in range(d1):
                grad[n, k] += g * K0[j, k]

        # exact trace: opening layer, then running Jacobian through hidden layers
        tr = 0.0
        for j in range(m):
            tr += (1.0 - th[n, 0, j] * th[n, 0, j]) * z[1, j] * k0sq[j]
        for k in range(d):
            for j in range(m):
                Jt[k, j] = th[n, 0, j] * K0[j, k]
        for i in range(1, M + 1):
            if d >= GEMM_MIN_D:
                # row-major KJt = Jt @ K_i^T  <=>  column-major KJt^T = K_i Jt^T
                dgemm(&tr_t, &tr_n, &im, &id_, &im, &one, &K[i - 1, 0, 0], &im,
                      &Jt[0, 0], &im, &zero, &KJt[0, 0], &im)
            else:
                for k in range(d):
                    for j in range(m):
                        acc = 0.0
                        for l in range(m):
                            acc += K[i - 1, j, l] * Jt[k, l]
                        KJt[k, j] = acc
            for j in range(m):
                sq[j] = 0.0
            for k in range(d):
                for j in range(m):
                    sq[j] += KJt[k, j] * KJt[k, j]
            ti = 0.0
            for j in range(m):
                ti += (1.0 - th[n, i, j] * th[n, i, j]) * z[i + 1, j] * sq[j]
            tr += h * ti
            if i < M:
                for k in range(d):
                    for j in range(m):
                        Jt[k, j] += h * th[n, i, j] * KJt[k, j]
        trace[n] = tr + trA

    return grad_np, trace_np
