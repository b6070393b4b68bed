# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Fused mini-batch SGD epoch for ReLU MLPs.

One call runs every batch of an epoch without returning to the interpreter.
The loss is ``hard_w * CE(softmax(z), y) + soft_w * soft(z / T)`` where the
soft part is KL(target || softmax(z / T)) or the cross-entropy against the
same targets; both share one gradient.  Weights are updated in place.
"""
from libc.math cimport exp
from libc.stdlib cimport malloc, free
from scipy.linalg.cython_blas cimport dgemm

import numpy as np

cdef double LOG_CLAMP = 1e-12


cdef inline void gemm_rm(char ta, char tb, int m, int n, int k,
                         double alpha, const double* a, int lda,
                         const double* b, int ldb, double beta,
                         double* c, int ldc) noexcept nogil:
    # Row-major C = op(A) op(B) via column-major dgemm on transposed views.
    dgemm(&tb, &ta, &n, &m, &k, &alpha, <double*>b, &ldb, <double*>a, &lda,
          &beta, c, &ldc)


cdef void logits_grad(double* z, double* dz, int rows, int classes,
                      const long* labels, const double* soft,
                      double hard_w, double soft_w, double T, bint use_soft,
                      double* buf) noexcept nogil:
    # dz <- d(loss)/dz for a batch of logits z (batch-mean reduction).
    cdef int r, c
    cdef double mx, s, p_y, inv_n = 1.0 / rows, s_active, q
    cdef double* zr
    cdef double* dr
    cdef const double* sr
    for r in range(rows):
        zr = z + r * classes
        dr = dz + r * classes
        mx = zr[0]
        for c in range(1, classes):
            if zr[c] > mx:
                mx = zr[c]
        s = 0.0
        for c in range(classes):
            buf[c] = exp(zr[c] - mx)
            s += buf[c]
        for c in range(classes):
            buf[c] = buf[c] / s
        p_y = buf[labels[r]]
        for c in range(classes):
            dr[c] = 0.0
        if p_y >= LOG_CLAMP:
            for c in range(classes):
                dr[c] = hard_w * (buf[c] * inv_n)
            dr[labels[r]] -= hard_w * inv_n
        if use_soft:
            sr = soft + r * classes
            mx = zr[0] / T
            for c in range(1, classes):
                if zr[c] / T > mx:
                    mx = zr[c] / T
            s = 0.0
            for c in range(classes):
                buf[c] = exp(zr[c] / T - mx)
                s += buf[c]
            s_active = 0.0
            for c in range(classes):
                buf[c] = buf[c] / s
                if buf[c] >= LOG_CLAMP:
                    s_active += sr[c]
            for c in range(classes):
                q = buf[c]
                if q >= LOG_CLAMP:
                    dr[c] += soft_w * ((q * s_active - sr[c]) * inv_n / T)
                else:
                    dr[c] += soft_w * (q * s_active * inv_n / T)


def sgd_epoch(list weights, list biases, const double[:, ::1] X, const long[::1] y,
              soft, const long[::1] order, int batch_size, double eta,
              double hard_w, double soft_w, double T):
    """Run one epoch over ``X[order]`` in batches, updating arrays in place."""
    cdef int L = len(weights)
    cdef int n = order.shape[0]
    cdef int d_in = X.shape[1]
    cdef bint use_soft = soft is not None
    cdef const double[:, ::1] soft_mv
    cdef const double* soft_ptr = NULL
    if use_soft:
        soft_mv = soft
        soft_ptr = &soft_mv[0, 0]
    if n == 0:
        return
    if batch_size > n:
        batch_size = n

    cdef double** W = <double**>malloc(L * sizeof(double*))
    cdef double** B = <double**>malloc(L * sizeof(double*))
    cdef int* width = <int*>malloc((L + 1) * sizeof(int))
    cdef double** act = <double**>malloc((L + 1) * sizeof(double*))
    cdef double** grad_w = <double**>malloc(L * sizeof(double*))
    cdef double** grad_b = <double**>malloc(L * sizeof(double*))
    cdef double[:, ::1] wmv
    cdef double[::1] bmv
    cdef int i, j, r, c, maxw
    width[0] = d_in
    maxw = d_in
    for i in range(L):
        wmv = weights[i]
        bmv = biases[i]
        if wmv.shape[1] != width[i] or bmv.shape[0] != wmv.shape[0]:
            raise ValueError(f"layer {i}: shape mismatch in kernel inputs")
        W[i] = &wmv[0, 0]
        B[i] = &bmv[0]
        width[i + 1] = wmv.shape[0]
        if width[i + 1] > maxw:
            maxw = width[i + 1]
    for i in range(L + 1):
        act[i] = <double*>malloc(batch_size * width[i] * sizeof(double))
    for i in range(L):
        grad_w[i] = <double*>malloc(width[i + 1] * width[i] * sizeof(double))
        grad_b[i] = <double*>malloc(width[i + 1] * sizeof(double))
    cdef double* delta = <double*>malloc(batch_size * maxw * sizeof(double))
    cdef double* delta2 = <double*>malloc(batch_size * maxw * sizeof(double))
    cdef double* buf = <double*>malloc(width[L] * sizeof(double))
    cdef long* labels = <long*>malloc(batch_size * sizeof(long))
    cdef double* soft_batch = NULL
    if use_soft:
        soft_batch = <double*>malloc(batch_size * width[L] * sizeof(double))

    cdef int start, rows, wi, wo
    cdef long src
    cdef double* tmp
    cdef double acc
    cdef const double* xptr = &X[0, 0]
    cdef const long* yptr = &y[0]
    cdef const long* optr = &order[0]
    with nogil:
        start = 0
        while start < n:
            rows = batch_size if start + batch_size <= n else n - start
            for r in range(rows):
                src = optr[start + r]
                labels[r] = yptr[src]
                for c in range(d_in):
                    act[0][r * d_in + c] = xptr[src * d_in + c]
                if use_soft:
                    for c in range(width[L]):
                        soft_batch[r * width[L] + c] = soft_ptr[src * width[L] + c]
            # forward
            for i in range(L):
                wi = width[i]
                wo = width[i + 1]
                gemm_rm(b'N', b'T', rows, wo, wi, 1.0, act[i], wi, W[i], wi, 0.0, act[i + 1], wo)
                for r in range(rows):
                    for c in range(wo):
                        act[i + 1][r * wo + c] += B[i][c]
                        if i < L - 1 and act[i + 1][r * wo + c] <= 0.0:
                            act[i + 1][r * wo + c] = 0.0
            logits_grad(act[L], delta, rows, width[L], labels, soft_batch,
                        hard_w, soft_w, T, use_soft, buf)
            # backward
            for i in range(L - 1, -1, -1):
                wi = width[i]
                wo = width[i + 1]
                gemm_rm(b'T', b'N', wo, wi, rows, 1.0, delta, wo, act[i], wi, 0.0, grad_w[i], wi)
                for c in range(wo):
                    acc = 0.0
                    for r in range(rows):
                        acc = acc + delta[r * wo + c]
                    grad_b[i][c] = acc
                if i > 0:
                    gemm_rm(b'N', b'N', rows, wi, wo, 1.0, delta, wo, W[i], wi, 0.0, delta2, wi)
                    for j in range(rows * wi):
                        if act[i][j] <= 0.0:
                            delta2[j] = 0.0
                    tmp = delta
                    delta = delta2
                    delta2 = tmp
            # update
            for i in range(L):
                for j in range(width[i + 1] * width[i]):
                    W[i][j] = W[i][j] - eta * grad_w[i][j]
                for j in range(width[i + 1]):
                    B[i][j] = B[i][j] - eta * grad_b[i][j]
            start += rows

    for i in range(L + 1):
        free(act[i])
    for i in range(L):
        free(grad_w[i])
        free(grad_b[i])
    free(W); free(B); free(width); free(act); free(grad_w); free(grad_b)
    free(delta); free(delta2); free(buf); free(labels)
    if soft_batch != NULL:
        free(soft_batch)
