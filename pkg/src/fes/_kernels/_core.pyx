# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled training kernels.

Parameters of a network live in one flat vector: for each layer ``l`` the
weights ``W_l`` (``sizes[l+1] x sizes[l]``, row-major) followed by the bias
``b_l``. Hidden layers use the logistic sigmoid, the single output is linear
and the per-sample loss is ``0.5 * (y_hat - y) ** 2``.
"""

import numpy as np

from libc.math cimport exp
from scipy.linalg.cython_blas cimport dgemv


cdef inline void _momentum_row(
    double* w, double* v, const double* a, Py_ssize_t n, double momentum, double d
) noexcept nogil:
    cdef Py_ssize_t i
    for i in range(n):
        v[i] = momentum * v[i] - d * a[i]
        w[i] += v[i]


cdef inline double _sigmoid(double z) noexcept nogil:
    return 1.0 / (1.0 + exp(-z))


def sgd_epoch(
    const Py_ssize_t[::1] sizes,
    double[::1] params,
    double[::1] velocity,
    const double[:, ::1] X,
    const double[::1] y,
    const Py_ssize_t[::1] order,
    Py_ssize_t batch,
    double lr,
    double momentum,
):
    """One pass over ``order`` with momentum updates after every ``batch`` samples."""
    cdef Py_ssize_t L = sizes.shape[0] - 1
    cdef Py_ssize_t n = order.shape[0]
    cdef Py_ssize_t l, o, i, s, t, start, stop, idx, n_in, n_out, p
    cdef Py_ssize_t n_params = params.shape[0]

    w_off_np = np.empty(L, dtype=np.intp)
    a_off_np = np.empty(L + 1, dtype=np.intp)
    cdef Py_ssize_t[::1] w_off = w_off_np
    cdef Py_ssize_t[::1] a_off = a_off_np
    cdef Py_ssize_t pos = 0, apos = 0
    for l in range(L):
        w_off[l] = pos
        pos += sizes[l + 1] * sizes[l] + sizes[l + 1]
    for l in range(L + 1):
        a_off[l] = apos
        apos += sizes[l]
    if pos != n_params:
        raise ValueError("parameter vector does not match layer sizes")
    if sizes[L] != 1:
        raise ValueError("output layer must have exactly one unit")
    if X.shape[1] != sizes[0]:
        raise ValueError("feature count does not match input layer")

    cdef double[::1] act = np.zeros(apos)
    cdef double[::1] delta = np.zeros(apos)
    cdef double[::1] grad = np.zeros(n_params if batch > 1 else 1)
    cdef double one = 1.0, zero = 0.0, d, scale, v, bsz
    cdef int inc = 1, m_in, m_out
    cdef char trans_t = b"T"
    cdef char trans_n = b"N"
    cdef double* a_in
    cdef double* W

    with nogil:
        start = 0
        while start < n:
            stop = start + batch
            if stop > n:
                stop = n
            for t in range(start, stop):
                idx = order[t]
                # forward
                for i in range(sizes[0]):
                    act[i] = X[idx, i]
                for l in range(L):
                    n_in = sizes[l]
                    n_out = sizes[l + 1]
                    m_in = <int>n_in
                    m_out = <int>n_out
                    W = &params[w_off[l]]
                    a_in = &act[a_off[l]]
                    dgemv(&trans_t, &m_in, &m_out, &one, W, &m_in, a_in, &inc, &zero,
                          &act[a_off[l + 1]], &inc)
                    for o in range(n_out):
                        act[a_off[l + 1] + o] += params[w_off[l] + n_out * n_in + o]
                        if l < L - 1:
                            act[a_off[l + 1] + o] = _sigmoid(act[a_off[l + 1] + o])
                # backward: delta[a_off[l]] holds dLoss/dz for layer l outputs
                delta[a_off[L]] = act[a_off[L]] - y[idx]
                for l in range(L - 1, 0, -1):
                    n_in = sizes[l]
                    n_out = sizes[l + 1]
                    m_in = <int>n_in
                    m_out = <int>n_out
                    W = &params[w_off[l]]
                    dgemv(&trans_n, &m_in, &m_out, &one, W, &m_in, &delta[a_off[l + 1]], &inc,
                          &zero, &delta[a_off[l]], &inc)
                    for i in range(n_in):
                        v = act[a_off[l] + i]
                        delta[a_off[l] + i] *= v * (1.0 - v)
                if batch == 1:
                    for l in range(L):
                        n_in = sizes[l]
                        n_out = sizes[l + 1]
                        a_in = &act[a_off[l]]
                        for o in range(n_out):
                            d = lr * delta[a_off[l + 1] + o]
                            p = w_off[l] + o * n_in
                            _momentum_row(&params[p], &velocity[p], a_in, n_in, momentum, d)
                            p = w_off[l] + n_out * n_in + o
                            velocity[p] = momentum * velocity[p] - d
                            params[p] += velocity[p]
                else:
                    for l in range(L):
                        n_in = sizes[l]
                        n_out = sizes[l + 1]
                        for o in range(n_out):
                            d = delta[a_off[l + 1] + o]
                            p = w_off[l] + o * n_in
                            for i in range(n_in):
                                grad[p + i] += d * act[a_off[l] + i]
                            grad[w_off[l] + n_out * n_in + o] += d
            if batch > 1:
                bsz = <double>(stop - start)
                scale = lr / bsz
                for p in range(n_params):
                    velocity[p] = momentum * velocity[p] - scale * grad[p]
                    params[p] += velocity[p]
                    grad[p] = 0.0
            start = stop


def mf_epoch(
    const Py_ssize_t[::1] rows,
    const Py_ssize_t[::1] cols,
    const double[::1] vals,
    double[:, ::1] P,
    double[:, ::1] Q,
    const Py_ssize_t[::1] order,
    double lr,
    double reg,
):
    """One SGD pass of regularised factorisation over the observed entries."""
    cdef Py_ssize_t t, e, i, j, f
    cdef Py_ssize_t rank = P.shape[1]
    cdef double pred, err, pf, qf
    if Q.shape[1] != rank:
        raise ValueError("factor ranks differ")
    with nogil:
        for t in range(order.shape[0]):
            e = order[t]
            i = rows[e]
            j = cols[e]
            pred = 0.0
            for f in range(rank):
                pred += P[i, f] * Q[j, f]
            err = vals[e] - pred
            for f in range(rank):
                pf = P[i, f]
                qf = Q[j, f]
                P[i, f] = pf + lr * (err * qf - reg * pf)
                Q[j, f] = qf + lr * (err * pf - reg * qf)
