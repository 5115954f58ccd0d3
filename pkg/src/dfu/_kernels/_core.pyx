# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernel core.

Same contract as dfu._kernels._numpy; loops are fused so batch calls do a
single pass over the data without intermediate arrays.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport exp, fabs, log, log1p

cnp.import_array()

BACKEND = "cython"


cdef inline double _sig(double z) nogil:
    if z >= 0.0:
        return 1.0 / (1.0 + exp(-z))
    else:
        return exp(z) / (1.0 + exp(z))


cdef inline double _softplus(double z) nogil:
    cdef double m = z if z > 0.0 else 0.0
    return m + log1p(exp(-fabs(z)))


cdef inline double _dot(const double[:] a, const double[:] b) nogil:
    cdef Py_ssize_t i
    cdef double s = 0.0
    for i in range(a.shape[0]):
        s += a[i] * b[i]
    return s


# --- batch mean loss + gradient ---------------------------------------------


def batch_loss_grad_sigmoid(const double[:, ::1] X, const double[:] y,
                            const double[:] w, double lam):
    cdef Py_ssize_t n = X.shape[0], p = X.shape[1]
    cdef cnp.ndarray[double, ndim=1] grad = np.zeros(p)
    cdef double[:] g = grad
    cdef double loss = 0.0, z, r
    cdef Py_ssize_t s, j
    for s in range(n):
        z = _dot(X[s], w)
        loss += _softplus(z) - y[s] * z
        r = _sig(z) - y[s]
        for j in range(p):
            g[j] += r * X[s, j]
    loss /= n
    for j in range(p):
        g[j] = g[j] / n + lam * w[j]
        loss += 0.5 * lam * w[j] * w[j]
    return loss, grad


def batch_loss_grad_softmax(const double[:, ::1] X, const long[:] y,
                            const double[:] w, int n_classes, double lam):
    cdef Py_ssize_t n = X.shape[0], p = X.shape[1], d = n_classes * p
    cdef cnp.ndarray[double, ndim=1] grad = np.zeros(d)
    cdef cnp.ndarray[double, ndim=1] zbuf = np.empty(n_classes)
    cdef double[:] g = grad
    cdef double[:] z = zbuf
    cdef double loss = 0.0, zmax, denom, pc
    cdef Py_ssize_t s, c, j
    for s in range(n):
        zmax = -1e308
        for c in range(n_classes):
            z[c] = _dot(X[s], w[c * p:(c + 1) * p])
            if z[c] > zmax:
                zmax = z[c]
        denom = 0.0
        for c in range(n_classes):
            denom += exp(z[c] - zmax)
        loss += zmax + log(denom) - z[y[s]]
        for c in range(n_classes):
            pc = exp(z[c] - zmax) / denom
            if c == y[s]:
                pc -= 1.0
            for j in range(p):
                g[c * p + j] += pc * X[s, j]
    loss /= n
    for j in range(d):
        g[j] = g[j] / n + lam * w[j]
        loss += 0.5 * lam * w[j] * w[j]
    return loss, grad


def batch_loss_grad_lstsq(const double[:, ::1] X, const double[:] y,
                          const double[:] w, double lam):
    cdef Py_ssize_t n = X.shape[0], p = X.shape[1]
    cdef cnp.ndarray[double, ndim=1] grad = np.zeros(p)
    cdef double[:] g = grad
    cdef double loss = 0.0, r
    cdef Py_ssize_t s, j
    for s in range(n):
        r = _dot(X[s], w) - y[s]
        loss += 0.5 * r * r
        for j in range(p):
            g[j] += r * X[s, j]
    loss /= n
    for j in range(p):
        g[j] = g[j] / n + lam * w[j]
        loss += 0.5 * lam * w[j] * w[j]
    return loss, grad


# --- per-sample losses -------------------------------------------------------


def persample_losses_sigmoid(const double[:, ::1] X, const double[:] y,
                             const double[:] w, double lam):
    cdef Py_ssize_t n = X.shape[0]
    cdef cnp.ndarray[double, ndim=1] out = np.empty(n)
    cdef double[:] o = out
    cdef double reg = 0.5 * lam * _dot(w, w)
    cdef double z
    cdef Py_ssize_t s
    for s in range(n):
        z = _dot(X[s], w)
        o[s] = _softplus(z) - y[s] * z + reg
    return out


def persample_losses_softmax(const double[:, ::1] X, const long[:] y,
                             const double[:] w, int n_classes, double lam):
    cdef Py_ssize_t n = X.shape[0], p = X.shape[1]
    cdef cnp.ndarray[double, ndim=1] out = np.empty(n)
    cdef cnp.ndarray[double, ndim=1] zbuf = np.empty(n_classes)
    cdef double[:] o = out
    cdef double[:] z = zbuf
    cdef double reg = 0.5 * lam * _dot(w, w)
    cdef double zmax, denom
    cdef Py_ssize_t s, c
    for s in range(n):
        zmax = -1e308
        for c in range(n_classes):
            z[c] = _dot(X[s], w[c * p:(c + 1) * p])
            if z[c] > zmax:
                zmax = z[c]
        denom = 0.0
        for c in range(n_classes):
            denom += exp(z[c] - zmax)
        o[s] = zmax + log(denom) - z[y[s]] + reg
    return out


def persample_losses_lstsq(const double[:, ::1] X, const double[:] y,
                           const double[:] w, double lam):
    cdef Py_ssize_t n = X.shape[0]
    cdef cnp.ndarray[double, ndim=1] out = np.empty(n)
    cdef double[:] o = out
    cdef double reg = 0.5 * lam * _dot(w, w)
    cdef double r
    cdef Py_ssize_t s
    for s in range(n):
        r = _dot(X[s], w) - y[s]
        o[s] = 0.5 * r * r + reg
    return out


# --- mean per-sample Hessians ------------------------------------------------


def hessian_mean_sigmoid(const double[:, ::1] X, const double[:] w, double lam):
    cdef Py_ssize_t n = X.shape[0], p = X.shape[1]
    cdef cnp.ndarray[double, ndim=2] H = np.zeros((p, p))
    cdef double[:, :] h = H
    cdef double s_, wt, xi
    cdef Py_ssize_t s, i, j
    for s in range(n):
        s_ = _sig(_dot(X[s], w))
        wt = s_ * (1.0 - s_)
        for i in range(p):
            xi = wt * X[s, i]
            for j in range(i, p):
                h[i, j] += xi * X[s, j]
    for i in range(p):
        for j in range(i, p):
            h[i, j] /= n
            if i != j:
                h[j, i] = h[i, j]
        h[i, i] += lam
    return H


def hessian_mean_softmax(const double[:, ::1] X, const double[:] w,
                         int n_classes, double lam):
    cdef Py_ssize_t n = X.shape[0], p = X.shape[1], d = n_classes * p
    cdef cnp.ndarray[double, ndim=2] H = np.zeros((d, d))
    cdef cnp.ndarray[double, ndim=1] pbuf = np.empty(n_classes)
    cdef double[:, :] h = H
    cdef double[:] pr = pbuf
    cdef double zmax, denom, lam_cc, xi
    cdef Py_ssize_t s, c, c2, i, j
    for s in range(n):
        zmax = -1e308
        for c in range(n_classes):
            pr[c] = _dot(X[s], w[c * p:(c + 1) * p])
            if pr[c] > zmax:
                zmax = pr[c]
        denom = 0.0
        for c in range(n_classes):
            pr[c] = exp(pr[c] - zmax)
            denom += pr[c]
        for c in range(n_classes):
            pr[c] /= denom
        # upper-triangular class blocks, upper-triangular feature entries
        for c in range(n_classes):
            for c2 in range(c, n_classes):
                lam_cc = -pr[c] * pr[c2]
                if c == c2:
                    lam_cc += pr[c]
                for i in range(p):
                    xi = lam_cc * X[s, i]
                    for j in range(i, p):
                        h[c * p + i, c2 * p + j] += xi * X[s, j]
    cdef Py_ssize_t r0, q0
    for c in range(n_classes):
        for c2 in range(c, n_classes):
            r0 = c * p
            q0 = c2 * p
            # finish the within-block symmetry, then mirror the block
            for i in range(p):
                for j in range(i, p):
                    h[r0 + i, q0 + j] /= n
                    if i != j:
                        h[r0 + j, q0 + i] = h[r0 + i, q0 + j]
            if c2 != c:
                for i in range(p):
                    for j in range(p):
                        h[q0 + i, r0 + j] = h[r0 + j, q0 + i]
    for i in range(d):
        h[i, i] += lam
    return H


def hessian_mean_lstsq(const double[:, ::1] X, double lam):
    cdef Py_ssize_t n = X.shape[0], p = X.shape[1]
    cdef cnp.ndarray[double, ndim=2] H = np.zeros((p, p))
    cdef double[:, :] h = H
    cdef double xi
    cdef Py_ssize_t s, i, j
    for s in range(n):
        for i in range(p):
            xi = X[s, i]
            for j in range(i, p):
                h[i, j] += xi * X[s, j]
    for i in range(p):
        for j in range(i, p):
            h[i, j] /= n
            if i != j:
                h[j, i] = h[i, j]
        h[i, i] += lam
    return H


# --- per-sample gradient rows (Fisher factors) -------------------------------


def grad_rows_sigmoid(const double[:, ::1] X, const double[:] y,
                      const double[:] w, double lam):
    cdef Py_ssize_t n = X.shape[0], p = X.shape[1]
    cdef cnp.ndarray[double, ndim=2] G = np.empty((n, p))
    cdef double[:, :] g = G
    cdef double r
    cdef Py_ssize_t s, j
    for s in range(n):
        r = _sig(_dot(X[s], w)) - y[s]
        for j in range(p):
            g[s, j] = r * X[s, j] + lam * w[j]
    return G


def grad_rows_softmax(const double[:, ::1] X, const long[:] y,
                      const double[:] w, int n_classes, double lam):
    cdef Py_ssize_t n = X.shape[0], p = X.shape[1], d = n_classes * p
    cdef cnp.ndarray[double, ndim=2] G = np.empty((n, d))
    cdef cnp.ndarray[double, ndim=1] pbuf = np.empty(n_classes)
    cdef double[:, :] g = G
    cdef double[:] pr = pbuf
    cdef double zmax, denom, pc
    cdef Py_ssize_t s, c, j
    for s in range(n):
        zmax = -1e308
        for c in range(n_classes):
            pr[c] = _dot(X[s], w[c * p:(c + 1) * p])
            if pr[c] > zmax:
                zmax = pr[c]
        denom = 0.0
        for c in range(n_classes):
            pr[c] = exp(pr[c] - zmax)
            denom += pr[c]
        for c in range(n_classes):
            pc = pr[c] / denom
            if c == y[s]:
                pc -= 1.0
            for j in range(p):
                g[s, c * p + j] = pc * X[s, j] + lam * w[c * p + j]
    return G


def grad_rows_lstsq(const double[:, ::1] X, const double[:] y,
                    const double[:] w, double lam):
    cdef Py_ssize_t n = X.shape[0], p = X.shape[1]
    cdef cnp.ndarray[double, ndim=2] G = np.empty((n, p))
    cdef double[:, :] g = G
    cdef double r
    cdef Py_ssize_t s, j
    for s in range(n):
        r = _dot(X[s], w) - y[s]
        for j in range(p):
            g[s, j] = r * X[s, j] + lam * w[j]
    return G
