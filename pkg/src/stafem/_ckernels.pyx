# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled versions of the linear solver and point location kernels."""

import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, INFINITY

cnp.import_array()


cdef inline void _csr_mv(const cnp.int32_t[::1] ip, const cnp.int32_t[::1] ix,
                         const double[::1] a, const double[::1] x, double[::1] y,
                         Py_ssize_t n) noexcept nogil:
    cdef Py_ssize_t i, k
    cdef double s
    for i in range(n):
        s = 0.0
        for k in range(ip[i], ip[i + 1]):
            s += a[k] * x[ix[k]]
        y[i] = s


def pcg_jacobi(indptr, indices, data, b, x0, double rtol, Py_ssize_t maxiter):
    """Jacobi-preconditioned conjugate gradients on a CSR matrix.

    Stops when ``||r|| <= rtol * ||b||``; returns (x, iterations, converged).
    """
    cdef const cnp.int32_t[::1] ip = np.ascontiguousarray(indptr, dtype=np.int32)
    cdef const cnp.int32_t[::1] ix = np.ascontiguousarray(indices, dtype=np.int32)
    cdef const double[::1] a = np.ascontiguousarray(data, dtype=np.float64)
    cdef const double[::1] bb = np.ascontiguousarray(b, dtype=np.float64)
    cdef Py_ssize_t n = bb.shape[0]
    xo = np.array(x0, dtype=np.float64)
    cdef double[::1] x = xo
    cdef double[::1] r = np.empty(n)
    cdef double[::1] z = np.empty(n)
    cdef double[::1] p = np.empty(n)
    cdef double[::1] ap = np.empty(n)
    cdef double[::1] dinv = np.empty(n)
    cdef Py_ssize_t i, k, it
    cdef double bnorm = 0.0, rnorm, rz, rz_new, pap, alpha, beta
    with nogil:
        for i in range(n):
            bnorm += bb[i] * bb[i]
            dinv[i] = 0.0
            for k in range(ip[i], ip[i + 1]):
                if ix[k] == i:
                    dinv[i] += a[k]
            dinv[i] = 1.0 / dinv[i]
        bnorm = sqrt(bnorm)
    if bnorm == 0.0:
        return np.zeros(n), 0, True
    with nogil:
        _csr_mv(ip, ix, a, x, ap, n)
        rz = 0.0
        rnorm = 0.0
        for i in range(n):
            r[i] = bb[i] - ap[i]
            z[i] = dinv[i] * r[i]
            p[i] = z[i]
            rz += r[i] * z[i]
            rnorm += r[i] * r[i]
        rnorm = sqrt(rnorm)
        it = 0
        while it < maxiter and rnorm > rtol * bnorm:
            _csr_mv(ip, ix, a, p, ap, n)
            pap = 0.0
            for i in range(n):
                pap += p[i] * ap[i]
            alpha = rz / pap
            rz_new = 0.0
            rnorm = 0.0
            for i in range(n):
                x[i] += alpha * p[i]
                r[i] -= alpha * ap[i]
                z[i] = dinv[i] * r[i]
                rz_new += r[i] * z[i]
                rnorm += r[i] * r[i]
            rnorm = sqrt(rnorm)
            beta = rz_new / rz
            rz = rz_new
            for i in range(n):
                p[i] = z[i] + beta * p[i]
            it += 1
    return xo, it, bool(rnorm <= rtol * bnorm)


cdef inline double _bary3(double px, double py, const double[:, ::1] c,
                          Py_ssize_t v0, Py_ssize_t v1, Py_ssize_t v2,
                          double* out) noexcept nogil:
    cdef double x0 = c[v0, 0], y0 = c[v0, 1]
    cdef double x1 = c[v1, 0], y1 = c[v1, 1]
    cdef double x2 = c[v2, 0], y2 = c[v2, 1]
    cdef double d = (y1 - y2) * (x0 - x2) + (x2 - x1) * (y0 - y2)
    cdef double l0 = ((y1 - y2) * (px - x2) + (x2 - x1) * (py - y2)) / d
    cdef double l1 = ((y2 - y0) * (px - x2) + (x0 - x2) * (py - y2)) / d
    cdef double l2 = 1.0 - l0 - l1
    out[0] = l0
    out[1] = l1
    out[2] = l2
    cdef double m = l0
    if l1 < m:
        m = l1
    if l2 < m:
        m = l2
    return m


def locate_points(pts, coords, verts, children, Py_ssize_t n_roots, is_leaf):
    """Descend the bisection forest to the leaf containing each point."""
    cdef const double[:, ::1] p = np.ascontiguousarray(pts, dtype=np.float64)
    cdef const double[:, ::1] c = np.ascontiguousarray(coords, dtype=np.float64)
    cdef const cnp.int64_t[:, ::1] v = np.ascontiguousarray(verts, dtype=np.int64)
    cdef const cnp.int64_t[:, ::1] ch = np.ascontiguousarray(children, dtype=np.int64)
    cdef const cnp.uint8_t[::1] leaf = np.ascontiguousarray(is_leaf, dtype=np.uint8)
    cdef Py_ssize_t n = p.shape[0]
    elem_o = np.full(n, -1, dtype=np.int64)
    bary_o = np.zeros((n, 3))
    cdef cnp.int64_t[::1] elem = elem_o
    cdef double[:, ::1] bary = bary_o
    cdef Py_ssize_t i, r, e, k0, k1
    cdef double best, m, m0, m1
    cdef double buf[3]
    with nogil:
        for i in range(n):
            best = -INFINITY
            e = -1
            for r in range(n_roots):
                m = _bary3(p[i, 0], p[i, 1], c, v[r, 0], v[r, 1], v[r, 2], buf)
                if m > best:
                    best = m
                    e = r
            if best < -1e-6:
                continue
            while not leaf[e]:
                k0 = ch[e, 0]
                k1 = ch[e, 1]
                m0 = _bary3(p[i, 0], p[i, 1], c, v[k0, 0], v[k0, 1], v[k0, 2], buf)
                m1 = _bary3(p[i, 0], p[i, 1], c, v[k1, 0], v[k1, 1], v[k1, 2], buf)
                if m0 >= m1:
                    e = k0
                else:
                    e = k1
            _bary3(p[i, 0], p[i, 1], c, v[e, 0], v[e, 1], v[e, 2], buf)
            elem[i] = e
            bary[i, 0] = buf[0]
            bary[i, 1] = buf[1]
            bary[i, 2] = buf[2]
    return elem_o, bary_o
