# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled simplex projection and min-norm projected-gradient kernels."""

import numpy as np
cimport numpy as cnp
from libc.stdlib cimport malloc, free, qsort
from libc.math cimport fabs, sqrt

cnp.import_array()

cdef double ON_SIMPLEX_TOL = 1e-12


cdef int _cmp_desc(const void *a, const void *b) noexcept nogil:
    cdef double x = (<const double *> a)[0]
    cdef double y = (<const double *> b)[0]
    if x < y:
        return 1
    if x > y:
        return -1
    return 0


cdef void _project(const double *v, double *out, double *work, Py_ssize_t n) noexcept nogil:
    cdef Py_ssize_t j
    cdef double total = 0.0, vmin = v[0], vmax = v[0], css = 0.0, css_rho = 0.0, theta
    cdef Py_ssize_t rho = 0
    for j in range(n):
        total += v[j]
        if v[j] < vmin:
            vmin = v[j]
        if v[j] > vmax:
            vmax = v[j]
    if vmin >= 0.0 and fabs(total - 1.0) <= ON_SIMPLEX_TOL:
        for j in range(n):
            out[j] = v[j]
        return
    # shifting by the max is exact for the projection and keeps theta small
    for j in range(n):
        work[j] = v[j] - vmax
    qsort(work, n, sizeof(double), _cmp_desc)
    for j in range(n):
        css += work[j]
        if work[j] - (css - 1.0) / (j + 1) > 0.0:
            rho = j
            css_rho = css
    theta = (css_rho - 1.0) / (rho + 1)
    for j in range(n):
        out[j] = (v[j] - vmax) - theta
        if out[j] < 0.0:
            out[j] = 0.0


def project_simplex(v):
    cdef cnp.ndarray[cnp.float64_t, ndim=1] src = np.ascontiguousarray(v, dtype=np.float64)
    cdef Py_ssize_t n = src.shape[0]
    cdef cnp.ndarray[cnp.float64_t, ndim=1] out = np.empty(n, dtype=np.float64)
    cdef double *work = <double *> malloc(n * sizeof(double))
    if work == NULL:
        raise MemoryError()
    try:
        _project(&src[0], &out[0], work, n)
    finally:
        free(work)
    return out


cdef double _matvec(const double *gm, const double *x, double *out, Py_ssize_t n) noexcept nogil:
    """``out = G x``; returns ``x' G x``."""
    cdef Py_ssize_t i, j
    cdef double acc, quad = 0.0
    for i in range(n):
        acc = 0.0
        for j in range(n):
            acc += gm[i * n + j] * x[j]
        out[i] = acc
        quad += x[i] * acc
    return quad


def min_norm_pg(gram, double step, int max_iter, double tol):
    """Accelerated projected gradient with restart; see the numpy fallback."""
    cdef cnp.ndarray[cnp.float64_t, ndim=2] G = np.ascontiguousarray(gram, dtype=np.float64)
    cdef Py_ssize_t n = G.shape[0]
    cdef cnp.ndarray[cnp.float64_t, ndim=1] gamma = np.full(n, 1.0 / n)
    cdef double *buf = <double *> malloc(6 * n * sizeof(double))
    cdef double *grad
    cdef double *y
    cdef double *nxt
    cdef double *grad_nxt
    cdef double *trial
    cdef double *work
    cdef Py_ssize_t i
    cdef int it = 0
    cdef double f, f_nxt, gmin, t = 1.0, t_nxt, coef
    cdef double *g = &gamma[0]
    cdef double *gm = &G[0, 0]
    if buf == NULL:
        raise MemoryError()
    grad = buf
    y = buf + n
    nxt = buf + 2 * n
    grad_nxt = buf + 3 * n
    trial = buf + 4 * n
    work = buf + 5 * n
    with nogil:
        for i in range(n):
            y[i] = g[i]
        f = _matvec(gm, g, grad, n)
        while it < max_iter:
            gmin = grad[0]
            for i in range(1, n):
                if grad[i] < gmin:
                    gmin = grad[i]
            if f - gmin <= tol:
                break
            it += 1
            _matvec(gm, y, trial, n)
            for i in range(n):
                trial[i] = y[i] - step * trial[i]
            _project(trial, nxt, work, n)
            f_nxt = _matvec(gm, nxt, grad_nxt, n)
            if f_nxt > f and t > 1.0:
                t = 1.0
                for i in range(n):
                    y[i] = g[i]
                continue
            t_nxt = 0.5 * (1.0 + sqrt(1.0 + 4.0 * t * t))
            coef = (t - 1.0) / t_nxt
            for i in range(n):
                y[i] = nxt[i] + coef * (nxt[i] - g[i])
                g[i] = nxt[i]
                grad[i] = grad_nxt[i]
            f = f_nxt
            t = t_nxt
    free(buf)
    return gamma, it
