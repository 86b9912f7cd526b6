# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels: multilinear table lookup and the Feynman-Kac path walk.

The arithmetic follows ``_kernels_py`` step by step so that the two
backends agree bit for bit on identical inputs.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport floor, sqrt, INFINITY

cnp.import_array()

BACKEND = "cython"


cdef inline double _interp(const double[::1] flat, const Py_ssize_t[::1] shape,
                           const Py_ssize_t[::1] strides, int n, const double* x,
                           double origin, double h) nogil:
    cdef Py_ssize_t base[8]
    cdef double frac[8]
    cdef double s, w, out = 0.0
    cdef Py_ssize_t b, off
    cdef int d, corner, bit
    for d in range(n):
        s = (x[d] - origin) / h
        b = <Py_ssize_t>floor(s)
        if b < 0:
            b = 0
        if b > shape[d] - 2:
            b = shape[d] - 2
        base[d] = b
        frac[d] = s - b
    for corner in range(1 << n):
        w = 1.0
        off = 0
        for d in range(n):
            bit = (corner >> d) & 1
            if bit:
                w = w * frac[d]
            else:
                w = w * (1.0 - frac[d])
            off += (base[d] + bit) * strides[d]
        out = out + w * flat[off]
    return out


def _multilinear_real(table, double origin, double h, pts):
    cdef cnp.ndarray[double, ndim=1] flat = np.ascontiguousarray(table, dtype=np.float64).ravel()
    cdef int n = table.ndim
    cdef Py_ssize_t[::1] shape = np.asarray(table.shape, dtype=np.intp)
    cdef Py_ssize_t[::1] strides = np.asarray([int(np.prod(table.shape[d + 1:])) for d in range(n)], dtype=np.intp)
    cdef double[:, ::1] P = np.ascontiguousarray(pts, dtype=np.float64)
    cdef Py_ssize_t k = P.shape[0], i
    out = np.empty(k)
    cdef double[::1] o = out
    cdef double[::1] fv = flat
    with nogil:
        for i in range(k):
            o[i] = _interp(fv, shape, strides, n, &P[i, 0], origin, h)
    return out


def multilinear(table, double origin, double h, pts):
    """Multilinear interpolation of a gridded table (see ``_kernels_py.multilinear``)."""
    pts = np.ascontiguousarray(np.atleast_2d(pts), dtype=np.float64)
    if np.iscomplexobj(table):
        return _multilinear_real(table.real, origin, h, pts) + 1j * _multilinear_real(table.imag, origin, h, pts)
    return _multilinear_real(table, origin, h, pts)


def walk_chunk(double[:, ::1] pos, double[::1] acc, unsigned char[::1] alive, double[::1] tau,
               unsigned char[::1] hit, double[::1] hit_t, const double[:, :, ::1] incr,
               const double[:, :, ::1] expo, double dt, double t0, qtab, double origin, double h, double a,
               center, double radius, bint stop_on_hit=False):
    """Advance Brownian paths by ``incr.shape[1]`` Euler steps (in place).

    Same contract as ``_kernels_py.walk_chunk``.
    """
    cdef Py_ssize_t P = incr.shape[0], S = incr.shape[1]
    cdef int n = incr.shape[2]
    cdef cnp.ndarray[double, ndim=1] flat = np.ascontiguousarray(qtab, dtype=np.float64).ravel()
    cdef double[::1] fv = flat
    cdef Py_ssize_t[::1] shape = np.asarray(qtab.shape, dtype=np.intp)
    cdef Py_ssize_t[::1] strides = np.asarray([int(np.prod(qtab.shape[d + 1:])) for d in range(n)], dtype=np.intp)
    cdef double[::1] c = np.ascontiguousarray(center, dtype=np.float64)
    cdef double sig = sqrt(2.0 * dt)
    cdef double x[8]
    cdef double nw[8]
    cdef double qv, lam, lp, lm, dd, r0, r1, t, frac, pp, pm, prod
    cdef int crossed
    cdef Py_ssize_t p, s
    cdef int d, out
    cdef Py_ssize_t remaining = 0
    with nogil:
        for p in range(P):
            if not alive[p]:
                continue
            for d in range(n):
                x[d] = pos[p, d]
            for s in range(S):
                qv = _interp(fv, shape, strides, n, x, origin, h)
                out = 0
                for d in range(n):
                    nw[d] = x[d] + sig * incr[p, s, d]
                    if nw[d] >= a or nw[d] <= -a:
                        out = 1
                lam = 1.0
                if out:
                    lp = INFINITY
                    lm = INFINITY
                    for d in range(n):
                        dd = nw[d] - x[d]
                        if nw[d] >= a:
                            t = (a - x[d]) / dd
                            if t < lp:
                                lp = t
                        if nw[d] <= -a:
                            t = (-a - x[d]) / dd
                            if t < lm:
                                lm = t
                    lam = lp if lp < lm else lm
                    for d in range(n):
                        nw[d] = x[d] + lam * (nw[d] - x[d])
                else:
                    for d in range(n):
                        pp = (a - x[d]) * (a - nw[d])
                        pm = (a + x[d]) * (a + nw[d])
                        prod = pm if pm < pp else pp
                        if expo[p, s, d] * dt > prod:
                            nw[d] = a if pp <= pm else -a
                            out = 1
                            break
                acc[p] += qv * (lam * dt)
                r0 = 0.0
                r1 = 0.0
                for d in range(n):
                    r0 = r0 + (x[d] - c[d]) * (x[d] - c[d])
                    r1 = r1 + (nw[d] - c[d]) * (nw[d] - c[d])
                r0 = sqrt(r0) - radius
                r1 = sqrt(r1) - radius
                crossed = 0
                if r0 * r1 <= 0.0 and hit[p] == 0:
                    crossed = 1
                    frac = r0 / (r0 - r1)
                    if not (frac == frac) or frac == INFINITY or frac == -INFINITY:
                        frac = 0.0
                    hit[p] = 1
                    hit_t[p] = t0 + (s + frac) * dt
                for d in range(n):
                    x[d] = nw[d]
                if stop_on_hit and crossed:
                    tau[p] = hit_t[p]
                    alive[p] = 0
                    break
                if out:
                    tau[p] = t0 + (s + lam) * dt
                    alive[p] = 0
                    break
            for d in range(n):
                pos[p, d] = x[d]
            if alive[p]:
                remaining += 1
    return remaining
