# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled elliptic-beam aperture transmissivity.

Per-sample loop mirroring :mod:`fscvqkd._beam`; the two must agree to
round-off.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log, log1p, expm1, sqrt, cos, sin, fabs, hypot, fmin
from scipy.special.cython_special cimport i0e, i1e

cnp.import_array()

cdef double SERIES_CUTOFF = 2.0
cdef int SERIES_TERMS = 80


cdef double lambertw_exp(double u) nogil:
    cdef double x, lx, w, step
    cdef int it
    if u > 1.0:
        w = u - log(u)
    else:
        x = exp(u)
        lx = log1p(x)
        w = lx * (1 - log1p(lx) / (2 + lx))
    if w < 1e-300:
        w = 1e-300
    for it in range(60):
        step = w * (w + log(w) - u) / (w + 1)
        w -= step
        if fabs(step) <= 1e-15 * w:
            break
    return w


cdef void shape_log(double x, double* lam, double* lg) nogil:
    cdef double a = 0, d = 0, ak = 1, bk = 1, r
    cdef int k
    if x <= 0:
        lam[0] = 2.0
        lg[0] = 0.0
        return
    if x < SERIES_CUTOFF:
        # same terms as the numpy series, advanced by their ratios
        ak = -1.0
        bk = -2.0
        for k in range(1, SERIES_TERMS):
            r = 1.0 / k
            ak *= (k - 0.5) * (-2 * x) * r * r
            bk *= (-x / 2) * r
            a += ak
            d += bk - ak
            if k > 8 and fabs(ak) <= 1e-17 * fabs(a) and fabs(bk - ak) <= 1e-17 * fabs(d):
                break
        lg[0] = log1p(d / a)
    else:
        a = 1 - i0e(x)
        lg[0] = log(2 * -expm1(-x / 2)) - log(a)
    lam[0] = 2 * x * i1e(x) / a / lg[0]


cdef double transmissivity(double x0, double y0, double t1, double t2, double phi,
                           double w0, double a) nogil:
    cdef double a2 = a * a
    cdef double w1 = w0 * exp(t1 / 2)
    cdef double w2 = w0 * exp(t2 / 2)
    cdef double r0 = hypot(x0, y0)
    cdef double inv1 = 1 / (w1 * w1)
    cdef double inv2 = 1 / (w2 * w2)
    cdef double xd, term1, zeta, xz, lam, lg, q, term2, eta0, u, xw, decay, c, s, eta

    xd = fabs(a2 * (inv1 - inv2))
    term1 = i0e(xd) * exp(-2 * a2 * fmin(inv1, inv2))
    zeta = 1 / w1 - 1 / w2
    xz = a2 * zeta * zeta
    term2 = 0.0
    if xz > 0:
        shape_log(xz, &lam, &lg)
        q = (w1 + w2) / fabs(w1 - w2)
        term2 = 2 * -expm1(-xz / 2) * exp(-exp(lam * log(q) + log(lg)))
    eta0 = 1 - term1 - term2

    c = cos(phi)
    s = sin(phi)
    u = log(4 * a2 / (w1 * w2)) + a2 * inv1 * (1 + 2 * c * c) + a2 * inv2 * (1 + 2 * s * s)
    xw = lambertw_exp(u)
    decay = 0.0
    if r0 > 0:
        shape_log(xw, &lam, &lg)
        decay = exp(lam * log(r0 / a) + log(lg))
    eta = eta0 * exp(-decay)
    if eta < 0:
        return 0.0
    if eta > 1:
        return 1.0
    return eta


def aperture_transmissivity(x0, y0, theta1, theta2, phi, double w0, double a):
    b = np.broadcast_arrays(*(np.asarray(v, dtype=np.float64) for v in (x0, y0, theta1, theta2, phi)))
    shape = b[0].shape
    cdef double[::1] vx = np.ascontiguousarray(b[0]).ravel()
    cdef double[::1] vy = np.ascontiguousarray(b[1]).ravel()
    cdef double[::1] v1 = np.ascontiguousarray(b[2]).ravel()
    cdef double[::1] v2 = np.ascontiguousarray(b[3]).ravel()
    cdef double[::1] vp = np.ascontiguousarray(b[4]).ravel()
    cdef Py_ssize_t n = vx.shape[0]
    out = np.empty(n, dtype=np.float64)
    cdef double[::1] vo = out
    cdef Py_ssize_t i
    with nogil:
        for i in range(n):
            vo[i] = transmissivity(vx[i], vy[i], v1[i], v2[i], vp[i], w0, a)
    return out.reshape(shape)
