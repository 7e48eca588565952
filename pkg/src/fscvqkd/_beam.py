"""Vectorised elliptic-beam aperture transmissivity (numpy backend).

Same call signature as the compiled ``_beam_ext`` module; see
:mod:`fscvqkd.kernels` for backend selection.
"""
import numpy as np
from scipy.special import i0e, i1e

# below this value of a^2 zeta^2 the shape/scale functions use power series
SERIES_CUTOFF = 2.0
SERIES_TERMS = 80


def lambertw_exp(u):
    """Principal-branch Lambert W of ``exp(u)``, i.e. the root of ``w + ln w = u``."""
    u = np.asarray(u, dtype=float)
    x = np.exp(np.minimum(u, 700.0))
    lx = np.log1p(x)
    small = lx * (1 - np.log1p(lx) / (2 + lx))
    w = np.where(u > 1.0, u - np.log(np.maximum(u, 1.0)), small)
    w = np.maximum(w, 1e-300)
    for _ in range(60):
        step = w * (w + np.log(w) - u) / (w + 1)
        w = w - step
        if np.all(np.abs(step) <= 1e-15 * w):
            break
    return w


def _series_parts(x):
    """``1 - exp(-x) I0(x)`` and ``2 (1 - exp(-x/2)) - (1 - exp(-x) I0(x))`` by power series.

    Both differences cancel badly in closed form for small ``x``.
    """
    a = np.zeros_like(x)
    d = np.zeros_like(x)
    poch = fact = 1.0
    p2 = np.ones_like(x)
    pm = np.ones_like(x)
    for k in range(1, SERIES_TERMS):
        poch *= k - 0.5
        fact *= k
        p2 = p2 * (-2 * x)
        pm = pm * (-x / 2)
        ak = -poch * p2 / (fact * fact)
        bk = -2 * pm / fact
        a = a + ak
        d = d + (bk - ak)
        if k > 8 and np.all(np.abs(ak) <= 1e-17 * np.abs(a)) and np.all(
            np.abs(bk - ak) <= 1e-17 * np.abs(d)
        ):
            break
    return a, d


def shape_log(x):
    """Return ``(lambda, lg)`` with ``R = lg**(-1/lambda)``, as functions of ``x = a^2 zeta^2``."""
    x = np.asarray(x, dtype=float)
    small = x < SERIES_CUTOFF
    xs = np.where(small, x, SERIES_CUTOFF)
    xl = np.where(small, SERIES_CUTOFF, x)
    with np.errstate(divide="ignore", invalid="ignore"):
        a_s, d_s = _series_parts(xs)
        lg_s = np.log1p(d_s / a_s)
        a_l = 1 - i0e(xl)
        lg_l = np.log(2 * -np.expm1(-xl / 2)) - np.log(a_l)
        denom = np.where(small, a_s, a_l)
        lg = np.where(small, lg_s, lg_l)
        lam = 2 * x * i1e(x) / denom / lg
    zero = x <= 0
    return np.where(zero, 2.0, lam), np.where(zero, 0.0, lg)


def aperture_transmissivity(x0, y0, theta1, theta2, phi, w0, a):
    """Transmissivity of an elliptic Gaussian beam through a circular aperture.

    Parameters
    ----------
    x0, y0 : array_like
        Beam-centroid position (m).
    theta1, theta2 : array_like
        Log squared semi-axes, ``W_j**2 = w0**2 * exp(theta_j)``.
    phi : array_like
        Ellipse orientation relative to the centroid direction.
    w0, a : float
        Initial beam-spot radius and aperture radius (m).
    """
    x0, y0, t1, t2, phi = np.broadcast_arrays(
        *(np.asarray(v, dtype=float) for v in (x0, y0, theta1, theta2, phi))
    )
    a2 = a * a
    w1 = w0 * np.exp(t1 / 2)
    w2 = w0 * np.exp(t2 / 2)
    r0 = np.hypot(x0, y0)
    inv1, inv2 = 1 / (w1 * w1), 1 / (w2 * w2)

    with np.errstate(over="ignore", divide="ignore", invalid="ignore"):
        # centred-beam transmissivity
        xd = np.abs(a2 * (inv1 - inv2))
        term1 = i0e(xd) * np.exp(-2 * a2 * np.minimum(inv1, inv2))
        zeta = 1 / w1 - 1 / w2
        xz = a2 * zeta * zeta
        lam_z, lg_z = shape_log(xz)
        q = (w1 + w2) / np.abs(w1 - w2)
        expo = np.exp(lam_z * np.log(q) + np.log(lg_z))
        term2 = np.where(xz > 0, 2 * -np.expm1(-xz / 2) * np.exp(-expo), 0.0)
        eta0 = 1 - term1 - term2

        # beam wandering
        u = (np.log(4 * a2 / (w1 * w2)) + a2 * inv1 * (1 + 2 * np.cos(phi) ** 2)
             + a2 * inv2 * (1 + 2 * np.sin(phi) ** 2))
        xw = lambertw_exp(u)
        lam_w, lg_w = shape_log(xw)
        decay = np.where(r0 > 0, np.exp(lam_w * np.log(r0 / a) + np.log(lg_w)), 0.0)
        eta = eta0 * np.exp(-decay)
    return np.clip(eta, 0.0, 1.0)
