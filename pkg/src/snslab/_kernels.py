"""Hot pointwise/pairwise kernels.

Each kernel has a numba ``@njit`` version and a pure-numpy version with the
same signature. The numba path is used unless ``SNSLAB_NO_NUMBA`` is set to a
truthy value, or numba cannot be imported. Both paths are importable directly
(``*_numba`` / ``*_numpy``) so they can be benchmarked and cross-checked.
"""

import os

import numpy as np

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    HAVE_NUMBA = False

_DISABLED = os.environ.get("SNSLAB_NO_NUMBA", "").strip().lower() not in ("", "0", "false", "no")
USE_NUMBA = HAVE_NUMBA and not _DISABLED

# g2 catalog codes shared by both paths
G2_ZERO = 0
G2_SCALED_IDENTITY = 1
G2_SATURATING = 2


# --------------------------------------------------------------------------
# advection: a1*b1 + a2*b2 on the collocation grid
# --------------------------------------------------------------------------

def advect_product_numpy(u1, u2, g1, g2):
    return u1 * g1 + u2 * g2


def _advect_product_loop(u1, u2, g1, g2):
    a = u1.ravel()
    b = u2.ravel()
    c = g1.ravel()
    d = g2.ravel()
    out = np.empty(a.size)
    for i in range(a.size):
        out[i] = a[i] * c[i] + b[i] * d[i]
    return out.reshape(u1.shape)


# --------------------------------------------------------------------------
# Nemytski map: out_i = (g1_i(x) + g2_i(u(x))) * phi_i(x)
# --------------------------------------------------------------------------

def nemytski_numpy(u1, u2, phi1, phi2, g1a, g1b, kind, kappa, m):
    if kind == G2_ZERO:
        return g1a * phi1, g1b * phi2
    if kind == G2_SCALED_IDENTITY:
        return (g1a + kappa * u1) * phi1, (g1b + kappa * u2) * phi2
    scale = kappa / (1.0 + (u1 * u1 + u2 * u2) / (m * m))
    return (g1a + scale * u1) * phi1, (g1b + scale * u2) * phi2


def _nemytski_loop(u1, u2, phi1, phi2, g1a, g1b, kind, kappa, m):
    # u*, phi* share a shape; g1a/g1b are grid-shaped and broadcast over the
    # leading (batch) axes
    shape = phi1.shape
    npts = g1a.size
    a = u1.ravel()
    b = u2.ravel()
    p = phi1.ravel()
    q = phi2.ravel()
    ga = g1a.ravel()
    gb = g1b.ravel()
    o1 = np.empty(p.size)
    o2 = np.empty(p.size)
    inv_m2 = 1.0 / (m * m) if m != 0.0 else 0.0
    for i in range(p.size):
        j = i % npts
        if kind == 0:
            s1 = ga[j]
            s2 = gb[j]
        elif kind == 1:
            s1 = ga[j] + kappa * a[i]
            s2 = gb[j] + kappa * b[i]
        else:
            sc = kappa / (1.0 + (a[i] * a[i] + b[i] * b[i]) * inv_m2)
            s1 = ga[j] + sc * a[i]
            s2 = gb[j] + sc * b[i]
        o1[i] = s1 * p[i]
        o2[i] = s2 * q[i]
    return o1.reshape(shape), o2.reshape(shape)


# --------------------------------------------------------------------------
# fractional time seminorm: sum_{t != s} w_t w_s |u_t - u_s|^p / |t - s|^(1 + alpha p)
# from a Gram matrix of the trajectory
# --------------------------------------------------------------------------

def time_seminorm_numpy(gram, times, weights, alpha, p):
    diag = np.diag(gram)
    d2 = np.maximum(diag[:, None] + diag[None, :] - 2.0 * gram, 0.0)
    dt = np.abs(times[:, None] - times[None, :])
    np.fill_diagonal(dt, 1.0)
    vals = d2 ** (0.5 * p) / dt ** (1.0 + alpha * p)
    np.fill_diagonal(vals, 0.0)
    return float(weights @ vals @ weights)


def _time_seminorm_loop(gram, times, weights, alpha, p):
    # symmetric in (i, j): sum the upper triangle once
    n = times.size
    half_p = 0.5 * p
    expo = 1.0 + alpha * p
    total = 0.0
    for i in range(n):
        gii = gram[i, i]
        ti = times[i]
        acc = 0.0
        for j in range(i + 1, n):
            d2 = gii + gram[j, j] - 2.0 * gram[i, j]
            if d2 > 0.0:
                acc += weights[j] * np.exp(half_p * np.log(d2) - expo * np.log(abs(times[j] - ti)))
        total += weights[i] * acc
    return 2.0 * total


if HAVE_NUMBA:
    advect_product_numba = njit(cache=True)(_advect_product_loop)
    nemytski_numba = njit(cache=True)(_nemytski_loop)
    time_seminorm_numba = njit(cache=True)(_time_seminorm_loop)
else:  # pragma: no cover
    advect_product_numba = advect_product_numpy
    nemytski_numba = nemytski_numpy
    time_seminorm_numba = time_seminorm_numpy


def advect_product(u1, u2, g1, g2):
    if USE_NUMBA:
        return advect_product_numba(
            np.ascontiguousarray(u1), np.ascontiguousarray(u2),
            np.ascontiguousarray(g1), np.ascontiguousarray(g2),
        )
    return advect_product_numpy(u1, u2, g1, g2)


def nemytski(u1, u2, phi1, phi2, g1a, g1b, kind, kappa, m):
    if USE_NUMBA:
        shape = np.broadcast_shapes(u1.shape, phi1.shape)
        return nemytski_numba(
            np.ascontiguousarray(np.broadcast_to(u1, shape)),
            np.ascontiguousarray(np.broadcast_to(u2, shape)),
            np.ascontiguousarray(np.broadcast_to(phi1, shape)),
            np.ascontiguousarray(np.broadcast_to(phi2, shape)),
            np.ascontiguousarray(g1a, dtype=np.float64),
            np.ascontiguousarray(g1b, dtype=np.float64),
            int(kind), float(kappa), float(m),
        )
    return nemytski_numpy(u1, u2, phi1, phi2, g1a, g1b, kind, kappa, m)


def time_seminorm(gram, times, weights, alpha, p):
    gram = np.ascontiguousarray(gram, dtype=np.float64)
    times = np.ascontiguousarray(times, dtype=np.float64)
    weights = np.ascontiguousarray(weights, dtype=np.float64)
    if USE_NUMBA:
        return float(time_seminorm_numba(gram, times, weights, float(alpha), float(p)))
    return time_seminorm_numpy(gram, times, weights, alpha, p)
