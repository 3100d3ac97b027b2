"""Compiled periodic cubic B-spline evaluation.

Coefficient arrays are prefiltered (see ``fields.spline_coefficients``), so
evaluating the B-spline sum interpolates the original nodal samples.
Every output element depends only on its own inputs, so results are
bit-identical for any thread count.
"""

import numpy as np
from numba import njit, prange


@njit(inline="always")
def _weights(s, n):
    # n is a power of two, so masking is a periodic wrap (also for negatives)
    fi = np.floor(s)
    t = s - fi
    i = np.int64(fi)
    t2 = t * t
    t3 = t2 * t
    u = 1.0 - t
    w0 = u * u * u * (1.0 / 6.0)
    w1 = (3.0 * t3 - 6.0 * t2 + 4.0) * (1.0 / 6.0)
    w2 = (-3.0 * t3 + 3.0 * t2 + 3.0 * t + 1.0) * (1.0 / 6.0)
    w3 = t3 * (1.0 / 6.0)
    i0 = (i - 1) & (n - 1)
    return w0, w1, w2, w3, i0


@njit(parallel=True, cache=True)
def spline_eval_2d(coef, pts, inv_h, out):
    nb = pts.shape[0]
    npts = pts.shape[1]
    nc = coef.shape[1]
    n0 = coef.shape[2]
    n1 = coef.shape[3]
    shared = coef.shape[0] == 1
    for b in prange(nb):
        cb = np.int64(0) if shared else np.int64(b)
        wx = np.empty(4)
        wy = np.empty(4)
        ix = np.empty(4, np.int64)
        iy = np.empty(4, np.int64)
        for p in range(npts):
            a0, a1, a2, a3, j0 = _weights(pts[b, p, 0] * inv_h, n0)
            wx[0] = a0
            wx[1] = a1
            wx[2] = a2
            wx[3] = a3
            for q in range(4):
                ix[q] = (j0 + q) & (n0 - 1)
            a0, a1, a2, a3, j0 = _weights(pts[b, p, 1] * inv_h, n1)
            wy[0] = a0
            wy[1] = a1
            wy[2] = a2
            wy[3] = a3
            for q in range(4):
                iy[q] = (j0 + q) & (n1 - 1)
            for c in range(nc):
                acc = 0.0
                for q in range(4):
                    row = 0.0
                    for r in range(4):
                        row += wy[r] * coef[cb, c, ix[q], iy[r]]
                    acc += wx[q] * row
                out[b, c, p] = acc


@njit(parallel=True, cache=True)
def spline_eval_3d(coef, pts, inv_h, out):
    nb = pts.shape[0]
    npts = pts.shape[1]
    nc = coef.shape[1]
    n0 = coef.shape[2]
    n1 = coef.shape[3]
    n2 = coef.shape[4]
    shared = coef.shape[0] == 1
    for b in prange(nb):
        cb = np.int64(0) if shared else np.int64(b)
        wx = np.empty(4)
        wy = np.empty(4)
        wz = np.empty(4)
        ix = np.empty(4, np.int64)
        iy = np.empty(4, np.int64)
        iz = np.empty(4, np.int64)
        for p in range(npts):
            a0, a1, a2, a3, j0 = _weights(pts[b, p, 0] * inv_h, n0)
            wx[0] = a0
            wx[1] = a1
            wx[2] = a2
            wx[3] = a3
            for q in range(4):
                ix[q] = (j0 + q) & (n0 - 1)
            a0, a1, a2, a3, j0 = _weights(pts[b, p, 1] * inv_h, n1)
            wy[0] = a0
            wy[1] = a1
            wy[2] = a2
            wy[3] = a3
            for q in range(4):
                iy[q] = (j0 + q) & (n1 - 1)
            a0, a1, a2, a3, j0 = _weights(pts[b, p, 2] * inv_h, n2)
            wz[0] = a0
            wz[1] = a1
            wz[2] = a2
            wz[3] = a3
            for q in range(4):
                iz[q] = (j0 + q) & (n2 - 1)
            for c in range(nc):
                acc = 0.0
                for q in range(4):
                    plane = 0.0
                    for r in range(4):
                        row = 0.0
                        for s in range(4):
                            row += wz[s] * coef[cb, c, ix[q], iy[r], iz[s]]
                        plane += wy[r] * row
                    acc += wx[q] * plane
                out[b, c, p] = acc


@njit(parallel=True, cache=True, fastmath=True)
def spline_disp_2d(coef, disp, inv_h, out):
    """Evaluate at node + displacement; ``disp`` is ``(B, 2, n0, n1)``, ``out`` ``(B, C, n0, n1)``."""
    nb = disp.shape[0]
    nc = coef.shape[1]
    n0 = coef.shape[2]
    n1 = coef.shape[3]
    m0 = n0 - 1
    m1 = n1 - 1
    shared = coef.shape[0] == 1
    for b in prange(nb):
        cb = np.int64(0) if shared else np.int64(b)
        for p0 in range(n0):
            for p1 in range(n1):
                x0, x1, x2, x3, i = _weights(p0 + disp[b, 0, p0, p1] * inv_h, n0)
                y0, y1, y2, y3, j = _weights(p1 + disp[b, 1, p0, p1] * inv_h, n1)
                i1 = (i + 1) & m0
                i2 = (i + 2) & m0
                i3 = (i + 3) & m0
                j1 = (j + 1) & m1
                j2 = (j + 2) & m1
                j3 = (j + 3) & m1
                for c in range(nc):
                    cc = coef[cb, c]
                    r0 = y0 * cc[i, j] + y1 * cc[i, j1] + y2 * cc[i, j2] + y3 * cc[i, j3]
                    r1 = y0 * cc[i1, j] + y1 * cc[i1, j1] + y2 * cc[i1, j2] + y3 * cc[i1, j3]
                    r2 = y0 * cc[i2, j] + y1 * cc[i2, j1] + y2 * cc[i2, j2] + y3 * cc[i2, j3]
                    r3 = y0 * cc[i3, j] + y1 * cc[i3, j1] + y2 * cc[i3, j2] + y3 * cc[i3, j3]
                    out[b, c, p0, p1] = x0 * r0 + x1 * r1 + x2 * r2 + x3 * r3


@njit(inline="always")
def _row3(cc, i, j, k, k1, k2, k3, z0, z1, z2, z3):
    return z0 * cc[i, j, k] + z1 * cc[i, j, k1] + z2 * cc[i, j, k2] + z3 * cc[i, j, k3]


@njit(parallel=True, cache=True, fastmath=True)
def spline_disp_3d(coef, disp, inv_h, out):
    nb = disp.shape[0]
    nc = coef.shape[1]
    n0 = coef.shape[2]
    n1 = coef.shape[3]
    n2 = coef.shape[4]
    m0 = n0 - 1
    m1 = n1 - 1
    m2 = n2 - 1
    shared = coef.shape[0] == 1
    for b in prange(nb):
        cb = np.int64(0) if shared else np.int64(b)
        ii = np.empty(4, np.int64)
        jj = np.empty(4, np.int64)
        wx = np.empty(4)
        wy = np.empty(4)
        for p0 in range(n0):
            for p1 in range(n1):
                for p2 in range(n2):
                    wx[0], wx[1], wx[2], wx[3], i = _weights(p0 + disp[b, 0, p0, p1, p2] * inv_h, n0)
                    wy[0], wy[1], wy[2], wy[3], j = _weights(p1 + disp[b, 1, p0, p1, p2] * inv_h, n1)
                    z0, z1, z2, z3, k = _weights(p2 + disp[b, 2, p0, p1, p2] * inv_h, n2)
                    for q in range(4):
                        ii[q] = (i + q) & m0
                        jj[q] = (j + q) & m1
                    k1 = (k + 1) & m2
                    k2 = (k + 2) & m2
                    k3 = (k + 3) & m2
                    for c in range(nc):
                        cc = coef[cb, c]
                        acc = 0.0
                        for q in range(4):
                            iq = ii[q]
                            plane = (wy[0] * _row3(cc, iq, jj[0], k, k1, k2, k3, z0, z1, z2, z3)
                                     + wy[1] * _row3(cc, iq, jj[1], k, k1, k2, k3, z0, z1, z2, z3)
                                     + wy[2] * _row3(cc, iq, jj[2], k, k1, k2, k3, z0, z1, z2, z3)
                                     + wy[3] * _row3(cc, iq, jj[3], k, k1, k2, k3, z0, z1, z2, z3))
                            acc += wx[q] * plane
                        out[b, c, p0, p1, p2] = acc
