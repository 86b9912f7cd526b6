"""Pure-numpy reference implementations of the hot kernels.

These mirror ``_kernels.pyx`` operation by operation, so both backends
produce the same floating point results on the same inputs.
"""
from __future__ import annotations

import numpy as np

BACKEND = "python"


def _multilinear_real(table: np.ndarray, origin: float, h: float, pts: np.ndarray) -> np.ndarray:
    n = table.ndim
    s = (pts - origin) / h
    base = np.floor(s).astype(np.int64)
    shape = np.array(table.shape)
    base = np.clip(base, 0, shape - 2)
    frac = s - base
    out = np.zeros(pts.shape[0])
    for corner in range(1 << n):
        w = np.ones(pts.shape[0])
        idx = []
        for d in range(n):
            bit = (corner >> d) & 1
            w = w * (frac[:, d] if bit else 1.0 - frac[:, d])
            idx.append(base[:, d] + bit)
        out = out + w * table[tuple(idx)]
    return out


def multilinear(table: np.ndarray, origin: float, h: float, pts: np.ndarray) -> np.ndarray:
    """Multilinear interpolation of a gridded table.

    Parameters
    ----------
    table
        Values on nodes ``origin + h * i`` along every axis (real or complex).
    origin, h
        Coordinate of node 0 and the spacing.
    pts
        Query points, shape ``(k, n)``.  Points outside the table are
        extrapolated from the nearest cell.
    """
    pts = np.ascontiguousarray(np.atleast_2d(pts), dtype=float)
    if np.iscomplexobj(table):
        return _multilinear_real(np.ascontiguousarray(table.real), origin, h, pts) + 1j * _multilinear_real(
            np.ascontiguousarray(table.imag), origin, h, pts
        )
    return _multilinear_real(np.asarray(table, dtype=float), origin, h, pts)


def walk_chunk(pos, acc, alive, tau, hit, hit_t, incr, expo, dt, t0, qtab, origin, h, a, center, radius,
               stop_on_hit=False):
    """Advance Brownian paths by ``incr.shape[1]`` Euler steps (in place).

    The generator is ``Delta``, so a step is ``sqrt(2 dt)`` times a standard
    normal vector.  A path that leaves ``[-a, a]^n`` during a step is stopped
    at the linear interpolation of the crossing; its potential integral then
    receives only the fraction of the step spent inside.

    A path whose endpoints both lie inside may still have left the cube in
    between.  For the face of axis ``d`` nearer to the chord, the Brownian
    bridge crosses with probability ``exp(-d0 d1 / dt)``, where ``d0, d1``
    are the endpoint distances to that face.  The test uses the standard
    exponential variates ``expo`` (same shape as ``incr``): a crossing occurs
    when ``expo > d0 d1 / dt``.  The path is then stopped on that face at the
    end of the step.

    ``hit`` records the first step whose chord crosses the sphere
    ``|x - center| = radius``; the crossing time is interpolated linearly in
    the signed radial distance.  With ``stop_on_hit`` a path is also stopped
    at that crossing.

    Returns
    -------
    int
        Number of paths still alive after the chunk.
    """
    P, S, n = incr.shape
    sig = np.sqrt(2.0 * dt)
    idx = np.flatnonzero(alive)
    for s in range(S):
        if idx.size == 0:
            break
        x = pos[idx]
        qv = _multilinear_real(qtab, origin, h, x)
        new = x + sig * incr[idx, s, :]
        out = np.any(np.abs(new) >= a, axis=1)
        lam = np.ones(idx.size)
        if np.any(out):
            d = new[out] - x[out]
            with np.errstate(divide="ignore", invalid="ignore"):
                lp = np.where(new[out] >= a, (a - x[out]) / d, np.inf)
                lm = np.where(new[out] <= -a, (-a - x[out]) / d, np.inf)
            lam_o = np.minimum(np.min(lp, axis=1), np.min(lm, axis=1))
            lam[out] = lam_o
            new[out] = x[out] + lam_o[:, None] * d
        inside = ~out
        if np.any(inside):
            xi, ni, ei = x[inside], new[inside], expo[idx[inside], s, :]
            pp = (a - xi) * (a - ni)
            pm = (a + xi) * (a + ni)
            prod = np.minimum(pp, pm)
            crossed = ei * dt > prod
            bridged = np.any(crossed, axis=1)
            if np.any(bridged):
                rows = np.flatnonzero(bridged)
                axis = np.argmax(crossed[rows], axis=1)
                side = np.where(pp[rows, axis] <= pm[rows, axis], a, -a)
                ni[rows, axis] = side
                new[inside] = ni
                out = out.copy()
                out[np.flatnonzero(inside)[rows]] = True
        acc[idx] += qv * (lam * dt)
        r0 = np.sqrt(np.sum((x - center) ** 2, axis=1)) - radius
        r1 = np.sqrt(np.sum((new - center) ** 2, axis=1)) - radius
        cross = (r0 * r1 <= 0.0) & (hit[idx] == 0)
        with np.errstate(divide="ignore", invalid="ignore"):
            frac = r0[cross] / (r0[cross] - r1[cross])
        frac[~np.isfinite(frac)] = 0.0
        hit[idx[cross]] = 1
        hit_t[idx[cross]] = t0 + (s + frac) * dt
        pos[idx] = new
        if stop_on_hit:
            stop = out | cross
            tau[idx[cross]] = hit_t[idx[cross]]
            tau[idx[out & ~cross]] = t0 + (s + lam[out & ~cross]) * dt
        else:
            stop = out
            tau[idx[out]] = t0 + (s + lam[out]) * dt
        alive[idx[stop]] = 0
        idx = idx[~stop]
    return int(idx.size)
