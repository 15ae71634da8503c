"""Euler-Maruyama stepping kernels.

Three entry points share one stepping convention:

- ``em1d_blocked``: fixed step count, paths processed in blocks of 16 so the
  per-path update chains interleave in the pipeline; used for large
  one-dimensional ensembles.
- ``em1d_scalar``: per-path loop with optional stop-when-the-clock-crosses-
  a-target semantics (records the crossing state).
- ``emnd_scalar``: the same for 2 or 3 dimensions with multilinear lookups.

Noise is addressed by (seed, path, step): in one dimension step ``s``
consumes lane ``s & 1`` of the normal pair of block ``s >> 1``; in ``d``
dimensions step ``s`` consumes lanes of blocks ``s * ((d+1)//2) + j``.
All kernels run strict IEEE arithmetic (no fastmath) so results are
reproducible across thread counts and match the numpy twin generator
bit-for-bit.

Positions are unwrapped (real line / R^d); field lookups wrap into the
torus.  Lookups use the form ``left + frac * (right - left)`` so constant
grids interpolate exactly.  The clock accumulates in units of ``dt`` (the
trapezoid adds ``0.5 * (g_prev + g_now)`` per step), which keeps the
zero-potential clock exactly equal to the step count.
"""

from __future__ import annotations

import numpy as np
from numba import njit, prange

from .philox import normal_pair

BLOCK = 16

__all__ = ["BLOCK", "em1d_blocked", "em1d_scalar", "emnd_scalar"]


@njit(inline="always", cache=True)
def _interp1(grid, n, x):
    """Periodic linear interpolation at unwrapped position x (cell centers)."""
    xm = x - np.floor(x)
    u = xm * n - 0.5
    i0 = int(u)
    frac = u - i0
    if u < 0.0:
        i0 = n - 1
        frac = u + 1.0
    i1 = i0 + 1
    if i1 == n:
        i1 = 0
    left = grid[i0]
    return left + frac * (grid[i1] - left)


@njit(inline="always", cache=True)
def _nearest1(grid, n, x):
    xm = x - np.floor(x)
    i = int(xm * n)
    if i == n:
        i = 0
    return grid[i]


@njit(parallel=True, cache=True)
def em1d_blocked(
    x,
    a_sc,
    gprev,
    supsq,
    k0,
    k1,
    path0,
    step0,
    n_steps,
    dt,
    n,
    drift,
    gclock,
    fsup,
    a_target_sc,
    rec_stride,
    rec_x,
    rec_a,
    nearest,
):
    """Advance all paths n_steps; see module docstring for conventions."""
    num_paths = x.shape[0]
    nblocks = (num_paths + BLOCK - 1) // BLOCK
    sqdt = np.sqrt(dt)
    fn = np.float64(n)
    track_clock = gclock.size > 0
    nsup = fsup.shape[0]
    for blk in prange(nblocks):
        base = blk * BLOCK
        m = min(BLOCK, num_paths - base)
        xb = np.empty(BLOCK)
        ab = np.empty(BLOCK)
        gb = np.empty(BLOCK)
        sb = np.empty(BLOCK)
        za = np.empty(BLOCK)
        zb = np.empty(BLOCK)
        for q in range(m):
            xb[q] = x[base + q]
            ab[q] = a_sc[base + q]
            gb[q] = gprev[base + q]
            sb[q] = supsq[base + q]
        for s in range(n_steps):
            gstep = step0 + s
            if gstep & 1 == 0:
                bidx = np.uint64(gstep >> 1)
                for q in range(m):
                    z0, z1 = normal_pair(k0, k1, np.uint64(path0 + base + q), bidx)
                    za[q] = z0
                    zb[q] = z1
                zz = za
            else:
                zz = zb
            if nearest:
                for q in range(m):
                    g = _nearest1(drift, n, xb[q])
                    xb[q] = xb[q] - 0.5 * g * dt + sqdt * zz[q]
            else:
                for q in range(m):
                    xq = xb[q]
                    xm = xq - np.floor(xq)
                    u = xm * fn - 0.5
                    i0 = int(u)
                    frac = u - i0
                    if u < 0.0:
                        i0 = n - 1
                        frac = u + 1.0
                    i1 = i0 + 1
                    if i1 == n:
                        i1 = 0
                    left = drift[i0]
                    g = left + frac * (drift[i1] - left)
                    xb[q] = xq - 0.5 * g * dt + sqdt * zz[q]
            if track_clock:
                for q in range(m):
                    if nearest:
                        gnow = _nearest1(gclock, n, xb[q])
                    else:
                        gnow = _interp1(gclock, n, xb[q])
                    ab[q] = ab[q] + 0.5 * (gb[q] + gnow)
                    gb[q] = gnow
            if nsup > 0:
                for q in range(m):
                    acc = 0.0
                    for c in range(nsup):
                        val = _interp1(fsup[c], n, xb[q])
                        acc += val * val
                    if a_target_sc <= 0.0 or ab[q] <= a_target_sc:
                        if acc > sb[q]:
                            sb[q] = acc
            if rec_stride > 0 and (gstep + 1) % rec_stride == 0:
                slot = (gstep + 1) // rec_stride - 1
                for q in range(m):
                    rec_x[base + q, slot] = xb[q]
                    rec_a[base + q, slot] = ab[q]
        for q in range(m):
            x[base + q] = xb[q]
            a_sc[base + q] = ab[q]
            gprev[base + q] = gb[q]
            supsq[base + q] = sb[q]


@njit(parallel=True, cache=True)
def em1d_scalar(
    x,
    a_sc,
    gprev,
    supsq,
    steps_done,
    k0,
    k1,
    path0,
    step0,
    max_steps,
    dt,
    n,
    drift,
    gclock,
    fsup,
    a_target_sc,
    rec_stride,
    rec_x,
    rec_a,
    nearest,
):
    """Per-path loop; stops early once the clock crosses a_target_sc (> 0)."""
    num_paths = x.shape[0]
    sqdt = np.sqrt(dt)
    track_clock = gclock.size > 0
    nsup = fsup.shape[0]
    for p in prange(num_paths):
        xq = x[p]
        aq = a_sc[p]
        gq = gprev[p]
        sq = supsq[p]
        s = 0
        z1 = 0.0
        while s < max_steps:
            if a_target_sc > 0.0 and aq >= a_target_sc:
                break
            gstep = step0 + s
            if gstep & 1 == 0:
                z, z1 = normal_pair(k0, k1, np.uint64(path0 + p), np.uint64(gstep >> 1))
            else:
                z = z1
            if nearest:
                g = _nearest1(drift, n, xq)
            else:
                g = _interp1(drift, n, xq)
            xq = xq - 0.5 * g * dt + sqdt * z
            if track_clock:
                if nearest:
                    gnow = _nearest1(gclock, n, xq)
                else:
                    gnow = _interp1(gclock, n, xq)
                aq = aq + 0.5 * (gq + gnow)
                gq = gnow
            if nsup > 0:
                acc = 0.0
                for c in range(nsup):
                    val = _interp1(fsup[c], n, xq)
                    acc += val * val
                if a_target_sc <= 0.0 or aq <= a_target_sc:
                    if acc > sq:
                        sq = acc
            s += 1
            if rec_stride > 0 and gstep % rec_stride == rec_stride - 1:
                slot = (gstep + 1) // rec_stride - 1
                rec_x[p, slot] = xq
                rec_a[p, slot] = aq
        x[p] = xq
        a_sc[p] = aq
        gprev[p] = gq
        supsq[p] = sq
        steps_done[p] = s


@njit(parallel=True, cache=True)
def emnd_scalar(
    x,
    a_sc,
    gprev,
    supsq,
    steps_done,
    k0,
    k1,
    path0,
    step0,
    max_steps,
    dt,
    n,
    dim,
    drift,
    gclock,
    fsup,
    a_target_sc,
    rec_stride,
    rec_x,
    rec_a,
    nearest,
):
    """d-dimensional variant (d = 2 or 3); drift has shape (d, n**d)."""
    num_paths = x.shape[0]
    sqdt = np.sqrt(dt)
    fn = np.float64(n)
    track_clock = gclock.size > 0
    nsup = fsup.shape[0]
    bps = (dim + 1) // 2  # normal-pair blocks consumed per step
    for p in prange(num_paths):
        xq = np.empty(3)
        zq = np.empty(4)
        i0 = np.empty(3, dtype=np.int64)
        fr = np.empty(3)
        for a in range(dim):
            xq[a] = x[p, a]
        aq = a_sc[p]
        gq = gprev[p]
        sq = supsq[p]
        s = 0
        while s < max_steps:
            if a_target_sc > 0.0 and aq >= a_target_sc:
                break
            gstep = step0 + s
            for j in range(bps):
                z0, z1 = normal_pair(
                    k0, k1, np.uint64(path0 + p), np.uint64(gstep * bps + j)
                )
                zq[2 * j] = z0
                zq[2 * j + 1] = z1
            # cell-and-fraction decomposition shared by all lookups this step
            for a in range(dim):
                xm = xq[a] - np.floor(xq[a])
                u = xm * fn - 0.5
                ia = int(u)
                f = u - ia
                if u < 0.0:
                    ia = n - 1
                    f = u + 1.0
                i0[a] = ia
                fr[a] = f
            if nearest:
                for a in range(dim):
                    xm = xq[a] - np.floor(xq[a])
                    ia = int(xm * fn)
                    if ia == n:
                        ia = 0
                    i0[a] = ia
                    fr[a] = 0.0
            ncorners = 1 << dim
            for a in range(dim):
                gval = 0.0
                for corner in range(ncorners):
                    widx = 0
                    wgt = 1.0
                    for b in range(dim):
                        ib = i0[b]
                        fb = fr[b]
                        if (corner >> b) & 1 == 1:
                            ib += 1
                            if ib == n:
                                ib = 0
                            wgt *= fb
                        else:
                            wgt *= 1.0 - fb
                        widx = widx * n + ib
                    gval += wgt * drift[a, widx]
                xq[a] = xq[a] - 0.5 * gval * dt + sqdt * zq[a]
            # refresh decomposition at the new position for clock/sup lookups
            if track_clock or nsup > 0:
                for a in range(dim):
                    xm = xq[a] - np.floor(xq[a])
                    u = xm * fn - 0.5
                    ia = int(u)
                    f = u - ia
                    if u < 0.0:
                        ia = n - 1
                        f = u + 1.0
                    i0[a] = ia
                    fr[a] = f
            if track_clock:
                gnow = 0.0
                for corner in range(ncorners):
                    widx = 0
                    wgt = 1.0
                    for b in range(dim):
                        ib = i0[b]
                        fb = fr[b]
                        if (corner >> b) & 1 == 1:
                            ib += 1
                            if ib == n:
                                ib = 0
                            wgt *= fb
                        else:
                            wgt *= 1.0 - fb
                        widx = widx * n + ib
                    gnow += wgt * gclock[widx]
                aq = aq + 0.5 * (gq + gnow)
                gq = gnow
            if nsup > 0:
                acc = 0.0
                for c in range(nsup):
                    val = 0.0
                    for corner in range(ncorners):
                        widx = 0
                        wgt = 1.0
                        for b in range(dim):
                            ib = i0[b]
                            fb = fr[b]
                            if (corner >> b) & 1 == 1:
                                ib += 1
                                if ib == n:
                                    ib = 0
                                wgt *= fb
                            else:
                                wgt *= 1.0 - fb
                            widx = widx * n + ib
                        val += wgt * fsup[c, widx]
                    acc += val * val
                if a_target_sc <= 0.0 or aq <= a_target_sc:
                    if acc > sq:
                        sq = acc
            s += 1
            if rec_stride > 0 and gstep % rec_stride == rec_stride - 1:
                slot = (gstep + 1) // rec_stride - 1
                for a in range(dim):
                    rec_x[p, slot, a] = xq[a]
                rec_a[p, slot] = aq
        for a in range(dim):
            x[p, a] = xq[a]
        a_sc[p] = aq
        gprev[p] = gq
        supsq[p] = sq
        steps_done[p] = s
