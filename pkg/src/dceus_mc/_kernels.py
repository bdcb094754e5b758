"""Compiled inner loops. All kernels are sequential so reductions are deterministic."""
from __future__ import annotations

import numpy as np
from numba import njit

_JIT = dict(cache=True, nogil=True, fastmath=False)


@njit(**_JIT)
def _bspline3(u, w):
    """Cubic B-spline weights for the four knots around fractional offset ``u``."""
    v = 1.0 - u
    u2 = u * u
    u3 = u2 * u
    w[0] = v * v * v / 6.0
    w[1] = (3.0 * u3 - 6.0 * u2 + 4.0) / 6.0
    w[2] = (-3.0 * u3 + 3.0 * u2 + 3.0 * u + 1.0) / 6.0
    w[3] = u3 / 6.0


@njit(**_JIT)
def _bspline3_deriv(u, d):
    d[0] = -0.5 * (1.0 - u) * (1.0 - u)
    d[1] = 1.5 * u * u - 2.0 * u
    d[2] = -1.5 * u * u + u + 0.5
    d[3] = 0.5 * u * u


@njit(**_JIT)
def _clamp(i, n):
    if i < 0:
        return 0
    if i >= n:
        return n - 1
    return i


@njit(**_JIT)
def parzen_joint_histogram(rc, fc, bins):
    """Deposit (ref, flt) bin coordinates with separable cubic Parzen windows.

    ``rc`` and ``fc`` are continuous bin coordinates in ``[0, bins - 1]``;
    mass falling beyond either edge is folded into the edge bin.
    """
    hist = np.zeros((bins, bins))
    wr = np.empty(4)
    wf = np.empty(4)
    for k in range(rc.shape[0]):
        r0 = np.floor(rc[k])
        f0 = np.floor(fc[k])
        _bspline3(rc[k] - r0, wr)
        _bspline3(fc[k] - f0, wf)
        ri = int(r0) - 1
        fi = int(f0) - 1
        for a in range(4):
            ia = _clamp(ri + a, bins)
            for b in range(4):
                hist[ia, _clamp(fi + b, bins)] += wr[a] * wf[b]
    return hist


@njit(**_JIT)
def parzen_sample_gradient(rc, fc, dmat, bins):
    """Per-sample ``sum_ij dmat[i, j] * wr_i * dwf_j / dfc`` for every sample."""
    out = np.empty(rc.shape[0])
    wr = np.empty(4)
    df = np.empty(4)
    for k in range(rc.shape[0]):
        r0 = np.floor(rc[k])
        f0 = np.floor(fc[k])
        _bspline3(rc[k] - r0, wr)
        _bspline3_deriv(fc[k] - f0, df)
        ri = int(r0) - 1
        fi = int(f0) - 1
        acc = 0.0
        for a in range(4):
            ia = _clamp(ri + a, bins)
            for b in range(4):
                acc += dmat[ia, _clamp(fi + b, bins)] * wr[a] * df[b]
        out[k] = acc
    return out


@njit(**_JIT)
def trilinear_sample(vol, ci, cj, ck, want_grad):
    """Trilinear interpolation at voxel coordinates; samples outside ``[0, n-1]`` are invalid.

    Returns values, index-space gradient (n, 3) and a validity flag.
    """
    n = ci.shape[0]
    nx, ny, nz = vol.shape
    val = np.zeros(n)
    grad = np.zeros((n, 3)) if want_grad else np.zeros((1, 3))
    valid = np.zeros(n, dtype=np.bool_)
    for p in range(n):
        x = ci[p]
        y = cj[p]
        z = ck[p]
        if not (x >= 0.0 and y >= 0.0 and z >= 0.0 and x <= nx - 1 and y <= ny - 1 and z <= nz - 1):
            continue
        valid[p] = True
        i0 = min(int(x), nx - 2) if nx > 1 else 0
        j0 = min(int(y), ny - 2) if ny > 1 else 0
        k0 = min(int(z), nz - 2) if nz > 1 else 0
        i1 = min(i0 + 1, nx - 1)
        j1 = min(j0 + 1, ny - 1)
        k1 = min(k0 + 1, nz - 1)
        fx = x - i0
        fy = y - j0
        fz = z - k0
        c000 = vol[i0, j0, k0]
        c100 = vol[i1, j0, k0]
        c010 = vol[i0, j1, k0]
        c110 = vol[i1, j1, k0]
        c001 = vol[i0, j0, k1]
        c101 = vol[i1, j0, k1]
        c011 = vol[i0, j1, k1]
        c111 = vol[i1, j1, k1]
        c00 = c000 + fx * (c100 - c000)
        c10 = c010 + fx * (c110 - c010)
        c01 = c001 + fx * (c101 - c001)
        c11 = c011 + fx * (c111 - c011)
        c0 = c00 + fy * (c10 - c00)
        c1 = c01 + fy * (c11 - c01)
        val[p] = c0 + fz * (c1 - c0)
        if want_grad:
            dx00 = c100 - c000
            dx10 = c110 - c010
            dx01 = c101 - c001
            dx11 = c111 - c011
            dx0 = dx00 + fy * (dx10 - dx00)
            dx1 = dx01 + fy * (dx11 - dx01)
            grad[p, 0] = dx0 + fz * (dx1 - dx0)
            grad[p, 1] = (c10 - c00) + fz * ((c11 - c01) - (c10 - c00))
            grad[p, 2] = c1 - c0
    return val, grad, valid


@njit(**_JIT)
def block_match(src, dst, corners, block, radius):
    """Exhaustive integer search of each ``src`` block inside ``dst``.

    For every block (lower corner in ``corners``) find the integer shift
    within ``[-radius, radius]^3`` maximising NCC, then refine each axis
    with a three-point parabola through the NCC peak (skipped when the
    integer match is exact). Returns shifts
    (float), best scores and a flag that is False for skipped blocks
    (flat source block or no admissible candidate).
    """
    nb = corners.shape[0]
    nx, ny, nz = dst.shape
    side = 2 * radius + 1
    shifts = np.zeros((nb, 3))
    scores = np.full(nb, -2.0)
    ok = np.zeros(nb, dtype=np.bool_)
    m = block * block * block
    a = np.empty(m)
    bvals = np.empty(m)
    table = np.empty((side, side, side))
    for q in range(nb):
        ci = corners[q, 0]
        cj = corners[q, 1]
        ck = corners[q, 2]
        t = 0
        for i in range(block):
            for j in range(block):
                for k in range(block):
                    a[t] = src[ci + i, cj + j, ck + k]
                    t += 1
        am = a.mean()
        av = 0.0
        for t in range(m):
            a[t] -= am
            av += a[t] * a[t]
        if av <= 1e-12:
            continue
        best = -2.0
        bi = 0
        bj = 0
        bk = 0
        for di in range(-radius, radius + 1):
            for dj in range(-radius, radius + 1):
                for dk in range(-radius, radius + 1):
                    table[di + radius, dj + radius, dk + radius] = np.nan
                    oi = ci + di
                    oj = cj + dj
                    ok_ = ck + dk
                    if oi < 0 or oj < 0 or ok_ < 0 or oi + block > nx or oj + block > ny or ok_ + block > nz:
                        continue
                    t = 0
                    bm = 0.0
                    for i in range(block):
                        for j in range(block):
                            for k in range(block):
                                bvals[t] = dst[oi + i, oj + j, ok_ + k]
                                bm += bvals[t]
                                t += 1
                    bm /= m
                    bv = 0.0
                    cov = 0.0
                    for t in range(m):
                        d = bvals[t] - bm
                        bv += d * d
                        cov += a[t] * d
                    if bv <= 1e-12:
                        continue
                    s = cov / np.sqrt(av * bv)
                    table[di + radius, dj + radius, dk + radius] = s
                    if s > best:
                        best = s
                        bi = di
                        bj = dj
                        bk = dk
        if best <= -2.0:
            continue
        ok[q] = True
        scores[q] = best
        pi = bi + radius
        pj = bj + radius
        pk = bk + radius
        shifts[q, 0] = bi
        shifts[q, 1] = bj
        shifts[q, 2] = bk
        if best >= 1.0 - 1e-9:
            continue  # an exact match needs no sub-voxel correction
        shifts[q, 0] = bi + _parabola(table, pi, pj, pk, 0, side)
        shifts[q, 1] = bj + _parabola(table, pi, pj, pk, 1, side)
        shifts[q, 2] = bk + _parabola(table, pi, pj, pk, 2, side)
    return shifts, scores, ok


@njit(**_JIT)
def _parabola(table, pi, pj, pk, axis, side):
    p = (pi, pj, pk)[axis]
    if p == 0 or p == side - 1:
        return 0.0
    if axis == 0:
        lo = table[pi - 1, pj, pk]
        hi = table[pi + 1, pj, pk]
    elif axis == 1:
        lo = table[pi, pj - 1, pk]
        hi = table[pi, pj + 1, pk]
    else:
        lo = table[pi, pj, pk - 1]
        hi = table[pi, pj, pk + 1]
    c = table[pi, pj, pk]
    if np.isnan(lo) or np.isnan(hi):
        return 0.0
    den = lo - 2.0 * c + hi
    if den >= 0.0:
        return 0.0
    off = 0.5 * (lo - hi) / den
    if off > 0.5:
        return 0.5
    if off < -0.5:
        return -0.5
    return off


@njit(**_JIT)
def log_jacobian_sum(du, want_grad):
    """Sum of ``(log det(I + du))^2`` over samples of a flat ``(n, 3, 3)`` array.

    Returns ``(sum, grad, folded)``; ``grad[i] = 2 log det_i * cof_i / det_i``
    (the derivative of each summand w.r.t. ``du``), left empty unless asked.
    """
    n = du.shape[0]
    grad = np.zeros((n if want_grad else 0, 3, 3))
    total = 0.0
    for i in range(n):
        a = du[i, 0, 0] + 1.0
        b = du[i, 0, 1]
        c = du[i, 0, 2]
        d = du[i, 1, 0]
        e = du[i, 1, 1] + 1.0
        f = du[i, 1, 2]
        g = du[i, 2, 0]
        h = du[i, 2, 1]
        k = du[i, 2, 2] + 1.0
        c00 = e * k - f * h
        c01 = f * g - d * k
        c02 = d * h - e * g
        det = a * c00 + b * c01 + c * c02
        if not det > 0.0:
            return np.inf, grad, True
        ld = np.log(det)
        total += ld * ld
        if want_grad:
            s = 2.0 * ld / det
            grad[i, 0, 0] = s * c00
            grad[i, 0, 1] = s * c01
            grad[i, 0, 2] = s * c02
            grad[i, 1, 0] = s * (c * h - b * k)
            grad[i, 1, 1] = s * (a * k - c * g)
            grad[i, 1, 2] = s * (b * g - a * h)
            grad[i, 2, 0] = s * (b * f - c * e)
            grad[i, 2, 1] = s * (c * d - a * f)
            grad[i, 2, 2] = s * (a * e - b * d)
    return total, grad, False
