"""Pure-Python versions of the hot kernels.

Selected at import when the compiled ``_ckernels`` extension is missing (or
when ``EMSUBSPACE_PURE=1``).  The arithmetic mirrors ``_ckernels.pyx`` operation
for operation so both backends agree to round-off.
"""
import math

import numpy as np

# per-pixel status codes, shared with the compiled kernel
NOT_CONVERGED = 0
CONVERGED = 1
DEGENERATE = 2
SINGULAR = 3
REVERTED = 4

OLS, RLS, PCR1, PCR2 = 0, 1, 2, 3

_COND_LIMIT = 1e12
_GRAD_FLOOR = 1e-12


def jacobi_sweeps(a, v, max_sweeps, tol):
    """Cyclic Jacobi on the symmetric matrix ``a`` (overwritten in place).

    Rotations are accumulated into ``v``.  Returns the number of sweeps used,
    or -1 when ``max_sweeps`` ran out before the off-diagonal mass fell below
    ``tol * ||a||_F``.
    """
    n = a.shape[0]
    fro = math.sqrt(float(np.sum(a * a)))
    if fro == 0.0:
        return 0
    for sweep in range(max_sweeps + 1):
        off = 0.0
        for p in range(n - 1):
            row = a[p, p + 1:]
            off += float(np.dot(row, row))
        off = math.sqrt(2.0 * off)
        if off <= tol * fro:
            return sweep
        if sweep == max_sweeps:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if apq == 0.0:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                if abs(theta) > 1e150:
                    t = 0.5 / theta
                else:
                    t = 1.0 / (abs(theta) + math.sqrt(theta * theta + 1.0))
                    if theta < 0.0:
                        t = -t
                c = 1.0 / math.sqrt(t * t + 1.0)
                s = t * c
                colp = a[:, p].copy()
                colq = a[:, q].copy()
                a[:, p] = c * colp - s * colq
                a[:, q] = s * colp + c * colq
                rowp = a[p, :].copy()
                rowq = a[q, :].copy()
                a[p, :] = c * rowp - s * rowq
                a[q, :] = s * rowp + c * rowq
                a[p, q] = 0.0
                a[q, p] = 0.0
                colp = v[:, p].copy()
                colq = v[:, q].copy()
                v[:, p] = c * colp - s * colq
                v[:, q] = s * colp + c * colq
    return -1


def bilinear(img, w, h, x, y):
    """Clamp-to-edge bilinear value and gradient of a nested-list image."""
    if x < 0.0:
        x = 0.0
    elif x > w - 1:
        x = float(w - 1)
    if y < 0.0:
        y = 0.0
    elif y > h - 1:
        y = float(h - 1)
    x0 = int(math.floor(x))
    y0 = int(math.floor(y))
    if x0 > w - 2:
        x0 = w - 2
    if y0 > h - 2:
        y0 = h - 2
    tx = x - x0
    ty = y - y0
    r0 = img[y0]
    r1 = img[y0 + 1]
    f00 = r0[x0]
    f10 = r0[x0 + 1]
    f01 = r1[x0]
    f11 = r1[x0 + 1]
    value = (1.0 - ty) * ((1.0 - tx) * f00 + tx * f10) + ty * ((1.0 - tx) * f01 + tx * f11)
    gx = (1.0 - ty) * (f10 - f00) + ty * (f11 - f01)
    gy = (1.0 - tx) * (f01 - f00) + tx * (f11 - f10)
    return value, gx, gy


def eig2(a11, a12, a22):
    """Closed-form eigenpairs of [[a11, a12], [a12, a22]], largest first.

    The leading eigenvector is (c, s) with c >= 0.  Only +-*/ and sqrt are
    used so the compiled kernel reproduces the result bit for bit.
    """
    h = 0.5 * (a11 - a22)
    m = 0.5 * (a11 + a22)
    r = math.sqrt(h * h + a12 * a12)
    l1 = m + r
    l2 = m - r
    if l2 < 0.0:
        l2 = 0.0
    if a12 == 0.0:
        if h >= 0.0:
            return l1, l2, 1.0, 0.0
        return l1, l2, 0.0, 1.0
    if h >= 0.0:
        vx = h + r
        vy = a12
    else:
        vx = a12
        vy = r - h
    nv = math.sqrt(vx * vx + vy * vy)
    if vx < 0.0:
        nv = -nv
    return l1, l2, vx / nv, vy / nv


def solve2(a11, a12, a22, g1, g2, kind, lam, xi, keep, ratio):
    """Update vector for the 2-unknown normal equations.

    ``lam`` is a flat (l11, l12, l21, l22) tuple, ``xi`` a pair.  Returns
    ``None`` when the system is singular for the requested estimator.
    """
    if kind == OLS or kind == RLS:
        if kind == OLS:
            l1, l2, _, _ = eig2(a11, a12, a22)
            if l1 <= 0.0 or l2 <= 0.0 or l1 > _COND_LIMIT * l2:
                return None
            m11, m12, m21, m22 = a11, a12, a12, a22
        else:
            m11 = a11 + lam[0]
            m12 = a12 + lam[1]
            m21 = a12 + lam[2]
            m22 = a22 + lam[3]
        det = m11 * m22 - m12 * m21
        if det == 0.0:
            return None
        return (m22 * g1 - m12 * g2) / det, (m11 * g2 - m21 * g1) / det
    l1, l2, c, s = eig2(a11, a12, a22)
    t1 = c * g1 + s * g2
    t2 = -s * g1 + c * g2
    if kind == PCR1:
        if l1 <= 0.0:
            return None
        both = keep == 2 or (keep == 0 and l2 > ratio * l1)
        k1 = t1 / l1
        ux = c * k1
        uy = s * k1
        if both:
            if l2 <= 0.0:
                return None
            k2 = t2 / l2
            ux -= s * k2
            uy += c * k2
        return ux, uy
    d1 = l1 + xi[0]
    d2 = l2 + xi[1]
    if d1 <= 0.0 or d2 <= 0.0:
        return None
    k1 = t1 / d1
    k2 = t2 / d2
    return c * k1 - s * k2, s * k1 + c * k2


def _accumulate(P, C, w, h, offs, x, y, dx, dy):
    a11 = a12 = a22 = g1 = g2 = energy = 0.0
    count = 0
    strong = False
    for ox, oy in offs:
        rx = x + ox
        ry = y + oy
        if rx < 0 or rx >= w or ry < 0 or ry >= h:
            continue
        val, gx, gy = bilinear(P, w, h, rx - dx, ry - dy)
        z = val - C[ry][rx]
        a11 += gx * gx
        a12 += gx * gy
        a22 += gy * gy
        g1 += gx * z
        g2 += gy * z
        energy += z * z
        count += 1
        if gx * gx + gy * gy >= _GRAD_FLOOR * _GRAD_FLOOR:
            strong = True
    return a11, a12, a22, g1, g2, energy, count, strong


def estimate_rows(prev, cur, offsets, kind, lam, xi, keep, ratio,
                  max_iter, clamp, stop_tol, causal, safeguard, row0, row1,
                  d_out, iters, status):
    """Pel-recursive refinement for rows ``row0 <= y < row1`` (in place).

    With ``safeguard`` a pixel starts from zero when that beats the causal
    prediction, and keeps whichever visited estimate (start or iterate) has
    the lowest neighbourhood DFD energy.
    """
    h, w = prev.shape
    P = prev.tolist()
    C = cur.tolist()
    offs = [(int(o[0]), int(o[1])) for o in offsets]
    lam_t = tuple(float(x) for x in np.asarray(lam, dtype=float).ravel())
    xi_t = (float(xi[0]), float(xi[1]))
    for y in range(row0, row1):
        dx = 0.0
        dy = 0.0
        for x in range(w):
            if not causal or x == 0:
                dx = 0.0
                dy = 0.0
            elif safeguard and (dx != 0.0 or dy != 0.0):
                e_pred = _accumulate(P, C, w, h, offs, x, y, dx, dy)[5]
                if _accumulate(P, C, w, h, offs, x, y, 0.0, 0.0)[5] < e_pred:
                    dx = 0.0
                    dy = 0.0
            st = NOT_CONVERGED
            it = 0
            best_dx = dx
            best_dy = dy
            best_e = math.inf
            pending = False
            while it < max_iter:
                it += 1
                a11, a12, a22, g1, g2, e, count, strong = _accumulate(P, C, w, h, offs, x, y, dx, dy)
                pending = False
                if e < best_e:
                    best_e = e
                    best_dx = dx
                    best_dy = dy
                if count < 2 or not strong:
                    st = DEGENERATE
                    break
                u = solve2(a11, a12, a22, g1, g2, kind, lam_t, xi_t, keep, ratio)
                if u is None:
                    st = SINGULAR
                    break
                dx += u[0]
                dy += u[1]
                if dx > clamp:
                    dx = clamp
                elif dx < -clamp:
                    dx = -clamp
                if dy > clamp:
                    dy = clamp
                elif dy < -clamp:
                    dy = -clamp
                pending = True
                if u[0] * u[0] + u[1] * u[1] < stop_tol * stop_tol:
                    st = CONVERGED
                    break
            if safeguard and pending:
                e = _accumulate(P, C, w, h, offs, x, y, dx, dy)[5]
                if e > best_e:
                    dx = best_dx
                    dy = best_dy
                    st = REVERTED
            d_out[y, x, 0] = dx
            d_out[y, x, 1] = dy
            iters[y, x] = it
            status[y, x] = st
