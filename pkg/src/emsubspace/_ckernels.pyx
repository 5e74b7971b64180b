# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels; see ``_pykernels`` for the reference semantics."""
from libc.math cimport sqrt, fabs, floor, INFINITY

cdef enum:
    NOT_CONVERGED = 0
    CONVERGED = 1
    DEGENERATE = 2
    SINGULAR = 3
    REVERTED = 4

cdef double COND_LIMIT = 1e12
cdef double GRAD_FLOOR = 1e-12


def jacobi_sweeps(double[:, ::1] a, double[:, ::1] v, int max_sweeps, double tol):
    cdef int used
    with nogil:
        used = _jacobi(a, v, max_sweeps, tol)
    return used


cdef int _jacobi(double[:, ::1] a, double[:, ::1] v, int max_sweeps, double tol) noexcept nogil:
    cdef Py_ssize_t n = a.shape[0]
    cdef Py_ssize_t p, q, k
    cdef double fro = 0.0, off, apq, theta, t, c, s, x1, x2
    cdef int sweep
    for p in range(n):
        for q in range(n):
            fro += a[p, q] * a[p, q]
    fro = sqrt(fro)
    if fro == 0.0:
        return 0
    for sweep in range(max_sweeps + 1):
        off = 0.0
        for p in range(n - 1):
            for q in range(p + 1, n):
                off += a[p, q] * a[p, q]
        off = sqrt(2.0 * off)
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
                if fabs(theta) > 1e150:
                    t = 0.5 / theta
                else:
                    t = 1.0 / (fabs(theta) + sqrt(theta * theta + 1.0))
                    if theta < 0.0:
                        t = -t
                c = 1.0 / sqrt(t * t + 1.0)
                s = t * c
                for k in range(n):
                    x1 = a[k, p]
                    x2 = a[k, q]
                    a[k, p] = c * x1 - s * x2
                    a[k, q] = s * x1 + c * x2
                for k in range(n):
                    x1 = a[p, k]
                    x2 = a[q, k]
                    a[p, k] = c * x1 - s * x2
                    a[q, k] = s * x1 + c * x2
                a[p, q] = 0.0
                a[q, p] = 0.0
                for k in range(n):
                    x1 = v[k, p]
                    x2 = v[k, q]
                    v[k, p] = c * x1 - s * x2
                    v[k, q] = s * x1 + c * x2
    return -1


cdef inline void _bilinear(const double[:, ::1] img, Py_ssize_t w, Py_ssize_t h,
                           double x, double y, double* val, double* gx, double* gy) noexcept nogil:
    cdef Py_ssize_t x0, y0
    cdef double tx, ty, f00, f10, f01, f11
    if x < 0.0:
        x = 0.0
    elif x > w - 1:
        x = <double>(w - 1)
    if y < 0.0:
        y = 0.0
    elif y > h - 1:
        y = <double>(h - 1)
    x0 = <Py_ssize_t>floor(x)
    y0 = <Py_ssize_t>floor(y)
    if x0 > w - 2:
        x0 = w - 2
    if y0 > h - 2:
        y0 = h - 2
    tx = x - x0
    ty = y - y0
    f00 = img[y0, x0]
    f10 = img[y0, x0 + 1]
    f01 = img[y0 + 1, x0]
    f11 = img[y0 + 1, x0 + 1]
    val[0] = (1.0 - ty) * ((1.0 - tx) * f00 + tx * f10) + ty * ((1.0 - tx) * f01 + tx * f11)
    gx[0] = (1.0 - ty) * (f10 - f00) + ty * (f11 - f01)
    gy[0] = (1.0 - tx) * (f01 - f00) + tx * (f11 - f10)


cdef inline void _eig2(double a11, double a12, double a22,
                       double* l1, double* l2, double* c, double* s) noexcept nogil:
    cdef double h = 0.5 * (a11 - a22)
    cdef double m = 0.5 * (a11 + a22)
    cdef double r = sqrt(h * h + a12 * a12)
    cdef double vx, vy, nv
    l1[0] = m + r
    l2[0] = m - r
    if l2[0] < 0.0:
        l2[0] = 0.0
    if a12 == 0.0:
        if h >= 0.0:
            c[0] = 1.0
            s[0] = 0.0
        else:
            c[0] = 0.0
            s[0] = 1.0
        return
    if h >= 0.0:
        vx = h + r
        vy = a12
    else:
        vx = a12
        vy = r - h
    nv = sqrt(vx * vx + vy * vy)
    if vx < 0.0:
        nv = -nv
    c[0] = vx / nv
    s[0] = vy / nv


cdef inline bint _solve2(double a11, double a12, double a22, double g1, double g2,
                         int kind, const double[:, ::1] lam, const double[::1] xi,
                         int keep, double ratio, double* ux, double* uy) noexcept nogil:
    cdef double l1, l2, c, s, m11, m12, m21, m22, det, t1, t2, k1, k2, d1, d2
    cdef bint both
    if kind == 0 or kind == 1:
        if kind == 0:
            _eig2(a11, a12, a22, &l1, &l2, &c, &s)
            if l1 <= 0.0 or l2 <= 0.0 or l1 > COND_LIMIT * l2:
                return False
            m11 = a11
            m12 = a12
            m21 = a12
            m22 = a22
        else:
            m11 = a11 + lam[0, 0]
            m12 = a12 + lam[0, 1]
            m21 = a12 + lam[1, 0]
            m22 = a22 + lam[1, 1]
        det = m11 * m22 - m12 * m21
        if det == 0.0:
            return False
        ux[0] = (m22 * g1 - m12 * g2) / det
        uy[0] = (m11 * g2 - m21 * g1) / det
        return True
    _eig2(a11, a12, a22, &l1, &l2, &c, &s)
    t1 = c * g1 + s * g2
    t2 = -s * g1 + c * g2
    if kind == 2:
        if l1 <= 0.0:
            return False
        both = keep == 2 or (keep == 0 and l2 > ratio * l1)
        k1 = t1 / l1
        ux[0] = c * k1
        uy[0] = s * k1
        if both:
            if l2 <= 0.0:
                return False
            k2 = t2 / l2
            ux[0] -= s * k2
            uy[0] += c * k2
        return True
    d1 = l1 + xi[0]
    d2 = l2 + xi[1]
    if d1 <= 0.0 or d2 <= 0.0:
        return False
    k1 = t1 / d1
    k2 = t2 / d2
    ux[0] = c * k1 - s * k2
    uy[0] = s * k1 + c * k2
    return True


cdef inline double _accumulate(const double[:, ::1] prev, const double[:, ::1] cur,
                              const long long[:, ::1] offsets, Py_ssize_t w, Py_ssize_t h,
                              Py_ssize_t x, Py_ssize_t y, double dx, double dy,
                              double* out, int* count, bint* strong) noexcept nogil:
    # out: a11, a12, a22, g1, g2; returns the DFD energy
    cdef Py_ssize_t j, rx, ry
    cdef double val, gx, gy, z, energy = 0.0
    out[0] = 0.0
    out[1] = 0.0
    out[2] = 0.0
    out[3] = 0.0
    out[4] = 0.0
    count[0] = 0
    strong[0] = False
    for j in range(offsets.shape[0]):
        rx = x + offsets[j, 0]
        ry = y + offsets[j, 1]
        if rx < 0 or rx >= w or ry < 0 or ry >= h:
            continue
        _bilinear(prev, w, h, rx - dx, ry - dy, &val, &gx, &gy)
        z = val - cur[ry, rx]
        out[0] += gx * gx
        out[1] += gx * gy
        out[2] += gy * gy
        out[3] += gx * z
        out[4] += gy * z
        energy += z * z
        count[0] += 1
        if gx * gx + gy * gy >= GRAD_FLOOR * GRAD_FLOOR:
            strong[0] = True
    return energy


def estimate_rows(const double[:, ::1] prev, const double[:, ::1] cur,
                  const long long[:, ::1] offsets, int kind,
                  const double[:, ::1] lam, const double[::1] xi, int keep, double ratio,
                  int max_iter, double clamp, double stop_tol, bint causal, bint safeguard,
                  Py_ssize_t row0, Py_ssize_t row1,
                  double[:, :, ::1] d_out, int[:, ::1] iters, signed char[:, ::1] status):
    cdef Py_ssize_t h = prev.shape[0]
    cdef Py_ssize_t w = prev.shape[1]
    cdef Py_ssize_t x, y
    cdef double dx = 0.0, dy = 0.0, ux, uy, e, best_e, best_dx, best_dy
    cdef double acc[5]
    cdef int it, count
    cdef signed char st
    cdef bint strong, pending
    with nogil:
        for y in range(row0, row1):
            dx = 0.0
            dy = 0.0
            for x in range(w):
                if not causal or x == 0:
                    dx = 0.0
                    dy = 0.0
                elif safeguard and (dx != 0.0 or dy != 0.0):
                    e = _accumulate(prev, cur, offsets, w, h, x, y, dx, dy, acc, &count, &strong)
                    if _accumulate(prev, cur, offsets, w, h, x, y, 0.0, 0.0, acc, &count, &strong) < e:
                        dx = 0.0
                        dy = 0.0
                st = NOT_CONVERGED
                it = 0
                best_dx = dx
                best_dy = dy
                best_e = INFINITY
                pending = False
                while it < max_iter:
                    it += 1
                    e = _accumulate(prev, cur, offsets, w, h, x, y, dx, dy, acc, &count, &strong)
                    pending = False
                    if e < best_e:
                        best_e = e
                        best_dx = dx
                        best_dy = dy
                    if count < 2 or not strong:
                        st = DEGENERATE
                        break
                    if not _solve2(acc[0], acc[1], acc[2], acc[3], acc[4], kind, lam, xi,
                                   keep, ratio, &ux, &uy):
                        st = SINGULAR
                        break
                    dx += ux
                    dy += uy
                    if dx > clamp:
                        dx = clamp
                    elif dx < -clamp:
                        dx = -clamp
                    if dy > clamp:
                        dy = clamp
                    elif dy < -clamp:
                        dy = -clamp
                    pending = True
                    if ux * ux + uy * uy < stop_tol * stop_tol:
                        st = CONVERGED
                        break
                if safeguard and pending:
                    e = _accumulate(prev, cur, offsets, w, h, x, y, dx, dy, acc, &count, &strong)
                    if e > best_e:
                        dx = best_dx
                        dy = best_dy
                        st = REVERTED
                d_out[y, x, 0] = dx
                d_out[y, x, 1] = dy
                iters[y, x] = it
                status[y, x] = st
