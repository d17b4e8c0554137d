# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled protocol inner loop. Same contract as ``_kernels_py.run_kernel``."""

from libc.math cimport exp, log, fabs, trunc, copysign, pow, rint, isfinite, INFINITY

import numpy as np
cimport numpy as cnp

cnp.import_array()

cdef enum:
    BASE_QUADRATIC = 0
    BASE_QUARTIC = 1
    BASE_POLYNOMIAL = 2

cdef enum:
    AUG_NONE = 0
    AUG_MAX = 1
    AUG_SOFTPLUS = 2
    AUG_POWER = 3
    AUG_LOG_BARRIER = 4
    AUG_INV_BARRIER = 5

cdef enum:
    MAP_IDENTITY = 0
    MAP_SATURATION = 1
    MAP_LOG_QUANT = 2
    MAP_UNIFORM_QUANT = 3
    MAP_SIGNPOWER = 4

cdef double DIVERGENCE_LIMIT = 1e12
cdef double BARRIER_MARGIN = 0.9


cdef inline double _round_half_away(double z) nogil:
    cdef double r = trunc(z)
    if fabs(z - r) >= 0.5:
        r += copysign(1.0, z)
    return r


cdef inline double _sigmoid(double t) nogil:
    cdef double e = exp(-fabs(t))
    if t >= 0:
        return 1.0 / (1.0 + e)
    return e / (1.0 + e)


cdef inline double _apply_map(int code, double p1, double p2, double z) nogil:
    cdef double a
    if code == MAP_IDENTITY:
        return z
    if code == MAP_SATURATION:
        if z > p1:
            return p1
        if z < -p1:
            return -p1
        return z
    if code == MAP_UNIFORM_QUANT:
        return p1 * _round_half_away(z / p1)
    a = fabs(z)
    if a == 0.0:
        return 0.0
    if code == MAP_LOG_QUANT:
        return copysign(exp(p1 * _round_half_away(log(a) / p1)), z)
    return copysign(pow(a, p1) + pow(a, p2), z)


cdef inline double _grad(
    int i, double x,
    const int[::1] base_kind, const double[:, ::1] base_p, const double[:, ::1] poly,
    const int[::1] aug_kind, const double[::1] aug_c, const double[::1] aug_p,
    const double[::1] lo, const double[::1] hi, const double[::1] scale,
) nogil:
    cdef double s = scale[i]
    cdef double y = x * s
    cdef double g = 0.0, d, up, dn, mu, kap, ru, rd, acc
    cdef int kind = base_kind[i]
    cdef Py_ssize_t j, P
    if kind == BASE_QUADRATIC:
        g = base_p[i, 0] * y - base_p[i, 1]
    elif kind == BASE_QUARTIC:
        d = y - base_p[i, 1]
        g = 4.0 * base_p[i, 0] * (d * d * d)
    else:
        P = poly.shape[1]
        if P > 1:
            acc = (P - 1) * poly[i, P - 1]
            for j in range(P - 2, 0, -1):
                acc = acc * y + j * poly[i, j]
            g = acc
    kind = aug_kind[i]
    if kind != AUG_NONE:
        up = y - hi[i]
        dn = lo[i] - y
        if kind == AUG_MAX:
            g += aug_c[i] * ((1.0 if up > 0 else 0.0) - (1.0 if dn > 0 else 0.0))
        elif kind == AUG_SOFTPLUS:
            mu = aug_p[i]
            g += aug_c[i] * (_sigmoid(mu * up) - _sigmoid(mu * dn))
        elif kind == AUG_POWER:
            kap = aug_p[i]
            g += aug_c[i] * (kap * (pow(up if up > 0 else 0.0, kap - 1.0) - pow(dn if dn > 0 else 0.0, kap - 1.0)))
        else:
            ru = -up if isfinite(hi[i]) else INFINITY
            rd = -dn if isfinite(lo[i]) else INFINITY
            if kind == AUG_LOG_BARRIER:
                g += aug_c[i] * (1.0 / ru - 1.0 / rd)
            else:
                g += aug_c[i] * (1.0 / (ru * ru) - 1.0 / (rd * rd))
    return s * g


def run_kernel(
    const double[::1] x0,
    const int[::1] base_kind, const double[:, ::1] base_p, const double[:, ::1] poly,
    const int[::1] aug_kind, const double[::1] aug_c, const double[::1] aug_p,
    const double[::1] lo, const double[::1] hi, const double[::1] scale,
    int map_code, double map_p1, double map_p2,
    int link,
    double eta,
    const cnp.int64_t[::1] edge_i, const cnp.int64_t[::1] edge_j, const double[::1] edge_w,
    const cnp.int64_t[::1] frame_ptr, const cnp.uint8_t[::1] frame_paired,
    const cnp.int64_t[::1] step_frame,
    double grid,
    double[:, ::1] states,
    double[::1] applied,
):
    cdef Py_ssize_t n = x0.shape[0]
    cdef Py_ssize_t K = step_frame.shape[0]
    cdef Py_ssize_t k, e, i, j, a, b, f
    cdef double t, d, room, y, m
    cdef bint paired, any_bar = False
    cdef int status = 0
    cdef Py_ssize_t done = K

    x_arr = np.array(x0, dtype=np.float64)
    g_arr = np.empty(n, dtype=np.float64)
    hg_arr = np.empty(n, dtype=np.float64)
    step_arr = np.empty(n, dtype=np.float64)
    max_edges = 0
    for f in range(frame_ptr.shape[0] - 1):
        max_edges = max(max_edges, frame_ptr[f + 1] - frame_ptr[f])
    delta_arr = np.empty(max(max_edges, 1), dtype=np.float64)
    xlo_arr = np.empty(n, dtype=np.float64)
    xhi_arr = np.empty(n, dtype=np.float64)
    bar_arr = np.zeros(n, dtype=np.uint8)
    cdef double[::1] x = x_arr
    cdef double[::1] g = g_arr
    cdef double[::1] hg = hg_arr
    cdef double[::1] step = step_arr
    cdef double[::1] delta = delta_arr
    cdef double[::1] xlo = xlo_arr
    cdef double[::1] xhi = xhi_arr
    cdef cnp.uint8_t[::1] bar = bar_arr

    for i in range(n):
        if scale[i] > 0:
            xlo[i] = lo[i] / scale[i]
            xhi[i] = hi[i] / scale[i]
        else:
            xlo[i] = hi[i] / scale[i]
            xhi[i] = lo[i] / scale[i]
        if aug_kind[i] == AUG_LOG_BARRIER or aug_kind[i] == AUG_INV_BARRIER:
            bar[i] = 1
            any_bar = True
        states[0, i] = x[i]

    with nogil:
        for k in range(K):
            f = step_frame[k]
            a = frame_ptr[f]
            b = frame_ptr[f + 1]
            paired = frame_paired[f] != 0
            if any_bar:
                for i in range(n):
                    if bar[i]:
                        y = x[i] * scale[i]
                        if not (y > lo[i] and y < hi[i]):
                            status = 2
                            break
                if status != 0:
                    done = k
                    break
            for i in range(n):
                g[i] = _grad(i, x[i], base_kind, base_p, poly, aug_kind, aug_c, aug_p, lo, hi, scale)
            if link:
                for i in range(n):
                    hg[i] = _apply_map(map_code, map_p1, map_p2, g[i])
                for e in range(a, b):
                    delta[e - a] = eta * edge_w[e] * (hg[edge_j[e]] - hg[edge_i[e]])
            else:
                for e in range(a, b):
                    delta[e - a] = eta * edge_w[e] * _apply_map(map_code, map_p1, map_p2, g[edge_j[e]] - g[edge_i[e]])
            t = 1.0
            if any_bar:
                for i in range(n):
                    step[i] = 0.0
                for e in range(a, b):
                    step[edge_i[e]] += delta[e - a]
                    if paired:
                        step[edge_j[e]] -= delta[e - a]
                for i in range(n):
                    d = step[i]
                    if bar[i] and d != 0.0:
                        room = (xhi[i] - x[i]) if d > 0 else (x[i] - xlo[i])
                        if fabs(d) >= room:
                            m = BARRIER_MARGIN * room / fabs(d)
                            if m < t:
                                t = m
            if paired:
                for e in range(a, b):
                    d = delta[e - a]
                    if t != 1.0:
                        d = t * d
                    d = rint(d / grid) * grid
                    x[edge_i[e]] += d
                    x[edge_j[e]] -= d
            else:
                for i in range(n):
                    step[i] = 0.0
                for e in range(a, b):
                    step[edge_i[e]] += delta[e - a]
                for i in range(n):
                    if t != 1.0:
                        x[i] += t * step[i]
                    else:
                        x[i] += step[i]
            for i in range(n):
                states[k + 1, i] = x[i]
            applied[k] = eta * t
            for i in range(n):
                if not isfinite(x[i]) or fabs(x[i]) > DIVERGENCE_LIMIT:
                    status = 1
                    break
            if status != 0:
                done = k + 1
                break
    return status, done
