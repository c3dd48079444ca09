# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled volume-rendering kernels.

Per-ray scalar loops over the same float64 math as numpy_backend; the two
backends agree to round-off. Constants mirror numpy_backend.
"""

import numpy as np

from libc.math cimport exp, expm1, log1p, sqrt, floor, INFINITY

DEF EPS_VIS = 1e-3
DEF DEPTH_EPS = 1e-8
DEF NORM_EPS = 1e-12


cdef inline double _softplus(double x) noexcept nogil:
    if x > 0.0:
        return x + log1p(exp(-x))
    return log1p(exp(x))


cdef inline double _sigmoid(double x) noexcept nogil:
    cdef double e
    if x >= 0.0:
        return 1.0 / (1.0 + exp(-x))
    e = exp(x)
    return e / (1.0 + e)


cdef inline bint _ray_box(const double* o, const double* d,
                          const double* lo, const double* hi,
                          double* t0, double* t1) noexcept nogil:
    cdef double tnear = 0.0
    cdef double tfar = INFINITY
    cdef double tl, th, tmp, inv
    cdef int k
    for k in range(3):
        if d[k] != 0.0:
            inv = 1.0 / d[k]
            tl = (lo[k] - o[k]) * inv
            th = (hi[k] - o[k]) * inv
            if tl > th:
                tmp = tl
                tl = th
                th = tmp
            if tl > tnear:
                tnear = tl
            if th < tfar:
                tfar = th
        else:
            # Parallel ray: origin strictly inside the slab or it is a miss.
            if not (o[k] > lo[k] and o[k] < hi[k]):
                return False
    if tfar > tnear:
        t0[0] = tnear
        t1[0] = tfar
        return True
    return False


cdef inline void _corners(const double* p, const double* lo, const double* scale,
                          long ry, long rz, const long* rmax,
                          long* idx, double* w) noexcept nogil:
    cdef double u
    cdef double f[3]
    cdef long i0[3]
    cdef int k
    for k in range(3):
        u = (p[k] - lo[k]) * scale[k]
        i0[k] = <long>floor(u)
        if i0[k] < 0:
            i0[k] = 0
        if i0[k] > rmax[k]:
            i0[k] = rmax[k]
        f[k] = u - i0[k]
        if f[k] < 0.0:
            f[k] = 0.0
        if f[k] > 1.0:
            f[k] = 1.0
    cdef double gx = 1.0 - f[0]
    cdef double gy = 1.0 - f[1]
    cdef double gz = 1.0 - f[2]
    cdef long base = (i0[0] * ry + i0[1]) * rz + i0[2]
    cdef long oyz = ry * rz
    idx[0] = base
    idx[1] = base + 1
    idx[2] = base + rz
    idx[3] = base + rz + 1
    idx[4] = base + oyz
    idx[5] = base + oyz + 1
    idx[6] = base + oyz + rz
    idx[7] = base + oyz + rz + 1
    w[0] = gx * gy * gz
    w[1] = gx * gy * f[2]
    w[2] = gx * f[1] * gz
    w[3] = gx * f[1] * f[2]
    w[4] = f[0] * gy * gz
    w[5] = f[0] * gy * f[2]
    w[6] = f[0] * f[1] * gz
    w[7] = f[0] * f[1] * f[2]


def render_rays(double[:, :, ::1] density, double[:, :, :, ::1] color,
                double[::1] lo, double[::1] hi,
                double[:, ::1] origins, double[:, ::1] dirs,
                int n_samples, double[::1] background,
                double[:, :, :, ::1] normal_grid, bint want_normal, bint want_samples,
                double[:, ::1] out_color, double[::1] out_opacity,
                double[::1] out_depth, double[:, ::1] out_normal,
                double[:, ::1] out_w, double[:, ::1] out_dot):
    cdef long rx = density.shape[0], ry = density.shape[1], rz = density.shape[2]
    cdef long n = origins.shape[0]
    cdef const double* dflat = &density[0, 0, 0]
    cdef const double* cflat = &color[0, 0, 0, 0]
    cdef const double* gflat = &normal_grid[0, 0, 0, 0] if want_normal else NULL
    cdef double scale[3]
    cdef long rmax[3]
    scale[0] = (rx - 1) / (hi[0] - lo[0])
    scale[1] = (ry - 1) / (hi[1] - lo[1])
    scale[2] = (rz - 1) / (hi[2] - lo[2])
    rmax[0] = rx - 2
    rmax[1] = ry - 2
    rmax[2] = rz - 2

    cdef long r, c8
    cdef int j, k, ch
    cdef double t0, t1, delta, t, alpha, trans, ab, wgt
    cdef double rho, opa, dep
    cdef double pos[3]
    cdef double col[3]
    cdef double nacc[3]
    cdef double g[3]
    cdef double craw, gn, nlen, dot
    cdef long cidx[8]
    cdef double cw[8]

    with nogil:
        for r in range(n):
            if not _ray_box(&origins[r, 0], &dirs[r, 0], &lo[0], &hi[0], &t0, &t1):
                for ch in range(3):
                    out_color[r, ch] = background[ch]
                    out_normal[r, ch] = 0.0
                out_opacity[r] = 0.0
                out_depth[r] = 0.0
                continue
            delta = (t1 - t0) / n_samples
            trans = 1.0
            opa = 0.0
            dep = 0.0
            for ch in range(3):
                col[ch] = 0.0
                nacc[ch] = 0.0
            for j in range(n_samples):
                t = t0 + (j + 0.5) * delta
                for k in range(3):
                    pos[k] = origins[r, k] + dirs[r, k] * t
                _corners(pos, &lo[0], scale, ry, rz, rmax, cidx, cw)
                rho = 0.0
                for c8 in range(8):
                    rho += dflat[cidx[c8]] * cw[c8]
                alpha = _softplus(rho) * delta
                ab = -expm1(-alpha)
                wgt = trans * ab
                trans *= 1.0 - ab
                for ch in range(3):
                    craw = 0.0
                    for c8 in range(8):
                        craw += cflat[cidx[c8] * 3 + ch] * cw[c8]
                    col[ch] += wgt * _sigmoid(craw)
                opa += wgt
                dep += wgt * t
                if want_samples:
                    out_w[r, j] = wgt
                if want_normal:
                    gn = 0.0
                    for ch in range(3):
                        g[ch] = 0.0
                        for c8 in range(8):
                            g[ch] += gflat[cidx[c8] * 3 + ch] * cw[c8]
                        gn += g[ch] * g[ch]
                    gn = sqrt(gn)
                    dot = 0.0
                    if gn > NORM_EPS:
                        for ch in range(3):
                            g[ch] = -g[ch] / gn
                            nacc[ch] += wgt * g[ch]
                            dot += g[ch] * dirs[r, ch]
                    if want_samples:
                        out_dot[r, j] = dot
            for ch in range(3):
                out_color[r, ch] = col[ch] + (1.0 - opa) * background[ch]
            out_opacity[r] = opa
            out_depth[r] = dep / (opa if opa > DEPTH_EPS else DEPTH_EPS)
            if want_normal:
                nlen = sqrt(nacc[0] * nacc[0] + nacc[1] * nacc[1] + nacc[2] * nacc[2])
                if opa >= EPS_VIS and nlen > NORM_EPS:
                    for ch in range(3):
                        out_normal[r, ch] = nacc[ch] / nlen
                else:
                    for ch in range(3):
                        out_normal[r, ch] = 0.0
            else:
                for ch in range(3):
                    out_normal[r, ch] = 0.0


def render_backward(double[:, :, ::1] density, double[:, :, :, ::1] color,
                    double[::1] lo, double[::1] hi,
                    double[:, ::1] origins, double[:, ::1] dirs,
                    int n_samples, double[::1] background,
                    double[:, ::1] dl_color, double[::1] dl_opacity, bint has_dlo,
                    double[:, :, ::1] d_density, double[:, :, :, ::1] d_color):
    cdef long rx = density.shape[0], ry = density.shape[1], rz = density.shape[2]
    cdef long n = origins.shape[0]
    cdef const double* dflat = &density[0, 0, 0]
    cdef const double* cflat = &color[0, 0, 0, 0]
    cdef double* ddflat = &d_density[0, 0, 0]
    cdef double* dcflat = &d_color[0, 0, 0, 0]
    cdef double scale[3]
    cdef long rmax[3]
    scale[0] = (rx - 1) / (hi[0] - lo[0])
    scale[1] = (ry - 1) / (hi[1] - lo[1])
    scale[2] = (rz - 1) / (hi[2] - lo[2])
    rmax[0] = rx - 2
    rmax[1] = ry - 2
    rmax[2] = rz - 2

    sab_np = np.empty(n_samples)
    strans_np = np.empty(n_samples)
    srho_np = np.empty(n_samples)
    sw_np = np.empty(n_samples)
    sdlw_np = np.empty(n_samples)
    sc_np = np.empty((n_samples, 3))
    cidx_np = np.empty((n_samples, 8), dtype=np.int64)
    cwt_np = np.empty((n_samples, 8))
    cdef double[::1] sab = sab_np
    cdef double[::1] strans = strans_np
    cdef double[::1] srho = srho_np
    cdef double[::1] sw = sw_np
    cdef double[::1] sdlw = sdlw_np
    cdef double[:, ::1] sc = sc_np
    cdef long[:, ::1] cidx = cidx_np
    cdef double[:, ::1] cwt = cwt_np

    cdef long r, c8
    cdef int j, k, ch
    cdef double t0, t1, delta, t, alpha, trans, ab, wgt
    cdef double rho, craw, tail, dalpha, drho, dcr
    cdef double pos[3]

    with nogil:
        for r in range(n):
            if not _ray_box(&origins[r, 0], &dirs[r, 0], &lo[0], &hi[0], &t0, &t1):
                continue
            delta = (t1 - t0) / n_samples
            trans = 1.0
            for j in range(n_samples):
                t = t0 + (j + 0.5) * delta
                for k in range(3):
                    pos[k] = origins[r, k] + dirs[r, k] * t
                _corners(pos, &lo[0], scale, ry, rz, rmax, &cidx[j, 0], &cwt[j, 0])
                rho = 0.0
                for c8 in range(8):
                    rho += dflat[cidx[j, c8]] * cwt[j, c8]
                srho[j] = rho
                alpha = _softplus(rho) * delta
                strans[j] = trans
                ab = -expm1(-alpha)
                sab[j] = ab
                wgt = trans * ab
                sw[j] = wgt
                trans *= 1.0 - ab
                sdlw[j] = dl_opacity[r] if has_dlo else 0.0
                for ch in range(3):
                    craw = 0.0
                    for c8 in range(8):
                        craw += cflat[cidx[j, c8] * 3 + ch] * cwt[j, c8]
                    sc[j, ch] = _sigmoid(craw)
                    sdlw[j] += dl_color[r, ch] * (sc[j, ch] - background[ch])
            tail = 0.0
            for j in range(n_samples - 1, -1, -1):
                dalpha = sdlw[j] * strans[j] * (1.0 - sab[j]) - tail
                tail += sdlw[j] * sw[j]
                drho = dalpha * delta * _sigmoid(srho[j])
                for c8 in range(8):
                    ddflat[cidx[j, c8]] += drho * cwt[j, c8]
                for ch in range(3):
                    dcr = dl_color[r, ch] * sw[j] * sc[j, ch] * (1.0 - sc[j, ch])
                    for c8 in range(8):
                        dcflat[cidx[j, c8] * 3 + ch] += dcr * cwt[j, c8]


def orientation_backward(double[:, :, ::1] density, double[:, :, :, ::1] normal_grid,
                         double[::1] lo, double[::1] hi,
                         double[:, ::1] origins, double[:, ::1] dirs,
                         int n_samples, double[:, :, :, ::1] d_grid):
    cdef long rx = density.shape[0], ry = density.shape[1], rz = density.shape[2]
    cdef long n = origins.shape[0]
    cdef const double* dflat = &density[0, 0, 0]
    cdef const double* gflat = &normal_grid[0, 0, 0, 0]
    cdef double* dgflat = &d_grid[0, 0, 0, 0]
    cdef double scale[3]
    cdef long rmax[3]
    scale[0] = (rx - 1) / (hi[0] - lo[0])
    scale[1] = (ry - 1) / (hi[1] - lo[1])
    scale[2] = (rz - 1) / (hi[2] - lo[2])
    rmax[0] = rx - 2
    rmax[1] = ry - 2
    rmax[2] = rz - 2

    cdef long r, c8
    cdef int j, k, ch
    cdef double t0, t1, delta, t, trans, ab, alpha, wgt
    cdef double rho, gn, dot, relu, ddot, coef
    cdef double pos[3]
    cdef double g[3]
    cdef double ghat[3]
    cdef long cidx[8]
    cdef double cw[8]
    cdef double loss = 0.0

    with nogil:
        for r in range(n):
            if not _ray_box(&origins[r, 0], &dirs[r, 0], &lo[0], &hi[0], &t0, &t1):
                continue
            delta = (t1 - t0) / n_samples
            trans = 1.0
            for j in range(n_samples):
                t = t0 + (j + 0.5) * delta
                for k in range(3):
                    pos[k] = origins[r, k] + dirs[r, k] * t
                _corners(pos, &lo[0], scale, ry, rz, rmax, cidx, cw)
                rho = 0.0
                for c8 in range(8):
                    rho += dflat[cidx[c8]] * cw[c8]
                alpha = _softplus(rho) * delta
                ab = -expm1(-alpha)
                wgt = trans * ab
                trans *= 1.0 - ab
                gn = 0.0
                for ch in range(3):
                    g[ch] = 0.0
                    for c8 in range(8):
                        g[ch] += gflat[cidx[c8] * 3 + ch] * cw[c8]
                    gn += g[ch] * g[ch]
                gn = sqrt(gn)
                if gn <= NORM_EPS:
                    continue
                dot = 0.0
                for ch in range(3):
                    ghat[ch] = g[ch] / gn
                    dot -= ghat[ch] * dirs[r, ch]
                if dot <= 0.0:
                    continue
                relu = dot
                loss += wgt * relu * relu
                ddot = 2.0 * wgt * relu
                for ch in range(3):
                    coef = ddot * -(dirs[r, ch] + dot * ghat[ch]) / gn
                    for c8 in range(8):
                        dgflat[cidx[c8] * 3 + ch] += coef * cw[c8]
    return loss
