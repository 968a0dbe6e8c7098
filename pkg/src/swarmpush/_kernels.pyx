# cython: language_level=3
"""Compiled twin of swarmpush._kernels_py (same signatures, same math).

Branch conditions and evaluation order mirror the NumPy twin so the two
backends agree to floating-point roundoff; see _kernels_py.py for the
derivation notes.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport atan2, cos, exp, fabs, floor, hypot, log, sin, sqrt

cnp.import_array()

BACKEND_NAME = "compiled"

cdef enum:
    P_DT = 0
    P_INV_DX = 1
    P_N_NODES = 2
    P_MASS = 3
    P_VOL = 4
    P_MU = 5
    P_LAM = 6
    P_YIELD_C = 7
    P_FRICTION = 8
    P_RADIUS = 9
    P_SOFTNESS = 10
    P_CUTOFF = 11
    P_BOUND = 12
    P_CLAMP_LO = 13
    P_CLAMP_HI = 14

N_PARAMS = 15

cdef double SQRT2 = sqrt(2.0)
cdef double TINY = 1e-30


cdef inline double dmax(double a, double b) nogil:
    return a if a > b else b


cdef inline double dmin(double a, double b) nogil:
    return a if a < b else b


cdef void _stress_forward(double[:, ::1] x, double[:, :, ::1] F,
                          double[:, :, ::1] C, double[::1] prm,
                          double[:, :, ::1] Fnew, double[:, :, ::1] affine) nogil:
    cdef Py_ssize_t n = x.shape[0], p
    cdef double dt = prm[P_DT], mu = prm[P_MU], lam = prm[P_LAM]
    cdef double yc = prm[P_YIELD_C], pm = prm[P_MASS]
    cdef double coef = -dt * prm[P_VOL] * 4.0 * prm[P_INV_DX] * prm[P_INV_DX]
    cdef double a, b, c, d, h1x, h1y, h2x, h2y, q1, q2, s0, s1, den, rc, rs
    cdef double eps0, eps1, dev, th1, th2, thu, thv, m, k, sp0, sp1
    cdef double cu, su, cv, sv, f00, f01, f10, f11, J, jt
    cdef double m00, m01, m10, m11, s00s, s01s, s10s, s11s

    for p in range(n):
        a = F[p, 0, 0] + dt * (C[p, 0, 0] * F[p, 0, 0] + C[p, 0, 1] * F[p, 1, 0])
        b = F[p, 0, 1] + dt * (C[p, 0, 0] * F[p, 0, 1] + C[p, 0, 1] * F[p, 1, 1])
        c = F[p, 1, 0] + dt * (C[p, 1, 0] * F[p, 0, 0] + C[p, 1, 1] * F[p, 1, 0])
        d = F[p, 1, 1] + dt * (C[p, 1, 0] * F[p, 0, 1] + C[p, 1, 1] * F[p, 1, 1])
        h1x = a + d
        h1y = c - b
        h2x = a - d
        h2y = c + b
        q1 = 0.5 * hypot(h1x, h1y)
        q2 = 0.5 * hypot(h2x, h2y)
        s0 = dmax(q1 + q2, 1e-12)
        s1 = dmax(q1 - q2, 1e-12)
        den = dmax(2.0 * q1, TINY)
        rc = h1x / den
        rs = h1y / den
        # log-free yield test: s0/s1 > exp(sqrt2*yc)
        if s0 > exp(SQRT2 * yc) * s1:
            eps0 = log(s0)
            eps1 = log(s1)
            th1 = atan2(h1y, h1x)
            th2 = atan2(h2y, h2x)
            thu = 0.5 * (th2 + th1)
            thv = 0.5 * (th2 - th1)
            m = 0.5 * (eps0 + eps1)
            k = yc / SQRT2
            sp0 = exp(m + k)
            sp1 = exp(m - k)
            cu = cos(thu)
            su = sin(thu)
            cv = cos(thv)
            sv = sin(thv)
            f00 = sp0 * cu * cv + sp1 * su * sv
            f01 = sp0 * cu * sv - sp1 * su * cv
            f10 = sp0 * su * cv - sp1 * cu * sv
            f11 = sp0 * su * sv + sp1 * cu * cv
        else:
            f00 = a
            f01 = b
            f10 = c
            f11 = d
        Fnew[p, 0, 0] = f00
        Fnew[p, 0, 1] = f01
        Fnew[p, 1, 0] = f10
        Fnew[p, 1, 1] = f11
        J = f00 * f11 - f01 * f10
        jt = lam * J * (J - 1.0)
        m00 = f00 - rc
        m01 = f01 + rs
        m10 = f10 - rs
        m11 = f11 - rc
        s00s = 2.0 * mu * (m00 * f00 + m01 * f01) + jt
        s01s = 2.0 * mu * (m00 * f10 + m01 * f11)
        s10s = 2.0 * mu * (m10 * f00 + m11 * f01)
        s11s = 2.0 * mu * (m10 * f10 + m11 * f11) + jt
        affine[p, 0, 0] = coef * s00s + pm * C[p, 0, 0]
        affine[p, 0, 1] = coef * s01s + pm * C[p, 0, 1]
        affine[p, 1, 0] = coef * s10s + pm * C[p, 1, 0]
        affine[p, 1, 1] = coef * s11s + pm * C[p, 1, 1]


cdef void _weights(double fx, double* w, double* dw) nogil:
    w[0] = 0.5 * (1.5 - fx) * (1.5 - fx)
    w[1] = 0.75 - (fx - 1.0) * (fx - 1.0)
    w[2] = 0.5 * (fx - 0.5) * (fx - 0.5)
    dw[0] = fx - 1.5
    dw[1] = -2.0 * (fx - 1.0)
    dw[2] = fx - 0.5


cdef void _p2g(double[:, ::1] x, double[:, ::1] v, double[:, :, ::1] affine,
               double[::1] prm, double[:, ::1] grid_m, double[:, :, ::1] grid_mv,
               long[:, ::1] base, double[:, ::1] fx) nogil:
    cdef Py_ssize_t n = x.shape[0], p, i, j, G = grid_m.shape[0]
    cdef double inv_dx = prm[P_INV_DX], pm = prm[P_MASS]
    cdef double dxc = 1.0 / inv_dx
    cdef double wx[3]
    cdef double wy[3]
    cdef double dwx[3]
    cdef double dwy[3]
    cdef double qx, qy, wt, dpx, dpy, mx, my, fx0, fx1
    cdef double a00, a01, a10, a11
    cdef long bx, by, row
    cdef double* gm = &grid_m[0, 0]
    cdef double* gmv = &grid_mv[0, 0, 0]

    for p in range(n):
        qx = x[p, 0] * inv_dx
        qy = x[p, 1] * inv_dx
        bx = <long>floor(qx - 0.5)
        by = <long>floor(qy - 0.5)
        base[p, 0] = bx
        base[p, 1] = by
        fx0 = qx - bx
        fx1 = qy - by
        fx[p, 0] = fx0
        fx[p, 1] = fx1
        _weights(fx0, wx, dwx)
        _weights(fx1, wy, dwy)
        mx = pm * v[p, 0]
        my = pm * v[p, 1]
        a00 = affine[p, 0, 0]
        a01 = affine[p, 0, 1]
        a10 = affine[p, 1, 0]
        a11 = affine[p, 1, 1]
        for i in range(3):
            dpx = (i - fx0) * dxc
            row = (bx + i) * G + by
            for j in range(3):
                wt = wx[i] * wy[j]
                dpy = (j - fx1) * dxc
                gmv[2 * (row + j)] += wt * (mx + a00 * dpx + a01 * dpy)
                gmv[2 * (row + j) + 1] += wt * (my + a10 * dpx + a11 * dpy)
                gm[row + j] += wt * pm


cdef void _contact_node(double vin0, double vin1, double gx, double gy,
                        double rpx, double rpy, double rvx, double rvy,
                        double[::1] prm, double* out) nogil:
    """out[0..1] = projected velocity; out[2] = active flag."""
    cdef double soft = prm[P_SOFTNESS], cutoff = prm[P_CUTOFF]
    cdef double fric = prm[P_FRICTION], radius = prm[P_RADIUS]
    cdef double dx = gx - rpx, dy = gy - rpy
    cdef double dist = dmax(hypot(dx, dy), TINY)
    cdef double sdf = dist - radius
    cdef double infl = exp(-soft * sdf) if sdf > 0.0 else 1.0
    cdef double nx, ny, relx, rely, vn, vtx, vty, tn, sc, r2x, r2y
    out[0] = vin0
    out[1] = vin1
    out[2] = 0.0
    if infl <= cutoff:
        return
    out[2] = 1.0
    nx = dx / dist
    ny = dy / dist
    relx = vin0 - rvx
    rely = vin1 - rvy
    vn = relx * nx + rely * ny
    if vn < 0.0:
        vtx = relx - vn * nx
        vty = rely - vn * ny
        tn = dmax(hypot(vtx, vty), TINY)
        sc = dmax(0.0, 1.0 + fric * vn / tn)
        r2x = vtx * sc
        r2y = vty * sc
    else:
        r2x = relx
        r2y = rely
    out[0] = rvx + (1.0 - infl) * relx + infl * r2x
    out[1] = rvy + (1.0 - infl) * rely + infl * r2y


cdef void _grid_forward(double[:, ::1] grid_m, double[:, :, ::1] grid_mv,
                        double[:, ::1] rpos, double[:, ::1] rvel,
                        double[::1] prm, double[:, :, :, ::1] stages,
                        double[:, :, ::1] vfinal) nogil:
    cdef Py_ssize_t G = grid_m.shape[0], R = rpos.shape[0], i, j, k
    cdef double dxc = 1.0 / prm[P_INV_DX]
    cdef int nb = <int>prm[P_BOUND]
    cdef double out[3]
    cdef double reach = prm[P_RADIUS] + log(1.0 / prm[P_CUTOFF]) / prm[P_SOFTNESS] + dxc
    cdef long lo0, hi0, lo1, hi1

    for i in range(G):
        for j in range(G):
            if grid_m[i, j] > 0.0:
                stages[0, i, j, 0] = grid_mv[i, j, 0] / grid_m[i, j]
                stages[0, i, j, 1] = grid_mv[i, j, 1] / grid_m[i, j]
            else:
                stages[0, i, j, 0] = 0.0
                stages[0, i, j, 1] = 0.0

    for k in range(R):
        for i in range(G):
            for j in range(G):
                stages[k + 1, i, j, 0] = stages[k, i, j, 0]
                stages[k + 1, i, j, 1] = stages[k, i, j, 1]
        lo0 = <long>floor((rpos[k, 0] - reach) / dxc)
        hi0 = <long>floor((rpos[k, 0] + reach) / dxc) + 1
        lo1 = <long>floor((rpos[k, 1] - reach) / dxc)
        hi1 = <long>floor((rpos[k, 1] + reach) / dxc) + 1
        if lo0 < 0:
            lo0 = 0
        if lo1 < 0:
            lo1 = 0
        if hi0 > G - 1:
            hi0 = G - 1
        if hi1 > G - 1:
            hi1 = G - 1
        for i in range(lo0, hi0 + 1):
            for j in range(lo1, hi1 + 1):
                _contact_node(stages[k, i, j, 0], stages[k, i, j, 1],
                              i * dxc, j * dxc, rpos[k, 0], rpos[k, 1],
                              rvel[k, 0], rvel[k, 1], prm, out)
                stages[k + 1, i, j, 0] = out[0]
                stages[k + 1, i, j, 1] = out[1]

    for i in range(G):
        for j in range(G):
            vfinal[i, j, 0] = stages[R, i, j, 0]
            vfinal[i, j, 1] = stages[R, i, j, 1]
    for i in range(nb):
        for j in range(G):
            vfinal[i, j, 0] = dmax(vfinal[i, j, 0], 0.0)
            vfinal[G - 1 - i, j, 0] = dmin(vfinal[G - 1 - i, j, 0], 0.0)
            vfinal[j, i, 1] = dmax(vfinal[j, i, 1], 0.0)
            vfinal[j, G - 1 - i, 1] = dmin(vfinal[j, G - 1 - i, 1], 0.0)


cdef void _grid_forward_inplace(double[:, ::1] grid_m, double[:, :, ::1] grid_mv,
                                double[:, ::1] rpos, double[:, ::1] rvel,
                                double[::1] prm, double[:, :, ::1] vfinal) nogil:
    """Forward-only grid update (no per-robot stage checkpoints)."""
    cdef Py_ssize_t G = grid_m.shape[0], R = rpos.shape[0], i, j, k
    cdef double dxc = 1.0 / prm[P_INV_DX]
    cdef int nb = <int>prm[P_BOUND]
    cdef double out[3]
    cdef double reach = prm[P_RADIUS] + log(1.0 / prm[P_CUTOFF]) / prm[P_SOFTNESS] + dxc
    cdef long lo0, hi0, lo1, hi1

    for i in range(G):
        for j in range(G):
            if grid_m[i, j] > 0.0:
                vfinal[i, j, 0] = grid_mv[i, j, 0] / grid_m[i, j]
                vfinal[i, j, 1] = grid_mv[i, j, 1] / grid_m[i, j]
            else:
                vfinal[i, j, 0] = 0.0
                vfinal[i, j, 1] = 0.0

    for k in range(R):
        lo0 = <long>floor((rpos[k, 0] - reach) / dxc)
        hi0 = <long>floor((rpos[k, 0] + reach) / dxc) + 1
        lo1 = <long>floor((rpos[k, 1] - reach) / dxc)
        hi1 = <long>floor((rpos[k, 1] + reach) / dxc) + 1
        if lo0 < 0:
            lo0 = 0
        if lo1 < 0:
            lo1 = 0
        if hi0 > G - 1:
            hi0 = G - 1
        if hi1 > G - 1:
            hi1 = G - 1
        for i in range(lo0, hi0 + 1):
            for j in range(lo1, hi1 + 1):
                _contact_node(vfinal[i, j, 0], vfinal[i, j, 1],
                              i * dxc, j * dxc, rpos[k, 0], rpos[k, 1],
                              rvel[k, 0], rvel[k, 1], prm, out)
                vfinal[i, j, 0] = out[0]
                vfinal[i, j, 1] = out[1]

    for i in range(nb):
        for j in range(G):
            vfinal[i, j, 0] = dmax(vfinal[i, j, 0], 0.0)
            vfinal[G - 1 - i, j, 0] = dmin(vfinal[G - 1 - i, j, 0], 0.0)
            vfinal[j, i, 1] = dmax(vfinal[j, i, 1], 0.0)
            vfinal[j, G - 1 - i, 1] = dmin(vfinal[j, G - 1 - i, 1], 0.0)


cdef void _g2p_advect(double[:, ::1] x, double[:, :, ::1] vfinal,
                      long[:, ::1] base, double[:, ::1] fx, double[::1] prm,
                      double[:, ::1] nv, double[:, :, ::1] nC,
                      double[:, ::1] xn) nogil:
    cdef Py_ssize_t n = x.shape[0], p, i, j
    cdef double inv_dx = prm[P_INV_DX], dt = prm[P_DT]
    cdef double dxc = 1.0 / inv_dx
    cdef double kap = 4.0 * inv_dx * inv_dx
    cdef double wx[3]
    cdef double wy[3]
    cdef double dwx[3]
    cdef double dwy[3]
    cdef double wt, dpx, dpy, gv0, gv1, nv0, nv1, c00, c01, c10, c11
    cdef long bx, by

    cdef Py_ssize_t G = vfinal.shape[0]
    cdef long row
    cdef double* vf = &vfinal[0, 0, 0]
    for p in range(n):
        _weights(fx[p, 0], wx, dwx)
        _weights(fx[p, 1], wy, dwy)
        bx = base[p, 0]
        by = base[p, 1]
        nv0 = 0.0
        nv1 = 0.0
        c00 = 0.0
        c01 = 0.0
        c10 = 0.0
        c11 = 0.0
        for i in range(3):
            dpx = (i - fx[p, 0]) * dxc
            row = (bx + i) * G + by
            for j in range(3):
                wt = wx[i] * wy[j]
                dpy = (j - fx[p, 1]) * dxc
                gv0 = vf[2 * (row + j)]
                gv1 = vf[2 * (row + j) + 1]
                nv0 += wt * gv0
                nv1 += wt * gv1
                c00 += kap * wt * gv0 * dpx
                c01 += kap * wt * gv0 * dpy
                c10 += kap * wt * gv1 * dpx
                c11 += kap * wt * gv1 * dpy
        nv[p, 0] = nv0
        nv[p, 1] = nv1
        nC[p, 0, 0] = c00
        nC[p, 0, 1] = c01
        nC[p, 1, 0] = c10
        nC[p, 1, 1] = c11
        xn[p, 0] = x[p, 0] + dt * nv0
        xn[p, 1] = x[p, 1] + dt * nv1


cdef void _project_forward(double[:, ::1] xn, double[:, ::1] nv,
                           double[:, ::1] rpos, double[:, ::1] rvel,
                           double[::1] prm, double[:, :, ::1] px_st,
                           double[:, :, ::1] pv_st) nogil:
    cdef Py_ssize_t n = xn.shape[0], R = rpos.shape[0], p, k
    cdef double radius = prm[P_RADIUS]
    cdef double dx, dy, dist, nx, ny, relx, rely, rvn

    for k in range(R):
        for p in range(n):
            px_st[k, p, 0] = xn[p, 0]
            px_st[k, p, 1] = xn[p, 1]
            pv_st[k, p, 0] = nv[p, 0]
            pv_st[k, p, 1] = nv[p, 1]
        for p in range(n):
            dx = px_st[k, p, 0] - rpos[k, 0]
            dy = px_st[k, p, 1] - rpos[k, 1]
            dist = dmax(hypot(dx, dy), TINY)
            if dist < radius:
                nx = dx / dist
                ny = dy / dist
                xn[p, 0] = rpos[k, 0] + radius * nx
                xn[p, 1] = rpos[k, 1] + radius * ny
                relx = pv_st[k, p, 0] - rvel[k, 0]
                rely = pv_st[k, p, 1] - rvel[k, 1]
                rvn = relx * nx + rely * ny
                if rvn < 0.0:
                    nv[p, 0] = rvel[k, 0] + relx - rvn * nx
                    nv[p, 1] = rvel[k, 1] + rely - rvn * ny


def substep_forward(x_in, v_in, F_in, C_in, rpos_in, rvel_in, prm_in):
    """One MPM substep; see _kernels_py.substep_forward."""
    cdef double[:, ::1] x = np.ascontiguousarray(x_in)
    cdef double[:, ::1] v = np.ascontiguousarray(v_in)
    cdef double[:, :, ::1] F = np.ascontiguousarray(F_in)
    cdef double[:, :, ::1] C = np.ascontiguousarray(C_in)
    cdef double[:, ::1] rpos = np.ascontiguousarray(rpos_in)
    cdef double[:, ::1] rvel = np.ascontiguousarray(rvel_in)
    cdef double[::1] prm = np.ascontiguousarray(prm_in)

    cdef Py_ssize_t n = x.shape[0], R = rpos.shape[0]
    cdef int G = <int>prm[P_N_NODES]
    Fnew_a = np.empty((n, 2, 2))
    affine_a = np.empty((n, 2, 2))
    grid_m_a = np.zeros((G, G))
    grid_mv_a = np.zeros((G, G, 2))
    base_a = np.zeros((n, 2), dtype=np.int64)
    fx_a = np.zeros((n, 2))
    vfinal_a = np.zeros((G, G, 2))
    nv_a = np.zeros((n, 2))
    nC_a = np.zeros((n, 2, 2))
    xn_a = np.zeros((n, 2))
    px_a = np.zeros((R, n, 2))
    pv_a = np.zeros((R, n, 2))

    cdef double[:, :, ::1] Fnew = Fnew_a
    cdef double[:, :, ::1] affine = affine_a
    cdef double[:, ::1] grid_m = grid_m_a
    cdef double[:, :, ::1] grid_mv = grid_mv_a
    cdef long[:, ::1] base = base_a
    cdef double[:, ::1] fx = fx_a
    cdef double[:, :, ::1] vfinal = vfinal_a
    cdef double[:, ::1] nv = nv_a
    cdef double[:, :, ::1] nC = nC_a
    cdef double[:, ::1] xn = xn_a
    cdef double[:, :, ::1] px_st = px_a
    cdef double[:, :, ::1] pv_st = pv_a
    cdef double lo = prm[P_CLAMP_LO], hi = prm[P_CLAMP_HI]
    cdef Py_ssize_t p

    with nogil:
        _stress_forward(x, F, C, prm, Fnew, affine)
        _p2g(x, v, affine, prm, grid_m, grid_mv, base, fx)
        _grid_forward_inplace(grid_m, grid_mv, rpos, rvel, prm, vfinal)
        _g2p_advect(x, vfinal, base, fx, prm, nv, nC, xn)
        _project_forward(xn, nv, rpos, rvel, prm, px_st, pv_st)
        for p in range(n):
            xn[p, 0] = dmin(dmax(xn[p, 0], lo), hi)
            xn[p, 1] = dmin(dmax(xn[p, 1], lo), hi)
    return xn_a, nv_a, Fnew_a, nC_a


def substep_backward(x_in, v_in, F_in, C_in, rpos_in, rvel_in, prm_in,
                     gxn_in, gvn_in, gFn_in, gCn_in):
    """Adjoint of substep_forward; see _kernels_py.substep_backward."""
    cdef double[:, ::1] x = np.ascontiguousarray(x_in)
    cdef double[:, ::1] v = np.ascontiguousarray(v_in)
    cdef double[:, :, ::1] F = np.ascontiguousarray(F_in)
    cdef double[:, :, ::1] C = np.ascontiguousarray(C_in)
    cdef double[:, ::1] rpos = np.ascontiguousarray(rpos_in)
    cdef double[:, ::1] rvel = np.ascontiguousarray(rvel_in)
    cdef double[::1] prm = np.ascontiguousarray(prm_in)
    gxn_a = np.array(gxn_in, dtype=np.float64, copy=True)
    gvn_a = np.array(gvn_in, dtype=np.float64, copy=True)
    cdef double[:, ::1] gxn = gxn_a
    cdef double[:, ::1] gvn = gvn_a
    cdef double[:, :, ::1] gFn = np.ascontiguousarray(gFn_in)
    cdef double[:, :, ::1] gCn = np.ascontiguousarray(gCn_in)

    cdef Py_ssize_t n = x.shape[0], R = rpos.shape[0], p, i, j
    cdef long k
    cdef int G = <int>prm[P_N_NODES]
    cdef double dt = prm[P_DT], inv_dx = prm[P_INV_DX], pm = prm[P_MASS]
    cdef double dxc = 1.0 / inv_dx
    cdef double kap = 4.0 * inv_dx * inv_dx
    cdef double radius = prm[P_RADIUS]
    cdef int nb = <int>prm[P_BOUND]
    cdef double lo = prm[P_CLAMP_LO], hi = prm[P_CLAMP_HI]

    # forward recompute buffers
    Fnew_a = np.empty((n, 2, 2))
    affine_a = np.empty((n, 2, 2))
    grid_m_a = np.zeros((G, G))
    grid_mv_a = np.zeros((G, G, 2))
    base_a = np.zeros((n, 2), dtype=np.int64)
    fx_a = np.zeros((n, 2))
    stages_a = np.zeros((R + 1, G, G, 2))
    vfinal_a = np.zeros((G, G, 2))
    nv_a = np.zeros((n, 2))
    nC_a = np.zeros((n, 2, 2))
    xn_a = np.zeros((n, 2))
    px_a = np.zeros((R, n, 2))
    pv_a = np.zeros((R, n, 2))
    cdef double[:, :, ::1] Fnew = Fnew_a
    cdef double[:, :, ::1] affine = affine_a
    cdef double[:, ::1] grid_m = grid_m_a
    cdef double[:, :, ::1] grid_mv = grid_mv_a
    cdef long[:, ::1] base = base_a
    cdef double[:, ::1] fx = fx_a
    cdef double[:, :, :, ::1] stages = stages_a
    cdef double[:, :, ::1] vfinal = vfinal_a
    cdef double[:, ::1] nv = nv_a
    cdef double[:, :, ::1] nC = nC_a
    cdef double[:, ::1] xn = xn_a
    cdef double[:, :, ::1] px_st = px_a
    cdef double[:, :, ::1] pv_st = pv_a

    # outputs
    gx_a = np.zeros((n, 2))
    gv_a = np.zeros((n, 2))
    gF_a = np.zeros((n, 2, 2))
    gC_a = np.zeros((n, 2, 2))
    grp_a = np.zeros((R, 2))
    grv_a = np.zeros((R, 2))
    cdef double[:, ::1] gx = gx_a
    cdef double[:, ::1] gv = gv_a
    cdef double[:, :, ::1] gF = gF_a
    cdef double[:, :, ::1] gC = gC_a
    cdef double[:, ::1] grp = grp_a
    cdef double[:, ::1] grv = grv_a

    gvhat_a = np.zeros((G, G, 2))
    gvhat2_a = np.zeros((G, G, 2))
    gaff_a = np.zeros((n, 2, 2))
    cdef double[:, :, ::1] gvhat = gvhat_a
    cdef double[:, :, ::1] gvhat2 = gvhat2_a
    cdef double[:, :, ::1] gaff = gaff_a

    cdef double wx[3]
    cdef double wy[3]
    cdef double dwx[3]
    cdef double dwy[3]
    cdef double out[3]
    cdef double wt, dpx, dpy, gv0, gv1, u0, u1, s, gx0a, gx1a
    cdef double gc00, gc01, gc10, gc11, a00, a01, a10, a11
    cdef long row
    cdef long bx, by, lo0, hi0, lo1, hi1
    cdef double ddx, ddy, dist, nx, ny, relx, rely, rvn, ndotg, gr0, gr1
    cdef double gn0, gn1, ndg, gd0, gd1, gX0, gX1, gV0, gV1
    cdef double soft = prm[P_SOFTNESS], cutoff = prm[P_CUTOFF]
    cdef double fric = prm[P_FRICTION]
    cdef double reach = radius + log(1.0 / cutoff) / soft + dxc
    cdef double gpx, gpy, sdfv, infl, vn, vtx, vty, tn, sc_raw, sc
    cdef double r2x, r2y, ga0, ga1, ginfl, grel0, grel1, grel20, grel21
    cdef double gsc, gvt0, gvt1, gvnn, gtn, gsdf, gdist
    cdef double mx, my, gm_node, gmv0, gmv1, sc0, sc1

    with nogil:
        # ---- forward recompute ----
        _stress_forward(x, F, C, prm, Fnew, affine)
        _p2g(x, v, affine, prm, grid_m, grid_mv, base, fx)
        _grid_forward(grid_m, grid_mv, rpos, rvel, prm, stages, vfinal)
        _g2p_advect(x, vfinal, base, fx, prm, nv, nC, xn)
        _project_forward(xn, nv, rpos, rvel, prm, px_st, pv_st)

        # ---- adjoint ----
        # clamp
        for p in range(n):
            if not (lo < xn[p, 0] < hi):
                gxn[p, 0] = 0.0
            if not (lo < xn[p, 1] < hi):
                gxn[p, 1] = 0.0

        # particle projections, reverse robot order
        for k in range(R - 1, -1, -1):
            for p in range(n):
                ddx = px_st[k, p, 0] - rpos[k, 0]
                ddy = px_st[k, p, 1] - rpos[k, 1]
                dist = dmax(hypot(ddx, ddy), TINY)
                if dist >= radius:
                    continue
                nx = ddx / dist
                ny = ddy / dist
                relx = pv_st[k, p, 0] - rvel[k, 0]
                rely = pv_st[k, p, 1] - rvel[k, 1]
                rvn = relx * nx + rely * ny
                gX0 = gxn[p, 0]
                gX1 = gxn[p, 1]
                gV0 = gvn[p, 0]
                gV1 = gvn[p, 1]
                gn0 = 0.0
                gn1 = 0.0
                if rvn < 0.0:
                    ndotg = nx * gV0 + ny * gV1
                    gvn[p, 0] = gV0 - ndotg * nx
                    gvn[p, 1] = gV1 - ndotg * ny
                    grv[k, 0] += ndotg * nx
                    grv[k, 1] += ndotg * ny
                    gn0 = -relx * ndotg - rvn * gV0
                    gn1 = -rely * ndotg - rvn * gV1
                # position branch (always active when penetrating)
                gn0 += radius * gX0
                gn1 += radius * gX1
                grp[k, 0] += gX0
                grp[k, 1] += gX1
                gxn[p, 0] = 0.0
                gxn[p, 1] = 0.0
                ndg = nx * gn0 + ny * gn1
                gd0 = (gn0 - nx * ndg) / dist
                gd1 = (gn1 - ny * ndg) / dist
                gxn[p, 0] += gd0
                gxn[p, 1] += gd1
                grp[k, 0] -= gd0
                grp[k, 1] -= gd1

        # advect: xn = x + dt*nv
        for p in range(n):
            gx[p, 0] += gxn[p, 0]
            gx[p, 1] += gxn[p, 1]
            gvn[p, 0] += dt * gxn[p, 0]
            gvn[p, 1] += dt * gxn[p, 1]

        # g2p adjoint
        for p in range(n):
            _weights(fx[p, 0], wx, dwx)
            _weights(fx[p, 1], wy, dwy)
            bx = base[p, 0]
            by = base[p, 1]
            gx0a = 0.0
            gx1a = 0.0
            gc00 = gCn[p, 0, 0]
            gc01 = gCn[p, 0, 1]
            gc10 = gCn[p, 1, 0]
            gc11 = gCn[p, 1, 1]
            for i in range(3):
                dpx = (i - fx[p, 0]) * dxc
                row = (bx + i) * G + by
                for j in range(3):
                    wt = wx[i] * wy[j]
                    dpy = (j - fx[p, 1]) * dxc
                    gv0 = vfinal[bx + i, by + j, 0]
                    gv1 = vfinal[bx + i, by + j, 1]
                    u0 = gvn[p, 0] + kap * (gc00 * dpx + gc01 * dpy)
                    u1 = gvn[p, 1] + kap * (gc10 * dpx + gc11 * dpy)
                    gvhat[bx + i, by + j, 0] += wt * u0
                    gvhat[bx + i, by + j, 1] += wt * u1
                    s = u0 * gv0 + u1 * gv1
                    gx0a += s * dwx[i] * wy[j] * inv_dx
                    gx1a += s * wx[i] * dwy[j] * inv_dx
                    gx0a -= kap * wt * (gc00 * gv0 + gc10 * gv1)
                    gx1a -= kap * wt * (gc01 * gv0 + gc11 * gv1)
            gx[p, 0] += gx0a
            gx[p, 1] += gx1a

        # boundary adjoint
        for i in range(nb):
            for j in range(G):
                if stages[R, i, j, 0] < 0.0:
                    gvhat[i, j, 0] = 0.0
                if stages[R, G - 1 - i, j, 0] > 0.0:
                    gvhat[G - 1 - i, j, 0] = 0.0
                if stages[R, j, i, 1] < 0.0:
                    gvhat[j, i, 1] = 0.0
                if stages[R, j, G - 1 - i, 1] > 0.0:
                    gvhat[j, G - 1 - i, 1] = 0.0

        # contact stages, reverse order
        for k in range(R - 1, -1, -1):
            gpx = rpos[k, 0]
            gpy = rpos[k, 1]
            lo0 = <long>floor((gpx - reach) / dxc)
            hi0 = <long>floor((gpx + reach) / dxc) + 1
            lo1 = <long>floor((gpy - reach) / dxc)
            hi1 = <long>floor((gpy + reach) / dxc) + 1
            lo0 = max(lo0, 0)
            lo1 = max(lo1, 0)
            hi0 = min(hi0, G - 1)
            hi1 = min(hi1, G - 1)
            for i in range(lo0, hi0 + 1):
                for j in range(lo1, hi1 + 1):
                    ddx = i * dxc - gpx
                    ddy = j * dxc - gpy
                    dist = dmax(hypot(ddx, ddy), TINY)
                    sdfv = dist - radius
                    infl = exp(-soft * sdfv) if sdfv > 0.0 else 1.0
                    if infl <= cutoff:
                        continue
                    nx = ddx / dist
                    ny = ddy / dist
                    relx = stages[k, i, j, 0] - rvel[k, 0]
                    rely = stages[k, i, j, 1] - rvel[k, 1]
                    vn = relx * nx + rely * ny
                    ga0 = gvhat[i, j, 0]
                    ga1 = gvhat[i, j, 1]
                    if vn < 0.0:
                        vtx = relx - vn * nx
                        vty = rely - vn * ny
                        tn = dmax(hypot(vtx, vty), TINY)
                        sc_raw = 1.0 + fric * vn / tn
                        sc = dmax(0.0, sc_raw)
                        r2x = vtx * sc
                        r2y = vty * sc
                    else:
                        vtx = 0.0
                        vty = 0.0
                        tn = TINY
                        sc_raw = 0.0
                        sc = 0.0
                        r2x = relx
                        r2y = rely
                    ginfl = ga0 * (r2x - relx) + ga1 * (r2y - rely)
                    grel0 = (1.0 - infl) * ga0
                    grel1 = (1.0 - infl) * ga1
                    grel20 = infl * ga0
                    grel21 = infl * ga1
                    gn0 = 0.0
                    gn1 = 0.0
                    if vn < 0.0:
                        gsc = grel20 * vtx + grel21 * vty
                        gvt0 = sc * grel20
                        gvt1 = sc * grel21
                        if sc_raw > 0.0:
                            gvnn = fric / tn * gsc
                            gtn = -fric * vn / (tn * tn) * gsc
                        else:
                            gvnn = 0.0
                            gtn = 0.0
                        gvt0 += gtn * vtx / tn
                        gvt1 += gtn * vty / tn
                        grel0 += gvt0
                        grel1 += gvt1
                        gvnn += -(gvt0 * nx + gvt1 * ny)
                        gn0 += -vn * gvt0
                        gn1 += -vn * gvt1
                        grel0 += gvnn * nx
                        grel1 += gvnn * ny
                        gn0 += gvnn * relx
                        gn1 += gvnn * rely
                    else:
                        grel0 += grel20
                        grel1 += grel21
                    gvhat[i, j, 0] = grel0
                    gvhat[i, j, 1] = grel1
                    grv[k, 0] += ga0 - grel0
                    grv[k, 1] += ga1 - grel1
                    if sdfv > 0.0:
                        gsdf = -soft * infl * ginfl
                    else:
                        gsdf = 0.0
                    gdist = gsdf
                    ndg = nx * gn0 + ny * gn1
                    gd0 = (gn0 - nx * ndg) / dist + gdist * nx
                    gd1 = (gn1 - ny * ndg) / dist + gdist * ny
                    grp[k, 0] -= gd0
                    grp[k, 1] -= gd1

        # mass division adjoint
        for i in range(G):
            for j in range(G):
                if grid_m[i, j] > 0.0:
                    gvhat2[i, j, 0] = gvhat[i, j, 0] / grid_m[i, j]
                    gvhat2[i, j, 1] = gvhat[i, j, 1] / grid_m[i, j]
                else:
                    gvhat2[i, j, 0] = 0.0
                    gvhat2[i, j, 1] = 0.0

        # p2g adjoint (gvhat2 holds d/d grid_mv; gm recomputed per node)
        for p in range(n):
            _weights(fx[p, 0], wx, dwx)
            _weights(fx[p, 1], wy, dwy)
            bx = base[p, 0]
            by = base[p, 1]
            mx = pm * v[p, 0]
            my = pm * v[p, 1]
            gx0a = 0.0
            gx1a = 0.0
            a00 = affine[p, 0, 0]
            a01 = affine[p, 0, 1]
            a10 = affine[p, 1, 0]
            a11 = affine[p, 1, 1]
            for i in range(3):
                dpx = (i - fx[p, 0]) * dxc
                for j in range(3):
                    wt = wx[i] * wy[j]
                    dpy = (j - fx[p, 1]) * dxc
                    gmv0 = gvhat2[bx + i, by + j, 0]
                    gmv1 = gvhat2[bx + i, by + j, 1]
                    if grid_m[bx + i, by + j] > 0.0:
                        gm_node = -(gvhat[bx + i, by + j, 0] * stages[0, bx + i, by + j, 0]
                                    + gvhat[bx + i, by + j, 1] * stages[0, bx + i, by + j, 1]) \
                            / grid_m[bx + i, by + j]
                    else:
                        gm_node = 0.0
                    gv[p, 0] += wt * pm * gmv0
                    gv[p, 1] += wt * pm * gmv1
                    gaff[p, 0, 0] += wt * gmv0 * dpx
                    gaff[p, 0, 1] += wt * gmv0 * dpy
                    gaff[p, 1, 0] += wt * gmv1 * dpx
                    gaff[p, 1, 1] += wt * gmv1 * dpy
                    sc0 = mx + a00 * dpx + a01 * dpy
                    sc1 = my + a10 * dpx + a11 * dpy
                    s = gmv0 * sc0 + gmv1 * sc1 + pm * gm_node
                    gx0a += s * dwx[i] * wy[j] * inv_dx
                    gx1a += s * wx[i] * dwy[j] * inv_dx
                    gx0a -= wt * (a00 * gmv0 + a10 * gmv1)
                    gx1a -= wt * (a01 * gmv0 + a11 * gmv1)
            gx[p, 0] += gx0a
            gx[p, 1] += gx1a

        _stress_backward_c(F, C, prm, gFn, gaff, gF, gC)

    return gx_a, gv_a, gF_a, gC_a, grp_a, grv_a


cdef void _stress_backward_c(double[:, :, ::1] F,
                             double[:, :, ::1] C, double[::1] prm,
                             double[:, :, ::1] gFn_state,
                             double[:, :, ::1] gAffine,
                             double[:, :, ::1] gF, double[:, :, ::1] gC) nogil:
    cdef Py_ssize_t n = F.shape[0], p
    cdef double dt = prm[P_DT], mu = prm[P_MU], lam = prm[P_LAM]
    cdef double yc = prm[P_YIELD_C], pm = prm[P_MASS]
    cdef double coef = -dt * prm[P_VOL] * 4.0 * prm[P_INV_DX] * prm[P_INV_DX]
    cdef double a, b, c, d, h1x, h1y, h2x, h2y, q1, q2, s0, s1, den, rc, rs
    cdef double eps0, eps1, dev, th1, th2, thu, thv, m, kk, sp0, sp1
    cdef double cu, su, cv, sv, f00, f01, f10, f11, J, jt
    cdef double fm00, fm01, fm10, fm11
    cdef double gs00, gs01, gs10, gs11, gt00, gt01, gt10, gt11
    cdef double gf00, gf01, gf10, gf11, gr00, gr01, gr10, gr11, gJ
    cdef double grc, grs, dotn, gh1x, gh1y, gh2x, gh2y
    cdef double gthu, gthv, gsp0, gsp1, gm, gth1, gth2, gq1, gq2
    cdef double den1, den2, gFtr00, gFtr01, gFtr10, gFtr11
    cdef double ic00, ic01, ic10, ic11
    cdef bint yielded

    for p in range(n):
        a = F[p, 0, 0] + dt * (C[p, 0, 0] * F[p, 0, 0] + C[p, 0, 1] * F[p, 1, 0])
        b = F[p, 0, 1] + dt * (C[p, 0, 0] * F[p, 0, 1] + C[p, 0, 1] * F[p, 1, 1])
        c = F[p, 1, 0] + dt * (C[p, 1, 0] * F[p, 0, 0] + C[p, 1, 1] * F[p, 1, 0])
        d = F[p, 1, 1] + dt * (C[p, 1, 0] * F[p, 0, 1] + C[p, 1, 1] * F[p, 1, 1])
        h1x = a + d
        h1y = c - b
        h2x = a - d
        h2y = c + b
        q1 = 0.5 * hypot(h1x, h1y)
        q2 = 0.5 * hypot(h2x, h2y)
        s0 = dmax(q1 + q2, 1e-12)
        s1 = dmax(q1 - q2, 1e-12)
        den = dmax(2.0 * q1, TINY)
        rc = h1x / den
        rs = h1y / den
        yielded = s0 > exp(SQRT2 * yc) * s1
        if yielded:
            eps0 = log(s0)
            eps1 = log(s1)
            th1 = atan2(h1y, h1x)
            th2 = atan2(h2y, h2x)
            thu = 0.5 * (th2 + th1)
            thv = 0.5 * (th2 - th1)
            m = 0.5 * (eps0 + eps1)
            kk = yc / SQRT2
            sp0 = exp(m + kk)
            sp1 = exp(m - kk)
            cu = cos(thu)
            su = sin(thu)
            cv = cos(thv)
            sv = sin(thv)
            f00 = sp0 * cu * cv + sp1 * su * sv
            f01 = sp0 * cu * sv - sp1 * su * cv
            f10 = sp0 * su * cv - sp1 * cu * sv
            f11 = sp0 * su * sv + sp1 * cu * cv
        else:
            th1 = 0.0
            th2 = 0.0
            thu = 0.0
            thv = 0.0
            m = 0.0
            sp0 = 0.0
            sp1 = 0.0
            cu = 0.0
            su = 0.0
            cv = 0.0
            sv = 0.0
            f00 = a
            f01 = b
            f10 = c
            f11 = d
        J = f00 * f11 - f01 * f10
        fm00 = f00 - rc
        fm01 = f01 + rs
        fm10 = f10 - rs
        fm11 = f11 - rc

        # affine = coef*S + pm*C
        gC[p, 0, 0] += pm * gAffine[p, 0, 0]
        gC[p, 0, 1] += pm * gAffine[p, 0, 1]
        gC[p, 1, 0] += pm * gAffine[p, 1, 0]
        gC[p, 1, 1] += pm * gAffine[p, 1, 1]
        gs00 = coef * gAffine[p, 0, 0]
        gs01 = coef * gAffine[p, 0, 1]
        gs10 = coef * gAffine[p, 1, 0]
        gs11 = coef * gAffine[p, 1, 1]

        gt00 = 2.0 * mu * gs00
        gt01 = 2.0 * mu * gs01
        gt10 = 2.0 * mu * gs10
        gt11 = 2.0 * mu * gs11

        # gFnew = state + gT @ Fnew + gT^T @ FmR
        gf00 = gFn_state[p, 0, 0] + gt00 * f00 + gt01 * f10 + gt00 * fm00 + gt10 * fm10
        gf01 = gFn_state[p, 0, 1] + gt00 * f01 + gt01 * f11 + gt00 * fm01 + gt10 * fm11
        gf10 = gFn_state[p, 1, 0] + gt10 * f00 + gt11 * f10 + gt01 * fm00 + gt11 * fm10
        gf11 = gFn_state[p, 1, 1] + gt10 * f01 + gt11 * f11 + gt01 * fm01 + gt11 * fm11
        # gR = -gT @ Fnew
        gr00 = -(gt00 * f00 + gt01 * f10)
        gr01 = -(gt00 * f01 + gt01 * f11)
        gr10 = -(gt10 * f00 + gt11 * f10)
        gr11 = -(gt10 * f01 + gt11 * f11)
        gJ = lam * (2.0 * J - 1.0) * (gs00 + gs11)
        gf00 += gJ * f11
        gf11 += gJ * f00
        gf01 -= gJ * f10
        gf10 -= gJ * f01

        grc = gr00 + gr11
        grs = gr10 - gr01

        if not yielded:
            dotn = rc * grc + rs * grs
            gh1x = (grc - rc * dotn) / den
            gh1y = (grs - rs * dotn) / den
            gFtr00 = gf00 + gh1x
            gFtr11 = gf11 + gh1x
            gFtr10 = gf10 + gh1y
            gFtr01 = gf01 - gh1y
        else:
            gthu = gf00 * (-sp0 * su * cv + sp1 * cu * sv) \
                + gf01 * (-sp0 * su * sv - sp1 * cu * cv) \
                + gf10 * (sp0 * cu * cv + sp1 * su * sv) \
                + gf11 * (sp0 * cu * sv - sp1 * su * cv)
            gthv = gf00 * (-sp0 * cu * sv + sp1 * su * cv) \
                + gf01 * (sp0 * cu * cv + sp1 * su * sv) \
                + gf10 * (-sp0 * su * sv - sp1 * cu * cv) \
                + gf11 * (sp0 * su * cv - sp1 * cu * sv)
            gsp0 = gf00 * cu * cv + gf01 * cu * sv + gf10 * su * cv + gf11 * su * sv
            gsp1 = gf00 * su * sv - gf01 * su * cv - gf10 * cu * sv + gf11 * cu * cv
            gm = gsp0 * sp0 + gsp1 * sp1
            gth1 = -rs * (gr00 + gr11) + rc * (gr10 - gr01)
            gth1 += 0.5 * (gthu - gthv)
            gth2 = 0.5 * (gthu + gthv)
            gq1 = gm / (2.0 * s0) + gm / (2.0 * s1)
            gq2 = gm / (2.0 * s0) - gm / (2.0 * s1)
            den1 = dmax(4.0 * q1 * q1, TINY)
            den2 = dmax(4.0 * q2 * q2, TINY)
            gh1x = -h1y / den1 * gth1 + gq1 * h1x / dmax(4.0 * q1, TINY)
            gh1y = h1x / den1 * gth1 + gq1 * h1y / dmax(4.0 * q1, TINY)
            gh2x = -h2y / den2 * gth2 + gq2 * h2x / dmax(4.0 * q2, TINY)
            gh2y = h2x / den2 * gth2 + gq2 * h2y / dmax(4.0 * q2, TINY)
            gFtr00 = gh1x + gh2x
            gFtr11 = gh1x - gh2x
            gFtr10 = gh1y + gh2y
            gFtr01 = -gh1y + gh2y

        # Ftr = (I + dt C) F
        ic00 = 1.0 + dt * C[p, 0, 0]
        ic01 = dt * C[p, 0, 1]
        ic10 = dt * C[p, 1, 0]
        ic11 = 1.0 + dt * C[p, 1, 1]
        gF[p, 0, 0] += ic00 * gFtr00 + ic10 * gFtr10
        gF[p, 0, 1] += ic00 * gFtr01 + ic10 * gFtr11
        gF[p, 1, 0] += ic01 * gFtr00 + ic11 * gFtr10
        gF[p, 1, 1] += ic01 * gFtr01 + ic11 * gFtr11
        gC[p, 0, 0] += dt * (gFtr00 * F[p, 0, 0] + gFtr01 * F[p, 0, 1])
        gC[p, 0, 1] += dt * (gFtr00 * F[p, 1, 0] + gFtr01 * F[p, 1, 1])
        gC[p, 1, 0] += dt * (gFtr10 * F[p, 0, 0] + gFtr11 * F[p, 0, 1])
        gC[p, 1, 1] += dt * (gFtr10 * F[p, 1, 0] + gFtr11 * F[p, 1, 1])
