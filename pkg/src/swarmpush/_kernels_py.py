"""Pure-NumPy twin of the hot simulation kernels.

One MPM substep (particle-to-grid, grid update with disc contact and wall
clamping, grid-to-particle, deformation/plasticity update) plus its manual
reverse-mode adjoint.  swarmpush._kernels is the compiled Cython twin with
the same call signatures; swarmpush.backend picks whichever imports.

The deformation update avoids matrix SVD: a 2x2 F factors as
R(theta_u) diag(s0, s1) R(theta_v)^T with

    s0 = q1 + q2,  s1 = q1 - q2,
    q1 = |(a + d, c - b)| / 2,   q2 = |(a - d, c + b)| / 2,
    theta_u - theta_v = atan2(c - b, a + d),
    theta_u + theta_v = atan2(c + b, a - d),

so the polar rotation R = R(theta_u - theta_v) has a smooth closed form and
the angle pair is only needed on the von-Mises yield branch, where q2 is
bounded away from zero by the yield threshold.
"""

from __future__ import annotations

import numpy as np

BACKEND_NAME = "python"

# params vector layout, shared with _kernels.pyx (keep in sync).
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

_SQRT2 = np.sqrt(2.0)
_TINY = 1e-30


def _bspline(fx):
    """Quadratic B-spline weights per axis for fx in [0.5, 1.5)."""
    w0 = 0.5 * (1.5 - fx) ** 2
    w1 = 0.75 - (fx - 1.0) ** 2
    w2 = 0.5 * (fx - 0.5) ** 2
    return w0, w1, w2


def _dbspline(fx):
    d0 = fx - 1.5
    d1 = -2.0 * (fx - 1.0)
    d2 = fx - 0.5
    return d0, d1, d2


def _stress_phase(F, C, prm):
    """Deformation update, von-Mises return mapping and corotated stress.

    Returns (Fnew, affine) plus the intermediates the adjoint reuses.
    """
    dt = prm[P_DT]
    mu = prm[P_MU]
    lam = prm[P_LAM]
    yc = prm[P_YIELD_C]
    coef = -dt * prm[P_VOL] * 4.0 * prm[P_INV_DX] ** 2

    Ftr = F + dt * np.einsum("nij,njk->nik", C, F)
    a = Ftr[:, 0, 0]
    b = Ftr[:, 0, 1]
    c = Ftr[:, 1, 0]
    d = Ftr[:, 1, 1]
    h1x = a + d
    h1y = c - b
    h2x = a - d
    h2y = c + b
    q1 = 0.5 * np.hypot(h1x, h1y)
    q2 = 0.5 * np.hypot(h2x, h2y)
    s0 = np.maximum(q1 + q2, 1e-12)
    s1 = np.maximum(q1 - q2, 1e-12)

    # polar rotation R = [[rc, -rs], [rs, rc]]
    den = np.maximum(2.0 * q1, _TINY)
    rc = h1x / den
    rs = h1y / den

    # log-free yield test: ||eps_dev|| > yc  <=>  s0/s1 > exp(sqrt2*yc)
    yielded = s0 > np.exp(_SQRT2 * yc) * s1

    Fnew = Ftr.copy()
    if np.any(yielded):
        eps0 = np.log(s0)
        eps1 = np.log(s1)
        th1 = np.arctan2(h1y, h1x)
        th2 = np.arctan2(h2y, h2x)
        thu = 0.5 * (th2 + th1)
        thv = 0.5 * (th2 - th1)
        m = 0.5 * (eps0 + eps1)
        k = yc / _SQRT2
        sp0 = np.exp(m + k)
        sp1 = np.exp(m - k)
        cu, su = np.cos(thu), np.sin(thu)
        cv, sv = np.cos(thv), np.sin(thv)
        Fy = np.empty_like(Ftr)
        Fy[:, 0, 0] = sp0 * cu * cv + sp1 * su * sv
        Fy[:, 0, 1] = sp0 * cu * sv - sp1 * su * cv
        Fy[:, 1, 0] = sp0 * su * cv - sp1 * cu * sv
        Fy[:, 1, 1] = sp0 * su * sv + sp1 * cu * cv
        Fnew = np.where(yielded[:, None, None], Fy, Fnew)

    J = Fnew[:, 0, 0] * Fnew[:, 1, 1] - Fnew[:, 0, 1] * Fnew[:, 1, 0]

    # S = 2 mu (Fnew - R) Fnew^T + lam J (J - 1) I
    FmR = Fnew.copy()
    FmR[:, 0, 0] -= rc
    FmR[:, 0, 1] += rs
    FmR[:, 1, 0] -= rs
    FmR[:, 1, 1] -= rc
    S = 2.0 * mu * np.einsum("nik,njk->nij", FmR, Fnew)
    jterm = lam * J * (J - 1.0)
    S[:, 0, 0] += jterm
    S[:, 1, 1] += jterm

    affine = coef * S + prm[P_MASS] * C
    return Ftr, Fnew, affine, yielded


def _grid_build(x, v, affine, prm):
    """P2G scatter. Returns (grid_m, grid_mv, base, fx)."""
    inv_dx = prm[P_INV_DX]
    G = int(prm[P_N_NODES])
    pm = prm[P_MASS]
    dxc = 1.0 / inv_dx

    Xs = x * inv_dx
    base = np.floor(Xs - 0.5).astype(np.int64)
    fx = Xs - base
    wx = _bspline(fx[:, 0])
    wy = _bspline(fx[:, 1])

    grid_m = np.zeros((G, G))
    grid_mv = np.zeros((G, G, 2))
    mom = pm * v
    for i in range(3):
        for j in range(3):
            wt = wx[i] * wy[j]
            dpos = (np.array([i, j], dtype=np.float64) - fx) * dxc
            contrib = wt[:, None] * (mom + np.einsum("nij,nj->ni", affine, dpos))
            np.add.at(grid_mv, (base[:, 0] + i, base[:, 1] + j), contrib)
            np.add.at(grid_m, (base[:, 0] + i, base[:, 1] + j), wt * pm)
    return grid_m, grid_mv, base, fx


def _node_positions(prm):
    G = int(prm[P_N_NODES])
    dxc = 1.0 / prm[P_INV_DX]
    ax = np.arange(G) * dxc
    gx, gy = np.meshgrid(ax, ax, indexing="ij")
    return np.stack([gx, gy], axis=-1)


def _contact_stage(vin, rp, rv, prm, node_pos):
    """Project one robot's Coulomb contact onto the grid velocities."""
    soft = prm[P_SOFTNESS]
    cutoff = prm[P_CUTOFF]
    fric = prm[P_FRICTION]
    radius = prm[P_RADIUS]

    delta = node_pos - rp
    dist = np.maximum(np.hypot(delta[..., 0], delta[..., 1]), _TINY)
    sdf = dist - radius
    infl = np.where(sdf > 0.0, np.exp(-soft * sdf), 1.0)
    act = infl > cutoff
    n = delta / dist[..., None]
    rel = vin - rv
    vn = np.einsum("...i,...i->...", rel, n)
    appr = vn < 0.0
    vt = rel - vn[..., None] * n
    tn = np.maximum(np.hypot(vt[..., 0], vt[..., 1]), _TINY)
    sc = np.maximum(0.0, 1.0 + fric * vn / tn)
    rel2 = np.where(appr[..., None], vt * sc[..., None], rel)
    vout_full = rv + (1.0 - infl[..., None]) * rel + infl[..., None] * rel2
    return np.where(act[..., None], vout_full, vin)


def _boundary(vhat, prm):
    nb = int(prm[P_BOUND])
    G = vhat.shape[0]
    out = vhat.copy()
    out[:nb, :, 0] = np.maximum(out[:nb, :, 0], 0.0)
    out[G - nb:, :, 0] = np.minimum(out[G - nb:, :, 0], 0.0)
    out[:, :nb, 1] = np.maximum(out[:, :nb, 1], 0.0)
    out[:, G - nb:, 1] = np.minimum(out[:, G - nb:, 1], 0.0)
    return out


def _grid_stages(grid_m, grid_mv, rpos, rvel, prm, node_pos):
    """Mass-normalize then apply contacts sequentially; returns all stages.

    stages[0] is the post-division velocity field, stages[k+1] the field
    after robot k's contact; the returned final field has walls applied.
    """
    mask = grid_m > 0.0
    v0 = np.zeros_like(grid_mv)
    np.divide(grid_mv, grid_m[..., None], out=v0, where=mask[..., None])
    stages = [v0]
    cur = v0
    for k in range(rpos.shape[0]):
        cur = _contact_stage(cur, rpos[k], rvel[k], prm, node_pos)
        stages.append(cur)
    final = _boundary(cur, prm)
    return stages, final


def _g2p(x, vhat, base, fx, prm):
    inv_dx = prm[P_INV_DX]
    dxc = 1.0 / inv_dx
    kap = 4.0 * inv_dx ** 2
    wx = _bspline(fx[:, 0])
    wy = _bspline(fx[:, 1])
    n = x.shape[0]
    nv = np.zeros((n, 2))
    nC = np.zeros((n, 2, 2))
    for i in range(3):
        for j in range(3):
            wt = wx[i] * wy[j]
            dpos = (np.array([i, j], dtype=np.float64) - fx) * dxc
            gv = vhat[base[:, 0] + i, base[:, 1] + j]
            nv += wt[:, None] * gv
            nC += kap * wt[:, None, None] * gv[:, :, None] * dpos[:, None, :]
    return nv, nC


def _project_particles(xn, nv, rpos, rvel, prm):
    """Hard clearance projection against each robot disc (sequential)."""
    radius = prm[P_RADIUS]
    stages = []
    for k in range(rpos.shape[0]):
        delta = xn - rpos[k]
        dist = np.maximum(np.hypot(delta[:, 0], delta[:, 1]), _TINY)
        pen = dist < radius
        stages.append((xn, nv, pen, dist))
        if not np.any(pen):
            continue
        nrm = delta / dist[:, None]
        xn = np.where(pen[:, None], rpos[k] + radius * nrm, xn)
        relv = nv - rvel[k]
        rvn = np.einsum("ni,ni->n", relv, nrm)
        fix = pen & (rvn < 0.0)
        nv = np.where(fix[:, None], rvel[k] + relv - rvn[:, None] * nrm, nv)
    return xn, nv, stages


def substep_forward(x, v, F, C, rpos, rvel, prm):
    """One MPM substep. Robots are kinematic: rpos is their pose during
    the substep, rvel the clamped command; returns (x', v', F', C')."""
    dt = prm[P_DT]
    _, Fnew, affine, _ = _stress_phase(F, C, prm)
    grid_m, grid_mv, base, fx = _grid_build(x, v, affine, prm)
    node_pos = _node_positions(prm)
    _, vfinal = _grid_stages(grid_m, grid_mv, rpos, rvel, prm, node_pos)
    nv, nC = _g2p(x, vfinal, base, fx, prm)
    xn = x + dt * nv
    xn, nv, _ = _project_particles(xn, nv, rpos, rvel, prm)
    xn = np.clip(xn, prm[P_CLAMP_LO], prm[P_CLAMP_HI])
    return xn, nv, Fnew, nC


def _stress_backward(F, C, prm, gFnew_state, gAffine):
    """Adjoint of _stress_phase: returns (gF, gC)."""
    dt = prm[P_DT]
    mu = prm[P_MU]
    lam = prm[P_LAM]
    yc = prm[P_YIELD_C]
    coef = -dt * prm[P_VOL] * 4.0 * prm[P_INV_DX] ** 2

    # recompute forward intermediates
    Ftr = F + dt * np.einsum("nij,njk->nik", C, F)
    a = Ftr[:, 0, 0]
    b = Ftr[:, 0, 1]
    c = Ftr[:, 1, 0]
    d = Ftr[:, 1, 1]
    h1x = a + d
    h1y = c - b
    h2x = a - d
    h2y = c + b
    q1 = 0.5 * np.hypot(h1x, h1y)
    q2 = 0.5 * np.hypot(h2x, h2y)
    s0 = np.maximum(q1 + q2, 1e-12)
    s1 = np.maximum(q1 - q2, 1e-12)
    den = np.maximum(2.0 * q1, _TINY)
    rc = h1x / den
    rs = h1y / den
    yielded = s0 > np.exp(_SQRT2 * yc) * s1
    eps0 = np.log(s0)
    eps1 = np.log(s1)

    th1 = np.arctan2(h1y, h1x)
    th2 = np.arctan2(h2y, np.where(q2 > 0.0, h2x, 1.0))
    thu = 0.5 * (th2 + th1)
    thv = 0.5 * (th2 - th1)
    m = 0.5 * (eps0 + eps1)
    k = yc / _SQRT2
    sp0 = np.exp(m + k)
    sp1 = np.exp(m - k)
    cu, su = np.cos(thu), np.sin(thu)
    cv, sv = np.cos(thv), np.sin(thv)
    Fy = np.empty_like(Ftr)
    Fy[:, 0, 0] = sp0 * cu * cv + sp1 * su * sv
    Fy[:, 0, 1] = sp0 * cu * sv - sp1 * su * cv
    Fy[:, 1, 0] = sp0 * su * cv - sp1 * cu * sv
    Fy[:, 1, 1] = sp0 * su * sv + sp1 * cu * cv
    Fnew = np.where(yielded[:, None, None], Fy, Ftr)
    J = Fnew[:, 0, 0] * Fnew[:, 1, 1] - Fnew[:, 0, 1] * Fnew[:, 1, 0]
    FmR = Fnew.copy()
    FmR[:, 0, 0] -= rc
    FmR[:, 0, 1] += rs
    FmR[:, 1, 0] -= rs
    FmR[:, 1, 1] -= rc

    # adjoint: affine = coef*S + pm*C
    gC = prm[P_MASS] * gAffine
    gS = coef * gAffine

    # S = 2 mu FmR Fnew^T + lam J (J-1) I
    gT = 2.0 * mu * gS
    gFnew = gFnew_state + np.einsum("nij,njk->nik", gT, Fnew) \
        + np.einsum("nji,njk->nik", gT, FmR)
    gRmat = -np.einsum("nij,njk->nik", gT, Fnew)
    gJ = lam * (2.0 * J - 1.0) * (gS[:, 0, 0] + gS[:, 1, 1])
    gFnew[:, 0, 0] += gJ * Fnew[:, 1, 1]
    gFnew[:, 1, 1] += gJ * Fnew[:, 0, 0]
    gFnew[:, 0, 1] -= gJ * Fnew[:, 1, 0]
    gFnew[:, 1, 0] -= gJ * Fnew[:, 0, 1]

    grc = gRmat[:, 0, 0] + gRmat[:, 1, 1]
    grs = gRmat[:, 1, 0] - gRmat[:, 0, 1]

    # ----- no-yield branch: Fnew = Ftr, R = normalize(h1) -----
    dotn = rc * grc + rs * grs
    gh1x_n = (grc - rc * dotn) / den
    gh1y_n = (grs - rs * dotn) / den
    gFtr_n = gFnew.copy()
    gFtr_n[:, 0, 0] += gh1x_n
    gFtr_n[:, 1, 1] += gh1x_n
    gFtr_n[:, 1, 0] += gh1y_n
    gFtr_n[:, 0, 1] -= gh1y_n

    # ----- yield branch -----
    # Fnew = Ru diag(sp) Rv^T; d/dthu uses R'(thu) etc.
    g00 = gFnew[:, 0, 0]
    g01 = gFnew[:, 0, 1]
    g10 = gFnew[:, 1, 0]
    g11 = gFnew[:, 1, 1]
    # d Fy / d thu: replace (cu,su) -> (-su,cu)
    gthu = g00 * (-sp0 * su * cv + sp1 * cu * sv) \
        + g01 * (-sp0 * su * sv - sp1 * cu * cv) \
        + g10 * (sp0 * cu * cv + sp1 * su * sv) \
        + g11 * (sp0 * cu * sv - sp1 * su * cv)
    # d Fy / d thv: replace (cv,sv) -> (-sv,cv)
    gthv = g00 * (-sp0 * cu * sv + sp1 * su * cv) \
        + g01 * (sp0 * cu * cv + sp1 * su * sv) \
        + g10 * (-sp0 * su * sv - sp1 * cu * cv) \
        + g11 * (sp0 * su * cv - sp1 * cu * sv)
    gsp0 = g00 * cu * cv + g01 * cu * sv + g10 * su * cv + g11 * su * sv
    gsp1 = g00 * su * sv - g01 * su * cv - g10 * cu * sv + g11 * cu * cv
    gm = gsp0 * sp0 + gsp1 * sp1
    # R = R(th1): <gR, R'(th1)>, R'(t) = [[-sin,-cos],[cos,-sin]]
    gth1 = -rs * (gRmat[:, 0, 0] + gRmat[:, 1, 1]) + rc * (gRmat[:, 1, 0] - gRmat[:, 0, 1])
    gth1 = gth1 + 0.5 * (gthu - gthv)
    gth2 = 0.5 * (gthu + gthv)
    gs0 = gm / (2.0 * s0)
    gs1 = gm / (2.0 * s1)
    gq1 = gs0 + gs1
    gq2 = gs0 - gs1
    den1 = np.maximum(4.0 * q1 * q1, _TINY)
    den2 = np.maximum(4.0 * q2 * q2, _TINY)
    gh1x_y = -h1y / den1 * gth1 + gq1 * h1x / np.maximum(4.0 * q1, _TINY)
    gh1y_y = h1x / den1 * gth1 + gq1 * h1y / np.maximum(4.0 * q1, _TINY)
    gh2x_y = -h2y / den2 * gth2 + gq2 * h2x / np.maximum(4.0 * q2, _TINY)
    gh2y_y = h2x / den2 * gth2 + gq2 * h2y / np.maximum(4.0 * q2, _TINY)
    gFtr_y = np.zeros_like(Ftr)
    gFtr_y[:, 0, 0] = gh1x_y + gh2x_y
    gFtr_y[:, 1, 1] = gh1x_y - gh2x_y
    gFtr_y[:, 1, 0] = gh1y_y + gh2y_y
    gFtr_y[:, 0, 1] = -gh1y_y + gh2y_y

    gFtr = np.where(yielded[:, None, None], gFtr_y, gFtr_n)

    # Ftr = (I + dt C) F
    IC = np.tile(np.eye(2), (F.shape[0], 1, 1)) + dt * C
    gF = np.einsum("nki,nkj->nij", IC, gFtr)
    gC += dt * np.einsum("nik,njk->nij", gFtr, F)
    return gF, gC


def _contact_backward(vin, rp, rv, prm, node_pos, gout):
    """Adjoint of one contact stage: returns (gvin, grp, grv)."""
    soft = prm[P_SOFTNESS]
    cutoff = prm[P_CUTOFF]
    fric = prm[P_FRICTION]
    radius = prm[P_RADIUS]

    delta = node_pos - rp
    dist = np.maximum(np.hypot(delta[..., 0], delta[..., 1]), _TINY)
    sdf = dist - radius
    infl = np.where(sdf > 0.0, np.exp(-soft * sdf), 1.0)
    act = infl > cutoff
    n = delta / dist[..., None]
    rel = vin - rv
    vn = np.einsum("...i,...i->...", rel, n)
    appr = vn < 0.0
    vt = rel - vn[..., None] * n
    tn = np.maximum(np.hypot(vt[..., 0], vt[..., 1]), _TINY)
    sc_raw = 1.0 + fric * vn / tn
    sc = np.maximum(0.0, sc_raw)
    rel2 = np.where(appr[..., None], vt * sc[..., None], rel)

    ga = np.where(act[..., None], gout, 0.0)

    ginfl = np.einsum("...i,...i->...", ga, rel2 - rel)
    grel = (1.0 - infl[..., None]) * ga
    grel2 = infl[..., None] * ga

    # approach branch: rel2 = sc * vt
    gsc = np.einsum("...i,...i->...", grel2, vt)
    gvt = sc[..., None] * grel2
    live = appr & (sc_raw > 0.0)
    gvn = np.where(live, fric / tn * gsc, 0.0)
    gtn = np.where(live, -fric * vn / (tn * tn) * gsc, 0.0)
    gvt = np.where(appr[..., None], gvt, 0.0)
    gvt += gtn[..., None] * vt / tn[..., None]
    # vt = rel - vn n
    grel_b = np.where(appr[..., None], gvt, grel2)  # non-approach: rel2 = rel
    grel = grel + grel_b
    gvn += np.where(appr, -np.einsum("...i,...i->...", gvt, n), 0.0)
    gn = np.where(appr[..., None], -vn[..., None] * gvt, 0.0)
    # vn = rel . n
    grel += gvn[..., None] * n
    gn += gvn[..., None] * rel

    gvin = np.where(act[..., None], grel, gout)
    grv_field = ga - grel
    grv = grv_field.sum(axis=(0, 1))

    gsdf = np.where(act & (sdf > 0.0), -soft * infl * ginfl, 0.0)
    gdist = gsdf
    ndotgn = np.einsum("...i,...i->...", n, gn)
    gdelta = (gn - n * ndotgn[..., None]) / dist[..., None]
    gdelta += gdist[..., None] * n
    gdelta = np.where(act[..., None], gdelta, 0.0)
    grp = -gdelta.sum(axis=(0, 1))
    return gvin, grp, grv


def substep_backward(x, v, F, C, rpos, rvel, prm, gxn, gvn, gFn, gCn):
    """Adjoint of substep_forward.

    Returns (gx, gv, gF, gC, grpos, grvel): cotangents of the substep
    inputs plus this substep's contributions to the robot pose/command.
    """
    dt = prm[P_DT]
    inv_dx = prm[P_INV_DX]
    dxc = 1.0 / inv_dx
    kap = 4.0 * inv_dx ** 2
    pm = prm[P_MASS]
    nb = int(prm[P_BOUND])
    G = int(prm[P_N_NODES])
    R = rpos.shape[0]
    radius = prm[P_RADIUS]

    grpos = np.zeros((R, 2))
    grvel = np.zeros((R, 2))

    # ---- forward recompute ----
    _, Fnew, affine, _ = _stress_phase(F, C, prm)
    grid_m, grid_mv, base, fx = _grid_build(x, v, affine, prm)
    node_pos = _node_positions(prm)
    stages, vfinal = _grid_stages(grid_m, grid_mv, rpos, rvel, prm, node_pos)
    nv0, _ = _g2p(x, vfinal, base, fx, prm)
    xn0 = x + dt * nv0
    xn1, nv1, pstages = _project_particles(xn0, nv0, rpos, rvel, prm)

    # ---- adjoint ----
    # clamp
    inside = (xn1 > prm[P_CLAMP_LO]) & (xn1 < prm[P_CLAMP_HI])
    gxn = np.where(inside, gxn, 0.0)

    # particle projections, reverse robot order
    for k in range(R - 1, -1, -1):
        xk, vk, pen, dist = pstages[k]
        if not np.any(pen):
            continue
        delta = xk - rpos[k]
        nrm = delta / dist[:, None]
        relv = vk - rvel[k]
        rvn = np.einsum("ni,ni->n", relv, nrm)
        fix = pen & (rvn < 0.0)

        gX_out = gxn
        gV_out = gvn
        # velocity branch
        ndotg = np.einsum("ni,ni->n", nrm, gV_out)
        grelv = gV_out - ndotg[:, None] * nrm
        gvn = np.where(fix[:, None], grelv, gV_out)
        grvel[k] += np.where(fix[:, None], gV_out - grelv, 0.0).sum(axis=0)
        gn = np.where(fix[:, None], -relv * ndotg[:, None] - rvn[:, None] * gV_out, 0.0)
        # position branch
        gn += np.where(pen[:, None], radius * gX_out, 0.0)
        grpos[k] += np.where(pen[:, None], gX_out, 0.0).sum(axis=0)
        gxn = np.where(pen[:, None], 0.0, gX_out)
        # n = delta / dist
        ndg = np.einsum("ni,ni->n", nrm, gn)
        gdelta = (gn - nrm * ndg[:, None]) / dist[:, None]
        gdelta = np.where(pen[:, None], gdelta, 0.0)
        gxn += gdelta
        grpos[k] -= gdelta.sum(axis=0)

    # advect: xn0 = x + dt*nv0
    gx = gxn.copy()
    gnv = gvn + dt * gxn

    # g2p adjoint
    wx = _bspline(fx[:, 0])
    wy = _bspline(fx[:, 1])
    dwx = _dbspline(fx[:, 0])
    dwy = _dbspline(fx[:, 1])
    gvhat = np.zeros((G, G, 2))
    for i in range(3):
        for j in range(3):
            wt = wx[i] * wy[j]
            dpos = (np.array([i, j], dtype=np.float64) - fx) * dxc
            gv_node = vfinal[base[:, 0] + i, base[:, 1] + j]
            u = gnv + kap * np.einsum("nij,nj->ni", gCn, dpos)
            np.add.at(gvhat, (base[:, 0] + i, base[:, 1] + j), wt[:, None] * u)
            s = np.einsum("ni,ni->n", u, gv_node)
            gx[:, 0] += s * dwx[i] * wy[j] * inv_dx
            gx[:, 1] += s * wx[i] * dwy[j] * inv_dx
            gx -= kap * wt[:, None] * np.einsum("nji,nj->ni", gCn, gv_node)

    # boundary adjoint: clamped components got zero gradient
    vpre = stages[-1]
    m0 = gvhat.copy()
    m0[:nb, :, 0] = np.where(vpre[:nb, :, 0] < 0.0, 0.0, m0[:nb, :, 0])
    m0[G - nb:, :, 0] = np.where(vpre[G - nb:, :, 0] > 0.0, 0.0, m0[G - nb:, :, 0])
    m0[:, :nb, 1] = np.where(vpre[:, :nb, 1] < 0.0, 0.0, m0[:, :nb, 1])
    m0[:, G - nb:, 1] = np.where(vpre[:, G - nb:, 1] > 0.0, 0.0, m0[:, G - nb:, 1])
    gvhat = m0

    # contact stages, reverse order
    for k in range(R - 1, -1, -1):
        gvhat, grp_k, grv_k = _contact_backward(
            stages[k], rpos[k], rvel[k], prm, node_pos, gvhat)
        grpos[k] += grp_k
        grvel[k] += grv_k

    # mass division
    mask = grid_m > 0.0
    v0 = stages[0]
    gmv = np.zeros_like(gvhat)
    np.divide(gvhat, grid_m[..., None], out=gmv, where=mask[..., None])
    gm = np.zeros_like(grid_m)
    np.divide(-np.einsum("...i,...i->...", gvhat, v0), grid_m,
              out=gm, where=mask)

    # p2g adjoint
    gv = np.zeros_like(v)
    gAffine = np.zeros_like(affine)
    mom = pm * v
    for i in range(3):
        for j in range(3):
            wt = wx[i] * wy[j]
            dpos = (np.array([i, j], dtype=np.float64) - fx) * dxc
            gmv_node = gmv[base[:, 0] + i, base[:, 1] + j]
            gm_node = gm[base[:, 0] + i, base[:, 1] + j]
            gv += wt[:, None] * pm * gmv_node
            gAffine += wt[:, None, None] * gmv_node[:, :, None] * dpos[:, None, :]
            scat = mom + np.einsum("nij,nj->ni", affine, dpos)
            s = np.einsum("ni,ni->n", gmv_node, scat) + pm * gm_node
            gx[:, 0] += s * dwx[i] * wy[j] * inv_dx
            gx[:, 1] += s * wx[i] * dwy[j] * inv_dx
            gx -= wt[:, None] * np.einsum("nji,nj->ni", affine, gmv_node)

    gF, gC = _stress_backward(F, C, prm, gFn, gAffine)
    return gx, gv, gF, gC, grpos, grvel
