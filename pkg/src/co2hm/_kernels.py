"""Compiled inner loops of the flow proxy.

Arrays are indexed ``[k, j, i]`` (layer, row, column).  Face arrays hold the
quantity on the face between a cell and its +1 neighbour along one axis;
a positive face flux runs from the lower-index cell to the higher-index one
(downward for z faces).
"""
import numpy as np
from numba import njit

# rel-perm parameter vector layout
SWI, SGR, NW, NG, KRG0, MUW, MUG = range(7)


@njit(cache=True, inline="always")
def _mob(s, rp):
    """Gas and water mobilities and their derivatives w.r.t. gas saturation."""
    span = 1.0 - rp[SWI] - rp[SGR]
    sg = (s - rp[SGR]) / span
    sw = (1.0 - s - rp[SWI]) / span
    if sg <= 0.0:
        lg = 0.0
        dlg = 0.0
    elif sg >= 1.0:
        lg = rp[KRG0] / rp[MUG]
        dlg = 0.0
    else:
        lg = rp[KRG0] * sg ** rp[NG] / rp[MUG]
        dlg = rp[KRG0] * rp[NG] * sg ** (rp[NG] - 1.0) / (rp[MUG] * span)
    if sw <= 0.0:
        lw = 0.0
        dlw = 0.0
    elif sw >= 1.0:
        lw = 1.0 / rp[MUW]
        dlw = 0.0
    else:
        lw = sw ** rp[NW] / rp[MUW]
        dlw = -rp[NW] * sw ** (rp[NW] - 1.0) / (rp[MUW] * span)
    return lg, lw, dlg, dlw


@njit(cache=True, inline="always")
def _frac(s, rp):
    lg, lw, dlg, dlw = _mob(s, rp)
    lt = lg + lw
    if lt <= 0.0:
        return 0.0, 0.0
    return lg / lt, (dlg * lw - lg * dlw) / (lt * lt)


@njit(cache=True, inline="always")
def _grav_mob(s_low, s_up, rp):
    """Counter-current mobility product: gas from below, water from above."""
    lg, _, dlg, _ = _mob(s_low, rp)
    _, lw, _, dlw = _mob(s_up, rp)
    tot = lg + lw
    if tot <= 0.0 or lg <= 0.0 or lw <= 0.0:
        # derivatives still matter at the edge of the two-phase region
        if tot <= 0.0:
            return 0.0, 0.0, 0.0
        return 0.0, dlg * lw * lw / (tot * tot), dlw * lg * lg / (tot * tot)
    m = lg * lw / tot
    return m, dlg * lw * lw / (tot * tot), dlw * lg * lg / (tot * tot)


NB_SLOPE = 256


@njit(cache=True)
def slope_table(rp):
    """Max of df/dS over each of ``NB_SLOPE`` equal saturation bins (sampled finely)."""
    tab = np.zeros(NB_SLOPE)
    sub = 32
    for b in range(NB_SLOPE):
        best = 0.0
        for m in range(sub + 1):
            _, df = _frac((b + m / sub) / NB_SLOPE, rp)
            if df > best:
                best = df
        tab[b] = best * 1.05
    return tab


@njit(cache=True, inline="always")
def _slope_max(tab, a, b):
    if a > b:
        a, b = b, a
    nb = tab.shape[0]
    lo = min(max(int(a * nb), 0), nb - 1)
    hi = min(max(int(b * nb), 0), nb - 1)
    best = 0.0
    for m in range(lo, hi + 1):
        if tab[m] > best:
            best = tab[m]
    return best


@njit(cache=True)
def assemble_pressure(S, p, pc, pv, q, Tx, Ty, Tz, depth, rho_w, rho_g, grav, ct_dt,
                      rp, ab, rhs, ax, bx, ay, by, az, bz):
    """Banded SPD system for the pressure increment over one step.

    Unknown ordering is column-major with z fastest: ``b = (j*nx + i)*nz + k``,
    stored in LAPACK upper band form ``ab[bw + r - c, c]`` for ``r <= c``.
    Face fluxes after the solve are ``a * (p_lo - p_hi) + b``.
    """
    nz, ny, nx = S.shape
    bw = ab.shape[0] - 1
    ab[:, :] = 0.0
    for k in range(nz):
        for j in range(ny):
            for i in range(nx):
                r = (j * nx + i) * nz + k
                ab[bw, r] = ct_dt * pv[k, j, i]
                rhs[r] = q[k, j, i]

    # x faces
    for k in range(nz):
        for j in range(ny):
            for i in range(nx - 1):
                a, b = _face_coef(S[k, j, i], S[k, j, i + 1], p[k, j, i], p[k, j, i + 1],
                                  pc[k, j, i], pc[k, j, i + 1], 0.0, rho_w, rho_g, grav, rp)
                a *= Tx[k, j, i]
                b *= Tx[k, j, i]
                ax[k, j, i] = a
                bx[k, j, i] = b
                r0 = (j * nx + i) * nz + k
                r1 = (j * nx + i + 1) * nz + k
                _scatter(ab, rhs, bw, r0, r1, a, a * (p[k, j, i] - p[k, j, i + 1]) + b)
    # y faces
    for k in range(nz):
        for j in range(ny - 1):
            for i in range(nx):
                a, b = _face_coef(S[k, j, i], S[k, j + 1, i], p[k, j, i], p[k, j + 1, i],
                                  pc[k, j, i], pc[k, j + 1, i], 0.0, rho_w, rho_g, grav, rp)
                a *= Ty[k, j, i]
                b *= Ty[k, j, i]
                ay[k, j, i] = a
                by[k, j, i] = b
                r0 = (j * nx + i) * nz + k
                r1 = ((j + 1) * nx + i) * nz + k
                _scatter(ab, rhs, bw, r0, r1, a, a * (p[k, j, i] - p[k, j + 1, i]) + b)
    # z faces, positive downward
    for k in range(nz - 1):
        dz = depth[k] - depth[k + 1]
        for j in range(ny):
            for i in range(nx):
                a, b = _face_coef(S[k, j, i], S[k + 1, j, i], p[k, j, i], p[k + 1, j, i],
                                  pc[k, j, i], pc[k + 1, j, i], dz, rho_w, rho_g, grav, rp)
                a *= Tz[k, j, i]
                b *= Tz[k, j, i]
                az[k, j, i] = a
                bz[k, j, i] = b
                r0 = (j * nx + i) * nz + k
                _scatter(ab, rhs, bw, r0, r0 + 1, a, a * (p[k, j, i] - p[k + 1, j, i]) + b)


@njit(cache=True, inline="always")
def _face_coef(s0, s1, p0, p1, pc0, pc1, dz, rho_w, rho_g, grav, rp):
    """Phase-potential upwinded face mobilities -> (a, b) of the total flux."""
    dphi_w = (p0 - p1) - rho_w * grav * dz
    dphi_g = (p0 + pc0 - p1 - pc1) - rho_g * grav * dz
    lg0, lw0, _, _ = _mob(s0, rp)
    lg1, lw1, _, _ = _mob(s1, rp)
    lw = lw0 if dphi_w >= 0.0 else lw1
    lg = lg0 if dphi_g >= 0.0 else lg1
    a = lw + lg
    b = -(lw * rho_w + lg * rho_g) * grav * dz + lg * (pc0 - pc1)
    return a, b


@njit(cache=True, inline="always")
def _scatter(ab, rhs, bw, r0, r1, a, flux_old):
    ab[bw, r0] += a
    ab[bw, r1] += a
    ab[bw + r0 - r1, r1] -= a
    rhs[r0] -= flux_old
    rhs[r1] += flux_old


@njit(cache=True)
def face_fluxes(p, ax, bx, ay, by, az, bz, vx, vy, vz):
    nz, ny, nx = p.shape
    for k in range(nz):
        for j in range(ny):
            for i in range(nx - 1):
                vx[k, j, i] = ax[k, j, i] * (p[k, j, i] - p[k, j, i + 1]) + bx[k, j, i]
    for k in range(nz):
        for j in range(ny - 1):
            for i in range(nx):
                vy[k, j, i] = ay[k, j, i] * (p[k, j, i] - p[k, j + 1, i]) + by[k, j, i]
    for k in range(nz - 1):
        for j in range(ny):
            for i in range(nx):
                vz[k, j, i] = az[k, j, i] * (p[k, j, i] - p[k + 1, j, i]) + bz[k, j, i]


@njit(cache=True)
def explicit_cfl(pv, S, vx, vy, tab):
    """Largest monotone step of the explicit horizontal update.

    The fractional-flow slope is bounded over the saturations spanned by each
    cell and its upwind neighbours, so gas-free regions impose no limit.
    """
    nz, ny, nx = pv.shape
    dt = np.inf
    for k in range(nz):
        for j in range(ny):
            for i in range(nx):
                s0 = S[k, j, i]
                lo = s0
                hi = s0
                out = 0.0
                if i + 1 < nx:
                    v = vx[k, j, i]
                    if v > 0.0:
                        out += v
                    else:
                        lo = min(lo, S[k, j, i + 1])
                        hi = max(hi, S[k, j, i + 1])
                if i > 0:
                    v = vx[k, j, i - 1]
                    if v < 0.0:
                        out -= v
                    else:
                        lo = min(lo, S[k, j, i - 1])
                        hi = max(hi, S[k, j, i - 1])
                if j + 1 < ny:
                    v = vy[k, j, i]
                    if v > 0.0:
                        out += v
                    else:
                        lo = min(lo, S[k, j + 1, i])
                        hi = max(hi, S[k, j + 1, i])
                if j > 0:
                    v = vy[k, j - 1, i]
                    if v < 0.0:
                        out -= v
                    else:
                        lo = min(lo, S[k, j - 1, i])
                        hi = max(hi, S[k, j - 1, i])
                if out <= 0.0:
                    continue
                rate = _slope_max(tab, lo, hi) * out
                if rate > 0.0:
                    c = pv[k, j, i] / rate
                    if c < dt:
                        dt = c
    return dt


@njit(cache=True)
def capillary_cfl(pv, S, pc_scale, Tx, Ty, Tz, rp, pc_lambda, pc_max):
    nz, ny, nx = pv.shape
    dt = np.inf
    for k in range(nz):
        for j in range(ny):
            for i in range(nx):
                lg, lw, _, _ = _mob(S[k, j, i], rp)
                m = lg * lw / (lg + lw) if lg + lw > 0.0 else 0.0
                lg1, lw1, _, _ = _mob(min(S[k, j, i] + 0.05, 1.0), rp)
                m = max(m, lg1 * lw1 / (lg1 + lw1) if lg1 + lw1 > 0.0 else 0.0)
                tsum = 0.0
                if i + 1 < nx:
                    tsum += Tx[k, j, i]
                if i > 0:
                    tsum += Tx[k, j, i - 1]
                if j + 1 < ny:
                    tsum += Ty[k, j, i]
                if j > 0:
                    tsum += Ty[k, j - 1, i]
                if k + 1 < nz:
                    tsum += Tz[k, j, i]
                if k > 0:
                    tsum += Tz[k - 1, j, i]
                # bound on dPc/dS over the active range
                dpc = pc_max * pc_scale[k, j, i] / (pc_lambda * 0.05 * (1.0 - rp[SWI]))
                rate = 2.0 * tsum * m * dpc
                if rate > 0.0:
                    c = pv[k, j, i] / rate
                    if c < dt:
                        dt = c
    return dt


@njit(cache=True, inline="always")
def _cap_flux(s0, s1, pc0, pc1, T, rp):
    if pc0 == pc1:
        return 0.0
    if pc0 > pc1:
        lg, _, _, _ = _mob(s0, rp)
        _, lw, _, _ = _mob(s1, rp)
    else:
        lg, _, _, _ = _mob(s1, rp)
        _, lw, _, _ = _mob(s0, rp)
    tot = lg + lw
    if tot <= 0.0:
        return 0.0
    return T * lg * lw / tot * (pc0 - pc1)


@njit(cache=True)
def explicit_step(S, Snew, pv, q, vx, vy, dt, rp, pc, Tx, Ty, Tz, use_pc, sink):
    """Upwind fractional-flow update over horizontal faces plus well sources.

    ``sink`` is the volume rate (m^3/s) each cell sends to the region outside
    the model; outflow carries the cell's own fractional flow, inflow is brine.
    With capillarity on, capillary fluxes on all faces are added explicitly.
    Returns the gas volume exported through ``sink``.
    """
    nz, ny, nx = S.shape
    exported = 0.0
    for k in range(nz):
        for j in range(ny):
            for i in range(nx):
                Snew[k, j, i] = q[k, j, i] * dt
                r = sink[k, j, i]
                if r > 0.0:
                    f, _ = _frac(S[k, j, i], rp)
                    Snew[k, j, i] -= f * r * dt
                    exported += f * r * dt
    for k in range(nz):
        for j in range(ny):
            for i in range(nx - 1):
                v = vx[k, j, i]
                if v >= 0.0:
                    f, _ = _frac(S[k, j, i], rp)
                else:
                    f, _ = _frac(S[k, j, i + 1], rp)
                F = f * v
                if use_pc:
                    F += _cap_flux(S[k, j, i], S[k, j, i + 1], pc[k, j, i], pc[k, j, i + 1],
                                   Tx[k, j, i], rp)
                Snew[k, j, i] -= F * dt
                Snew[k, j, i + 1] += F * dt
    for k in range(nz):
        for j in range(ny - 1):
            for i in range(nx):
                v = vy[k, j, i]
                if v >= 0.0:
                    f, _ = _frac(S[k, j, i], rp)
                else:
                    f, _ = _frac(S[k, j + 1, i], rp)
                F = f * v
                if use_pc:
                    F += _cap_flux(S[k, j, i], S[k, j + 1, i], pc[k, j, i], pc[k, j + 1, i],
                                   Ty[k, j, i], rp)
                Snew[k, j, i] -= F * dt
                Snew[k, j + 1, i] += F * dt
    if use_pc:
        for k in range(nz - 1):
            for j in range(ny):
                for i in range(nx):
                    F = _cap_flux(S[k, j, i], S[k + 1, j, i], pc[k, j, i], pc[k + 1, j, i],
                                  Tz[k, j, i], rp)
                    Snew[k, j, i] -= F * dt
                    Snew[k + 1, j, i] += F * dt
    for k in range(nz):
        for j in range(ny):
            for i in range(nx):
                Snew[k, j, i] = S[k, j, i] + Snew[k, j, i] / pv[k, j, i]
    return exported


@njit(cache=True, inline="always")
def _zflux(s_up, s_dn, v, g, rp):
    """Downward gas flux across one z face and its partials (upper, lower)."""
    if v >= 0.0:
        f, df = _frac(s_up, rp)
        F = f * v
        dFu = df * v
        dFd = 0.0
    else:
        f, df = _frac(s_dn, rp)
        F = f * v
        dFu = 0.0
        dFd = df * v
    m, dm_low, dm_up = _grav_mob(s_dn, s_up, rp)
    F -= g * m
    dFu -= g * dm_up
    dFd -= g * dm_low
    return F, dFu, dFd


@njit(cache=True)
def _column_solve(S0, pv, v, g, dt, rp, out, tol, max_iter):
    """Backward-Euler vertical transport in one column; conservative result."""
    nz = S0.shape[0]
    s = S0.copy()
    F = np.zeros(nz + 1)
    dFu = np.zeros(nz + 1)
    dFd = np.zeros(nz + 1)
    R = np.empty(nz)
    lo = np.zeros(nz)
    di = np.zeros(nz)
    up = np.zeros(nz)
    cp = np.empty(nz)
    dp = np.empty(nz)
    converged = False
    for it in range(max_iter):
        for f in range(nz - 1):
            F[f + 1], dFu[f + 1], dFd[f + 1] = _zflux(s[f], s[f + 1], v[f], g[f], rp)
        rmax = 0.0
        for c in range(nz):
            R[c] = pv[c] * (s[c] - S0[c]) + dt * (F[c + 1] - F[c])
            r = abs(R[c]) / pv[c]
            if r > rmax:
                rmax = r
            # F[c+1] depends on s[c] (upper) and s[c+1]; F[c] on s[c-1] and s[c]
            di[c] = pv[c] + dt * (dFu[c + 1] - dFd[c])
            lo[c] = -dt * dFu[c] if c > 0 else 0.0
            up[c] = dt * dFd[c + 1] if c < nz - 1 else 0.0
        if rmax < tol:
            converged = True
            break
        # Thomas algorithm on J dx = -R
        cp[0] = up[0] / di[0]
        dp[0] = -R[0] / di[0]
        for c in range(1, nz):
            m = di[c] - lo[c] * cp[c - 1]
            cp[c] = up[c] / m
            dp[c] = (-R[c] - lo[c] * dp[c - 1]) / m
        for c in range(nz - 1, 0, -1):
            dp[c - 1] -= cp[c - 1] * dp[c]
        for c in range(nz):
            step = dp[c]
            if step > 0.2:
                step = 0.2
            elif step < -0.2:
                step = -0.2
            val = s[c] + step
            if val < 0.0:
                val = 0.0
            elif val > 1.0:
                val = 1.0
            s[c] = val
    # conservative reconstruction from fluxes at the final iterate
    for f in range(nz - 1):
        F[f + 1], _, _ = _zflux(s[f], s[f + 1], v[f], g[f], rp)
    for c in range(nz):
        out[c] = S0[c] - dt * (F[c + 1] - F[c]) / pv[c]
    return converged


@njit(cache=True)
def vertical_step(S, pv, vz, gz, dt, rp, tol, max_iter, max_depth):
    """Implicit vertical update of every column, sub-cycling stubborn ones.

    Returns the number of columns that failed at the deepest sub-cycle level.
    """
    nz, ny, nx = S.shape
    failures = 0
    col = np.empty(nz)
    pvc = np.empty(nz)
    vc = np.empty(max(nz - 1, 1))
    gc = np.empty(max(nz - 1, 1))
    out = np.empty(nz)
    if nz == 1:
        return 0
    for j in range(ny):
        for i in range(nx):
            for k in range(nz):
                col[k] = S[k, j, i]
                pvc[k] = pv[k, j, i]
            for k in range(nz - 1):
                vc[k] = vz[k, j, i]
                gc[k] = gz[k, j, i]
            # quick exit: no gas and no downward gas supply
            active = False
            for k in range(nz):
                if col[k] > 0.0:
                    active = True
                    break
            if not active:
                continue
            level = 0
            ok = False
            while level <= max_depth:
                nsub = 1 << level
                h = dt / nsub
                work = col.copy()
                ok = True
                for _ in range(nsub):
                    if not _column_solve(work, pvc, vc, gc, h, rp, out, tol, max_iter):
                        ok = False
                        break
                    for k in range(nz):
                        work[k] = out[k]
                if ok:
                    for k in range(nz):
                        S[k, j, i] = work[k]
                    break
                level += 1
            if not ok:
                failures += 1
                for k in range(nz):
                    S[k, j, i] = work[k]
    return failures


@njit(cache=True)
def capillary_pressure(S, scale, rp, lam, pc_max):
    """Brooks-Corey drainage curve, capped at ``pc_max`` times the entry value."""
    nz, ny, nx = S.shape
    out = np.empty_like(S)
    cap = pc_max ** (-lam)
    for k in range(nz):
        for j in range(ny):
            for i in range(nx):
                se = (1.0 - S[k, j, i] - rp[SWI]) / (1.0 - rp[SWI])
                if se >= 1.0:
                    out[k, j, i] = scale[k, j, i]
                else:
                    if se < cap:
                        se = cap
                    out[k, j, i] = scale[k, j, i] * se ** (-1.0 / lam)
    return out
