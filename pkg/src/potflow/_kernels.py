"""Numba kernels for cell clipping, sphere restriction, and diagram builds.

Everything here operates on packed float64/int64 arrays so the per-cell work
(clipping a convex polytope by bisector planes, restricting its facets to a
sphere, integrating generalized polygons, projecting facets onto the sphere)
runs at native speed and is bitwise deterministic: parallel entry points only
ever write to per-cell output slots, and every reduction is performed by the
caller in fixed order.

Packed cell layout
------------------
verts     (MAX_V, 3)   vertex coordinates, first cnt[0] rows valid
planes    (MAX_F, 4)   facet planes as (nx, ny, nz, d), inside is n.x <= d
tags      (MAX_F,)     facet tag: site index j >= 0, or -(k+1) for domain face k
loop_ptr  (MAX_F + 1,) CSR offsets into loop_vi
loop_vi   (MAX_L,)     facet vertex loops, counter-clockwise seen from outside
cnt       (3,)         [n_vertices, n_facets, n_loop_entries]
"""

import numpy as np
from numba import njit, prange

# Buffer capacities per cell.  Overflow is reported, never silently truncated.
MAX_V = 512
MAX_F = 160
MAX_L = 2048
MAX_P = 256  # emitted boundary points per restricted facet

# Clip outcomes
CLIP_CUT = 0
CLIP_UNTOUCHED = 1
CLIP_EMPTY = 2
CLIP_OVERFLOW = 3
CLIP_DEGENERATE = 4

# Restricted facet kinds
RF_OUTSIDE = 0
RF_UNTOUCHED = 1
RF_FULLCIRCLE = 2
RF_GENPOLY = 3

# Restricted cell statuses
CELL_EMPTY = 0
CELL_FULLBALL = 1
CELL_CLIPPED = 2

# Error flag bits reported per cell
FLAG_OVERFLOW = 1
FLAG_DEGENERATE_INTERIOR = 2
FLAG_UNSTABLE_PROJECTION = 4

FOUR_PI = 4.0 * np.pi


# ----------------------------------------------------------------------------
# small vector helpers
# ----------------------------------------------------------------------------

@njit(cache=True)
def _perp_basis(nx, ny, nz):
    """Right-handed orthonormal (e1, e2, n) from a unit normal, deterministic."""
    ax, ay, az = abs(nx), abs(ny), abs(nz)
    if ax <= ay and ax <= az:
        ux, uy, uz = 1.0, 0.0, 0.0
    elif ay <= az:
        ux, uy, uz = 0.0, 1.0, 0.0
    else:
        ux, uy, uz = 0.0, 0.0, 1.0
    # e1 = normalize(u x n), e2 = n x e1
    e1x = uy * nz - uz * ny
    e1y = uz * nx - ux * nz
    e1z = ux * ny - uy * nx
    inv = 1.0 / np.sqrt(e1x * e1x + e1y * e1y + e1z * e1z)
    e1x *= inv
    e1y *= inv
    e1z *= inv
    e2x = ny * e1z - nz * e1y
    e2y = nz * e1x - nx * e1z
    e2z = nx * e1y - ny * e1x
    return e1x, e1y, e1z, e2x, e2y, e2z


@njit(cache=True)
def _cell_copy(vs, cs, ps, ts, lps, lvs, vd, cd, pd, td, lpd, lvd):
    nv, nf, nl = cs[0], cs[1], cs[2]
    for i in range(nv):
        vd[i, 0] = vs[i, 0]
        vd[i, 1] = vs[i, 1]
        vd[i, 2] = vs[i, 2]
    for f in range(nf):
        pd[f, 0] = ps[f, 0]
        pd[f, 1] = ps[f, 1]
        pd[f, 2] = ps[f, 2]
        pd[f, 3] = ps[f, 3]
        td[f] = ts[f]
        lpd[f] = lps[f]
    lpd[nf] = lps[nf]
    for k in range(nl):
        lvd[k] = lvs[k]
    cd[0] = nv
    cd[1] = nf
    cd[2] = nl


# ----------------------------------------------------------------------------
# convex cell clipping
# ----------------------------------------------------------------------------

@njit(cache=True)
def _clip_into(va, ca, pla, tga, lpa, lva,
               vb, cb, plb, tgb, lpb, lvb,
               nx, ny, nz, dd, tag, tol):
    """Clip cell A by halfspace n.x <= d into cell B.

    Vertices within tol of the plane are classified inside so that repeated
    clips with the same plane are stable.  Returns a CLIP_* outcome; B is only
    valid on CLIP_CUT.
    """
    nv = ca[0]
    nf = ca[1]
    sd = np.empty(nv, np.float64)
    n_out = 0
    n_in = 0
    for v in range(nv):
        s = nx * va[v, 0] + ny * va[v, 1] + nz * va[v, 2] - dd
        sd[v] = s
        if s > tol:
            n_out += 1
        else:
            n_in += 1
    if n_out == 0:
        return CLIP_UNTOUCHED
    if n_in == 0:
        return CLIP_EMPTY

    # keep inside vertices, remap
    vmap = np.full(nv, -1, np.int64)
    nvb = 0
    for v in range(nv):
        if sd[v] <= tol:
            if nvb >= MAX_V:
                return CLIP_OVERFLOW
            vb[nvb, 0] = va[v, 0]
            vb[nvb, 1] = va[v, 1]
            vb[nvb, 2] = va[v, 2]
            vmap[v] = nvb
            nvb += 1

    # crossing vertices are shared between the two facets adjacent to an edge
    cut_ea = np.empty(MAX_V, np.int64)
    cut_eb = np.empty(MAX_V, np.int64)
    cut_vi = np.empty(MAX_V, np.int64)
    n_cut = 0
    on_new = np.zeros(MAX_V, np.uint8)

    tmp = np.empty(MAX_V, np.int64)
    nfb = 0
    nlb = 0
    lpb[0] = 0
    for f in range(nf):
        start = lpa[f]
        m = lpa[f + 1] - start
        k = 0
        for e in range(m):
            a = lva[start + e]
            b = lva[start + (e + 1) % m]
            sa = sd[a]
            sb = sd[b]
            ina = sa <= tol
            inb = sb <= tol
            if ina:
                tmp[k] = vmap[a]
                k += 1
                if sa >= -tol:
                    on_new[vmap[a]] = 1
                if (not inb) and sa < -tol:
                    # strict inside -> outside crossing
                    idx = -1
                    lo = a if a < b else b
                    hi = b if a < b else a
                    for q in range(n_cut):
                        if cut_ea[q] == lo and cut_eb[q] == hi:
                            idx = cut_vi[q]
                            break
                    if idx < 0:
                        if nvb >= MAX_V or n_cut >= MAX_V:
                            return CLIP_OVERFLOW
                        t = sa / (sa - sb)
                        vb[nvb, 0] = va[a, 0] + t * (va[b, 0] - va[a, 0])
                        vb[nvb, 1] = va[a, 1] + t * (va[b, 1] - va[a, 1])
                        vb[nvb, 2] = va[a, 2] + t * (va[b, 2] - va[a, 2])
                        idx = nvb
                        cut_ea[n_cut] = lo
                        cut_eb[n_cut] = hi
                        cut_vi[n_cut] = idx
                        n_cut += 1
                        nvb += 1
                    tmp[k] = idx
                    k += 1
                    on_new[idx] = 1
            else:
                if inb and sb < -tol:
                    # outside -> strict inside crossing
                    idx = -1
                    lo = a if a < b else b
                    hi = b if a < b else a
                    for q in range(n_cut):
                        if cut_ea[q] == lo and cut_eb[q] == hi:
                            idx = cut_vi[q]
                            break
                    if idx < 0:
                        if nvb >= MAX_V or n_cut >= MAX_V:
                            return CLIP_OVERFLOW
                        t = sa / (sa - sb)
                        vb[nvb, 0] = va[a, 0] + t * (va[b, 0] - va[a, 0])
                        vb[nvb, 1] = va[a, 1] + t * (va[b, 1] - va[a, 1])
                        vb[nvb, 2] = va[a, 2] + t * (va[b, 2] - va[a, 2])
                        idx = nvb
                        cut_ea[n_cut] = lo
                        cut_eb[n_cut] = hi
                        cut_vi[n_cut] = idx
                        n_cut += 1
                        nvb += 1
                    tmp[k] = idx
                    k += 1
                    on_new[idx] = 1
                # outside -> on-plane: the on-plane vertex is the crossing and
                # is emitted (and marked) when its own edge is walked
        if k >= 3:
            if nfb >= MAX_F or nlb + k > MAX_L:
                return CLIP_OVERFLOW
            plb[nfb, 0] = pla[f, 0]
            plb[nfb, 1] = pla[f, 1]
            plb[nfb, 2] = pla[f, 2]
            plb[nfb, 3] = pla[f, 3]
            tgb[nfb] = tga[f]
            for q in range(k):
                lvb[nlb + q] = tmp[q]
            nlb += k
            nfb += 1
            lpb[nfb] = nlb

    # new facet: cut vertices sorted by angle around the clip normal
    ncp = 0
    ccx = 0.0
    ccy = 0.0
    ccz = 0.0
    for v in range(nvb):
        if on_new[v] == 1:
            ncp += 1
            ccx += vb[v, 0]
            ccy += vb[v, 1]
            ccz += vb[v, 2]
    if ncp < 3:
        # grazing contact: treated as no cut (consistent tie-break)
        return CLIP_DEGENERATE
    ccx /= ncp
    ccy /= ncp
    ccz /= ncp
    e1x, e1y, e1z, e2x, e2y, e2z = _perp_basis(nx, ny, nz)
    ang = np.empty(ncp, np.float64)
    aidx = np.empty(ncp, np.int64)
    q = 0
    for v in range(nvb):
        if on_new[v] == 1:
            rx = vb[v, 0] - ccx
            ry = vb[v, 1] - ccy
            rz = vb[v, 2] - ccz
            ang[q] = np.arctan2(rx * e2x + ry * e2y + rz * e2z,
                                rx * e1x + ry * e1y + rz * e1z)
            aidx[q] = v
            q += 1
    # insertion sort by (angle, index): total order, deterministic
    for i in range(1, ncp):
        av = ang[i]
        iv = aidx[i]
        j = i - 1
        while j >= 0 and (ang[j] > av or (ang[j] == av and aidx[j] > iv)):
            ang[j + 1] = ang[j]
            aidx[j + 1] = aidx[j]
            j -= 1
        ang[j + 1] = av
        aidx[j + 1] = iv
    if nfb >= MAX_F or nlb + ncp > MAX_L:
        return CLIP_OVERFLOW
    plb[nfb, 0] = nx
    plb[nfb, 1] = ny
    plb[nfb, 2] = nz
    plb[nfb, 3] = dd
    tgb[nfb] = tag
    for i in range(ncp):
        lvb[nlb + i] = aidx[i]
    nlb += ncp
    nfb += 1
    lpb[nfb] = nlb

    # drop unreferenced vertices so polytope invariants stay intact
    ref = np.full(nvb, -1, np.int64)
    nv2 = 0
    for k2 in range(nlb):
        v = lvb[k2]
        if ref[v] < 0:
            ref[v] = 0
    for v in range(nvb):
        if ref[v] == 0:
            ref[v] = nv2
            nv2 += 1
    if nv2 != nvb:
        for v in range(nvb):
            if ref[v] >= 0 and ref[v] != v:
                vb[ref[v], 0] = vb[v, 0]
                vb[ref[v], 1] = vb[v, 1]
                vb[ref[v], 2] = vb[v, 2]
        for k2 in range(nlb):
            lvb[k2] = ref[lvb[k2]]
    cb[0] = nv2
    cb[1] = nfb
    cb[2] = nlb
    return CLIP_CUT


# ----------------------------------------------------------------------------
# generalized polygon integrals (2D, in the facet frame)
#
# piece rows: [kind, x0, y0, x1, y1, cx, cy, r, a0, a1]
#   kind 0  segment (x0,y0) -> (x1,y1)
#   kind 1  arc centered (cx,cy) radius r, theta from a0 to a1 (signed sweep)
#   kind 2  full circle centered (cx,cy) radius r
# ----------------------------------------------------------------------------

@njit(cache=True)
def _piece_integrals(pieces, npc):
    """Area, first moments, and polar second moment (about the local origin)."""
    A = 0.0
    Mx = 0.0
    My = 0.0
    Ip = 0.0
    for i in range(npc):
        kind = int(pieces[i, 0])
        if kind == 0:
            x0 = pieces[i, 1]
            y0 = pieces[i, 2]
            x1 = pieces[i, 3]
            y1 = pieces[i, 4]
            cr = x0 * y1 - x1 * y0
            A += 0.5 * cr
            dx = x1 - x0
            dy = y1 - y0
            # same Green forms as the arc pieces: x dA from (x^2/2) dy,
            # y dA from -(y^2/2) dx; mixing forms across pieces is invalid
            Mx += dy * (x0 * x0 + x0 * x1 + x1 * x1) / 6.0
            My += -dx * (y0 * y0 + y0 * y1 + y1 * y1) / 6.0
            sx3 = x0 * x0 * x0 + x0 * x0 * x1 + x0 * x1 * x1 + x1 * x1 * x1
            sy3 = y0 * y0 * y0 + y0 * y0 * y1 + y0 * y1 * y1 + y1 * y1 * y1
            Ip += (dy * sx3 - dx * sy3) / 12.0
        else:
            cx = pieces[i, 5]
            cy = pieces[i, 6]
            r = pieces[i, 7]
            if kind == 2:
                a0 = 0.0
                a1 = 2.0 * np.pi
            else:
                a0 = pieces[i, 8]
                a1 = pieces[i, 9]
            dth = a1 - a0
            s0 = np.sin(a0)
            s1 = np.sin(a1)
            c0 = np.cos(a0)
            c1 = np.cos(a1)
            s20 = np.sin(2.0 * a0)
            s21 = np.sin(2.0 * a1)
            s40 = np.sin(4.0 * a0)
            s41 = np.sin(4.0 * a1)
            ic = s1 - s0
            isn = c0 - c1
            ic2 = 0.5 * dth + 0.25 * (s21 - s20)
            is2 = 0.5 * dth - 0.25 * (s21 - s20)
            ic3 = (s1 - s1 * s1 * s1 / 3.0) - (s0 - s0 * s0 * s0 / 3.0)
            is3 = (-c1 + c1 * c1 * c1 / 3.0) - (-c0 + c0 * c0 * c0 / 3.0)
            ic4 = 0.375 * dth + 0.25 * (s21 - s20) + (s41 - s40) / 32.0
            is4 = 0.375 * dth - 0.25 * (s21 - s20) + (s41 - s40) / 32.0
            A += 0.5 * (r * r * dth + cx * r * ic + cy * r * isn)
            Mx += 0.5 * r * (cx * cx * ic + 2.0 * cx * r * ic2 + r * r * ic3)
            My += 0.5 * r * (cy * cy * isn + 2.0 * cy * r * is2 + r * r * is3)
            Ip += (r / 3.0) * (cx * cx * cx * ic + 3.0 * cx * cx * r * ic2
                               + 3.0 * cx * r * r * ic3 + r * r * r * ic4
                               + cy * cy * cy * isn + 3.0 * cy * cy * r * is2
                               + 3.0 * cy * r * r * is3 + r * r * r * is4)
    return A, Mx, My, Ip


# ----------------------------------------------------------------------------
# facet restriction to the sphere
# ----------------------------------------------------------------------------

@njit(cache=True)
def _edge_other_facet(lp, lv, nf, f, a, b):
    """Index of the facet sharing the directed edge (b, a) with facet f."""
    for g in range(nf):
        if g == f:
            continue
        s = lp[g]
        m = lp[g + 1] - s
        for e in range(m):
            if lv[s + e] == b and lv[s + (e + 1) % m] == a:
                return g
    return -1


@njit(cache=True)
def _restrict_facet_seq(verts, planes, lp, lv, nf, f,
                        px, py, pz, psi, tol,
                        pts, on_sph, conn):
    """Restrict facet f of a packed cell to the ball of squared radius psi.

    Returns (kind, npts, s, rc) where s is the signed plane height of the site
    (positive when the site is inside the facet halfspace) and rc the radius
    of the circle cut by the facet plane on the sphere.  On RF_GENPOLY /
    RF_UNTOUCHED, pts[:npts] hold the boundary points in positive loop order,
    on_sph marks points lying on the sphere, and conn[k] is the connector kind
    from point k to k+1 (0 segment, 1 arc on the facet circle).

    Circle crossings are computed from the pair of adjacent facet planes, not
    from loop vertex coordinates, so the in-ball geometry does not depend on
    clips whose planes never reach the ball.
    """
    nx = planes[f, 0]
    ny = planes[f, 1]
    nz = planes[f, 2]
    dd = planes[f, 3]
    s = dd - (nx * px + ny * py + nz * pz)
    rc2 = psi - s * s
    R = np.sqrt(psi)
    if rc2 <= tol * (2.0 * R + tol):
        return RF_OUTSIDE, 0, s, 0.0
    rc = np.sqrt(rc2)
    # foot of the site on the facet plane = circle center
    qx = px + s * nx
    qy = py + s * ny
    qz = pz + s * nz

    start = lp[f]
    m = lp[f + 1] - start
    ball_tol = tol * (2.0 * R + tol)
    inside = np.empty(m, np.uint8)
    n_in = 0
    for e in range(m):
        v = lv[start + e]
        wx = verts[v, 0] - px
        wy = verts[v, 1] - py
        wz = verts[v, 2] - pz
        q = wx * wx + wy * wy + wz * wz - psi
        if q <= ball_tol:
            inside[e] = 1
            n_in += 1
        else:
            inside[e] = 0
    if n_in == m:
        # whole facet inside the ball
        for e in range(m):
            v = lv[start + e]
            pts[e, 0] = verts[v, 0]
            pts[e, 1] = verts[v, 1]
            pts[e, 2] = verts[v, 2]
            on_sph[e] = 0
            conn[e] = 0
        return RF_UNTOUCHED, m, s, rc

    npts = 0
    first_entry = False
    cur_inside = inside[0] == 1
    for e in range(m):
        a = lv[start + e]
        bb = lv[start + (e + 1) % m]
        ina = inside[e] == 1
        inb = inside[(e + 1) % m] == 1
        if ina:
            if npts >= MAX_P:
                return -1, 0, s, rc
            pts[npts, 0] = verts[a, 0]
            pts[npts, 1] = verts[a, 1]
            pts[npts, 2] = verts[a, 2]
            on_sph[npts] = 0
            conn[npts] = 0
            npts += 1
            cur_inside = True
        if ina and inb:
            continue
        # candidate crossings on this edge, from the adjacent-plane line
        g = _edge_other_facet(lp, lv, nf, f, a, bb)
        if g >= 0:
            gx = planes[g, 0]
            gy = planes[g, 1]
            gz = planes[g, 2]
            gd = planes[g, 3]
            c12 = nx * gx + ny * gy + nz * gz
            det = 1.0 - c12 * c12
            ux = ny * gz - nz * gy
            uy = nz * gx - nx * gz
            uz = nx * gy - ny * gx
        else:
            # fallback: line through the two endpoints
            ux = verts[bb, 0] - verts[a, 0]
            uy = verts[bb, 1] - verts[a, 1]
            uz = verts[bb, 2] - verts[a, 2]
            det = 1.0
            c12 = 0.0
            gd = 0.0
            gx = 0.0
            gy = 0.0
            gz = 0.0
        un = np.sqrt(ux * ux + uy * uy + uz * uz)
        if un < 1e-300 or det <= 1e-300:
            cur_inside = inb
            continue
        ux /= un
        uy /= un
        uz /= un
        # canonical direction sign
        if ux < 0.0 or (ux == 0.0 and (uy < 0.0 or (uy == 0.0 and uz < 0.0))):
            ux = -ux
            uy = -uy
            uz = -uz
        if g >= 0:
            # min-norm point of the two planes relative to the site
            r1 = dd - (nx * px + ny * py + nz * pz)
            r2 = gd - (gx * px + gy * py + gz * pz)
            al = (r1 - c12 * r2) / det
            be = (r2 - c12 * r1) / det
            x0x = px + al * nx + be * gx
            x0y = py + al * ny + be * gy
            x0z = pz + al * nz + be * gz
        else:
            x0x = verts[a, 0]
            x0y = verts[a, 1]
            x0z = verts[a, 2]
        w0x = x0x - px
        w0y = x0y - py
        w0z = x0z - pz
        bh = ux * w0x + uy * w0y + uz * w0z
        cc = w0x * w0x + w0y * w0y + w0z * w0z - psi
        disc = bh * bh - cc
        if disc <= tol * tol:
            cur_inside = inb
            continue
        sq = np.sqrt(disc)
        t1 = -bh - sq
        t2 = -bh + sq
        ta = ux * (verts[a, 0] - x0x) + uy * (verts[a, 1] - x0y) + uz * (verts[a, 2] - x0z)
        tb = ux * (verts[bb, 0] - x0x) + uy * (verts[bb, 1] - x0y) + uz * (verts[bb, 2] - x0z)
        tlo = ta if ta < tb else tb
        thi = tb if ta < tb else ta
        for which in range(2):
            # emit crossings ordered along the walk direction a -> b
            if ta <= tb:
                t = t1 if which == 0 else t2
            else:
                t = t2 if which == 0 else t1
            if t <= tlo + tol or t >= thi - tol:
                continue
            if npts >= MAX_P:
                return -1, 0, s, rc
            cxx = x0x + t * ux
            cxy = x0y + t * uy
            cxz = x0z + t * uz
            if cur_inside:
                # exit point: connector to the next point is an arc
                pts[npts, 0] = cxx
                pts[npts, 1] = cxy
                pts[npts, 2] = cxz
                on_sph[npts] = 1
                conn[npts] = 1
                npts += 1
                cur_inside = False
            else:
                if npts > 0:
                    conn[npts - 1] = 1
                else:
                    first_entry = True
                pts[npts, 0] = cxx
                pts[npts, 1] = cxy
                pts[npts, 2] = cxz
                on_sph[npts] = 1
                conn[npts] = 0
                npts += 1
                cur_inside = True
        cur_inside = inb

    if npts == 0:
        # no boundary interaction: full disk inside, or disjoint
        e1x, e1y, e1z, e2x, e2y, e2z = _perp_basis(nx, ny, nz)
        cin = True
        for e in range(m):
            a = lv[start + e]
            bb = lv[start + (e + 1) % m]
            p0u = (verts[a, 0] - qx) * e1x + (verts[a, 1] - qy) * e1y + (verts[a, 2] - qz) * e1z
            p0v = (verts[a, 0] - qx) * e2x + (verts[a, 1] - qy) * e2y + (verts[a, 2] - qz) * e2z
            p1u = (verts[bb, 0] - qx) * e1x + (verts[bb, 1] - qy) * e1y + (verts[bb, 2] - qz) * e1z
            p1v = (verts[bb, 0] - qx) * e2x + (verts[bb, 1] - qy) * e2y + (verts[bb, 2] - qz) * e2z
            # circle center (local origin) left of every CCW edge
            if (p1u - p0u) * (-p0v) - (p1v - p0v) * (-p0u) < 0.0:
                cin = False
                break
        if cin:
            return RF_FULLCIRCLE, 0, s, rc
        return RF_OUTSIDE, 0, s, rc

    if first_entry:
        conn[npts - 1] = 1

    # drop zero-length connectors (crossing emitted on top of a vertex)
    k = 0
    for i in range(npts):
        j = (i + 1) % npts
        dxp = pts[i, 0] - pts[j, 0]
        dyp = pts[i, 1] - pts[j, 1]
        dzp = pts[i, 2] - pts[j, 2]
        if conn[i] == 0 and dxp * dxp + dyp * dyp + dzp * dzp <= tol * tol:
            # merge i into j; j keeps its connector, inherits on-sphere mark
            if on_sph[i] == 1:
                on_sph[j] = 1
            pts[i, 0] = np.nan
        else:
            k += 1
    if k < npts:
        w = 0
        for i in range(npts):
            if not np.isnan(pts[i, 0]):
                pts[w, 0] = pts[i, 0]
                pts[w, 1] = pts[i, 1]
                pts[w, 2] = pts[i, 2]
                on_sph[w] = on_sph[i]
                conn[w] = conn[i]
                w += 1
        npts = w
    if npts < 2:
        return RF_OUTSIDE, 0, s, rc

    # canonical rotation: start at the arc whose start point has the smallest
    # angle on the facet circle (makes summation order independent of how the
    # loop was stored)
    has_arc = False
    e1x, e1y, e1z, e2x, e2y, e2z = _perp_basis(nx, ny, nz)
    best = 1e300
    bi = 0
    for i in range(npts):
        if conn[i] == 1:
            has_arc = True
            rx = pts[i, 0] - qx
            ry = pts[i, 1] - qy
            rz = pts[i, 2] - qz
            aang = np.arctan2(rx * e2x + ry * e2y + rz * e2z,
                              rx * e1x + ry * e1y + rz * e1z)
            if aang < best:
                best = aang
                bi = i
    if has_arc and bi != 0:
        tmp = np.empty((npts, 3), np.float64)
        tos = np.empty(npts, np.uint8)
        tco = np.empty(npts, np.uint8)
        for i in range(npts):
            j = (bi + i) % npts
            tmp[i, 0] = pts[j, 0]
            tmp[i, 1] = pts[j, 1]
            tmp[i, 2] = pts[j, 2]
            tos[i] = on_sph[j]
            tco[i] = conn[j]
        for i in range(npts):
            pts[i, 0] = tmp[i, 0]
            pts[i, 1] = tmp[i, 1]
            pts[i, 2] = tmp[i, 2]
            on_sph[i] = tos[i]
            conn[i] = tco[i]
    return RF_GENPOLY, npts, s, rc


@njit(cache=True)
def _seq_integrals(pts, conn, npts, nx, ny, nz, qx, qy, qz, rc):
    """Area, 3D centroid, and polar second moment of a restricted facet."""
    e1x, e1y, e1z, e2x, e2y, e2z = _perp_basis(nx, ny, nz)
    pieces = np.empty((npts, 10), np.float64)
    for i in range(npts):
        j = (i + 1) % npts
        x0 = (pts[i, 0] - qx) * e1x + (pts[i, 1] - qy) * e1y + (pts[i, 2] - qz) * e1z
        y0 = (pts[i, 0] - qx) * e2x + (pts[i, 1] - qy) * e2y + (pts[i, 2] - qz) * e2z
        x1 = (pts[j, 0] - qx) * e1x + (pts[j, 1] - qy) * e1y + (pts[j, 2] - qz) * e1z
        y1 = (pts[j, 0] - qx) * e2x + (pts[j, 1] - qy) * e2y + (pts[j, 2] - qz) * e2z
        if conn[i] == 0:
            pieces[i, 0] = 0.0
            pieces[i, 1] = x0
            pieces[i, 2] = y0
            pieces[i, 3] = x1
            pieces[i, 4] = y1
        else:
            a0 = np.arctan2(y0, x0)
            a1 = np.arctan2(y1, x1)
            sweep = a1 - a0
            if sweep <= 0.0:
                sweep += 2.0 * np.pi
            pieces[i, 0] = 1.0
            pieces[i, 5] = 0.0
            pieces[i, 6] = 0.0
            pieces[i, 7] = rc
            pieces[i, 8] = a0
            pieces[i, 9] = a0 + sweep
    A, Mx, My, Ip = _piece_integrals(pieces, npts)
    if A > 0.0:
        cx = qx + (Mx / A) * e1x + (My / A) * e2x
        cy = qy + (Mx / A) * e1y + (My / A) * e2y
        cz = qz + (Mx / A) * e1z + (My / A) * e2z
    else:
        cx = qx
        cy = qy
        cz = qz
    return A, cx, cy, cz, Ip


# ----------------------------------------------------------------------------
# interior point and spherical patch projection
# ----------------------------------------------------------------------------

@njit(cache=True)
def _interior_point(planes, nf, fkind, farea, fcx, fcy, fcz,
                    px, py, pz, psi, tol):
    """Average of midpoints of inward rays cast from restricted facet centroids.

    Each ray starts on the cell boundary, so clipping it against the sphere
    and every other facet plane yields a segment inside the restricted cell.
    Returns (cx, cy, cz, ok, bx, by, bz) where b is the deepest single
    midpoint (fallback candidate).
    """
    sx = 0.0
    sy = 0.0
    sz = 0.0
    nseg = 0
    best_margin = -1.0
    bx = px
    by = py
    bz = pz
    for f in range(nf):
        if fkind[f] == RF_OUTSIDE or farea[f] <= 0.0:
            continue
        ox = fcx[f]
        oy = fcy[f]
        oz = fcz[f]
        dx = -planes[f, 0]
        dy = -planes[f, 1]
        dz = -planes[f, 2]
        # sphere exit: |o + t d - p|^2 = psi, d unit
        wx = ox - px
        wy = oy - py
        wz = oz - pz
        bh = dx * wx + dy * wy + dz * wz
        cc = wx * wx + wy * wy + wz * wz - psi
        disc = bh * bh - cc
        if disc <= 0.0:
            continue
        t_hi = -bh + np.sqrt(disc)
        t_lo = 0.0
        ok = True
        for g in range(nf):
            if g == f:
                continue
            den = planes[g, 0] * dx + planes[g, 1] * dy + planes[g, 2] * dz
            num = planes[g, 3] - (planes[g, 0] * ox + planes[g, 1] * oy + planes[g, 2] * oz)
            if den > tol:
                tc = num / den
                if tc < t_hi:
                    t_hi = tc
            elif den < -tol:
                tc = num / den
                if tc > t_lo:
                    t_lo = tc
            else:
                if num < -tol:
                    ok = False
                    break
        if not ok or t_hi - t_lo <= tol:
            continue
        tm = 0.5 * (t_lo + t_hi)
        mx = ox + tm * dx
        my = oy + tm * dy
        mz = oz + tm * dz
        sx += mx
        sy += my
        sz += mz
        nseg += 1
        # margin of this midpoint
        mg = np.sqrt(psi) - np.sqrt((mx - px) ** 2 + (my - py) ** 2 + (mz - pz) ** 2)
        for g in range(nf):
            d2 = planes[g, 3] - (planes[g, 0] * mx + planes[g, 1] * my + planes[g, 2] * mz)
            if d2 < mg:
                mg = d2
        if mg > best_margin:
            best_margin = mg
            bx = mx
            by = my
            bz = mz
    if nseg == 0:
        return px, py, pz, False, bx, by, bz
    cx = sx / nseg
    cy = sy / nseg
    cz = sz / nseg
    # membership check; fall back to the deepest midpoint when the average
    # escapes a sliver cell
    mg = np.sqrt(psi) - np.sqrt((cx - px) ** 2 + (cy - py) ** 2 + (cz - pz) ** 2)
    for g in range(nf):
        d2 = planes[g, 3] - (planes[g, 0] * cx + planes[g, 1] * cy + planes[g, 2] * cz)
        if d2 < mg:
            mg = d2
    if mg <= 0.0:
        if best_margin > 0.0:
            return bx, by, bz, True, bx, by, bz
        return px, py, pz, False, bx, by, bz
    return cx, cy, cz, True, bx, by, bz


@njit(cache=True)
def _project_from(cx, cy, cz, yx, yy, yz, px, py, pz, psi):
    """Central projection of y from c onto the sphere around p (forward root)."""
    dx = yx - cx
    dy = yy - cy
    dz = yz - cz
    a = dx * dx + dy * dy + dz * dz
    wx = cx - px
    wy = cy - py
    wz = cz - pz
    b = dx * wx + dy * wy + dz * wz
    c0 = wx * wx + wy * wy + wz * wz - psi
    disc = b * b - a * c0
    if disc < 0.0:
        disc = 0.0
    t = (-b + np.sqrt(disc)) / a
    return cx + t * dx, cy + t * dy, cz + t * dz


@njit(cache=True)
def _patch_area_seq(pts, on_sph, conn, npts,
                    nx, ny, nz, s,
                    px, py, pz, psi,
                    cx, cy, cz, tol):
    """Gauss-Bonnet area of the radial projection of one restricted facet.

    The facet boundary is walked in positive order; segment pieces project to
    arcs of the circles cut by planes through the view point c, arc pieces lie
    on the sphere already.  Returns (area, unstable) where unstable reports a
    turning angle too close to pi (antipodal ambiguity) for trust.
    """
    R = np.sqrt(psi)
    qfx = px + s * nx
    qfy = py + s * ny
    qfz = pz + s * nz
    # projected junction points
    proj = np.empty((npts, 3), np.float64)
    for i in range(npts):
        if on_sph[i] == 1:
            proj[i, 0] = pts[i, 0]
            proj[i, 1] = pts[i, 1]
            proj[i, 2] = pts[i, 2]
        else:
            a, b, c0 = _project_from(cx, cy, cz, pts[i, 0], pts[i, 1], pts[i, 2],
                                     px, py, pz, psi)
            proj[i, 0] = a
            proj[i, 1] = b
            proj[i, 2] = c0

    # per connector: arc circle (center m, height e), sweep, endpoint tangents
    tin = np.empty((npts, 3), np.float64)   # incoming tangent at point j (end of connector i->j)
    tout = np.empty((npts, 3), np.float64)  # outgoing tangent at point i
    kg_sum = 0.0
    unstable = False
    for i in range(npts):
        j = (i + 1) % npts
        if conn[i] == 1:
            mx = nx
            my = ny
            mz = nz
            ee = s
        else:
            # plane through c and the segment
            ax = pts[i, 0] - cx
            ay = pts[i, 1] - cy
            az = pts[i, 2] - cz
            bx2 = pts[j, 0] - cx
            by2 = pts[j, 1] - cy
            bz2 = pts[j, 2] - cz
            mx = ay * bz2 - az * by2
            my = az * bx2 - ax * bz2
            mz = ax * by2 - ay * bx2
            mn = np.sqrt(mx * mx + my * my + mz * mz)
            if mn < 1e-300:
                unstable = True
                continue
            mx /= mn
            my /= mn
            mz /= mn
            ee = mx * (cx - px) + my * (cy - py) + mz * (cz - pz)
        for attempt in range(2):
            qx = px + ee * mx
            qy = py + ee * my
            qz = pz + ee * mz
            rr2 = psi - ee * ee
            if rr2 <= 0.0:
                unstable = True
                break
            rr = np.sqrt(rr2)
            u1x, u1y, u1z, u2x, u2y, u2z = _perp_basis(mx, my, mz)
            rpx = proj[i, 0] - qx
            rpy = proj[i, 1] - qy
            rpz = proj[i, 2] - qz
            phP = np.arctan2(rpx * u2x + rpy * u2y + rpz * u2z,
                             rpx * u1x + rpy * u1y + rpz * u1z)
            rqx = proj[j, 0] - qx
            rqy = proj[j, 1] - qy
            rqz = proj[j, 2] - qz
            phQ = np.arctan2(rqx * u2x + rqy * u2y + rqz * u2z,
                             rqx * u1x + rqy * u1y + rqz * u1z)
            dPQ = phQ - phP
            if dPQ < 0.0:
                dPQ += 2.0 * np.pi
            if conn[i] == 1:
                sweep = dPQ
            else:
                # orient so the walk from P to Q follows the segment's image
                mxp = 0.5 * (pts[i, 0] + pts[j, 0])
                myp = 0.5 * (pts[i, 1] + pts[j, 1])
                mzp = 0.5 * (pts[i, 2] + pts[j, 2])
                hx, hy, hz = _project_from(cx, cy, cz, mxp, myp, mzp, px, py, pz, psi)
                rmx = hx - qx
                rmy = hy - qy
                rmz = hz - qz
                phM = np.arctan2(rmx * u2x + rmy * u2y + rmz * u2z,
                                 rmx * u1x + rmy * u1y + rmz * u1z)
                dPM = phM - phP
                if dPM < 0.0:
                    dPM += 2.0 * np.pi
                if dPM <= dPQ + 1e-12:
                    sweep = dPQ
                else:
                    # traversal is clockwise around m: flip the circle normal
                    mx = -mx
                    my = -my
                    mz = -mz
                    ee = -ee
                    continue
            kg_sum += (ee / R) * sweep
            # tangents of the CCW-around-m circle at both endpoints
            t0x = my * rpz - mz * rpy
            t0y = mz * rpx - mx * rpz
            t0z = mx * rpy - my * rpx
            tn = np.sqrt(t0x * t0x + t0y * t0y + t0z * t0z)
            if tn > 0.0:
                t0x /= tn
                t0y /= tn
                t0z /= tn
            tout[i, 0] = t0x
            tout[i, 1] = t0y
            tout[i, 2] = t0z
            t1x = my * rqz - mz * rqy
            t1y = mz * rqx - mx * rqz
            t1z = mx * rqy - my * rqx
            tn = np.sqrt(t1x * t1x + t1y * t1y + t1z * t1z)
            if tn > 0.0:
                t1x /= tn
                t1y /= tn
                t1z /= tn
            tin[j, 0] = t1x
            tin[j, 1] = t1y
            tin[j, 2] = t1z
            break

    th_sum = 0.0
    for i in range(npts):
        ax = tin[i, 0]
        ay = tin[i, 1]
        az = tin[i, 2]
        bx2 = tout[i, 0]
        by2 = tout[i, 1]
        bz2 = tout[i, 2]
        nxv = (proj[i, 0] - px) / R
        nyv = (proj[i, 1] - py) / R
        nzv = (proj[i, 2] - pz) / R
        crx = ay * bz2 - az * by2
        cry = az * bx2 - ax * bz2
        crz = ax * by2 - ay * bx2
        sv = crx * nxv + cry * nyv + crz * nzv
        cv = ax * bx2 + ay * by2 + az * bz2
        th = np.arctan2(sv, cv)
        if abs(th) > np.pi - 1e-7:
            unstable = True
        th_sum += th

    area = psi * (2.0 * np.pi - kg_sum - th_sum)
    if area < -1e-9 * FOUR_PI * psi or area > FOUR_PI * psi * (1.0 + 1e-9):
        unstable = True
    if area < 0.0:
        area = 0.0
    if area > FOUR_PI * psi:
        area = FOUR_PI * psi
    return area, unstable


# ----------------------------------------------------------------------------
# full cell evaluation (Laguerre cell restricted to its sphere)
# ----------------------------------------------------------------------------

@njit(cache=True)
def _evaluate_cell(verts, cnt, planes, tags, lp, lv,
                   px, py, pz, psi, tol, want_m2,
                   fkind, farea, fh, fcx, fcy, fcz, fip, frc, fnp,
                   seq_pts, seq_os, seq_cn):
    """Evaluate one packed cell against its sphere.

    Outputs per facet (restricted): kind, area, signed height, centroid, polar
    second moment, circle radius, boundary sequences.  Returns
    (status, volume, K, cx, cy, cz, ix, iy, iz, m2, flags) where (ix,iy,iz) is
    the interior point used for the projection.
    """
    nf = cnt[1]
    flags = 0
    if psi <= 0.0:
        return CELL_EMPTY, 0.0, 0.0, px, py, pz, px, py, pz, 0.0, flags
    R = np.sqrt(psi)

    any_present = False
    for f in range(nf):
        kind, npts, s, rc = _restrict_facet_seq(
            verts, planes, lp, lv, nf, f, px, py, pz, psi, tol,
            seq_pts[f], seq_os[f], seq_cn[f])
        if kind < 0:
            flags |= FLAG_OVERFLOW
            return CELL_EMPTY, 0.0, 0.0, px, py, pz, px, py, pz, 0.0, flags
        fkind[f] = kind
        fh[f] = s
        frc[f] = rc
        fnp[f] = npts
        if kind == RF_OUTSIDE:
            farea[f] = 0.0
            fcx[f] = px
            fcy[f] = py
            fcz[f] = pz
            fip[f] = 0.0
            continue
        any_present = True
        qx = px + s * planes[f, 0]
        qy = py + s * planes[f, 1]
        qz = pz + s * planes[f, 2]
        if kind == RF_FULLCIRCLE:
            farea[f] = np.pi * rc * rc
            fcx[f] = qx
            fcy[f] = qy
            fcz[f] = qz
            fip[f] = 0.5 * np.pi * rc ** 4
        else:
            A, ccx, ccy, ccz, Ip = _seq_integrals(
                seq_pts[f], seq_cn[f], npts,
                planes[f, 0], planes[f, 1], planes[f, 2], qx, qy, qz, rc)
            if A <= 0.0:
                fkind[f] = RF_OUTSIDE
                farea[f] = 0.0
                fcx[f] = px
                fcy[f] = py
                fcz[f] = pz
                fip[f] = 0.0
                continue
            farea[f] = A
            fcx[f] = ccx
            fcy[f] = ccy
            fcz[f] = ccz
            fip[f] = Ip

    any_area = False
    for f in range(nf):
        if fkind[f] != RF_OUTSIDE and farea[f] > 0.0:
            any_area = True
            break
    if not any_present or not any_area:
        inside = True
        for f in range(nf):
            if fh[f] < -tol:
                inside = False
                break
        if inside and nf > 0:
            vol = FOUR_PI / 3.0 * psi * R
            return CELL_FULLBALL, vol, FOUR_PI * psi, px, py, pz, px, py, pz, \
                (FOUR_PI * psi * R * R * R / 5.0 if want_m2 else 0.0), flags
        if nf == 0:
            vol = FOUR_PI / 3.0 * psi * R
            return CELL_FULLBALL, vol, FOUR_PI * psi, px, py, pz, px, py, pz, \
                (FOUR_PI * psi * R * R * R / 5.0 if want_m2 else 0.0), flags
        return CELL_EMPTY, 0.0, 0.0, px, py, pz, px, py, pz, 0.0, flags

    ix, iy, iz, ok, bx, by, bz = _interior_point(
        planes, nf, fkind, farea, fcx, fcy, fcz, px, py, pz, psi, tol)
    if not ok:
        flags |= FLAG_DEGENERATE_INTERIOR
        return CELL_EMPTY, 0.0, 0.0, px, py, pz, px, py, pz, 0.0, flags

    # occluded area per facet, with perturb-and-retry on unstable projections
    kbar = 0.0
    for attempt in range(4):
        kbar = 0.0
        bad = False
        for f in range(nf):
            if fkind[f] == RF_OUTSIDE or farea[f] <= 0.0:
                continue
            if fkind[f] == RF_FULLCIRCLE:
                kbar += 2.0 * np.pi * R * (R - fh[f])
                continue
            a, uns = _patch_area_seq(
                seq_pts[f], seq_os[f], seq_cn[f], fnp[f],
                planes[f, 0], planes[f, 1], planes[f, 2], fh[f],
                px, py, pz, psi, ix, iy, iz, tol)
            if uns:
                bad = True
                break
            kbar += a
        if not bad:
            break
        if attempt == 3:
            flags |= FLAG_UNSTABLE_PROJECTION
            break
        # pull the view point toward the deepest midpoint and retry
        w = 0.35 * (attempt + 1)
        ix = ix + w * (bx - ix)
        iy = iy + w * (by - iy)
        iz = iz + w * (bz - iz)

    K = FOUR_PI * psi - kbar
    if K < 0.0:
        K = 0.0
    if K > FOUR_PI * psi:
        K = FOUR_PI * psi

    vol = R * K / 3.0
    mx = 0.0
    my = 0.0
    mz = 0.0
    nsum_x = 0.0
    nsum_y = 0.0
    nsum_z = 0.0
    m2 = R * R * R * K / 5.0 if want_m2 else 0.0
    for f in range(nf):
        if fkind[f] == RF_OUTSIDE or farea[f] <= 0.0:
            continue
        pv = fh[f] * farea[f] / 3.0
        vol += pv
        mx += pv * 0.75 * (fcx[f] - px)
        my += pv * 0.75 * (fcy[f] - py)
        mz += pv * 0.75 * (fcz[f] - pz)
        nsum_x += planes[f, 0] * farea[f]
        nsum_y += planes[f, 1] * farea[f]
        nsum_z += planes[f, 2] * farea[f]
        if want_m2:
            m2 += (fh[f] / 5.0) * (fip[f] + fh[f] * fh[f] * farea[f])
    # spherical sector first moment from the closed-surface identity
    mx += 0.25 * psi * (-nsum_x)
    my += 0.25 * psi * (-nsum_y)
    mz += 0.25 * psi * (-nsum_z)
    if vol > 0.0:
        ccx = px + mx / vol
        ccy = py + my / vol
        ccz = pz + mz / vol
    else:
        vol = 0.0
        ccx = px
        ccy = py
        ccz = pz
    return CELL_CLIPPED, vol, K, ccx, ccy, ccz, ix, iy, iz, m2, flags


# ----------------------------------------------------------------------------
# spatial grid and cell construction
# ----------------------------------------------------------------------------

@njit(cache=True)
def _bucket_of(x, y, z, lox, loy, loz, ihx, ihy, ihz, gnx, gny, gnz):
    ix = int((x - lox) * ihx)
    iy = int((y - loy) * ihy)
    iz = int((z - loz) * ihz)
    if ix < 0:
        ix = 0
    if iy < 0:
        iy = 0
    if iz < 0:
        iz = 0
    if ix >= gnx:
        ix = gnx - 1
    if iy >= gny:
        iy = gny - 1
    if iz >= gnz:
        iz = gnz - 1
    return ix, iy, iz


@njit(cache=True)
def _build_cell(i, pts, psi, dpsi_max, ball_aware,
                dv, dc, dp, dt, dlp, dlv,
                grid_start, grid_sites, lox, loy, loz, ihx, ihy, ihz,
                gnx, gny, gnz, h_min, tol,
                vA, cA, pA, tA, lpA, lvA,
                vB, cB, pB, tB, lpB, lvB):
    """Build the Laguerre cell of site i by security-radius clipping.

    Candidates are processed in increasing (distance, index) order gathered by
    expanding grid rings; clipping stops once no remaining bisector can reach
    the cell (or, with ball_aware, the ball).  Returns (status, which) where
    status is 0 ok / 1 empty / 3 overflow and which selects the A/B buffer
    holding the result.
    """
    n = pts.shape[0]
    px = pts[i, 0]
    py = pts[i, 1]
    pz = pts[i, 2]
    psii = psi[i]
    _cell_copy(dv, dc, dp, dt, dlp, dlv, vA, cA, pA, tA, lpA, lvA)
    which = 0

    cand_d2 = np.empty(n, np.float64)
    cand_j = np.empty(n, np.int64)
    ncand = 0
    ptr = 0
    bx, by, bz = _bucket_of(px, py, pz, lox, loy, loz, ihx, ihy, ihz, gnx, gny, gnz)
    ring = 0
    covered = 0.0
    rings_done = False

    # running farthest-vertex radius
    rfar = 0.0
    cc = cA
    vv = vA
    for v in range(cc[0]):
        d2 = (vv[v, 0] - px) ** 2 + (vv[v, 1] - py) ** 2 + (vv[v, 2] - pz) ** 2
        if d2 > rfar:
            rfar = d2
    rfar = np.sqrt(rfar)

    sq_ball = np.sqrt(psii) if (ball_aware and psii > 0.0) else -1.0
    sq_psi_slack = np.sqrt(max(psii, 0.0) + dpsi_max)

    while True:
        stop_r = rfar + np.sqrt(rfar * rfar + dpsi_max)
        if ball_aware:
            if psii <= 0.0:
                break
            br = sq_ball + sq_psi_slack
            if br < stop_r:
                stop_r = br
        # make sure the next candidate (if any) is confirmed nearest
        while True:
            need_more = False
            if not rings_done:
                if ptr >= ncand or cand_d2[ptr] > covered * covered:
                    need_more = True
            if not need_more:
                break
            # collect ring
            added = False
            any_cell = False
            for dx in range(-ring, ring + 1):
                ix = bx + dx
                if ix < 0 or ix >= gnx:
                    continue
                for dy in range(-ring, ring + 1):
                    iy = by + dy
                    if iy < 0 or iy >= gny:
                        continue
                    for dz in range(-ring, ring + 1):
                        if max(abs(dx), abs(dy), abs(dz)) != ring:
                            continue
                        iz = bz + dz
                        if iz < 0 or iz >= gnz:
                            continue
                        any_cell = True
                        lin = (ix * gny + iy) * gnz + iz
                        for q in range(grid_start[lin], grid_start[lin + 1]):
                            j = grid_sites[q]
                            if j == i:
                                continue
                            d2 = (pts[j, 0] - px) ** 2 + (pts[j, 1] - py) ** 2 \
                                + (pts[j, 2] - pz) ** 2
                            cand_d2[ncand] = d2
                            cand_j[ncand] = j
                            ncand += 1
                            added = True
            covered = ring * h_min
            ring += 1
            if ring > gnx + gny + gnz and not any_cell:
                rings_done = True
                covered = 1e300
            if added:
                # sort pending tail by (d2, j); total order keeps determinism
                for a in range(ptr + 1, ncand):
                    dv2 = cand_d2[a]
                    jv = cand_j[a]
                    b = a - 1
                    while b >= ptr and (cand_d2[b] > dv2 or
                                        (cand_d2[b] == dv2 and cand_j[b] > jv)):
                        cand_d2[b + 1] = cand_d2[b]
                        cand_j[b + 1] = cand_j[b]
                        b -= 1
                    cand_d2[b + 1] = dv2
                    cand_j[b + 1] = jv
        if ptr >= ncand and rings_done:
            break
        if ptr >= ncand:
            continue
        dnext = np.sqrt(cand_d2[ptr])
        lb = dnext
        if not rings_done and covered < lb:
            lb = covered
        if lb >= stop_r:
            break
        if not rings_done and dnext * dnext > covered * covered:
            continue
        j = cand_j[ptr]
        ptr += 1
        D2 = cand_d2[ptr - 1]
        if D2 <= tol * tol:
            # coincident sites: the heavier weight (then lower index) wins
            if psi[j] > psii or (psi[j] == psii and j < i):
                return 1, which
            continue
        D = np.sqrt(D2)
        nxp = (pts[j, 0] - px) / D
        nyp = (pts[j, 1] - py) / D
        nzp = (pts[j, 2] - pz) / D
        hij = 0.5 * (D2 + psii - psi[j]) / D
        dd = (nxp * px + nyp * py + nzp * pz) + hij
        if which == 0:
            st = _clip_into(vA, cA, pA, tA, lpA, lvA, vB, cB, pB, tB, lpB, lvB,
                            nxp, nyp, nzp, dd, j, tol)
        else:
            st = _clip_into(vB, cB, pB, tB, lpB, lvB, vA, cA, pA, tA, lpA, lvA,
                            nxp, nyp, nzp, dd, j, tol)
        if st == CLIP_EMPTY:
            return 1, which
        if st == CLIP_OVERFLOW:
            return 3, which
        if st == CLIP_CUT:
            which = 1 - which
            rfar = 0.0
            if which == 0:
                cc = cA
                vv = vA
            else:
                cc = cB
                vv = vB
            for v in range(cc[0]):
                d2 = (vv[v, 0] - px) ** 2 + (vv[v, 1] - py) ** 2 + (vv[v, 2] - pz) ** 2
                if d2 > rfar:
                    rfar = d2
            rfar = np.sqrt(rfar)
    return 0, which


# ----------------------------------------------------------------------------
# batch entry points
# ----------------------------------------------------------------------------

@njit(cache=True, parallel=True)
def _batch_evaluate(pts, psi, dv, dc, dp, dt, dlp, dlv,
                    grid_start, grid_sites, lox, loy, loz, ihx, ihy, ihz,
                    gnx, gny, gnz, h_min, tol, dpsi_max, ball_aware, want_m2,
                    smf,
                    status, vol, ksur, cent, ipt, m2,
                    fcount, ftag, farea_o, fh_o, fnrm, fcent_o):
    """Build and evaluate every cell; per-cell restricted facet summaries are
    written to fixed-stride slots (facets with zero restricted area are
    dropped).  Returns a combined error flag word."""
    n = pts.shape[0]
    flags_all = np.zeros(n, np.int64)
    for i in prange(n):
        vA = np.empty((MAX_V, 3), np.float64)
        cA = np.empty(3, np.int64)
        pA = np.empty((MAX_F, 4), np.float64)
        tA = np.empty(MAX_F, np.int64)
        lpA = np.empty(MAX_F + 1, np.int64)
        lvA = np.empty(MAX_L, np.int64)
        vB = np.empty((MAX_V, 3), np.float64)
        cB = np.empty(3, np.int64)
        pB = np.empty((MAX_F, 4), np.float64)
        tB = np.empty(MAX_F, np.int64)
        lpB = np.empty(MAX_F + 1, np.int64)
        lvB = np.empty(MAX_L, np.int64)
        st, which = _build_cell(i, pts, psi, dpsi_max, ball_aware,
                                dv, dc, dp, dt, dlp, dlv,
                                grid_start, grid_sites, lox, loy, loz,
                                ihx, ihy, ihz, gnx, gny, gnz, h_min, tol,
                                vA, cA, pA, tA, lpA, lvA,
                                vB, cB, pB, tB, lpB, lvB)
        if st == 3:
            flags_all[i] = FLAG_OVERFLOW
            status[i] = CELL_EMPTY
            vol[i] = 0.0
            ksur[i] = 0.0
            fcount[i] = 0
            continue
        if st == 1:
            status[i] = CELL_EMPTY
            vol[i] = 0.0
            ksur[i] = 0.0
            cent[i, 0] = pts[i, 0]
            cent[i, 1] = pts[i, 1]
            cent[i, 2] = pts[i, 2]
            ipt[i, 0] = pts[i, 0]
            ipt[i, 1] = pts[i, 1]
            ipt[i, 2] = pts[i, 2]
            m2[i] = 0.0
            fcount[i] = 0
            continue
        if which == 0:
            vv = vA
            cc = cA
            pp = pA
            tt = tA
            lpp = lpA
            lvv = lvA
        else:
            vv = vB
            cc = cB
            pp = pB
            tt = tB
            lpp = lpB
            lvv = lvB
        nf = cc[1]
        fkind = np.empty(MAX_F, np.int64)
        farea = np.empty(MAX_F, np.float64)
        fh = np.empty(MAX_F, np.float64)
        fcx = np.empty(MAX_F, np.float64)
        fcy = np.empty(MAX_F, np.float64)
        fcz = np.empty(MAX_F, np.float64)
        fip = np.empty(MAX_F, np.float64)
        frc = np.empty(MAX_F, np.float64)
        fnp = np.empty(MAX_F, np.int64)
        seq_pts = np.empty((nf, MAX_P, 3), np.float64)
        seq_os = np.empty((nf, MAX_P), np.uint8)
        seq_cn = np.empty((nf, MAX_P), np.uint8)
        rstat, v_i, k_i, ccx, ccy, ccz, ix, iy, iz, m2_i, fl = _evaluate_cell(
            vv, cc, pp, tt, lpp, lvv,
            pts[i, 0], pts[i, 1], pts[i, 2], psi[i], tol, want_m2,
            fkind, farea, fh, fcx, fcy, fcz, fip, frc, fnp,
            seq_pts, seq_os, seq_cn)
        flags_all[i] = fl
        status[i] = rstat
        vol[i] = v_i
        ksur[i] = k_i
        cent[i, 0] = ccx
        cent[i, 1] = ccy
        cent[i, 2] = ccz
        ipt[i, 0] = ix
        ipt[i, 1] = iy
        ipt[i, 2] = iz
        m2[i] = m2_i
        nk = 0
        if rstat == CELL_CLIPPED:
            for f in range(nf):
                if fkind[f] == RF_OUTSIDE or farea[f] <= 0.0:
                    continue
                if nk >= smf:
                    flags_all[i] |= FLAG_OVERFLOW
                    break
                ftag[i, nk] = tt[f]
                farea_o[i, nk] = farea[f]
                fh_o[i, nk] = fh[f]
                fnrm[i, nk, 0] = pp[f, 0]
                fnrm[i, nk, 1] = pp[f, 1]
                fnrm[i, nk, 2] = pp[f, 2]
                fcent_o[i, nk, 0] = fcx[f]
                fcent_o[i, nk, 1] = fcy[f]
                fcent_o[i, nk, 2] = fcz[f]
                nk += 1
        fcount[i] = nk
    err = 0
    for i in range(n):
        err |= flags_all[i]
    return err


@njit(cache=True, parallel=True)
def _batch_build(pts, psi, dv, dc, dp, dt, dlp, dlv,
                 grid_start, grid_sites, lox, loy, loz, ihx, ihy, ihz,
                 gnx, gny, gnz, h_min, tol, dpsi_max, ball_aware,
                 smv, smf, sml,
                 out_status, out_nv, out_nf, out_nl,
                 out_verts, out_planes, out_tags, out_lp, out_lv):
    """Build every Laguerre cell into fixed-stride packed storage."""
    n = pts.shape[0]
    flags_all = np.zeros(n, np.int64)
    for i in prange(n):
        vA = np.empty((MAX_V, 3), np.float64)
        cA = np.empty(3, np.int64)
        pA = np.empty((MAX_F, 4), np.float64)
        tA = np.empty(MAX_F, np.int64)
        lpA = np.empty(MAX_F + 1, np.int64)
        lvA = np.empty(MAX_L, np.int64)
        vB = np.empty((MAX_V, 3), np.float64)
        cB = np.empty(3, np.int64)
        pB = np.empty((MAX_F, 4), np.float64)
        tB = np.empty(MAX_F, np.int64)
        lpB = np.empty(MAX_F + 1, np.int64)
        lvB = np.empty(MAX_L, np.int64)
        st, which = _build_cell(i, pts, psi, dpsi_max, ball_aware,
                                dv, dc, dp, dt, dlp, dlv,
                                grid_start, grid_sites, lox, loy, loz,
                                ihx, ihy, ihz, gnx, gny, gnz, h_min, tol,
                                vA, cA, pA, tA, lpA, lvA,
                                vB, cB, pB, tB, lpB, lvB)
        if st == 1:
            out_status[i] = 1
            out_nv[i] = 0
            out_nf[i] = 0
            out_nl[i] = 0
            continue
        if st == 3:
            out_status[i] = 3
            flags_all[i] = FLAG_OVERFLOW
            continue
        if which == 0:
            vv = vA
            cc = cA
            pp = pA
            tt = tA
            lpp = lpA
            lvv = lvA
        else:
            vv = vB
            cc = cB
            pp = pB
            tt = tB
            lpp = lpB
            lvv = lvB
        if cc[0] > smv or cc[1] > smf or cc[2] > sml:
            out_status[i] = 3
            flags_all[i] = FLAG_OVERFLOW
            continue
        out_status[i] = 0
        out_nv[i] = cc[0]
        out_nf[i] = cc[1]
        out_nl[i] = cc[2]
        for v in range(cc[0]):
            out_verts[i, v, 0] = vv[v, 0]
            out_verts[i, v, 1] = vv[v, 1]
            out_verts[i, v, 2] = vv[v, 2]
        for f in range(cc[1]):
            out_planes[i, f, 0] = pp[f, 0]
            out_planes[i, f, 1] = pp[f, 1]
            out_planes[i, f, 2] = pp[f, 2]
            out_planes[i, f, 3] = pp[f, 3]
            out_tags[i, f] = tt[f]
            out_lp[i, f] = lpp[f]
        out_lp[i, cc[1]] = lpp[cc[1]]
        for k in range(cc[2]):
            out_lv[i, k] = lvv[k]
    err = 0
    for i in range(n):
        err |= flags_all[i]
    return err


@njit(cache=True)
def _knn(pts, grid_start, grid_sites, lox, loy, loz, ihx, ihy, ihz,
         gnx, gny, gnz, h_min, qx, qy, qz, k, out_idx):
    """Exact k nearest sites to a query point by expanding grid rings."""
    n = pts.shape[0]
    if k > n:
        k = n
    cand_d2 = np.empty(n, np.float64)
    cand_j = np.empty(n, np.int64)
    ncand = 0
    bx, by, bz = _bucket_of(qx, qy, qz, lox, loy, loz, ihx, ihy, ihz, gnx, gny, gnz)
    ring = 0
    covered = 0.0
    while True:
        any_cell = False
        for dx in range(-ring, ring + 1):
            ix = bx + dx
            if ix < 0 or ix >= gnx:
                continue
            for dy in range(-ring, ring + 1):
                iy = by + dy
                if iy < 0 or iy >= gny:
                    continue
                for dz in range(-ring, ring + 1):
                    if max(abs(dx), abs(dy), abs(dz)) != ring:
                        continue
                    iz = bz + dz
                    if iz < 0 or iz >= gnz:
                        continue
                    any_cell = True
                    lin = (ix * gny + iy) * gnz + iz
                    for q in range(grid_start[lin], grid_start[lin + 1]):
                        j = grid_sites[q]
                        d2 = (pts[j, 0] - qx) ** 2 + (pts[j, 1] - qy) ** 2 \
                            + (pts[j, 2] - qz) ** 2
                        cand_d2[ncand] = d2
                        cand_j[ncand] = j
                        ncand += 1
        covered = ring * h_min
        ring += 1
        done_grid = ring > gnx + gny + gnz and not any_cell
        if ncand >= k or done_grid:
            # sort all candidates by (d2, j)
            for a in range(1, ncand):
                dv2 = cand_d2[a]
                jv = cand_j[a]
                b = a - 1
                while b >= 0 and (cand_d2[b] > dv2 or
                                  (cand_d2[b] == dv2 and cand_j[b] > jv)):
                    cand_d2[b + 1] = cand_d2[b]
                    cand_j[b + 1] = cand_j[b]
                    b -= 1
                cand_d2[b + 1] = dv2
                cand_j[b + 1] = jv
            if done_grid or (ncand >= k and cand_d2[k - 1] <= covered * covered):
                for q in range(k):
                    out_idx[q] = cand_j[q]
                return k
    return 0
