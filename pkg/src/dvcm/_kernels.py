"""Numba kernels for bounded power cells and their second moments.

Cells are kept as a polygon soup (each face owns a copy of its vertices) in
coordinates centred on the site.  This is the hot path behind
:func:`dvcm.vcm.compute_field`; :mod:`dvcm.powerdiagram` keeps an
indexed pure-Python version of the same construction for inspection and as
an oracle.
"""

import numpy as np
from numba import njit, prange

REL_TOL = 1e-9

# status codes
OK = 0
OVERFLOW = 1

_CUBE = np.array(
    [
        [[-1, -1, -1], [-1, 1, -1], [1, 1, -1], [1, -1, -1]],
        [[-1, -1, 1], [1, -1, 1], [1, 1, 1], [-1, 1, 1]],
        [[-1, -1, -1], [1, -1, -1], [1, -1, 1], [-1, -1, 1]],
        [[1, 1, -1], [-1, 1, -1], [-1, 1, 1], [1, 1, 1]],
        [[-1, -1, -1], [-1, -1, 1], [-1, 1, 1], [-1, 1, -1]],
        [[1, -1, -1], [1, 1, -1], [1, 1, 1], [1, -1, 1]],
    ],
    dtype=np.float64,
)


@njit(cache=True)
def _init_cube(fv, fn, h):
    for f in range(6):
        for k in range(4):
            for c in range(3):
                fv[f, k, c] = h * _CUBE[f, k, c]
        fn[f] = 4
    return 6


@njit(cache=True)
def _clip(fv, fn, nf, nx, ny, nz, b, eps, ov, on, cap):
    """Clip soup (fv, fn, nf) by {n.x <= b} into (ov, on).

    Returns (new_nf, changed, status).  When ``changed`` is False the input
    buffers still hold the result.
    """
    any_out = False
    any_in = False
    for f in range(nf):
        for k in range(fn[f]):
            d = nx * fv[f, k, 0] + ny * fv[f, k, 1] + nz * fv[f, k, 2] - b
            if d > eps:
                any_out = True
            elif d < -eps:
                any_in = True
    if not any_out:
        return nf, False, OK
    if not any_in:
        return 0, True, OK

    fmax = ov.shape[0]
    kmax = ov.shape[1]
    ncap = 0
    mf = 0
    for f in range(nf):
        m = fn[f]
        cnt = 0
        all_on = True
        for k in range(m):
            s0 = fv[f, k, 0]
            s1 = fv[f, k, 1]
            s2 = fv[f, k, 2]
            k2 = k + 1
            if k2 == m:
                k2 = 0
            e0 = fv[f, k2, 0]
            e1 = fv[f, k2, 1]
            e2 = fv[f, k2, 2]
            ds = nx * s0 + ny * s1 + nz * s2 - b
            de = nx * e0 + ny * e1 + nz * e2 - b
            if abs(ds) <= eps:
                ds = 0.0
            if abs(de) <= eps:
                de = 0.0
            if ds <= 0.0:
                if cnt >= kmax:
                    return 0, True, OVERFLOW
                ov[mf, cnt, 0] = s0
                ov[mf, cnt, 1] = s1
                ov[mf, cnt, 2] = s2
                cnt += 1
                if ds == 0.0:
                    if ncap >= cap.shape[0]:
                        return 0, True, OVERFLOW
                    cap[ncap, 0] = s0
                    cap[ncap, 1] = s1
                    cap[ncap, 2] = s2
                    ncap += 1
                else:
                    all_on = False
            if (ds < 0.0 and de > 0.0) or (ds > 0.0 and de < 0.0):
                # interpolate from the inside end so both copies of a shared edge agree
                if ds < 0.0:
                    t = ds / (ds - de)
                    p0 = s0 + t * (e0 - s0)
                    p1 = s1 + t * (e1 - s1)
                    p2 = s2 + t * (e2 - s2)
                else:
                    t = de / (de - ds)
                    p0 = e0 + t * (s0 - e0)
                    p1 = e1 + t * (s1 - e1)
                    p2 = e2 + t * (s2 - e2)
                if cnt >= kmax or ncap >= cap.shape[0]:
                    return 0, True, OVERFLOW
                ov[mf, cnt, 0] = p0
                ov[mf, cnt, 1] = p1
                ov[mf, cnt, 2] = p2
                cnt += 1
                cap[ncap, 0] = p0
                cap[ncap, 1] = p1
                cap[ncap, 2] = p2
                ncap += 1
        if cnt >= 3 and not all_on:
            on[mf] = cnt
            mf += 1
            if mf >= fmax:
                return 0, True, OVERFLOW

    # cap polygon: deduplicate, then sort by angle around the centroid
    u = 0
    for i in range(ncap):
        dup = False
        for j in range(u):
            if (
                abs(cap[i, 0] - cap[j, 0]) <= eps
                and abs(cap[i, 1] - cap[j, 1]) <= eps
                and abs(cap[i, 2] - cap[j, 2]) <= eps
            ):
                dup = True
                break
        if not dup:
            cap[u, 0] = cap[i, 0]
            cap[u, 1] = cap[i, 1]
            cap[u, 2] = cap[i, 2]
            u += 1
    if u >= 3:
        if u > kmax:
            return 0, True, OVERFLOW
        # basis (a, c) of the plane with a x c = n
        ax = abs(nx)
        ay = abs(ny)
        az = abs(nz)
        if ax <= ay and ax <= az:
            r0, r1, r2 = 0.0, nz, -ny
        elif ay <= az:
            r0, r1, r2 = -nz, 0.0, nx
        else:
            r0, r1, r2 = ny, -nx, 0.0
        rn = np.sqrt(r0 * r0 + r1 * r1 + r2 * r2)
        a0, a1, a2 = r0 / rn, r1 / rn, r2 / rn
        c0 = ny * a2 - nz * a1
        c1 = nz * a0 - nx * a2
        c2 = nx * a1 - ny * a0
        m0 = 0.0
        m1 = 0.0
        m2 = 0.0
        for i in range(u):
            m0 += cap[i, 0]
            m1 += cap[i, 1]
            m2 += cap[i, 2]
        m0 /= u
        m1 /= u
        m2 /= u
        ang = np.empty(u)
        for i in range(u):
            q0 = cap[i, 0] - m0
            q1 = cap[i, 1] - m1
            q2 = cap[i, 2] - m2
            ang[i] = np.arctan2(q0 * c0 + q1 * c1 + q2 * c2, q0 * a0 + q1 * a1 + q2 * a2)
        order = np.argsort(ang, kind="mergesort")
        for i in range(u):
            j = order[i]
            ov[mf, i, 0] = cap[j, 0]
            ov[mf, i, 1] = cap[j, 1]
            ov[mf, i, 2] = cap[j, 2]
        on[mf] = u
        mf += 1
    return mf, True, OK


@njit(cache=True)
def _moment(fv, fn, nf, out):
    """Volume and second moment about the origin; writes 6 entries into ``out``."""
    for i in range(6):
        out[i] = 0.0
    if nf == 0:
        return 0.0, 0.0
    g0 = 0.0
    g1 = 0.0
    g2 = 0.0
    cnt = 0
    for f in range(nf):
        for k in range(fn[f]):
            g0 += fv[f, k, 0]
            g1 += fv[f, k, 1]
            g2 += fv[f, k, 2]
            cnt += 1
    g0 /= cnt
    g1 /= cnt
    g2 /= cnt
    vol = 0.0
    rho2 = 0.0
    for f in range(nf):
        m = fn[f]
        a0 = fv[f, 0, 0]
        a1 = fv[f, 0, 1]
        a2 = fv[f, 0, 2]
        for k in range(m):
            r = fv[f, k, 0] ** 2 + fv[f, k, 1] ** 2 + fv[f, k, 2] ** 2
            if r > rho2:
                rho2 = r
        for k in range(1, m - 1):
            b0 = fv[f, k, 0]
            b1 = fv[f, k, 1]
            b2 = fv[f, k, 2]
            c0 = fv[f, k + 1, 0]
            c1 = fv[f, k + 1, 1]
            c2 = fv[f, k + 1, 2]
            u0, u1, u2 = a0 - g0, a1 - g1, a2 - g2
            v0, v1, v2 = b0 - g0, b1 - g1, b2 - g2
            w0, w1, w2 = c0 - g0, c1 - g1, c2 - g2
            det = u0 * (v1 * w2 - v2 * w1) - u1 * (v0 * w2 - v2 * w0) + u2 * (v0 * w1 - v1 * w0)
            tv = det / 6.0
            vol += tv
            s0 = g0 + a0 + b0 + c0
            s1 = g1 + a1 + b1 + c1
            s2 = g2 + a2 + b2 + c2
            f20 = tv / 20.0
            out[0] += f20 * (g0 * g0 + a0 * a0 + b0 * b0 + c0 * c0 + s0 * s0)
            out[1] += f20 * (g0 * g1 + a0 * a1 + b0 * b1 + c0 * c1 + s0 * s1)
            out[2] += f20 * (g0 * g2 + a0 * a2 + b0 * b2 + c0 * c2 + s0 * s2)
            out[3] += f20 * (g1 * g1 + a1 * a1 + b1 * b1 + c1 * c1 + s1 * s1)
            out[4] += f20 * (g1 * g2 + a1 * a2 + b1 * b2 + c1 * c2 + s1 * s2)
            out[5] += f20 * (g2 * g2 + a2 * a2 + b2 * b2 + c2 * c2 + s2 * s2)
    return vol, np.sqrt(rho2)


@njit(cache=True)
def _unique_vertices(fv, fn, nf, eps, out):
    """Distinct soup vertices into ``out``; returns the count or -1 on overflow."""
    u = 0
    for f in range(nf):
        for k in range(fn[f]):
            dup = False
            for j in range(u):
                if (
                    abs(fv[f, k, 0] - out[j, 0]) <= eps
                    and abs(fv[f, k, 1] - out[j, 1]) <= eps
                    and abs(fv[f, k, 2] - out[j, 2]) <= eps
                ):
                    dup = True
                    break
            if not dup:
                if u >= out.shape[0]:
                    return -1
                out[u, 0] = fv[f, k, 0]
                out[u, 1] = fv[f, k, 1]
                out[u, 2] = fv[f, k, 2]
                u += 1
    return u


@njit(cache=True)
def _one_cell(i, sites, weights, R, pbn, pbo, circ, cand, ncand, nfirst, fmax, kmax, mom, vout):
    """Build the bounded cell of site ``i`` and integrate it.

    ``cand[:ncand]`` are neighbour indices sorted by distance; the first
    ``nfirst`` are clipped before the polyball planes.  When ``vout`` has more
    than one row the distinct cell vertices (relative to the site) are written
    there.  Returns (volume, circumradius about the site, vertex count, status).
    """
    r2 = R * R - weights[i]
    if r2 <= 0.0:
        for k in range(6):
            mom[k] = 0.0
        return 0.0, 0.0, 0, OK
    r = np.sqrt(r2)
    h = r * circ * (1.0 + 1e-9)
    eps = REL_TOL * 2.0 * np.sqrt(3.0) * h
    fa = np.empty((fmax, kmax, 3))
    fb = np.empty((fmax, kmax, 3))
    na = np.empty(fmax, dtype=np.int64)
    nb = np.empty(fmax, dtype=np.int64)
    cap = np.empty((2 * fmax + 2 * kmax, 3))
    nf = _init_cube(fa, na, h)
    px = sites[i, 0]
    py = sites[i, 1]
    pz = sites[i, 2]
    wp = weights[i]
    npb = pbn.shape[0]
    total = ncand + npb
    for step in range(total):
        if step < nfirst:
            j = cand[step]
            is_pb = False
        elif step < nfirst + npb:
            j = step - nfirst
            is_pb = True
        else:
            j = cand[step - npb]
            is_pb = False
        if is_pb:
            nx = pbn[j, 0]
            ny = pbn[j, 1]
            nz = pbn[j, 2]
            b = r * pbo[j]
        else:
            dx = sites[j, 0] - px
            dy = sites[j, 1] - py
            dz = sites[j, 2] - pz
            dd = np.sqrt(dx * dx + dy * dy + dz * dz)
            if dd == 0.0:
                # coincident sites: lighter weight wins, then lower index
                if weights[j] < wp or (weights[j] == wp and j < i):
                    nf = 0
                    break
                continue
            nx = dx / dd
            ny = dy / dd
            nz = dz / dd
            b = (dd * dd + weights[j] - wp) / (2.0 * dd)
        nf2, changed, status = _clip(fa, na, nf, nx, ny, nz, b, eps, fb, nb, cap)
        if status != OK:
            return 0.0, 0.0, 0, status
        if changed:
            fa, fb = fb, fa
            na, nb = nb, na
            nf = nf2
        if nf == 0:
            break
    vol, rho = _moment(fa, na, nf, mom)
    nv = 0
    if vout.shape[0] > 1:
        nv = _unique_vertices(fa, na, nf, eps, vout)
    return vol, rho, nv, OK


@njit(cache=True, parallel=True)
def cells_knn(sites, weights, R, pbn, pbo, circ, knn, fmax, kmax, todo, vmax):
    """Cells built from each listed site's k nearest neighbours only.

    ``knn`` rows hold neighbour indices sorted by distance, padded with -1.
    Also returns up to ``vmax`` distinct vertices per cell (count -1 when
    there are more).
    """
    m = todo.shape[0]
    vol = np.zeros(m)
    rho = np.zeros(m)
    mom = np.zeros((m, 6))
    status = np.zeros(m, dtype=np.int64)
    verts = np.zeros((m, vmax, 3))
    nverts = np.zeros(m, dtype=np.int64)
    for t in prange(m):
        i = todo[t]
        row = knn[t]
        ncand = 0
        while ncand < row.shape[0] and row[ncand] >= 0:
            ncand += 1
        v, r, nv, s = _one_cell(i, sites, weights, R, pbn, pbo, circ, row, ncand, ncand, fmax, kmax, mom[t], verts[t])
        vol[t] = v
        rho[t] = r
        nverts[t] = nv
        status[t] = s
    return vol, rho, mom, status, verts, nverts


# ---------------------------------------------------------------------------
# static kd-tree for "union of balls" candidate queries


def build_kdtree(points, leaf_size=16):
    """Flattened kd-tree: (perm, lo, hi, start, end, left, right)."""
    n = len(points)
    perm = np.arange(n, dtype=np.int64)
    lo, hi, start, end, left, right = [], [], [], [], [], []

    def make(s, e):
        node = len(start)
        pts = points[perm[s:e]]
        lo.append(pts.min(axis=0))
        hi.append(pts.max(axis=0))
        start.append(s)
        end.append(e)
        left.append(-1)
        right.append(-1)
        if e - s > leaf_size:
            dim = int(np.argmax(hi[node] - lo[node]))
            mid = (s + e) // 2
            part = np.argpartition(pts[:, dim], mid - s, kind="introselect")
            perm[s:e] = perm[s:e][part]
            left[node] = make(s, mid)
            right[node] = make(mid, e)
        return node

    if n:
        make(0, n)
    return (
        perm,
        np.array(lo, dtype=np.float64).reshape(-1, 3),
        np.array(hi, dtype=np.float64).reshape(-1, 3),
        np.array(start, dtype=np.int64),
        np.array(end, dtype=np.int64),
        np.array(left, dtype=np.int64),
        np.array(right, dtype=np.int64),
    )


@njit(cache=True)
def _query_balls(points, perm, lo, hi, start, end, left, right, centers, r2, nc, out):
    """Indices within any ball (centers[k], sqrt(r2[k])), k < nc; -1 on overflow."""
    stack = np.empty(128, dtype=np.int64)
    top = 0
    stack[top] = 0
    top += 1
    cnt = 0
    while top > 0:
        top -= 1
        node = stack[top]
        hit = False
        for k in range(nc):
            d2 = 0.0
            for c in range(3):
                x = centers[k, c]
                if x < lo[node, c]:
                    d2 += (lo[node, c] - x) ** 2
                elif x > hi[node, c]:
                    d2 += (x - hi[node, c]) ** 2
            if d2 <= r2[k]:
                hit = True
                break
        if not hit:
            continue
        if left[node] < 0:
            for a in range(start[node], end[node]):
                j = perm[a]
                for k in range(nc):
                    d2 = 0.0
                    for c in range(3):
                        d2 += (points[j, c] - centers[k, c]) ** 2
                    if d2 <= r2[k]:
                        if cnt >= out.shape[0]:
                            return -1
                        out[cnt] = j
                        cnt += 1
                        break
        else:
            stack[top] = left[node]
            stack[top + 1] = right[node]
            top += 2
    return cnt


@njit(cache=True, parallel=True)
def cells_refine(sites, weights, R, pbn, pbo, circ, knn, rho, verts, nverts, wmin, tree, fmax, kmax, cmax, nfirst):
    """Rebuild cells whose certificate finds sites outside the first-pass list.

    For a cell with vertices v, site q can cut it only when
    ``|v - q|^2 < |v - p|^2 + w_p - w_q`` for some v.  Returns
    (rebuilt mask, vol, rho, mom, status); status OVERFLOW covers both
    buffer overflows and candidate lists longer than ``cmax``.
    """
    perm, lo, hi, start, end, left, right = tree
    m = sites.shape[0]
    redo = np.zeros(m, dtype=np.bool_)
    vol = np.zeros(m)
    rho2 = np.zeros(m)
    mom = np.zeros((m, 6))
    status = np.zeros(m, dtype=np.int64)
    dummy = np.zeros((1, 3))
    for i in prange(m):
        if rho[i] <= 0.0:
            continue
        slack = max(weights[i] - wmin, 0.0)
        nv = nverts[i]
        if nv > 0:
            centers = np.empty((nv, 3))
            r2 = np.empty(nv)
            for k in range(nv):
                q2 = 0.0
                for c in range(3):
                    centers[k, c] = verts[i, k, c] + sites[i, c]
                    q2 += verts[i, k, c] ** 2
                rr = np.sqrt(q2 + slack) * (1.0 + 1e-9) + 1e-12 * rho[i]
                r2[k] = rr * rr
        else:
            nv = 1
            centers = np.empty((1, 3))
            r2 = np.empty(1)
            for c in range(3):
                centers[0, c] = sites[i, c]
            rr = (rho[i] + np.sqrt(rho[i] ** 2 + slack)) * (1.0 + 1e-9)
            r2[0] = rr * rr
        buf = np.empty(cmax, dtype=np.int64)
        cnt = _query_balls(sites, perm, lo, hi, start, end, left, right, centers, r2, nv, buf)
        if cnt < 0:
            redo[i] = True
            status[i] = OVERFLOW
            continue
        outside = False
        for a in range(cnt):
            j = buf[a]
            if j == i:
                continue
            found = False
            for b in range(knn.shape[1]):
                if knn[i, b] == j:
                    found = True
                    break
            if not found:
                outside = True
                break
        if not outside:
            continue
        redo[i] = True
        cand = np.sort(buf[:cnt])
        dist = np.empty(cnt)
        for a in range(cnt):
            j = cand[a]
            d2 = 0.0
            for c in range(3):
                d2 += (sites[j, c] - sites[i, c]) ** 2
            dist[a] = d2
        order = np.argsort(dist, kind="mergesort")
        clist = np.empty(cnt, dtype=np.int64)
        keep = 0
        for a in range(cnt):
            j = cand[order[a]]
            if j != i:
                clist[keep] = j
                keep += 1
        v, r, _, s = _one_cell(i, sites, weights, R, pbn, pbo, circ, clist, keep, min(nfirst, keep), fmax, kmax, mom[i], dummy)
        vol[i] = v
        rho2[i] = r
        status[i] = s
    return redo, vol, rho2, mom, status


@njit(cache=True)
def _pairwise_rows(buf, k):
    # bottom-up tree reduction of buf[:k] into buf[0]
    while k > 1:
        half = k // 2
        for a in range(half):
            for c in range(buf.shape[1]):
                buf[a, c] = buf[2 * a, c] + buf[2 * a + 1, c]
        if k % 2:
            for c in range(buf.shape[1]):
                buf[half, c] = buf[k - 1, c]
            half += 1
        k = half


@njit(cache=True, parallel=True)
def convolve_balls(sites, m6, tree, centers, radius, hat, cmax):
    """Sum of chi(p) * M_p over sites p with |p - q| <= r, for each centre q.

    ``hat`` selects ``max(0, 1 - |p - q|/r)`` instead of the indicator.
    Sites are added in ascending index order by pairwise reduction.
    Returns (sums, support sizes, status).
    """
    perm, lo, hi, start, end, left, right = tree
    m = centers.shape[0]
    out = np.zeros((m, 6))
    count = np.zeros(m, dtype=np.int64)
    status = np.zeros(m, dtype=np.int64)
    r2 = np.array([radius * radius])
    for t in prange(m):
        c = np.empty((1, 3))
        for a in range(3):
            c[0, a] = centers[t, a]
        idx = np.empty(cmax, dtype=np.int64)
        cnt = _query_balls(sites, perm, lo, hi, start, end, left, right, c, r2, 1, idx)
        if cnt < 0:
            status[t] = OVERFLOW
            continue
        count[t] = cnt
        if cnt == 0:
            continue
        idx = np.sort(idx[:cnt])
        buf = np.empty((cnt, 6))
        for a in range(cnt):
            j = idx[a]
            w = 1.0
            if hat:
                d2 = 0.0
                for b in range(3):
                    d2 += (sites[j, b] - c[0, b]) ** 2
                w = max(0.0, 1.0 - np.sqrt(d2) / radius)
            for b in range(6):
                buf[a, b] = w * m6[j, b]
        _pairwise_rows(buf, cnt)
        for b in range(6):
            out[t, b] = buf[0, b]
    return out, count, status
