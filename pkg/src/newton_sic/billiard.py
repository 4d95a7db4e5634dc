"""Exact ray tracing of a vertical particle flow against graph surfaces and piecewise bodies.

Rays are advanced in lockstep over a batch. A scene is a list of patches, each returning
for every ray the nearest admissible hit beyond ``t_min``; the scene takes the minimum.

The graph of a composite surface u = min_i u_i is handled without tessellation. A ray is
above the graph at xy-arc-length s iff some piece containing y(s) has u_i(y(s)) < z(s); for a
single piece that set is an interval (the paraboloid is convex along the line, a valley is
flat). The first hit is the first point not covered by the union of these "above" intervals.
The union is grown lazily: only pieces containing the current frontier point are queried.
For a mirror ray of a SIC surface the owning pair alone covers the whole path to its focus,
so the loop usually ends after one query.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .domain import ConvexDomain
from .elementary import FLAT, MIRROR, VALLEY, EDGE
from .errors import GrazingError, NonRegularScattering, SceneError
from .geometry import GridIndex, points_in_triangles

GRAZE = 1e-9
CAP = 64


def reflect(v, n) -> np.ndarray:
    """Specular reflection v - 2<v,n>n of an incoming direction off a unit normal."""
    v = np.asarray(v, dtype=float)
    n = np.asarray(n, dtype=float)
    vn = float(v @ n)
    if vn >= 0:
        raise GrazingError(f"<v,n> = {vn:.3g} >= 0: not an incoming direction")
    return v - 2 * vn * n


def reflect_many(v, n):
    vn = np.einsum("ij,ij->i", v, n)
    return v - 2 * vn[:, None] * n


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    dir: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.dir, dtype=float)
        if abs(np.linalg.norm(d) - 1) > 1e-12:
            raise ValueError("ray direction must be a unit vector")


@dataclass(frozen=True)
class Patch:
    """Description of one surface piece of a scene (for export and bookkeeping)."""

    kind: str
    params: dict
    owner: int = 0


def _clip_convex(a, d, poly):
    """Parameter interval of the lines a + s d inside closed convex polygons (rows,V,2).

    Returns (lo, hi, enter_normal): lo > hi when the line misses; enter_normal is the inward
    unit normal of the edge that bounds the interval from below.
    """
    R, V = poly.shape[:2]
    e = np.roll(poly, -1, axis=1) - poly
    area2 = np.sum(poly[:, :, 0] * np.roll(poly, -1, axis=1)[:, :, 1] - np.roll(poly, -1, axis=1)[:, :, 0] * poly[:, :, 1], axis=1)
    sgn = np.where(area2 >= 0, 1.0, -1.0)
    n = np.stack([-e[:, :, 1], e[:, :, 0]], axis=2) * sgn[:, None, None]
    n /= np.maximum(np.linalg.norm(n, axis=2, keepdims=True), 1e-300)
    nd = np.einsum("rvj,rj->rv", n, d)
    rhs = np.einsum("rvj,rvj->rv", n, poly - a[:, None, :])
    with np.errstate(divide="ignore", invalid="ignore"):
        r = rhs / nd
    lo_c = np.where(nd > 0, r, -np.inf)
    hi_c = np.where(nd < 0, r, np.inf)
    par_bad = (nd == 0) & (rhs > 0)
    k = np.argmax(lo_c, axis=1)
    lo = lo_c[np.arange(R), k]
    hi = hi_c.min(axis=1)
    lo = np.where(par_bad.any(axis=1), np.inf, lo)
    return lo, hi, n[np.arange(R), k]


class GraphPatch:
    """Subgraph boundary of z0 + u over a convex footprint, u a composite surface."""

    kind = "Graph"

    def __init__(self, surface, z0: float = 0.0, footprint: ConvexDomain | None = None, pid: int = 0):
        self.surface = surface
        self.z0 = float(z0)
        self.footprint = surface.domain if footprint is None else footprint
        self.pid = pid
        P = surface.pairs
        self.K = len(P)
        self.clos = surface.pieces()
        self.scale = max(1.0, float(self.footprint.diameter))
        self.flat_fill = bool(getattr(surface, "flat_fill", False))

    def patches(self):
        return [Patch("ParaboloidVerticalAxis", {"focus": [*o, self.z0], "p": float(p)}, self.pid)
                for o, p in zip(self.surface.pairs.O, self.surface.p)]

    def _vertical(self, o, v, t_min):
        xy = o[:, :2]
        t = np.full(len(o), np.inf)
        n = np.zeros((len(o), 3))
        inside = self.footprint.contains_many(xy, closed=True) & (v[:, 2] < 0)
        if inside.any():
            u, g, r, w = self.surface.eval_many(xy[inside])
            zt = self.z0 + u
            tt = (o[inside, 2] - zt) / (-v[inside, 2])
            ok = np.isfinite(tt) & (tt >= t_min)
            nn = np.column_stack([-g, np.ones(len(g))])
            nn /= np.linalg.norm(nn, axis=1, keepdims=True)
            idx = np.flatnonzero(inside)
            t[idx[ok]] = tt[ok]
            n[idx[ok]] = nn[ok]
        return t, n

    def _neg_intervals(self, rows_r, rows_j, a, d, o3, k):
        """"Ray above piece" intervals for (ray, piece) rows: up to two per pair, one per flat piece."""
        s = self.surface
        P = s.pairs
        z0 = self.z0
        A, Dd, O3, Kk = a[rows_r], d[rows_r], o3[rows_r], k[rows_r]
        isp = rows_j < self.K
        out_r, out_lo, out_hi, out_j = [], [], [], []
        # valley or flat part: above iff z(s) > z0
        with np.errstate(divide="ignore", invalid="ignore"):
            sf = (z0 - O3) / Kk
        flo = np.where(Kk > 0, sf, -np.inf)
        fhi = np.where(Kk < 0, sf, np.inf)
        flat_neg = (Kk == 0) & (O3 <= z0)
        if isp.any():
            j = rows_j[isp]
            Ai, Di = A[isp], Dd[isp]
            tri = np.stack([P.M[j], P.O[j], P.N[j]], axis=1)
            lo, hi, _ = _clip_convex(Ai, Di, tri)
            lo = np.maximum(lo, flo[isp]); hi = np.minimum(hi, fhi[isp])
            hi = np.where(flat_neg[isp], -np.inf, hi)
            out_r.append(rows_r[isp]); out_lo.append(lo); out_hi.append(hi); out_j.append(j)
            quad = np.stack([P.A[j], P.M[j], P.N[j], P.B[j]], axis=1)
            lo, hi, _ = _clip_convex(Ai, Di, quad)
            p = s.p[j]
            w = Ai - P.O[j]
            qa = 1.0 / (2 * p)
            qb = np.einsum("ij,ij->i", w, Di) / p - Kk[isp]
            qc = (np.einsum("ij,ij->i", w, w) - p * p) / (2 * p) + z0 - O3[isp]
            disc = qb * qb - 4 * qa * qc
            sq = np.sqrt(np.maximum(disc, 0))
            r1 = (-qb - sq) / (2 * qa)
            r2 = (-qb + sq) / (2 * qa)
            lo = np.maximum(lo, r1); hi = np.minimum(hi, r2)
            hi = np.where(disc > 0, hi, -np.inf)
            out_r.append(rows_r[isp]); out_lo.append(lo); out_hi.append(hi); out_j.append(j)
        if (~isp).any():
            j = rows_j[~isp]
            lo, hi, _ = _clip_convex(A[~isp], Dd[~isp], self.clos[j])
            lo = np.maximum(lo, flo[~isp]); hi = np.minimum(hi, fhi[~isp])
            hi = np.where(flat_neg[~isp], -np.inf, hi)
            out_r.append(rows_r[~isp]); out_lo.append(lo); out_hi.append(hi); out_j.append(j)
        return (np.concatenate(out_r), np.concatenate(out_lo), np.concatenate(out_hi), np.concatenate(out_j))

    def _flat_advance(self, rows, s0, a, d, k, o3, end, stol):
        """Advance through the implicit flat region u = 0 (points no closure contains).

        Looks at the index cell just ahead of s0: if no closure covers the line there and the
        ray is above z0, the ray moves on to the first closure entry, the cell exit, the floor
        crossing or the footprint exit, whichever comes first. Otherwise s0 is returned.
        """
        out = s0.copy()
        A, D, K3, Z = a[rows], d[rows], k[rows], o3[rows]
        sa = s0 + stol
        above = Z + K3 * sa > self.z0 + stol * np.maximum(1.0, np.abs(K3))
        if not above.any():
            return out
        idx = self.surface.index
        ya = A + sa[:, None] * D
        g = np.floor((ya - idx.lo) / idx.cell)
        with np.errstate(divide="ignore", invalid="ignore"):
            bx = idx.lo + np.where(D > 0, g + 1, g) * idx.cell
            tc = np.where(D != 0, (bx - A) / D, np.inf)
        cell_exit = tc.min(1)
        with np.errstate(divide="ignore", invalid="ignore"):
            floor = np.where(K3 < 0, (self.z0 - Z) / K3, np.inf)
        nxt = np.minimum(np.minimum(cell_exit, floor), end[rows])
        pi, ci = idx.candidates(ya)
        blocked = np.zeros(len(rows), dtype=bool)
        if len(pi):
            lo, hi, _ = _clip_convex(A[pi], D[pi], self.clos[ci])
            meet = lo <= hi
            cov = meet & (lo <= sa[pi]) & (hi > sa[pi])
            blocked[pi[cov]] = True
            later = meet & (lo > sa[pi])
            np.minimum.at(nxt, pi[later], lo[later])
        go = above & ~blocked & (nxt > s0)
        out[go] = nxt[go]
        return out

    def _containing(self, pts, tol):
        pi, ci = self.surface.index.candidates(pts)
        hit = points_in_triangles(pts[pi], self.clos[ci], tol)
        return pi[hit], ci[hit]

    def intersect(self, o, v, t_min, last=None):
        R = len(o)
        t = np.full(R, np.inf)
        n = np.zeros((R, 3))
        if R == 0:
            return t, n
        sp = np.linalg.norm(v[:, :2], axis=1)
        vert = sp < 1e-12
        if vert.any():
            tv, nv = self._vertical(o[vert], v[vert], t_min)
            t[vert], n[vert] = tv, nv
        sl = np.flatnonzero(~vert)
        if len(sl) == 0:
            return t, n
        a = o[sl, :2]
        d = v[sl, :2] / sp[sl, None]
        k = v[sl, 2] / sp[sl]
        o3 = o[sl, 2]
        s_in, s_out = self.footprint.line_intervals(a, d)
        s_min = t_min * sp[sl]
        start = np.maximum(s_min, s_in)
        end = s_out
        tol = 1e-12 * self.scale
        stol = 1e-11 * self.scale
        reach = start.copy()
        entered = s_in > s_min
        active = reach < end - stol
        hit_s = np.full(len(sl), np.nan)
        for _ in range(100000):
            ia = np.flatnonzero(active)
            if len(ia) == 0:
                break
            y = a[ia] + reach[ia, None] * d[ia]
            pr, pj = self._containing(y, stol)
            rows_r = ia[pr]
            rr, lo, hi, jj = self._neg_intervals(rows_r, pj, a, d, o3, k)
            ok = (lo <= reach[rr] + stol) & (hi > reach[rr] + stol)
            new = np.full(len(sl), -np.inf)
            np.maximum.at(new, rr[ok], hi[ok])
            ext = new[ia] > reach[ia]
            if self.flat_fill and (~ext).any():
                st = ia[~ext]
                adv = self._flat_advance(st, reach[st], a, d, k, o3, end, stol)
                new[st] = adv
                ext = new[ia] > reach[ia]
            stuck = ia[~ext]
            hit_s[stuck] = reach[stuck]
            active[stuck] = False
            go = ia[ext]
            reach[go] = new[go]
            fin = go[reach[go] >= end[go] - stol]
            active[fin] = False
        else:  # pragma: no cover
            raise SceneError("graph intersection did not converge")
        # a stop within roundoff of the footprint exit is a touch at the boundary, not an impact
        # (mirror rays leave through the focus, which is a corner of the pair's closure)
        leave = np.isfinite(hit_s) & (end - hit_s <= 1e-9 * self.scale) & ~(entered & (np.abs(hit_s - s_in) <= stol))
        hit_s[leave] = np.nan
        hs = np.flatnonzero(np.isfinite(hit_s))
        if len(hs):
            s_hit = hit_s[hs]
            nn = self._classify(a[hs], d[hs], k[hs], o3[hs], s_hit, entered[hs] & (np.abs(s_hit - s_in[hs]) <= stol), tol, stol)
            gi = sl[hs]
            t[gi] = s_hit / sp[gi]
            n[gi] = nn
        return t, n

    def _classify(self, a, d, k, o3, s, at_entry, tol, stol):
        """Normal at a hit: paraboloid, floor, or a vertical wall (jump of u or footprint side)."""
        R = len(a)
        n = np.zeros((R, 3))
        eta = 10 * stol
        y = a + s[:, None] * d
        ya = a + (s + eta)[:, None] * d
        z = o3 + k * s
        u, g, reg, w = self.surface.eval_many(ya)
        covered = w >= 0
        if self.flat_fill:
            covered |= self.footprint.contains_many(ya, closed=True)
        ut = np.where(covered, np.nan_to_num(u), 0.0) + self.z0
        contact = covered & (ut <= z + 1e-9 * self.scale)
        # surface contact: evaluate the gradient of the winner at the hit point itself
        if contact.any():
            ic = np.flatnonzero(contact)
            mirror = reg[ic] == MIRROR
            gg = np.zeros((len(ic), 2))
            if mirror.any():
                P = self.surface.pairs
                j = w[ic[mirror]]
                gg[mirror] = (y[ic[mirror]] - P.O[j]) / self.surface.p[j][:, None]
            nn = np.column_stack([-gg, np.ones(len(ic))])
            n[ic] = nn / np.linalg.norm(nn, axis=1, keepdims=True)
        wall = ~contact
        if wall.any():
            iw = np.flatnonzero(wall)
            side = at_entry[iw] | ~covered[iw] | (w[iw] < 0)
            nw = np.zeros((len(iw), 2))
            if side.any():
                nw[side] = self.footprint.outward_normals(y[iw[side]])
            inner = ~side
            if inner.any():
                ii = iw[inner]
                j = w[ii]
                P = self.surface.pairs
                isp = j < self.K
                poly = np.zeros((len(ii), 4, 2))
                jp = np.where(isp, j, 0)
                mir = reg[ii] == MIRROR
                quad = np.stack([P.A[jp], P.M[jp], P.N[jp], P.B[jp]], axis=1) if self.K else poly
                tri = np.stack([P.M[jp], P.O[jp], P.N[jp], P.N[jp]], axis=1) if self.K else poly
                poly = np.where(mir[:, None, None], quad, tri)
                if (~isp).any():
                    fl = self.clos[j[~isp]]
                    poly[~isp] = np.concatenate([fl, fl[:, -1:]], axis=1)
                # a repeated vertex gives a zero-length edge; its normal is never the entering one
                _, _, ein = _clip_convex(a[ii], d[ii], poly)
                nw[inner] = -ein
            n[iw, :2] = nw / np.maximum(np.linalg.norm(nw, axis=1, keepdims=True), 1e-300)
        return n


class PlanePatch:
    """Horizontal plane z = level over a footprint given by a predicate on xy."""

    kind = "HorizontalPlane"

    def __init__(self, level: float, up: bool, footprint, pid: int = 0, name: str = ""):
        self.level = float(level)
        self.up = up
        self.footprint = footprint
        self.pid = pid
        self.name = name

    def patches(self):
        return [Patch("HorizontalPlane", {"z": self.level, "up": self.up, "name": self.name}, self.pid)]

    def intersect(self, o, v, t_min, last=None):
        t = np.full(len(o), np.inf)
        n = np.zeros((len(o), 3))
        vz = v[:, 2]
        ok = (vz < 0) if self.up else (vz > 0)
        with np.errstate(divide="ignore", invalid="ignore"):
            tt = (self.level - o[:, 2]) / vz
        ok &= np.isfinite(tt) & (tt >= t_min)
        idx = np.flatnonzero(ok)
        if len(idx):
            xy = o[idx, :2] + tt[idx, None] * v[idx, :2]
            inside = self.footprint(xy)
            idx = idx[inside]
            t[idx] = tt[idx]
            n[idx, 2] = 1.0 if self.up else -1.0
        return t, n


class WallPatch:
    """Vertical wall on the boundary of a convex domain, body outside it, facing inward."""

    kind = "VerticalWall"

    def __init__(self, inner: ConvexDomain, z_lo: float, z_hi: float, pid: int = 0, name: str = ""):
        self.inner = inner
        self.z_lo, self.z_hi = float(z_lo), float(z_hi)
        self.pid = pid
        self.name = name

    def patches(self):
        return [Patch("VerticalWall", {"boundary": self.inner.to_dict(), "z": [self.z_lo, self.z_hi],
                                       "name": self.name}, self.pid)]

    def intersect(self, o, v, t_min, last=None):
        t = np.full(len(o), np.inf)
        n = np.zeros((len(o), 3))
        sp = np.linalg.norm(v[:, :2], axis=1)
        idx = np.flatnonzero(sp > 1e-12)
        if len(idx) == 0:
            return t, n
        d = v[idx, :2] / sp[idx, None]
        _, s1 = self.inner.line_intervals(o[idx, :2], d)
        tt = s1 / sp[idx]
        z = o[idx, 2] + tt * v[idx, 2]
        ok = np.isfinite(tt) & (tt >= t_min) & (z >= self.z_lo) & (z <= self.z_hi)
        ok &= self.inner.contains_many(o[idx, :2], closed=True, tol=1e-9)
        g = idx[ok]
        t[g] = tt[ok]
        xy = o[g, :2] + t[g, None] * v[g, :2]
        n[g, :2] = -self.inner.outward_normals(xy)
        return t, n


class HollowSet:
    """Tilted paraboloids of revolution |X-F| = (X-F).a + 2f, each cut to z in [z_lo, z_hi] over a footprint.

    The body lies outside each paraboloid, so the surface normal points into the hollow.
    Candidates are found through the inlet ellipses at z = z_hi and the last patch hit.
    """

    kind = "ParaboloidTiltedAxis"

    def __init__(self, F, a, f, z_lo, z_hi, footprint: ConvexDomain, pid0: int = 1000):
        self.F = np.asarray(F, dtype=float).reshape(-1, 3)
        self.a = np.asarray(a, dtype=float).reshape(-1, 3)
        self.f = np.asarray(f, dtype=float).reshape(-1)
        self.z_lo, self.z_hi = float(z_lo), float(z_hi)
        self.footprint = footprint
        self.pid0 = pid0
        e = np.linalg.norm(self.a[:, :2], axis=1)
        self.ecc = e
        rad = 2 * self.f / np.maximum(1 - e, 1e-12)
        c = self.F[:, :2]
        self.index = GridIndex(np.column_stack([c - rad[:, None], c + rad[:, None]])) if len(c) else None

    def __len__(self):
        return len(self.F)

    def patches(self):
        return [Patch("ParaboloidTiltedAxis", {"focus": F.tolist(), "axis": a.tolist(), "focal_length": float(f)},
                      self.pid0 + i) for i, (F, a, f) in enumerate(zip(self.F, self.a, self.f))]

    def level(self, X, i):
        w = X - self.F[i]
        return np.linalg.norm(w, axis=-1) - np.einsum("...j,...j->...", w, self.a[i]) - 2 * self.f[i]

    def inlet_of(self, xy):
        """Index of the inlet ellipse containing each point at z = z_hi, -1 if none."""
        out = np.full(len(xy), -1, dtype=np.int64)
        if self.index is None or len(xy) == 0:
            return out
        pi, ci = self.index.candidates(xy)
        X = np.column_stack([xy[pi], np.full(len(pi), self.z_hi)])
        inside = self.level(X, ci) < 0
        out[pi[inside]] = ci[inside]
        return out

    def intersect(self, o, v, t_min, last=None):
        R = len(o)
        t = np.full(R, np.inf)
        n = np.zeros((R, 3))
        if len(self) == 0:
            return t, n
        cand = np.full(R, -1, dtype=np.int64)
        if last is not None:
            own = (last >= self.pid0) & (last < self.pid0 + len(self))
            cand[own] = last[own] - self.pid0
        with np.errstate(divide="ignore", invalid="ignore"):
            tc = (self.z_hi - o[:, 2]) / v[:, 2]
        down = (cand < 0) & (v[:, 2] < 0) & (o[:, 2] >= self.z_hi) & np.isfinite(tc)
        if down.any():
            idx = np.flatnonzero(down)
            xy = o[idx, :2] + tc[idx, None] * v[idx, :2]
            cand[idx] = self.inlet_of(xy)
        idx = np.flatnonzero(cand >= 0)
        if len(idx) == 0:
            return t, n
        i = cand[idx]
        w = o[idx] - self.F[i]
        vv = v[idx]
        a = self.a[i]
        va = np.einsum("ij,ij->i", vv, a)
        wa = np.einsum("ij,ij->i", w, a) + 2 * self.f[i]
        A = 1 - va * va
        B = 2 * (np.einsum("ij,ij->i", w, vv) - wa * va)
        C = np.einsum("ij,ij->i", w, w) - wa * wa
        best = np.full(len(idx), np.inf)
        disc = B * B - 4 * A * C
        sq = np.sqrt(np.maximum(disc, 0))
        with np.errstate(divide="ignore", invalid="ignore"):
            lin = np.abs(A) < 1e-14
            roots = [np.where(lin, -C / B, (-B - sq) / (2 * A)), np.where(lin, np.inf, (-B + sq) / (2 * A))]
        for r in roots:
            X = o[idx] + r[:, None] * vv
            rhs = np.einsum("ij,ij->i", X - self.F[i], a) + 2 * self.f[i]
            ok = (disc >= 0) & np.isfinite(r) & (r >= t_min) & (rhs >= 0)
            ok &= (X[:, 2] >= self.z_lo - 1e-12) & (X[:, 2] <= self.z_hi + 1e-12)
            ok &= self.footprint.contains_many(X[:, :2], closed=True, tol=1e-12)
            best = np.where(ok & (r < best), r, best)
        good = np.isfinite(best)
        g = idx[good]
        t[g] = best[good]
        X = o[g] + t[g, None] * v[g]
        wF = X - self.F[i[good]]
        grad = wF / np.linalg.norm(wF, axis=1, keepdims=True) - a[good]
        n[g] = -grad / np.linalg.norm(grad, axis=1, keepdims=True)
        return t, n


@dataclass
class TraceResult:
    impacts: list
    v_plus: np.ndarray
    s0: float
    z_of_s: np.ndarray
    ambiguous: bool = False


@dataclass
class BatchResult:
    x0: np.ndarray
    impacts: np.ndarray          # count per ray
    v_plus: np.ndarray           # (n,3)
    nonregular: np.ndarray       # bool per ray
    ambiguous: np.ndarray        # bool per ray
    first_v3: np.ndarray         # v3 after the first impact (nan if none)
    impact_ray: np.ndarray       # flat impact records: ray id
    impact_point: np.ndarray
    impact_normal: np.ndarray
    impact_patch: np.ndarray
    impact_v3_in: np.ndarray
    impact_v3_out: np.ndarray
    impact_s: np.ndarray         # cumulative xy path length at each impact
    checks: dict = field(default_factory=dict)

    def histogram(self) -> dict:
        vals, cnt = np.unique(self.impacts[~self.nonregular], return_counts=True)
        out = {int(a): int(b) for a, b in zip(vals, cnt)}
        if self.nonregular.any():
            out["nonregular"] = int(self.nonregular.sum())
        return out


class Scene:
    """Immutable set of patches traced together."""

    def __init__(self, patches, domain: ConvexDomain, z_top: float, M: float | None = None, name: str = ""):
        self.items = list(patches)
        self.domain = domain
        self.z_top = float(z_top)
        self.M = float(z_top if M is None else M)
        self.scale = max(1.0, float(domain.diameter), self.z_top)
        self.t_eps = 1e-9 * self.scale
        self.name = name

    def patch_list(self):
        out = []
        for it in self.items:
            out.extend(it.patches())
        return out

    def _pid(self, k, it, n):
        if isinstance(it, HollowSet):
            return None
        return np.full(n, getattr(it, "pid", k), dtype=np.int64)

    def trace_batch(self, x0, cap: int = CAP) -> BatchResult:
        x0 = np.atleast_2d(np.asarray(x0, dtype=float))
        R = len(x0)
        o = np.column_stack([x0, np.full(R, self.z_top + 1.0)])
        v = np.tile([0.0, 0.0, -1.0], (R, 1))
        count = np.zeros(R, dtype=np.int64)
        last = np.full(R, -1, dtype=np.int64)
        alive = np.ones(R, dtype=bool)
        nonreg = np.zeros(R, dtype=bool)
        amb = np.zeros(R, dtype=bool)
        s_cum = np.zeros(R)
        first_v3 = np.full(R, np.nan)
        rec = {k: [] for k in ("r", "p", "n", "pid", "vin", "vout", "s")}
        t_min = self.t_eps
        for _ in range(cap + 2):
            ia = np.flatnonzero(alive)
            if len(ia) == 0:
                break
            oa, va, la = o[ia], v[ia], last[ia]
            T = np.full((len(self.items), len(ia)), np.inf)
            Nn = np.zeros((len(self.items), len(ia), 3))
            for k, it in enumerate(self.items):
                T[k], Nn[k] = it.intersect(oa, va, t_min, la)
            order = np.argsort(T, axis=0)
            kbest = order[0]
            tb = T[kbest, np.arange(len(ia))]
            if len(self.items) > 1:
                t2 = T[order[1], np.arange(len(ia))]
                with np.errstate(invalid="ignore"):
                    amb[ia] |= np.isfinite(tb) & (t2 - tb < self.t_eps)
            nb = Nn[kbest, np.arange(len(ia))]
            miss = ~np.isfinite(tb)
            alive[ia[miss]] = False
            hi = np.flatnonzero(~miss)
            if len(hi) == 0:
                break
            r = ia[hi]
            tb, nb, kb = tb[hi], nb[hi], kbest[hi]
            X = o[r] + tb[:, None] * v[r]
            s_cum[r] += tb * np.linalg.norm(v[r, :2], axis=1)
            vn = np.einsum("ij,ij->i", v[r], nb)
            graze = np.abs(vn) < GRAZE
            pid = np.array([self._hit_pid(self.items[k], X[i:i + 1], o[r[i]], v[r[i]]) for i, k in enumerate(kb)],
                           dtype=np.int64) if len(r) < 64 else self._hit_pids(kb, X, o[r], v[r])
            vnew = np.where(graze[:, None], v[r], reflect_many(v[r], nb))
            vnew /= np.linalg.norm(vnew, axis=1, keepdims=True)
            real = ~graze
            rr = r[real]
            rec["r"].append(rr); rec["p"].append(X[real]); rec["n"].append(nb[real]); rec["pid"].append(pid[real])
            rec["vin"].append(v[rr, 2]); rec["vout"].append(vnew[real, 2]); rec["s"].append(s_cum[rr])
            firsts = rr[count[rr] == 0]
            count[rr] += 1
            first_v3[firsts] = vnew[real][count[rr] == 1][:, 2] if len(firsts) else first_v3[firsts]
            o[r] = X
            v[r] = vnew
            last[r] = pid
            over = r[count[r] > cap]
            nonreg[over] = True
            alive[over] = False
        cat = lambda k, shape: np.concatenate(rec[k]) if rec[k] else np.zeros(shape)  # noqa: E731
        return BatchResult(x0, count, v, nonreg, amb, first_v3, cat("r", (0,)).astype(np.int64), cat("p", (0, 3)),
                           cat("n", (0, 3)), cat("pid", (0,)).astype(np.int64), cat("vin", (0,)), cat("vout", (0,)),
                           cat("s", (0,)))

    def _hit_pids(self, kb, X, o, v):
        out = np.zeros(len(kb), dtype=np.int64)
        for k, it in enumerate(self.items):
            sel = np.flatnonzero(kb == k)
            if len(sel) == 0:
                continue
            if isinstance(it, HollowSet):
                out[sel] = it.pid0 + _nearest_hollow(it, X[sel])
            else:
                out[sel] = it.pid
        return out

    def _hit_pid(self, it, X, o, v):
        if isinstance(it, HollowSet):
            return int(it.pid0 + _nearest_hollow(it, X)[0])
        return int(it.pid)

    def trace_ray(self, x0, cap: int = CAP) -> TraceResult:
        b = self.trace_batch(np.asarray(x0, dtype=float)[None], cap)
        if b.nonregular[0]:
            raise NonRegularScattering(f"ray at {list(x0)} exceeded {cap} impacts")
        imp = [(p, n, int(pid)) for p, n, pid in zip(b.impact_point, b.impact_normal, b.impact_patch)]
        zs = np.column_stack([b.impact_s, b.impact_point[:, 2]]) if len(imp) else np.zeros((0, 2))
        s0 = float(b.impact_s[-1]) if len(imp) else 0.0
        return TraceResult(imp, b.v_plus[0], s0, zs, bool(b.ambiguous[0]))


def _nearest_hollow(hs: HollowSet, X):
    """Which paraboloid a hit point lies on (smallest |level|)."""
    X = np.atleast_2d(X)
    out = np.zeros(len(X), dtype=np.int64)
    pi, ci = hs.index.candidates(X[:, :2]) if hs.index is not None else (np.zeros(0, int), np.zeros(0, int))
    # inlet candidates are indexed at the inlet plane; fall back to all hollows when none match
    best = np.full(len(X), np.inf)
    if len(pi):
        lv = np.abs(hs.level(X[pi], ci))
        for a, b, c in zip(pi, ci, lv):
            if c < best[a]:
                best[a], out[a] = c, b
    miss = ~np.isfinite(best)
    if miss.any():
        for q in np.flatnonzero(miss):
            lv = np.abs(hs.level(np.broadcast_to(X[q], (len(hs), 3)), np.arange(len(hs))))
            out[q] = int(np.argmin(lv))
    return out


def graph_scene(surface, z0: float = 0.0) -> Scene:
    M = getattr(surface, "M", 1.0)
    return Scene([GraphPatch(surface, z0)], surface.domain, z0 + M, M, name="graph")


def trace_ray(scene: Scene, x0, cap: int = CAP) -> TraceResult:
    return scene.trace_ray(x0, cap)


def batch_trace(scene: Scene, n: int, seed: int, checks: bool = True, cap: int = CAP, chunk: int = 20000,
                points=None) -> BatchResult:
    """Trace n seeded-uniform rays over the scene domain; optional Theorem-2 checks."""
    if points is None:
        rng = np.random.default_rng(seed)
        points = scene.domain.sample_uniform(n, rng)
    parts = [scene.trace_batch(points[i:i + chunk], cap) for i in range(0, len(points), chunk)]
    b = _merge(parts, chunk)
    if checks:
        b.checks = theorem2_checks(b, scene)
    return b


def _merge(parts, chunk):
    if len(parts) == 1:
        return parts[0]
    off = np.cumsum([0] + [len(p.x0) for p in parts[:-1]])
    cat = lambda k: np.concatenate([getattr(p, k) for p in parts])  # noqa: E731
    return BatchResult(cat("x0"), cat("impacts"), cat("v_plus"), cat("nonregular"), cat("ambiguous"),
                       cat("first_v3"), np.concatenate([p.impact_ray + o for p, o in zip(parts, off)]),
                       cat("impact_point"), cat("impact_normal"), cat("impact_patch"), cat("impact_v3_in"),
                       cat("impact_v3_out"), cat("impact_s"))


def theorem2_checks(b: BatchResult, scene: Scene, tol: float = 1e-9) -> dict:
    """(i) v3 nondecreasing at impacts, (ii) z(s) convex, (iii) v3+ >= -M/sqrt(M^2+d^2) - tol."""
    out = {}
    dv = b.impact_v3_out - b.impact_v3_in
    out["v3_monotone_violations"] = int((dv < -tol).sum())
    out["v3_monotone_worst"] = float(dv.min()) if len(dv) else 0.0
    # slopes of z(s) per segment: incoming vertical (-inf) then v3/|vxy| after each impact
    n_ray = len(b.x0)
    viol = 0
    worst = 0.0
    if len(b.impact_ray):
        order = np.lexsort((b.impact_s, b.impact_ray))
        rr = b.impact_ray[order]
        vout = b.impact_v3_out[order]
        nrm = b.impact_normal[order]
        vin = b.impact_v3_in[order]
        # v_xy magnitude after each impact from energy conservation
        sp_out = np.sqrt(np.maximum(1 - vout ** 2, 0))
        sp_in = np.sqrt(np.maximum(1 - vin ** 2, 0))
        with np.errstate(divide="ignore", invalid="ignore"):
            sl_out = np.where(sp_out > 1e-15, vout / sp_out, np.sign(vout) * np.inf)
            sl_in = np.where(sp_in > 1e-15, vin / sp_in, np.sign(vin) * np.inf)
        bad = sl_out < sl_in - tol * (1 + np.abs(np.where(np.isfinite(sl_in), sl_in, 0)))
        bad &= ~((sl_out == sl_in))
        viol = int(bad.sum())
        fin = np.isfinite(sl_out) & np.isfinite(sl_in)
        worst = float((sl_out - sl_in)[fin].min()) if fin.any() else 0.0
    out["z_convex_violations"] = viol
    out["z_convex_worst"] = worst
    d = scene.domain.distance_many(b.x0)
    M = scene.M
    bound = -M / np.sqrt(M * M + d * d)
    marg = b.v_plus[:, 2] - bound
    ok = ~b.nonregular
    out["ineq2_violations"] = int((marg[ok] < -tol).sum())
    out["ineq2_worst_margin"] = float(marg[ok].min()) if ok.any() else float("nan")
    out["nonregular"] = int(b.nonregular.sum())
    out["ambiguous"] = int(b.ambiguous.sum())
    out["histogram"] = b.histogram()
    out["n"] = n_ray
    return out
