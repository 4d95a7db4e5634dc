"""Composite surface u = min_i u_i over a convex domain.

Each lattice cell Q (paired with an exterior square Q~) gets a triangle ABC, a family of the
2nd order scaled so that its elementary sets cover a disc about every small-square center of
Q, and the family is translated to each of the n^2 small squares. The family of the 2nd order
is built once in a standard frame; a cell only stores the affine map that carries it into the
plane.

Keeping every pair of every translate is exact but useless at desk scale: valleys then cover
almost all of the domain. Pairs are therefore selected from the translated families by a
greedy cover of sample points (interior squares first, so that long mirror strips are shared
by many squares). Slivers that no chosen closure contains get u = 0 (flat fill), which keeps
the single impact condition at the cost of resistance 1 on the sliver. Any sub-collection
with foci outside the domain is a valid input for the min-construction.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
import shapely
from shapely.geometry import Polygon, box as shp_box

from .domain import ConvexDomain, lattice_cover
from .elementary import (EDGE, FLAT, MIRROR, OUTSIDE, VALLEY, PairArrays, SurfaceSample,
                         eval_pairs_at, focal_parameters, nonnegativity_bound)
from .errors import ConstructionError, CoverageError, DomainError, ResourceError
from .geometry import TriangleIndex, incircle, points_in_triangles, raster_triangles
from .hierarchy import STD, Tri, affine_from_triangles, build_second_order_family, predicted_pairs

TIE = 1e-12


@dataclass(frozen=True, eq=False)
class StdFamily:
    """All pairs of the (2,m)-set over the standard generating triangle, grouped by copy."""

    m: int
    pairs: PairArrays
    copy_theta: np.ndarray  # (S,3,2) image of Theta under each copy map
    theta: np.ndarray       # (3,2) vertices of Theta (M, N, apex)
    copy_inv: np.ndarray    # (S,2,2) inverse linear parts of the copy maps
    copy_shift: np.ndarray  # (S,2)
    root: PairArrays
    root_hull: np.ndarray
    root_closure_planes: tuple
    root_trap_planes: tuple

    @property
    def per_copy(self) -> int:
        return 2 ** self.m

    def copy_pairs(self, copies) -> np.ndarray:
        copies = np.asarray(copies, dtype=np.int64)
        return (copies[:, None] * self.per_copy + np.arange(self.per_copy)).ravel()


@lru_cache(maxsize=4)
def standard_family(m: int, max_pairs: int = 2_000_000) -> StdFamily:
    t = Tri(STD[0], STD[1], STD[2])
    tree = build_second_order_family(t, m, max_pairs=max_pairs)
    th = tree.theta.vertices()
    ct = np.einsum("sij,vj->svi", tree.set_lin, th) + tree.set_shift[:, None, :]
    root = tree.root.pairs
    hull = np.asarray(shapely.MultiPoint(root.closures().reshape(-1, 2)).convex_hull.exterior.coords)[:-1]
    tz = root.trapezoids()
    return StdFamily(m, tree.pairs(), ct, th, np.linalg.inv(tree.set_lin), tree.set_shift.copy(), root, hull,
                     _planes(root.closures()), (_planes(tz[:, [0, 1, 2]]), _planes(tz[:, [0, 2, 3]])))


def _incidence(std: StdFamily, q, tol):
    """Sparse incidence of standard-frame points with the closures of all pairs.

    Points are pulled back into the root (1,m)-set through every copy map. Returns
    (point_index, pair_index, in_trapezoid).
    """
    L, T = std.copy_inv, std.copy_shift
    dx = q[:, None, 0] - T[None, :, 0]
    dy = q[:, None, 1] - T[None, :, 1]
    zx = L[None, :, 0, 0] * dx + L[None, :, 0, 1] * dy
    zy = L[None, :, 1, 0] * dx + L[None, :, 1, 1] * dy
    lo, hi = std.root_hull.min(0) - tol, std.root_hull.max(0) + tol
    pi, si = np.nonzero((zx >= lo[0]) & (zx <= hi[0]) & (zy >= lo[1]) & (zy <= hi[1]))
    zz = np.stack([zx[pi, si], zy[pi, si]], axis=1)
    inc = _halfplanes(std.root_closure_planes, zz, tol)
    pp, kk = np.nonzero(inc)
    mir = (_halfplanes(std.root_trap_planes[0], zz, tol) | _halfplanes(std.root_trap_planes[1], zz, tol))[pp, kk]
    return pi[pp], si[pp] * std.per_copy + kk, mir


def _planes(tris):
    """Inward unit normals and offsets of the edges of (K,3,2) triangles: inside iff n.x >= c."""
    tris = np.asarray(tris, dtype=float)
    area2 = np.sign((tris[:, 1, 0] - tris[:, 0, 0]) * (tris[:, 2, 1] - tris[:, 0, 1])
                    - (tris[:, 1, 1] - tris[:, 0, 1]) * (tris[:, 2, 0] - tris[:, 0, 0]))
    e = np.roll(tris, -1, axis=1) - tris
    n = np.stack([-e[..., 1], e[..., 0]], axis=-1) * area2[:, None, None]
    n /= np.linalg.norm(n, axis=-1, keepdims=True)
    c = np.einsum("kej,kej->ke", n, tris)
    return n, c


def _halfplanes(planes, pts, tol):
    n, c = planes
    ok = np.ones((len(pts), len(n)), dtype=bool)
    for e in range(3):
        ok &= pts @ n[:, e].T >= c[:, e] - tol
    return ok


def cell_triangle(cell, delta: float, margin: float = 0.1) -> Tri:
    """Triangle ABC with apex C at the center of Q and base inside the exterior square.

    A and B are C + v +/- g with v the offset to the exterior square and g along the diagonal
    most perpendicular to v, |g|_inf = (1-margin) delta/2, so Q + (A-C) and Q + (B-C) lie
    strictly inside the exterior square of side 2 delta.
    """
    C = np.asarray(cell.q_center, dtype=float)
    v = np.asarray(cell.qt_center, dtype=float) - C
    diag = min((np.array([1.0, 1.0]), np.array([1.0, -1.0])), key=lambda g: abs(g @ v))
    g = diag * (1 - margin) * delta / 2
    return Tri(C + v + g, C + v - g, C)


@dataclass(frozen=True, eq=False)
class CellFrame:
    """Where the standard family goes for one lattice cell."""

    index: int
    center: np.ndarray
    abc: Tri
    n: int
    side: float
    lin: np.ndarray    # standard frame -> plane, family centered at the cell center
    shift: np.ndarray
    inradius: float

    @property
    def omega(self) -> float:
        return self.side / self.n

    def square_centers(self) -> np.ndarray:
        k = (np.arange(self.n) + 0.5) * self.omega - self.side / 2
        gx, gy = np.meshgrid(k, k, indexing="ij")
        return self.center + np.column_stack([gx.ravel(), gy.ravel()])

    def square_box(self, c) -> np.ndarray:
        h = self.omega / 2
        return np.array([[c[0] - h, c[1] - h], [c[0] + h, c[1] - h], [c[0] + h, c[1] + h], [c[0] - h, c[1] + h]])


def cell_frame(index: int, cell, delta: float, std: StdFamily, n_min: int, margin: float = 0.1,
               n_max: int = 64) -> CellFrame:
    abc = cell_triangle(cell, delta, margin)
    m = std.m
    A, B, C = abc.M, abc.N, abc.apex
    gen = np.array([C - (A - C) / m, C - (B - C) / m, C])
    lin, shift = affine_from_triangles(STD, gen)
    theta = std.theta @ lin.T + shift
    ctr, rad = incircle(theta)
    shift = shift + C - ctr
    # the disc of radius rad about a square center must contain the square: omega/sqrt2 <= rad
    n = max(n_min, int(math.ceil(delta / (math.sqrt(2) * rad) * (1 + 1e-9))))
    if n > n_max:
        raise ConstructionError(f"cell {index}: inradius {rad:.3g} needs n={n} > {n_max}", witness=C)
    return CellFrame(index, C, abc, n, delta, lin, shift, rad)


@dataclass(eq=False)
class CompositeSurface:
    """u = min over the closures containing x of the elementary functions of a finite family."""

    domain: ConvexDomain
    M: float
    epsilon: float
    pairs: PairArrays
    p: np.ndarray
    m: int
    n: int
    delta: float
    index: TriangleIndex
    frames: list = field(repr=False, default_factory=list)
    flat_fill: bool = False
    metrics: dict = field(default_factory=dict)
    build_info: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.pairs)

    @property
    def focal_points(self) -> np.ndarray:
        return self.pairs.O

    @property
    def valley_polygons(self) -> np.ndarray:
        return self.pairs.triangles()

    def closures(self) -> np.ndarray:
        return self.pairs.closures()

    def pieces(self) -> np.ndarray:
        """Closures of all pieces (K,3,2), in pair order."""
        return self.pairs.closures()

    @property
    def closure_planes(self):
        if getattr(self, "_planes_cache", None) is None:
            self._planes_cache = _planes(self.pairs.closures()) if len(self.pairs) else (np.zeros((0, 3, 2)),
                                                                                          np.zeros((0, 3)))
        return self._planes_cache

    def candidates(self, pts, tol=None):
        """(point, pair) index arrays with the point in the closed closure (prefilter slack ``tol``)."""
        if tol is None:
            tol = 1e-9 * max(1.0, self.domain.diameter)
        pi, ci = self.index.candidates(pts)
        n, c = self.closure_planes
        ok = (np.einsum("kej,kj->ke", n[ci], pts[pi]) >= c[ci] - tol).all(1)
        return pi[ok], ci[ok]

    def eval_many(self, pts, chunk: int = 20000):
        """Vectorized evaluation: (u, grad, region, winner); winner is -1 where no closure covers x."""
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        K = len(pts)
        u = np.full(K, np.inf)
        grad = np.zeros((K, 2))
        region = np.full(K, OUTSIDE, dtype=np.int8)
        win = np.full(K, -1, dtype=np.int64)
        P = self.pairs
        for lo in range(0, K, chunk):
            q = pts[lo:lo + chunk]
            pi, ci = self.candidates(q)
            if len(pi):
                uu, gg, rr = eval_pairs_at(q[pi], P.O[ci], P.A[ci], P.B[ci], P.M[ci], P.N[ci], self.p[ci], None)
                ok = rr != OUTSIDE
                pi, ci, uu, gg, rr = pi[ok], ci[ok], uu[ok], gg[ok], rr[ok]
                # min with ties (within TIE*M) broken by the lowest pair id
                ukey = np.round(uu / (TIE * self.M))
                order = np.lexsort((ci, ukey, pi))
                pi, ci, uu, gg, rr = pi[order], ci[order], uu[order], gg[order], rr[order]
                first = np.ones(len(pi), dtype=bool)
                first[1:] = pi[1:] != pi[:-1]
                tgt = lo + pi[first]
                u[tgt] = uu[first]
                grad[tgt] = gg[first]
                region[tgt] = rr[first]
                win[tgt] = ci[first]
        miss = win < 0
        if miss.any():
            u[miss] = 0.0 if self.flat_fill else np.nan
            region[miss] = FLAT if self.flat_fill else OUTSIDE
        return u, grad, region, win

    def evaluate(self, x) -> SurfaceSample:
        return evaluate_surface(self, x)


def evaluate_surface(s: CompositeSurface, x) -> SurfaceSample:
    """u at one point; raises CoverageError when no closure contains x and there is no flat fill."""
    x = np.asarray(x, dtype=float)
    u, g, r, w = s.eval_many(x[None])
    if w[0] < 0 and not s.flat_fill:
        raise CoverageError(f"no elementary set covers {x.tolist()}")
    return SurfaceSample(x, float(u[0]), g[0], int(r[0]), int(w[0]))


class _Selection:
    """Growing set of chosen closures for coverage tests.

    Raster (cell key, closure id) entries live in a few sorted runs of geometrically growing
    size, so both inserting a batch and querying a batch of points are a handful of array ops.
    """

    def __init__(self, lo, cell, shape):
        self.lo, self.cell, self.shape = lo, cell, shape
        self.runs: list[tuple[np.ndarray, np.ndarray]] = []
        self.n = np.zeros((1024, 3, 2))
        self.c = np.zeros((1024, 3))
        self.count = 0

    def add(self, clos: np.ndarray):
        k = len(clos)
        while self.count + k > len(self.n):
            self.n = np.concatenate([self.n, np.zeros_like(self.n)])
            self.c = np.concatenate([self.c, np.zeros_like(self.c)])
        ids = np.arange(self.count, self.count + k)
        self.n[ids], self.c[ids] = _planes(clos)
        self.count += k
        tri, key = raster_triangles(clos, self.lo, self.cell, self.shape)
        o = np.argsort(key, kind="stable")
        self.runs.append((key[o], ids[tri[o]]))
        while len(self.runs) > 1 and len(self.runs[-2][0]) <= 2 * len(self.runs[-1][0]):
            k2, i2 = self.runs.pop()
            k1, i1 = self.runs.pop()
            kk = np.concatenate([k1, k2])
            o = np.argsort(kk, kind="stable")
            self.runs.append((kk[o], np.concatenate([i1, i2])[o]))

    def covered(self, pts, tol) -> np.ndarray:
        out = np.zeros(len(pts), dtype=bool)
        if len(pts) == 0 or self.count == 0:
            return out
        g = np.floor((pts - self.lo) / self.cell).astype(np.int64)
        key = g[:, 0] * self.shape[1] + g[:, 1]
        for keys, items in self.runs:
            s = np.searchsorted(keys, key, "left")
            cnt = np.searchsorted(keys, key, "right") - s
            if cnt.sum() == 0:
                continue
            pidx = np.repeat(np.arange(len(pts)), cnt)
            off = np.arange(cnt.sum()) - np.repeat(np.cumsum(cnt) - cnt, cnt)
            ids = items[np.repeat(s, cnt) + off]
            hit = (np.einsum("kej,kj->ke", self.n[ids], pts[pidx]) >= self.c[ids] - tol).all(1)
            out[pidx[hit]] = True
        return out


def _world_pairs(std: StdFamily, idx, lin, shift) -> PairArrays:
    return std.pairs.take(idx).affine(lin, shift)


def _square_samples(c, omega, k):
    t = (np.arange(k) + 0.5) / k - 0.5
    gx, gy = np.meshgrid(t, t, indexing="ij")
    inner = np.column_stack([gx.ravel(), gy.ravel()]) * omega
    e = np.linspace(-0.5, 0.5, k + 1) * omega
    h = omega / 2
    edge = np.concatenate([np.column_stack([e, np.full_like(e, -h)]), np.column_stack([e, np.full_like(e, h)]),
                           np.column_stack([np.full_like(e, -h), e]), np.column_stack([np.full_like(e, h), e])])
    return c + np.concatenate([inner, edge])


def build_composite_surface(domain: ConvexDomain, M: float, epsilon: float, m: int = 4, n: int = 2,
                            max_pairs: int = 2_000_000, *, samples: int = 4, margin: float = 0.1,
                            focus_filter=None, flat_fill: bool = True, delta: float | None = None,
                            verify: bool = True, n_verify: int = 100_000, seed: int = 0,
                            index_cell: float | None = None, log=None) -> CompositeSurface:
    """Assemble the composite surface of the lattice construction.

    Pairs are chosen per small square by a greedy cover of ``samples`` x ``samples`` interior
    points plus edge points (see module docstring). Points that no chosen closure contains get
    u = 0 when ``flat_fill`` (this keeps the single impact condition); otherwise a sampled
    uncovered point raises ConstructionError. ``focus_filter`` optionally restricts admissible
    foci (array of points -> mask).
    """
    if epsilon <= 0 or M <= 0:
        raise DomainError("epsilon and M must be positive")
    t0 = time.perf_counter()
    plan = lattice_cover(domain, epsilon, delta)
    delta = plan.delta
    need = predicted_pairs(m)
    if need > max_pairs:
        raise ResourceError(f"family of the 2nd order with m={m} needs {need} pairs > budget {max_pairs}",
                            predicted=need)
    std = standard_family(m, max_pairs)
    frames = [cell_frame(i, c, delta, std, n, margin) for i, c in enumerate(plan.cells)]
    x0, y0, x1, y1 = domain.bbox
    reach = 2 * delta + domain.diameter
    lo = np.array([x0 - reach, y0 - reach])
    ccell = delta / 4
    shape = (int(math.ceil((x1 - x0 + 2 * reach) / ccell)) + 1, int(math.ceil((y1 - y0 + 2 * reach) / ccell)) + 1)
    sel = _Selection(lo, ccell, shape)
    tol = 1e-12 * max(1.0, domain.diameter)
    chosen: list[PairArrays] = []
    n_chosen = 0
    # interior first: long valleys of interior pairs then pre-cover outer squares
    order = np.argsort(-domain.distance_many(plan.q_centers), kind="stable")
    stats = {"squares": 0, "skipped": 0, "uncovered_squares": 0}

    for step, ci in enumerate(order):
        fr = frames[ci]
        centers = [c for c in fr.square_centers() if _squares_meet_domain(domain, fr.square_box(c))]
        if not centers:
            continue
        centers = np.array(centers)
        pattern = _square_samples(np.zeros(2), fr.omega, samples)
        # every square of a cell sees the same translate, so the incidence is computed once
        q = (pattern + fr.center - fr.shift) @ np.linalg.inv(fr.lin).T
        pi, ki, mi = _incidence(std, q, tol * 1e3)
        cand, inv = np.unique(ki, return_inverse=True)
        base = _world_pairs(std, cand, fr.lin, fr.shift)
        Q, K = len(pattern), len(cand)
        inc = np.zeros((Q, K), dtype=bool)
        inm = np.zeros((Q, K), dtype=bool)
        inc[pi, inv] = True
        inm[pi[mi], inv[mi]] = True
        pts_all = (centers[:, None, :] + pattern[None]).reshape(-1, 2)
        inside = domain.contains_many(pts_all, closed=True).reshape(len(centers), Q)
        done = sel.covered(pts_all, tol).reshape(len(centers), Q)
        # d0 >= p and the valley areas are translation invariant; the focus test is not
        ok_base = base.d0 >= focal_parameters(base.d, M) * (1 - 1e-12)
        cost = base.valley_areas
        foci = (centers[:, None, :] - fr.center + base.O[None]).reshape(-1, 2)
        ok_all = ~domain.contains_many(foci, closed=True)
        if focus_filter is not None:
            ok_all &= focus_filter(foci)
        ok_all = ok_all.reshape(len(centers), K) & ok_base
        local_n, local_c = np.zeros((0, 3, 2)), np.zeros(0)
        picked_cell = []
        for si, c in enumerate(centers):
            stats["squares"] += 1
            todo = inside[si] & ~done[si]
            if len(local_n) and todo.any():
                # pairs picked for earlier squares of this cell
                p = c + pattern[todo]
                hit = (np.einsum("kej,pj->pke", local_n, p) >= local_c[None] - tol).all(2).any(1)
                todo[np.flatnonzero(todo)[hit]] = False
            if not todo.any():
                stats["skipped"] += 1
                continue
            picked, todo = _greedy(inc, inm, ok_all[si], cost, todo)
            if picked.size:
                if n_chosen + len(picked) > max_pairs:
                    raise ResourceError(f"composite needs more than {max_pairs} pairs", predicted=n_chosen + len(picked))
                Pk = base.take(picked).translated(c - fr.center)
                chosen.append(Pk)
                n_chosen += len(Pk)
                picked_cell.append(Pk.closures())
                ln, lc = _planes(picked_cell[-1])
                local_n, local_c = np.concatenate([local_n, ln]), np.concatenate([local_c.reshape(-1, 3), lc])
            if todo.any():
                stats["uncovered_squares"] += 1
                if not flat_fill:
                    raise ConstructionError("property (A): sample point not covered by any admissible pair",
                                            witness=(c + pattern)[todo][0])
        if picked_cell:
            sel.add(np.concatenate(picked_cell))
        if log is not None and (step + 1) % 500 == 0:
            log(f"cells {step + 1}/{len(order)} pairs {n_chosen} {time.perf_counter() - t0:.1f}s")
    t_sel = time.perf_counter() - t0
    pairs = PairArrays.concat(chosen)
    p = focal_parameters(pairs.d, M)
    if index_cell is None:
        index_cell = max(delta / 2, 1e-6)
    bounds = (lo[0], lo[1], lo[0] + (shape[0] - 1) * ccell, lo[1] + (shape[1] - 1) * ccell)
    index = TriangleIndex(pairs.closures(), index_cell, bounds=bounds)
    info = dict(stats, cells=len(plan.cells), delta=delta, n_max=max(f.n for f in frames),
                n_min=min(f.n for f in frames), select_seconds=t_sel, seconds=time.perf_counter() - t0)
    s = CompositeSurface(domain, float(M), float(epsilon), pairs, p, m, n, delta, index, frames, flat_fill,
                         build_info=info)
    if verify:
        s.metrics = verify_composite(s, n_verify, seed)
    return s


def composite_from_pairs(domain: ConvexDomain, M: float, pairs: PairArrays, *, flat_fill: bool = True,
                         index_cell: float | None = None) -> CompositeSurface:
    """Composite surface of an explicit pair list (u = min over closures), e.g. a single pair."""
    if len(pairs) == 0:
        raise ConstructionError("no pairs")
    p = focal_parameters(pairs.d, M)
    clos = pairs.closures()
    if index_cell is None:
        ext = clos.max(1) - clos.min(1)
        index_cell = max(float(np.median(ext.max(1))) / 2, 1e-6)
    lo = np.minimum(clos.reshape(-1, 2).min(0), np.asarray(domain.bbox[:2]))
    hi = np.maximum(clos.reshape(-1, 2).max(0), np.asarray(domain.bbox[2:]))
    index = TriangleIndex(clos, index_cell, bounds=(*lo, *hi))
    return CompositeSurface(domain, float(M), float("nan"), pairs, p, 0, 0, float("nan"), index, [], flat_fill)


def _squares_meet_domain(domain: ConvexDomain, box) -> bool:
    c = box.mean(0)
    half = (box[:, 0].max() - box[:, 0].min()) / 2
    if domain.distance(c) >= half * math.sqrt(2):
        return True
    return bool(domain.distance(c) > -half * math.sqrt(2)) and bool(
        shapely.intersects(domain.shape, Polygon(box)))


def _greedy(inc, inm, ok, cost, todo):
    """Greedy cover of the ``todo`` sample points; mirror coverage counts double, small valleys win ties.

    Returns (picked candidate columns, remaining todo mask).
    """
    inc = inc[:, ok]
    inm = inm[:, ok]
    cols = np.flatnonzero(ok)
    cost = cost[ok]
    picked = []
    todo = todo.copy()
    while todo.any() and len(cols):
        gain = 2 * inm[todo].sum(0) + (inc[todo] & ~inm[todo]).sum(0)
        g = gain.max()
        if g <= 0:
            break
        best = np.flatnonzero(gain == g)
        j = int(best[np.argmin(cost[best])])
        picked.append(cols[j])
        todo &= ~inc[:, j]
    return np.array(picked, dtype=np.int64), todo


def _bounds_of(clos, domain, delta):
    lo = np.minimum(clos.reshape(-1, 2).min(0), np.asarray(domain.bbox[:2])) - delta
    hi = np.maximum(clos.reshape(-1, 2).max(0), np.asarray(domain.bbox[2:])) + delta
    return (lo[0], lo[1], hi[0], hi[1])


def _gaps(target, clos, idx: TriangleIndex, cell_box, area_tol):
    """Part of ``target`` (inside ``cell_box``) not covered by any indexed closure, None if negligible."""
    x0, y0, x1, y1 = cell_box.bounds
    corners = np.array([[x0, y0], [x1, y0], [x1, y1], [x0, y1]])
    tri = np.array([corners[[0, 1, 2]], corners[[0, 2, 3]]])
    _, key = raster_triangles(tri, idx.lo, idx.cell, idx.shape)
    ids = idx.items_in_keys(key)
    if len(ids) == 0:
        return target
    polys = shapely.clip_by_rect(shapely.polygons(clos[ids]), x0, y0, x1, y1)
    g = target.difference(shapely.union_all(polys))
    if g.is_empty or g.area <= area_tol:
        return None
    return g


def verify_composite(s: CompositeSurface, n_samples: int = 100_000, seed: int = 0) -> dict:
    """Sampled checks of properties (A)-(E); raises ConstructionError on (A) or the focal side of (D)."""
    rng = np.random.default_rng(seed)
    D = s.domain
    pts = D.sample_uniform(n_samples, rng)
    u, g, r, w = s.eval_many(pts)
    out = {}
    miss = w < 0
    out["A_uncovered_fraction"] = float(miss.mean())
    if miss.any() and not s.flat_fill:
        raise ConstructionError("property (A) fails at a sampled point", witness=pts[miss][0])
    fd = D.distance_many(s.pairs.O) if len(s.pairs) else np.zeros(0)
    if (fd > 0).any():
        raise ConstructionError("property (D): a focus lies inside the domain", witness=s.pairs.O[fd > 0][0])
    if len(s.pairs):
        bad = s.pairs.d0 < s.p * (1 - 1e-12)
        if bad.any():
            raise ConstructionError("nonnegativity: d0 < p for a pair", witness=s.pairs.O[bad][0])
    if np.nanmin(u) < -1e-12 * s.M or np.nanmax(u) > s.M * (1 + 1e-12):
        raise ConstructionError("0 <= u <= M fails", witness=pts[np.nanargmax(np.abs(u - s.M / 2))])
    vfrac = float(np.isin(r, (VALLEY, EDGE, FLAT)).mean())
    out["V_fraction_mc"] = vfrac
    out["V_area_mc"] = vfrac * D.area
    out["B_valley_lt_eps"] = vfrac * D.area < s.epsilon
    kap = s.pairs.kappa if len(s.pairs) else np.zeros(1)
    out["kappa_max"] = float(kap.max())
    out["C_kappa_lt_eps"] = float(kap.max()) < s.epsilon
    out["focus_depth_max"] = float(-fd.min()) if len(fd) else 0.0
    out["focus_depth_min"] = float(-fd.max()) if len(fd) else 0.0
    out["D_within_eps"] = bool(len(fd) == 0 or (-fd).max() < s.epsilon)
    mir = r == MIRROR
    if mir.any():
        x = pts[mir]
        O = s.pairs.O[w[mir]]
        margin = D.distance_many(x) + s.epsilon - np.linalg.norm(x - O, axis=1)
        out["E_worst_margin"] = float(margin.min())
        out["E_fraction_ok"] = float((margin > 0).mean())
        # reflected xy-line passes through the winning focus
        gx = g[mir]
        out["focal_line_residual"] = float(np.abs(gx[:, 0] * (x - O)[:, 1] - gx[:, 1] * (x - O)[:, 0]).max()
                                           / max(1.0, np.abs(gx).max()))
    else:
        out["E_worst_margin"] = float("nan")
        out["E_fraction_ok"] = float("nan")
        out["focal_line_residual"] = 0.0
    out["pairs"] = len(s.pairs)
    return out


def surface_metrics(s: CompositeSurface, n_samples: int = 100_000, seed: int = 0, exact_valley: bool = True) -> dict:
    """Valley area (exact polygon union clipped to the domain), property-E margins, focal stats,
    and for the unit disc the fraction of mirror samples with near-optimal gradient."""
    out = dict(verify_composite(s, n_samples, seed))
    if exact_valley:
        out["valley_area"] = valley_area_exact(s)
        out["valley_area_sum"] = float(s.pairs.valley_areas.sum())
    D = s.domain
    if D.kind == "disc" and abs(D.radius - 1) < 1e-12 and np.allclose(D.center, 0):
        rng = np.random.default_rng(seed + 1)
        pts = D.sample_uniform(n_samples, rng)
        u, g, r, w = s.eval_many(pts)
        mir = (r == MIRROR)
        x = pts[mir]
        rr = np.linalg.norm(x, axis=1)
        ok = (rr > 1e-9) & (rr < 1 - 1e-9)
        x, gm, rr = x[ok], g[mir][ok], rr[ok]
        a = s.M / (1 - rr)
        target = -(a + np.sqrt(1 + a * a))[:, None] * x / rr[:, None]
        rel = np.linalg.norm(gm - target, axis=1) / np.linalg.norm(target, axis=1)
        out["gradient_agreement"] = float((rel <= 0.1).sum() / max(len(pts), 1))
    return out


def valley_area_exact(s: CompositeSurface) -> float:
    """Area of (union of valley triangles, plus uncovered flat parts) inside the domain, cell by cell.

    Exact up to floating point, but slow: thin overlapping valleys make every cell union costly
    (minutes for some 10^4 pairs). Use the sampled fraction of verify_composite for large scenes.
    """
    D = s.domain
    tri = s.pairs.triangles()
    if len(tri) == 0:
        return float(D.area) if s.flat_fill else 0.0
    h = s.delta
    x0, y0, x1, y1 = D.bbox
    idx = TriangleIndex(tri, h, bounds=_bounds_of(tri, D, h))
    clos = s.pairs.closures()
    cidx = TriangleIndex(clos, h, bounds=_bounds_of(clos, D, h)) if s.flat_fill else None
    total = 0.0
    nx, ny = int(math.ceil((x1 - x0) / h)), int(math.ceil((y1 - y0) / h))
    for i in range(nx):
        for j in range(ny):
            bx = shp_box(x0 + i * h, y0 + j * h, x0 + (i + 1) * h, y0 + (j + 1) * h)
            tgt = bx.intersection(D.shape)
            if tgt.is_empty:
                continue
            a = 0.0
            parts = []
            for T, ix in ((tri, idx),):
                cb = bx.bounds
                corners = np.array([[cb[0], cb[1]], [cb[2], cb[1]], [cb[2], cb[3]], [cb[0], cb[3]]])
                _, key = raster_triangles(np.array([corners[[0, 1, 2]], corners[[0, 2, 3]]]), ix.lo, ix.cell, ix.shape)
                ids = ix.items_in_keys(key)
                if len(ids):
                    parts.append(shapely.union_all(shapely.clip_by_rect(shapely.polygons(T[ids]), *cb)))
            if cidx is not None:
                g = _gaps(tgt, clos, cidx, bx, 0.0)
                if g is not None:
                    parts.append(g)
            if parts:
                a = shapely.union_all(parts).intersection(tgt).area
            total += a
    return float(total)
