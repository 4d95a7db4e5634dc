"""Besicovitch-style doubling, families of the 1st and 2nd order, and their scaling to a circle.

Everything is built once in a standard frame (generating triangle M=(-1/2,0), N=(1/2,0),
O=(0,1)) and carried to the caller's triangle by an affine map. Families of the 2nd order
are stored as a list of affine maps applied to one (1,m)-set and materialized on demand.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import shapely
from shapely.geometry import Polygon
from shapely.ops import unary_union

from .elementary import PairArrays
from .errors import ConstructionError, DomainError, ResourceError
from .geometry import convex_contains, cross2, incircle, points_in_triangles, GridIndex

M_MAX = 16
STD = np.array([[-0.5, 0.0], [0.5, 0.0], [0.0, 1.0]])  # M, N, O


@dataclass(frozen=True, eq=False)
class Tri:
    """Triangle with base MN and apex O."""

    M: np.ndarray
    N: np.ndarray
    apex: np.ndarray

    def __post_init__(self):
        for k in ("M", "N", "apex"):
            object.__setattr__(self, k, np.asarray(getattr(self, k), dtype=float))
        if not self.height > 1e-14 * max(self.base_length, 1e-300):
            raise ConstructionError("degenerate triangle: apex on the base line")

    @property
    def base_length(self) -> float:
        return float(np.linalg.norm(self.N - self.M))

    @property
    def height(self) -> float:
        return abs(float(cross2(self.N - self.M, self.apex - self.M))) / np.linalg.norm(self.N - self.M)

    @property
    def area(self) -> float:
        return 0.5 * self.base_length * self.height

    def vertices(self) -> np.ndarray:
        return np.array([self.M, self.N, self.apex])

    def homothety(self, center, ratio) -> "Tri":
        c = np.asarray(center, dtype=float)
        return Tri(c + ratio * (self.M - c), c + ratio * (self.N - c), c + ratio * (self.apex - c))

    def polygon(self) -> Polygon:
        return Polygon(self.vertices())


def affine_from_triangles(src: np.ndarray, dst: np.ndarray):
    """(lin, shift) with lin @ src[i] + shift = dst[i] for three non-collinear points."""
    S = np.column_stack([src[1] - src[0], src[2] - src[0]])
    D = np.column_stack([dst[1] - dst[0], dst[2] - dst[0]])
    lin = D @ np.linalg.inv(S)
    return lin, dst[0] - lin @ src[0]


def double_triangle(t: Tri, omega: float) -> tuple[Tri, Tri]:
    """Replace MON by MM'D and NN'D, M' = O + omega (O - M), N' = O + omega (O - N)."""
    if not 0 < omega <= 1:
        raise DomainError(f"omega must lie in (0, 1], got {omega}")
    O = t.apex
    Mp = O + omega * (O - t.M)
    Np = O + omega * (O - t.N)
    D = 0.5 * (t.M + t.N)
    return Tri(t.M, D, Mp), Tri(D, t.N, Np)


def _double_arrays(M, N, O, omega):
    D = 0.5 * (M + N)
    Mp = O + omega * (O - M)
    Np = O + omega * (O - N)
    # interleave so that the list stays ordered along the base
    M2 = np.empty((2 * len(M), 2)); N2 = np.empty_like(M2); O2 = np.empty_like(M2)
    M2[0::2], N2[0::2], O2[0::2] = M, D, Mp
    M2[1::2], N2[1::2], O2[1::2] = D, N, Np
    return M2, N2, O2


def _union_area(tris: np.ndarray) -> float:
    return float(unary_union(shapely.polygons(tris)).area)


@dataclass
class DoublingResult:
    triangles: list
    S: list

    @property
    def increments(self):
        return list(np.diff(self.S))


def run_doubling(t: Tri, m: int, m_max: int = M_MAX, areas: bool = True) -> DoublingResult:
    """Apply omega_k = 1/k doubling for k = 1..m; S[k] is the exact union area after step k."""
    if m < 0:
        raise DomainError("m must be >= 0")
    if m > m_max:
        raise ResourceError(f"m={m} exceeds m_max={m_max}", predicted=2 ** m)
    M, N, O = t.M[None], t.N[None], t.apex[None]
    S = [t.area]
    for k in range(1, m + 1):
        M, N, O = _double_arrays(M, N, O, 1.0 / k)
        if areas:
            S.append(_union_area(np.stack([M, N, O], axis=1)))
    tris = [Tri(a, b, c) for a, b, c in zip(M, N, O)]
    return DoublingResult(tris, S)


@dataclass(frozen=True)
class AssociatedAngle:
    vertex: np.ndarray
    left_dir: np.ndarray
    right_dir: np.ndarray


@dataclass(eq=False)
class FirstOrderFamily:
    generating: Tri
    m: int
    pairs: PairArrays
    angles: list
    convex_hull_theta: Tri
    focal_segment: tuple

    @property
    def d(self) -> float:
        return self.generating.base_length

    @property
    def kappa_bound(self) -> float:
        m, d = self.m, self.d / self.generating.height
        return (math.sqrt(m) + 2.0 ** -m * d) / (m + 1 + math.sqrt(m))

    @property
    def area_ratio_bound(self) -> float:
        return (math.log(self.m) + 1.5) / math.sqrt(self.m) if self.m > 0 else math.inf

    def valley_union_area(self) -> float:
        return _union_area(self.pairs.triangles())

    def trapezoid_union_area(self) -> float:
        return _union_area(self.pairs.trapezoids())

    def check(self, tol: float = 1e-9) -> dict:
        """Evaluate every invariant; returns name -> (ok, detail)."""
        g, m = self.generating, self.m
        P = self.pairs
        out = {}
        out["count"] = (len(P) == 2 ** m, len(P))
        hb = np.abs(cross2(P.N - P.M, P.O - P.M)) / np.linalg.norm(P.N - P.M, axis=1)
        out["heights"] = (np.allclose(hb, (m + 1) * g.height, rtol=tol, atol=0), float(hb.max()))
        bl = np.linalg.norm(P.N - P.M, axis=1)
        out["bases"] = (np.allclose(bl, 2.0 ** -m * g.base_length, rtol=tol, atol=0), float(bl.max()))
        worst = _max_pairwise_overlap(P.trapezoids())
        scale = (g.base_length + g.height) ** 2
        out["trapezoids_disjoint"] = (worst <= 1e-12 * scale, worst)
        a, b = self.focal_segment
        dist = np.abs(cross2(b - a, P.O - a)) / np.linalg.norm(b - a)
        out["foci_on_segment"] = (bool(dist.max() <= tol * math.sqrt(scale)), float(dist.max()))
        k = P.kappa
        out["kappa_for1"] = (bool(k.max() <= self.kappa_bound + tol), float(k.max()))
        ratio = self.valley_union_area() / self.trapezoid_union_area()
        out["area_for2"] = (bool(ratio <= self.area_ratio_bound), ratio)
        return out


def _max_pairwise_overlap(polys: np.ndarray) -> float:
    geoms = shapely.polygons(polys)
    tree = shapely.STRtree(geoms)
    i, j = tree.query(geoms, predicate="intersects")
    keep = i < j
    if not keep.any():
        return 0.0
    return float(shapely.area(shapely.intersection(geoms[i[keep]], geoms[j[keep]])).max())


def _standard_first_order(m: int):
    """Doubling of the standard triangle plus trapezoids of depth sqrt(m)."""
    M, N, O = STD[0][None], STD[1][None], STD[2][None]
    for k in range(1, m + 1):
        M, N, O = _double_arrays(M, N, O, 1.0 / k)
    grow = (m + 1 + math.sqrt(m)) / (m + 1)
    A = O + (M - O) * grow
    B = O + (N - O) * grow
    return PairArrays(O, A, B, M, N)


def _standard_child_maps(P: PairArrays, margin: float):
    """Affine maps taking the standard generating triangle into each associated angle."""
    lins, shifts, verts = [], [], []
    for j in range(len(P) - 1):
        v = P.N[j]
        dl = P.N[j] - P.O[j]
        dr = P.M[j + 1] - P.O[j + 1]
        ml = v + dl / -dl[1]
        mr = v + dr / -dr[1]
        if ml[0] > mr[0]:
            raise ConstructionError(f"associated angle {j} does not open", witness=v)
        mid = 0.5 * (ml + mr)
        ml, mr = mid + margin * (ml - mid), mid + margin * (mr - mid)
        lin, sh = affine_from_triangles(STD, np.array([ml, mr, v]))
        lins.append(lin); shifts.append(sh); verts.append((v, dl, dr))
    return np.array(lins), np.array(shifts), verts


def _to_frame(t: Tri):
    return affine_from_triangles(STD, t.vertices())


def build_first_order_family(t: Tri, m: int, m_max: int = M_MAX, check: bool = True) -> FirstOrderFamily:
    """The 2^m elementary pairs after m doubling steps, trapezoid depth sqrt(m) * height(t)."""
    if m < 1:
        raise DomainError("m must be >= 1")
    if m > m_max:
        raise ResourceError(f"m={m} exceeds m_max={m_max}", predicted=2 ** m)
    lin, sh = _to_frame(t)
    P = _standard_first_order(m).affine(lin, sh)
    angles = []
    for j in range(len(P) - 1):
        angles.append(AssociatedAngle(P.N[j].copy(), P.N[j] - P.O[j], P.M[j + 1] - P.O[j + 1]))
    theta = t.homothety(t.apex, math.sqrt(m) + 1)
    seg = (t.apex - m * (t.M - t.apex), t.apex - m * (t.N - t.apex))
    fam = FirstOrderFamily(t, m, P, angles, theta, seg)
    if check:
        res = fam.check()
        bad = [k for k, (ok, _) in res.items() if not ok]
        if bad:
            raise ConstructionError(f"first-order family invariant failed: {bad}", witness=res)
    return fam


def predicted_pairs(m: int, depth: int | None = None) -> int:
    depth = math.isqrt(m) + 1 if depth is None else depth
    return sum((2 ** m - 1) ** j for j in range(depth + 1)) * 2 ** m


@dataclass(eq=False)
class FamilyTree:
    """(2,m)-set: one (1,m)-set and its affine copies filling associated angles level by level."""

    root: FirstOrderFamily
    depth: int
    set_lin: np.ndarray      # (S,2,2) maps from the root family to each copy
    set_shift: np.ndarray    # (S,2)
    set_level: np.ndarray    # (S,)

    @property
    def m(self) -> int:
        return self.root.m

    @property
    def set_count(self) -> int:
        return len(self.set_lin)

    @property
    def total_pairs(self) -> int:
        return self.set_count * 2 ** self.m

    @property
    def theta(self) -> Tri:
        return self.root.convex_hull_theta

    @property
    def double_theta(self) -> Tri:
        return self.theta.homothety(self.root.generating.apex, 2.0)

    @cached_property
    def focal_hull(self) -> np.ndarray:
        """Vertices of [M'N'] + Theta with the origin at O (a convex polygon)."""
        O = self.root.generating.apex
        a, b = self.root.focal_segment
        th = self.theta.vertices() - O
        pts = np.concatenate([a + th, b + th])
        return np.asarray(shapely.MultiPoint(pts).convex_hull.exterior.coords)[:-1]

    def pairs(self, sets=None) -> PairArrays:
        """Materialize the pairs of the chosen copies (all by default), ordered by copy then pair."""
        idx = np.arange(self.set_count) if sets is None else np.asarray(sets)
        R = self.root.pairs
        L, S = self.set_lin[idx], self.set_shift[idx]

        def img(p):
            return (np.einsum("sij,kj->ski", L, p) + S[:, None, :]).reshape(-1, 2)

        return PairArrays(img(R.O), img(R.A), img(R.B), img(R.M), img(R.N))


def build_second_order_family(t: Tri, m: int, max_pairs: int = 2_000_000, depth: int | None = None,
                              angle_margin: float = 1.0, check: bool = False) -> FamilyTree:
    """Fill associated angles by copies of the (1,m)-set for floor(sqrt m)+1 rounds."""
    depth = math.isqrt(m) + 1 if depth is None else depth
    need = predicted_pairs(m, depth)
    if need > max_pairs:
        raise ResourceError(f"family of the 2nd order needs {need} pairs > budget {max_pairs}", predicted=need)
    if not 0 < angle_margin <= 1:
        raise DomainError("angle_margin must lie in (0, 1]")
    root = build_first_order_family(t, m, check=check)
    std = _standard_first_order(m)
    clin, cshift, _ = _standard_child_maps(std, angle_margin)
    # maps are composed in the standard frame and conjugated into the caller's frame at the end
    lins, shifts, levels = [np.eye(2)[None]], [np.zeros((1, 2))], [np.zeros(1, dtype=int)]
    cur_l, cur_s = lins[0], shifts[0]
    for lev in range(1, depth + 1):
        nl = np.einsum("aij,bjk->abik", cur_l, clin).reshape(-1, 2, 2)
        ns = (np.einsum("aij,bj->abi", cur_l, cshift) + cur_s[:, None, :]).reshape(-1, 2)
        lins.append(nl); shifts.append(ns); levels.append(np.full(len(nl), lev))
        cur_l, cur_s = nl, ns
    L = np.concatenate(lins); S = np.concatenate(shifts)
    G, g = _to_frame(t)
    Gi = np.linalg.inv(G)
    # copy map in caller frame: G (L (G^-1 (x - g)) + S) + g
    Lw = np.einsum("ij,sjk,kl->sil", G, L, Gi)
    Sw = np.einsum("ij,sj->si", G, S) + g - np.einsum("sij,j->si", Lw, g)
    return FamilyTree(root, depth, Lw, Sw, np.concatenate(levels))


@dataclass(eq=False)
class ScaledFamily:
    tree: FamilyTree
    target_center: np.ndarray
    omega: float
    triangle_ABC: Tri
    m: int
    c: float
    r: float
    r1: float
    r2: float

    @cached_property
    def pairs(self) -> PairArrays:
        return self.tree.pairs()

    @property
    def inradius(self) -> float:
        return incircle(self.tree.theta.vertices())[1]

    @property
    def kappa_bound(self) -> float:
        return self.tree.root.kappa_bound

    @property
    def valley_bound(self) -> float:
        """Transported bound on the union of elementary triangles."""
        m = self.m
        th = self.tree.root.generating
        return (math.log(m) + 1.5) / math.sqrt(m) * (2 * math.sqrt(m) + 2) ** 2 * th.area


def scale_family_to_circle(abc: Tri, omega: float, c: float | None = None, m: int | None = None,
                           max_pairs: int = 2_000_000, n_test: int = 10_000, seed: int = 0,
                           check: bool = True) -> ScaledFamily:
    """Family of the 2nd order whose elementary sets cover the disc of radius omega about C.

    ``abc`` is given with base AB and apex C. Either ``m`` or ``c`` selects the order through
    m = floor(c^2 / omega^2); when both are omitted c is set to 0.9 r1/r.
    """
    if omega <= 0:
        raise DomainError("omega must be positive")
    A, B, C = abc.M, abc.N, abc.apex
    r = 1.0 / abc.height
    if m is None:
        if c is None:
            c = 0.9 * _r1_coefficient(abc, 4) / r
        m = int(math.floor(c * c / (omega * omega)))
        if m < 1:
            raise ConstructionError(f"c={c} too small for omega={omega}: m < 1")
    elif c is None:
        c = omega * math.sqrt(m)
    # generating triangle homothetic to ABC with ratio -1/m about C, so that M'N' = AB
    gen = Tri(C - (A - C) / m, C - (B - C) / m, C)
    tree = build_second_order_family(gen, m, max_pairs=max_pairs)
    center, rad = incircle(tree.theta.vertices())
    shift = C - center
    moved = FamilyTree(_shift_root(tree.root, shift), tree.depth, tree.set_lin,
                       tree.set_shift + shift - np.einsum("sij,j->si", tree.set_lin, shift), tree.set_level)
    sq = math.sqrt(m)
    r1 = rad * m * r / sq
    far = np.linalg.norm(moved.double_theta.vertices() - C, axis=1).max()
    r2 = far * m * r / sq
    fam = ScaledFamily(moved, np.asarray(C, dtype=float), omega, abc, m, c, r, r1, r2)
    if check:
        rng = np.random.default_rng(seed)
        pts = _disc_samples(C, omega, n_test, rng)
        cov = covered_by_tree(fam.tree, pts)
        if not cov.all():
            raise ConstructionError(f"disc of radius {omega} not covered (c too large for this omega)",
                                    witness=pts[~cov][0])
    return fam


def _shift_root(root: FirstOrderFamily, v) -> FirstOrderFamily:
    def mv(t):
        return Tri(t.M + v, t.N + v, t.apex + v)

    angles = [AssociatedAngle(a.vertex + v, a.left_dir, a.right_dir) for a in root.angles]
    return FirstOrderFamily(mv(root.generating), root.m, root.pairs.translated(v), angles,
                            mv(root.convex_hull_theta),
                            (root.focal_segment[0] + v, root.focal_segment[1] + v))


def _r1_coefficient(abc: Tri, m: int) -> float:
    """Inradius of Theta over sqrt(m) for a height-1 generating triangle similar to ABC."""
    s = 1.0 / abc.height
    gen = Tri(abc.apex - s * (abc.M - abc.apex), abc.apex - s * (abc.N - abc.apex), abc.apex)
    theta = gen.homothety(gen.apex, math.sqrt(m) + 1)
    return incircle(theta.vertices())[1] / math.sqrt(m)


def _disc_samples(center, radius, n, rng):
    ang = rng.uniform(0, 2 * np.pi, n)
    rad = radius * np.sqrt(rng.uniform(0, 1, n))
    pts = np.asarray(center) + np.column_stack([rad * np.cos(ang), rad * np.sin(ang)])
    # include the boundary circle, where coverage is tightest
    k = max(n // 10, 1)
    pts[:k] = np.asarray(center) + radius * np.column_stack([np.cos(ang[:k]), np.sin(ang[:k])])
    return pts


def covered(P: PairArrays, pts, tol_rel: float = 1e-12, chunk: int = 512) -> np.ndarray:
    """Whether each point lies in the closure of some elementary set of ``P``."""
    pts = np.atleast_2d(np.asarray(pts, dtype=float))
    out = np.zeros(len(pts), dtype=bool)
    if len(P) == 0:
        return out
    scale = float(np.abs(P.O).max() + np.abs(P.A).max())
    tol = tol_rel * scale
    traps = P.trapezoids()
    # each closed trapezoid AMNB is the union of triangles AMN and ANB
    parts = [np.stack([traps[:, 0], traps[:, 1], traps[:, 2]], axis=1),
             np.stack([traps[:, 0], traps[:, 2], traps[:, 3]], axis=1),
             P.triangles()]
    for tris in parts:
        todo = np.flatnonzero(~out)
        if len(todo) == 0:
            break
        bb = np.concatenate([tris.min(1), tris.max(1)], axis=1)
        idx = GridIndex(bb)
        for lo in range(0, len(todo), chunk):
            sel = todo[lo:lo + chunk]
            pi, ci = idx.candidates(pts[sel])
            hit = points_in_triangles(pts[sel][pi], tris[ci], tol=tol)
            out[sel[pi[hit]]] = True
    return out


def covered_by_tree(tree: "FamilyTree", pts, tol_rel: float = 1e-12, budget: int = 2_000_000) -> np.ndarray:
    """Coverage test that pulls points back into the root (1,m)-set through every copy map."""
    pts = np.atleast_2d(np.asarray(pts, dtype=float))
    R = tree.root.pairs
    clos = R.closures()
    hull = np.asarray(shapely.MultiPoint(clos.reshape(-1, 2)).convex_hull.exterior.coords)[:-1]
    scale = float(np.abs(clos).max())
    tol = tol_rel * scale
    Linv = np.linalg.inv(tree.set_lin)
    out = np.zeros(len(pts), dtype=bool)
    chunk = max(1, budget // max(tree.set_count, 1))
    for lo in range(0, len(pts), chunk):
        p = pts[lo:lo + chunk]
        q = np.einsum("sij,psj->psi", Linv, p[:, None, :] - tree.set_shift[None])
        pi, si = np.nonzero(convex_contains(hull, q.reshape(-1, 2), tol).reshape(q.shape[:2]))
        qq = q[pi, si]
        hit = np.zeros(len(qq), dtype=bool)
        for k in range(len(R)):
            hit |= points_in_triangles(qq, np.broadcast_to(clos[k], (len(qq), 3, 2)), tol=tol)
        out[lo + pi[hit]] = True
    return out


def tree_valley_area_bound(tree: "FamilyTree") -> float:
    """Sum over copies of the exact valley-union area of each copy (>= the area of the full union)."""
    root_area = _union_area(tree.root.pairs.triangles())
    return float(root_area * np.abs(np.linalg.det(tree.set_lin)).sum())


def sample_triangle(t: Tri, n: int, rng) -> np.ndarray:
    u = rng.uniform(size=(n, 2))
    flip = u.sum(1) > 1
    u[flip] = 1 - u[flip]
    v = t.vertices()
    return v[2] + u[:, :1] * (v[0] - v[2]) + u[:, 1:] * (v[1] - v[2])


@dataclass
class FamilyReport:
    kind: str
    pair_count: int
    valley_area: float
    trapezoid_area: float
    kappa_max: float
    kappa_min: float
    focal_hull: np.ndarray | None
    checks: dict = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return all(v[0] for v in self.checks.values())


def family_report(family, n_samples: int = 10_000, seed: int = 0, exact_union: bool = False) -> FamilyReport:
    """Aggregate invariant checks; failures are recorded with a witness, never raised."""
    rng = np.random.default_rng(seed)
    if isinstance(family, FirstOrderFamily):
        P = family.pairs
        checks = {k: (bool(ok), det) for k, (ok, det) in family.check().items()}
        return FamilyReport("FirstOrder", len(P), family.valley_union_area(), family.trapezoid_union_area(),
                            float(P.kappa.max()), float(P.kappa.min()), None, checks)
    if isinstance(family, FamilyTree):
        P = family.pairs()
        checks = {}
        pts = sample_triangle(family.theta, n_samples, rng)
        cov = covered_by_tree(family, pts)
        checks["covers_theta"] = (bool(cov.all()), None if cov.all() else pts[~cov][0])
        checks.update(_hull_checks(P, family.focal_hull, family.double_theta))
        k = P.kappa
        checks["kappa_for1"] = (bool(k.max() <= family.root.kappa_bound + 1e-9), float(k.max()))
        va = _union_area(P.triangles()) if exact_union else tree_valley_area_bound(family)
        g = family.root.generating
        m = family.m
        bound = (math.log(m) + 1.5) / math.sqrt(m) * (2 * math.sqrt(m) + 2) ** 2 * g.area
        checks["valley_area_bound"] = (bool(va < bound), va / bound)
        return FamilyReport("SecondOrder", len(P), va, float(P.mirror_areas.sum()), float(k.max()),
                            float(k.min()), family.focal_hull, checks)
    if isinstance(family, ScaledFamily):
        P = family.pairs
        tree = family.tree
        pts = _disc_samples(family.target_center, family.omega, n_samples, rng)
        cov = covered_by_tree(tree, pts)
        checks = {"a_covers_disc": (bool(cov.all()), None if cov.all() else pts[~cov][0])}
        va = _union_area(P.triangles()) if exact_union else tree_valley_area_bound(tree)
        checks["b_valley_area"] = (bool(va < family.valley_bound), va / family.omega ** 2)
        k = P.kappa
        checks["c_kappa"] = (bool(k.max() <= family.kappa_bound + 1e-9), float(k.max()))
        hull = _hull_checks(P, tree.focal_hull, tree.double_theta)
        checks["d_focal_set"] = hull["foci_in_hull"]
        checks["e_trapezoids"] = hull["trapezoids_in_2theta"]
        return FamilyReport("Scaled", len(P), va, float(P.mirror_areas.sum()), float(k.max()), float(k.min()),
                            tree.focal_hull, checks)
    raise TypeError(f"unsupported family type {type(family).__name__}")


def _hull_checks(P: PairArrays, hull, two_theta: Tri) -> dict:
    scale = float(np.abs(hull).max()) + 1.0
    tol = 1e-9 * scale
    fin = convex_contains(hull, P.O, tol)
    trap_pts = np.concatenate([P.A, P.B, P.M, P.N])
    tin = convex_contains(two_theta.vertices(), trap_pts, tol)
    return {"foci_in_hull": (bool(fin.all()), None if fin.all() else P.O[~fin][0]),
            "trapezoids_in_2theta": (bool(tin.all()), None if tin.all() else trap_pts[~tin][0])}
