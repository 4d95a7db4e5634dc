"""A body with the double impact condition and small resistance.

B = B1 u B2 u B3 u B4 over a convex domain Omega with height M:

* B1: the subgraph of M/2 + u over the inner parallel set Omega~ = {d > eps}, u a SIC
  composite with height budget M/2 whose foci lie in the band Omega \\ Omega~;
* B2: the slab Omega x [0, M/2] minus one thin tilted paraboloid hollow per focus O_i. The
  hollow has its focus at (O_i, M/2) and its axis along the ray l_i from there through
  (x_i, 0), x_i in a small exterior disc U_i; a particle sent to (O_i, M/2) by the graph
  enters the hollow, reflects at most once more and leaves parallel to a line through
  (O_i, M/2) and a point of U_i x {0};
* B3: the outer ring Omega_0 = {d < eps'} between z = M/2 and M (connects the parts);
* B4: the shield Omega_1 x [M - eps', M], Omega_1 = {d < eps - eps'}, which hides the hollow
  inlets from the vertical flow.

Only B3 above z = M/2 is kept: the hollows leave the slab through the side wall, so the
ring must not close them below M/2.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .assembly import CompositeSurface, build_composite_surface, composite_from_pairs
from .billiard import CAP, GraphPatch, HollowSet, PlanePatch, Scene, WallPatch, batch_trace
from .domain import ConvexDomain
from .elementary import MIRROR, PairArrays, focal_parameters
from .errors import ConstructionError, DicViolation, DomainError

PID_GRAPH, PID_SLAB, PID_SHIELD_TOP, PID_SHIELD_BOTTOM, PID_SHIELD_WALL, PID_RING_WALL = 1, 2, 4, 5, 6, 7
PID_HOLLOW = 1000


@dataclass(frozen=True)
class InnerParams:
    """Desk parameters of the inner SIC surface (its own lattice scale, independent of the body's eps)."""

    epsilon: float = 0.3
    m: int = 4
    n: int = 2
    samples: int = 4
    max_pairs: int = 2_000_000
    snap: float = 0.1          # focus lattice spacing as a fraction of the body's eps
    band: tuple = (0.15, 0.85)  # admissible focus depth d(O) / eps during selection


@dataclass(eq=False)
class DicBody:
    domain: ConvexDomain
    M: float
    epsilon: float
    eps_prime: float
    tilde_domain: ConvexDomain
    inner_surface: CompositeSurface
    foci: np.ndarray            # (K,2) distinct foci O_i
    focus_of_pair: np.ndarray   # pair -> focus row
    u_center: np.ndarray        # (K,2) centers of the exterior discs U_i
    u_radius: np.ndarray        # (K,)
    x_point: np.ndarray         # (K,2) x_i
    axis: np.ndarray            # (K,3) unit direction of l_i
    focal_length: np.ndarray    # (K,)
    hollows: HollowSet
    scene: Scene
    info: dict = field(default_factory=dict)

    @property
    def resistance_bound(self) -> float:
        """eps |dOmega| + eps + |Omega| (1 - (M/2) / sqrt(M^2/4 + eps^2)) / 2."""
        e, M, D = self.epsilon, self.M, self.domain
        return e * D.boundary_length + e + D.area * 0.5 * (1 - (M / 2) / math.sqrt(M * M / 4 + e * e))

    @property
    def v3_exit_bound(self) -> float:
        e, M = self.epsilon, self.M
        return -(M / 2) / math.sqrt(M * M / 4 + e * e)


def nearest_boundary_points(domain: ConvexDomain, pts) -> np.ndarray:
    """Closest point of the boundary for points inside the domain."""
    pts = np.asarray(pts, dtype=float).reshape(-1, 2)
    if domain.kind == "disc":
        c = np.asarray(domain.center)
        w = pts - c
        r = np.maximum(np.linalg.norm(w, axis=1, keepdims=True), 1e-300)
        return c + domain.radius * w / r
    v = domain.vertices
    w = np.roll(v, -1, axis=0)
    best = np.full(len(pts), np.inf)
    out = np.zeros_like(pts)
    for a, b in zip(v, w):
        e = b - a
        t = np.clip((pts - a) @ e / (e @ e), 0.0, 1.0)
        q = a + t[:, None] * e
        dd = np.linalg.norm(pts - q, axis=1)
        better = dd < best
        best = np.where(better, dd, best)
        out[better] = q[better]
    return out


def segment_distances(p0, p1, q0, q1) -> np.ndarray:
    """Row-wise minimal distance between 3D segments [p0,p1] and [q0,q1]."""
    d1, d2, r = p1 - p0, q1 - q0, p0 - q0
    a = np.einsum("ij,ij->i", d1, d1)
    e = np.einsum("ij,ij->i", d2, d2)
    f = np.einsum("ij,ij->i", d2, r)
    c = np.einsum("ij,ij->i", d1, r)
    b = np.einsum("ij,ij->i", d1, d2)
    den = a * e - b * b
    with np.errstate(divide="ignore", invalid="ignore"):
        s = np.where(den > 1e-300 * np.maximum(a * e, 1e-300), np.clip((b * f - c * e) / den, 0, 1), 0.0)
        t = (b * s + f) / e
        s = np.where(t < 0, np.clip(-c / a, 0, 1), np.where(t > 1, np.clip((b - c) / a, 0, 1), s))
    t = np.clip(t, 0, 1)
    diff = (p0 + s[:, None] * d1) - (q0 + t[:, None] * d2)
    return np.linalg.norm(diff, axis=1)


def _snap_foci(P: PairArrays, domain: ConvexDomain, eps: float, h: float, lo: float, hi: float):
    """Move each focus to the nearest node of a lattice of spacing h, keeping each pair's inner fraction.

    Returns the new pairs and a mask of pairs whose snapped focus stays in the band lo <= d <= hi.
    """
    O = np.round(P.O / h) * h
    lam = np.linalg.norm(P.M - P.O, axis=1) / np.linalg.norm(P.A - P.O, axis=1)
    Mp = O + lam[:, None] * (P.A - O)
    Np = O + lam[:, None] * (P.B - O)
    d = domain.distance_many(O)
    ok = (d >= lo) & (d <= hi)
    return PairArrays(O, P.A, P.B, Mp, Np), ok


def _cone_half_angles(F, c, r, k: int = 64):
    """Smallest angle between the axis F->c and the rays from F to the circle (c, r) at z = 0."""
    ph = 2 * np.pi * np.arange(k) / k
    circ = np.stack([np.cos(ph), np.sin(ph), np.zeros(k)], axis=1)
    ax = c - F
    axn = ax / np.linalg.norm(ax, axis=1, keepdims=True)
    rim = c[:, None, :] + r[:, None, None] * circ[None]
    w = rim - F[:, None, :]
    w /= np.linalg.norm(w, axis=2, keepdims=True)
    cos = np.einsum("kpj,kj->kp", w, axn)
    return np.arccos(np.clip(cos.max(axis=1), -1, 1)) * 0.9


def _hollow_conditions(F, axis, f, depth, alpha, eccentricity, eps, eps_p):
    """Per-hollow versions of conditions (ii) and (iii)."""
    with np.errstate(invalid="ignore"):
        theta = np.arccos(np.clip(1 - 2 * f / depth, -1, 1))
    cond2 = (2 * f < depth) & (theta < alpha)
    r_inlet = 2 * f / np.maximum(1 - eccentricity, 1e-12)
    cond3 = (depth - r_inlet > eps_p) & (depth + r_inlet < eps - eps_p)
    return cond2, cond3


def build_dic_body(domain: ConvexDomain, M: float, epsilon: float, inner: InnerParams | None = None,
                   k_foci_budget: int = 200_000, eps_prime: float | None = None, log=None) -> DicBody:
    """Build the four-part body; every construction condition is verified on the way."""
    inner = inner or InnerParams()
    if not (epsilon > 0 and M > 0):
        raise DomainError("epsilon and M must be positive")
    if 2 * epsilon > domain.inradius:
        raise DomainError("epsilon too large: the inner parallel set must keep a margin")
    tilde = domain.inner_parallel(epsilon)
    eps_p = epsilon / 20 if eps_prime is None else float(eps_prime)
    lo_b, hi_b = inner.band

    def focus_filter(x):
        d = domain.distance_many(x)
        return (d >= lo_b * epsilon) & (d <= hi_b * epsilon)

    s0 = build_composite_surface(tilde, M / 2, inner.epsilon, inner.m, inner.n, inner.max_pairs,
                                 samples=inner.samples, focus_filter=focus_filter, flat_fill=True,
                                 verify=False, log=log)
    h = inner.snap * epsilon
    P, ok = _snap_foci(s0.pairs, domain, epsilon, h, 2 * eps_p, epsilon - 2 * eps_p)
    ok &= ~tilde.contains_many(P.O, closed=True)
    ok &= P.d0 >= focal_parameters(P.d, M / 2) * (1 - 1e-12)
    P = P.take(np.flatnonzero(ok))
    dropped = int((~ok).sum())
    if len(P) == 0:
        raise ConstructionError("no pair keeps its focus in the band")
    surf = composite_from_pairs(tilde, M / 2, P, flat_fill=True, index_cell=s0.index.cell)
    foci, inv = np.unique(P.O, axis=0, return_inverse=True)
    inv = inv.reshape(-1)
    K = len(foci)
    if K > k_foci_budget:
        raise ConstructionError(f"{K} foci exceed the budget {k_foci_budget}")

    # exterior discs U_i and axis rays l_i; deeper foci aim at closer points so that the rays
    # of foci on a common normal never cross
    t = domain.distance_many(foci)
    b = nearest_boundary_points(domain, foci)
    nrm = (b - foci) / t[:, None]
    off = (epsilon - t) / 2
    rU = (epsilon - t) / 4
    uc = b + off[:, None] * nrm
    x = uc.copy()
    F = np.column_stack([foci, np.full(K, M / 2)])
    X0 = np.column_stack([x, np.zeros(K)])
    perturbed = 0
    seg_pairs = _segment_candidates(foci, x)
    dist = segment_distances(F[seg_pairs[:, 0]], X0[seg_pairs[:, 0]], F[seg_pairs[:, 1]], X0[seg_pairs[:, 1]])
    for _ in range(8):
        hit = dist <= 1e-12 * max(1.0, M)
        if not hit.any():
            break
        j = np.unique(seg_pairs[hit, 1])
        ang = 0.5 * np.arange(1, len(j) + 1)
        x[j] = uc[j] + 0.5 * rU[j, None] * np.column_stack([np.cos(ang), np.sin(ang)])
        X0[j, :2] = x[j]
        perturbed += len(j)
        dist = segment_distances(F[seg_pairs[:, 0]], X0[seg_pairs[:, 0]], F[seg_pairs[:, 1]], X0[seg_pairs[:, 1]])
    else:
        raise ConstructionError("rays l_i could not be separated")
    axis = X0 - F
    ell = np.linalg.norm(axis, axis=1)
    axis /= ell[:, None]
    ecc = np.linalg.norm(axis[:, :2], axis=1)
    alpha = _cone_half_angles(F, X0, rU)

    # focal lengths: halve until (i)-(iii) hold
    f = np.full(K, epsilon / 8)
    floor = 1e-6 * epsilon
    retries = 0
    while True:
        c2, c3 = _hollow_conditions(F, axis, f, t, alpha, ecc, epsilon, eps_p)
        rad = 2 * np.sqrt(f * (ell + f)) + 2 * f
        clash = dist <= rad[seg_pairs[:, 0]] + rad[seg_pairs[:, 1]]
        bad = ~(c2 & c3)
        bad[seg_pairs[clash].ravel()] = True
        if not bad.any():
            break
        f[bad] *= 0.5
        retries += 1
        if (f < floor).any():
            i = int(np.flatnonzero(f < floor)[0])
            which = "(ii)" if not c2[i] else "(iii)" if not c3[i] else "(i)"
            raise ConstructionError(f"condition {which} unsatisfiable for focus {foci[i].tolist()}", witness=foci[i])

    # shield guard: B4 outside Conv(Omega~ x [0,M] u Omega x [0,M/2]); halve eps' until it holds
    while not _shield_guard(domain, tilde, M, epsilon, eps_p):
        eps_p *= 0.5
        if eps_p < 1e-6 * epsilon:
            raise ConstructionError("no shield thickness keeps B4 out of reach")

    hollows = HollowSet(F, axis, f, -math.inf, M / 2, domain, PID_HOLLOW)
    scene = _dic_scene(domain, tilde, surf, hollows, M, epsilon, eps_p)
    info = {"pairs_selected": len(s0.pairs), "pairs_kept": len(P), "pairs_dropped": dropped,
            "foci": K, "perturbed_rays": perturbed, "halvings": retries,
            "focal_length_min": float(f.min()), "focal_length_max": float(f.max()),
            "min_axis_separation": float(dist.min()) if len(dist) else math.inf,
            "inner_build": s0.build_info, "connected": _connected(domain, tilde, M, epsilon, eps_p)}
    if not info["connected"]:
        raise ConstructionError("patch adjacency graph is not connected")
    return DicBody(domain, float(M), float(epsilon), eps_p, tilde, surf, foci, inv, uc, rU, x, axis, f,
                   hollows, scene, info)


def _segment_candidates(foci, x):
    """Index pairs (i<j) of axis segments whose horizontal shadows come close."""
    mid = 0.5 * (foci + x)
    half = 0.5 * np.linalg.norm(x - foci, axis=1)
    tree = cKDTree(mid)
    pairs = tree.query_pairs(2 * float(half.max()) + 1e-12, output_type="ndarray")
    if len(pairs) == 0:
        return np.zeros((0, 2), dtype=np.int64)
    gap = np.linalg.norm(mid[pairs[:, 0]] - mid[pairs[:, 1]], axis=1)
    keep = gap <= half[pairs[:, 0]] + half[pairs[:, 1]] + 1e-12
    return pairs[keep]


def _shield_guard(domain, tilde, M, eps, eps_p, k: int = 720) -> bool:
    """B4's lowest inner rim lies outside lam*Omega~ + (1-lam)*Omega, lam = 2(M - eps')/M - 1.

    Membership in a Minkowski combination of convex sets is decided by support functions.
    """
    lam = 2 * (M - eps_p) / M - 1
    if lam <= 0:
        return False
    rim = domain.inner_parallel(eps - eps_p).boundary_points(256)
    th = 2 * np.pi * np.arange(k) / k
    dirs = np.stack([np.cos(th), np.sin(th)], axis=1)
    h_t = _support(tilde, dirs)
    h_o = _support(domain, dirs)
    lhs = rim @ dirs.T
    rhs = lam * h_t + (1 - lam) * h_o
    # the rim point is outside iff some direction separates it
    return bool((lhs > rhs[None, :] + 1e-12).any(axis=1).all())


def _support(D: ConvexDomain, dirs):
    if D.kind == "disc":
        return dirs @ np.asarray(D.center) + D.radius
    return (D.vertices @ dirs.T).max(axis=0)


def _connected(domain, tilde, M, eps, eps_p) -> bool:
    """Adjacency of the four parts: B1-B2 share Omega~ x [0,M/2], B2-B3 the ring Omega_0 at z=M/2,
    B3-B4 the ring Omega_0 x [M-eps', M]."""
    ring0 = eps_p > 0
    edges = {(1, 2): tilde.area > 0, (2, 3): ring0, (3, 4): ring0 and eps_p < M / 2}
    parent = {i: i for i in (1, 2, 3, 4)}

    def root(i):
        while parent[i] != i:
            i = parent[i]
        return i

    for (a, b), ok in edges.items():
        if ok:
            parent[root(a)] = root(b)
    return len({root(i) for i in parent}) == 1


@dataclass(frozen=True, eq=False)
class _Ring:
    """Picklable footprint predicate lo <= d(x) <= hi, optionally off Omega~ and the hollow inlets."""

    domain: ConvexDomain
    lo: float
    hi: float
    tilde: ConvexDomain | None = None
    hollows: HollowSet | None = None

    def __call__(self, xy):
        d = self.domain.distance_many(xy)
        ok = (d >= self.lo) & (d <= self.hi)
        if self.tilde is not None:
            ok &= ~self.tilde.contains_many(xy, closed=False)
        if self.hollows is not None:
            ok &= self.hollows.inlet_of(xy) < 0
        return ok


def _dic_scene(domain, tilde, surf, hollows: HollowSet, M, eps, eps_p) -> Scene:
    graph = GraphPatch(surf, M / 2, tilde, pid=PID_GRAPH)
    items = [graph,
             PlanePatch(M / 2, True, _Ring(domain, eps_p, eps, tilde, hollows), PID_SLAB, "B2 top"),
             hollows,
             PlanePatch(M, True, _Ring(domain, 0.0, eps - eps_p), PID_SHIELD_TOP, "B4 top"),
             PlanePatch(M - eps_p, False, _Ring(domain, eps_p, eps - eps_p), PID_SHIELD_BOTTOM, "B4 bottom"),
             WallPatch(domain.inner_parallel(eps - eps_p), M - eps_p, M, PID_SHIELD_WALL, "B4 inner wall"),
             WallPatch(domain.inner_parallel(eps_p), M / 2, M - eps_p, PID_RING_WALL, "B3 inner wall")]
    return Scene(items, domain, M, M, name="dic")


@dataclass
class DicReport:
    n: int
    histogram: dict
    violations: int
    resistance: float
    error: float
    bound: float
    mirror_rays: int
    worst_exit_v3: float
    v3_bound: float
    focal_residual: float
    second_on_hollow: bool
    vertical_ok: bool
    details: dict = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return self.violations == 0 and self.second_on_hollow and self.vertical_ok and \
            self.worst_exit_v3 < self.v3_bound + 1e-9


def dic_verify(body: DicBody, n: int = 100_000, seed: int = 0, *, raise_on_violation: bool = True,
               cap: int = CAP) -> DicReport:
    """Trace n seeded rays and check the double impact condition and the exit geometry."""
    b = batch_trace(body.scene, n, seed, checks=False, cap=cap)
    over = (b.impacts >= 3) | b.nonregular
    if over.any() and raise_on_violation:
        i = int(np.flatnonzero(over)[0])
        raise DicViolation(f"ray at {b.x0[i].tolist()} made {int(b.impacts[i])} impacts", ray=b.x0[i])
    # first impacts, in ray order
    first = np.full(len(b.x0), -1, dtype=np.int64)
    order = np.lexsort((b.impact_s, b.impact_ray))
    rr = b.impact_ray[order]
    head = np.ones(len(rr), dtype=bool)
    head[1:] = rr[1:] != rr[:-1]
    first[rr[head]] = order[head]
    has = first >= 0
    fi = first[has]
    pid = b.impact_patch[fi]
    vout = b.impact_v3_out[fi]
    mirror = has.copy()
    mirror[has] = (pid == PID_GRAPH) & (vout < 1 - 1e-12)
    # focal property at the lifted plane: the reflected line passes through (O_w, M/2)
    fr = first[mirror]
    X = b.impact_point[fr]
    surf = body.inner_surface
    _, _, reg, w = surf.eval_many(X[:, :2])
    resid = 0.0
    if len(fr):
        ok = w >= 0
        Fp = np.column_stack([surf.pairs.O[w[ok]], np.full(ok.sum(), body.M / 2)])
        nx = b.impact_normal[fr][ok]
        vin = np.array([0.0, 0.0, -1.0])
        vo = vin - 2 * (nx @ vin)[:, None] * nx
        resid = float(np.linalg.norm(np.cross(Fp - X[ok], vo), axis=1).max()) if ok.any() else 0.0
    exit_v3 = b.v_plus[mirror, 2]
    worst = float(exit_v3.max()) if len(exit_v3) else -1.0
    # second impacts only on hollows
    second = np.ones(len(rr), dtype=bool)
    second[head] = False
    sec_pid = b.impact_patch[order][second]
    on_hollow = bool(np.all(sec_pid >= PID_HOLLOW))
    vert = has & ~mirror
    vertical_ok = bool(np.all(np.abs(b.v_plus[vert, 2] - 1) < 1e-9)) if vert.any() else True
    w3 = 0.5 * (1 + b.v_plus[~b.nonregular, 2])
    A = body.domain.area
    R = float(w3.mean()) * A
    err = 3 * float(w3.std(ddof=1)) / math.sqrt(len(w3)) * A
    return DicReport(n, b.histogram(), int(over.sum()), R, err, body.resistance_bound, int(mirror.sum()), worst,
                     body.v3_exit_bound, resid, on_hollow, vertical_ok,
                     {"ambiguous": int(b.ambiguous.sum()), "no_impact": int((~has).sum())})
