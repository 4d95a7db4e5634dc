"""Convex planar cross-sections, their boundary-distance field and the lattice cover."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np
import shapely
from scipy.spatial import cKDTree
from shapely.geometry import Polygon, box

from .errors import ConstructionError, CoverError, DomainError

_CIRCLE_SEGMENTS = 256


def _polygon_area(v: np.ndarray) -> float:
    x, y = v[:, 0], v[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


def _perimeter(v: np.ndarray) -> float:
    return float(np.linalg.norm(np.roll(v, -1, axis=0) - v, axis=1).sum())


def _segment_distance(points: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Distance from each of ``points`` (N,2) to the segment [a, b]."""
    ab = b - a
    t = np.clip(((points - a) @ ab) / float(ab @ ab), 0.0, 1.0)
    proj = a + t[:, None] * ab
    return np.linalg.norm(points - proj, axis=1)


@dataclass(frozen=True, eq=False)
class ConvexDomain:
    """An open disc or an open strictly convex polygon (vertices counterclockwise)."""

    kind: str
    center: tuple = (0.0, 0.0)
    radius: float = 0.0
    vertices: np.ndarray | None = field(default=None, repr=False)

    @cached_property
    def area(self) -> float:
        if self.kind == "disc":
            return math.pi * self.radius**2
        return _polygon_area(self.vertices)

    @cached_property
    def boundary_length(self) -> float:
        if self.kind == "disc":
            return 2.0 * math.pi * self.radius
        return _perimeter(self.vertices)

    @cached_property
    def bbox(self) -> tuple[float, float, float, float]:
        if self.kind == "disc":
            cx, cy = self.center
            r = self.radius
            return (cx - r, cy - r, cx + r, cy + r)
        v = self.vertices
        return (float(v[:, 0].min()), float(v[:, 1].min()), float(v[:, 0].max()), float(v[:, 1].max()))

    @property
    def diameter(self) -> float:
        if self.kind == "disc":
            return 2.0 * self.radius
        v = self.vertices
        return float(np.max(np.linalg.norm(v[:, None, :] - v[None, :, :], axis=2)))

    @cached_property
    def inradius(self) -> float:
        if self.kind == "disc":
            return self.radius
        # max of the distance field over a convex polygon, via an LP on the half-planes
        from scipy.optimize import linprog

        v = self.vertices
        e = np.roll(v, -1, axis=0) - v
        n = np.stack([e[:, 1], -e[:, 0]], axis=1)
        n /= np.linalg.norm(n, axis=1)[:, None]
        # n is outward for ccw order: n.x + r <= n.v
        a_ub = np.hstack([n, np.ones((len(v), 1))])
        b_ub = np.einsum("ij,ij->i", n, v)
        res = linprog([0, 0, -1], A_ub=a_ub, b_ub=b_ub, bounds=[(None, None)] * 3)
        return float(res.x[2])

    @cached_property
    def shape(self) -> Polygon:
        """Shapely polygon; the disc is approximated by a circumscribed regular polygon."""
        if self.kind == "disc":
            k = _CIRCLE_SEGMENTS
            ang = 2 * np.pi * (np.arange(k) + 0.5) / k
            rr = self.radius / math.cos(math.pi / k)
            pts = np.stack([self.center[0] + rr * np.cos(ang), self.center[1] + rr * np.sin(ang)], axis=1)
            return Polygon(pts)
        return Polygon(self.vertices)

    def distance(self, x) -> float:
        return float(self.distance_many(np.asarray(x, dtype=float)[None, :])[0])

    def distance_many(self, pts: np.ndarray) -> np.ndarray:
        """Signed distance to the boundary: positive inside, negative outside."""
        pts = np.asarray(pts, dtype=float).reshape(-1, 2)
        if self.kind == "disc":
            c = np.asarray(self.center)
            return self.radius - np.linalg.norm(pts - c, axis=1)
        v = self.vertices
        w = np.roll(v, -1, axis=0)
        dists = np.stack([_segment_distance(pts, v[i], w[i]) for i in range(len(v))], axis=1)
        unsigned = dists.min(axis=1)
        inside = self.contains_many(pts, closed=False)
        return np.where(inside, unsigned, -unsigned)

    def contains_many(self, pts: np.ndarray, closed: bool = True, tol: float = 0.0) -> np.ndarray:
        pts = np.asarray(pts, dtype=float).reshape(-1, 2)
        if self.kind == "disc":
            r = np.linalg.norm(pts - np.asarray(self.center), axis=1)
            return r <= self.radius + tol if closed else r < self.radius - tol
        v = self.vertices
        e = np.roll(v, -1, axis=0) - v
        # cross(e, p - v) >= 0 for every edge of a ccw polygon
        rel = pts[:, None, :] - v[None, :, :]
        cr = e[None, :, 0] * rel[:, :, 1] - e[None, :, 1] * rel[:, :, 0]
        cr /= np.linalg.norm(e, axis=1)[None, :]
        if closed:
            return np.all(cr >= -tol, axis=1)
        return np.all(cr > tol, axis=1)

    def contains(self, x, closed: bool = True) -> bool:
        return bool(self.contains_many(np.asarray(x, dtype=float)[None, :], closed=closed)[0])

    def clip_ray(self, x: np.ndarray, direction: np.ndarray) -> float:
        """Largest t >= 0 with x + t*direction in the closed domain (x assumed inside)."""
        return float(self.clip_rays(np.asarray(x)[None, :], np.asarray(direction)[None, :])[0])

    def clip_rays(self, xs: np.ndarray, dirs: np.ndarray) -> np.ndarray:
        xs = np.asarray(xs, dtype=float)
        dirs = np.asarray(dirs, dtype=float)
        if self.kind == "disc":
            c = np.asarray(self.center)
            p = xs - c
            a = np.einsum("ij,ij->i", dirs, dirs)
            b = np.einsum("ij,ij->i", p, dirs)
            cc = np.einsum("ij,ij->i", p, p) - self.radius**2
            disc = np.maximum(b * b - a * cc, 0.0)
            with np.errstate(divide="ignore", invalid="ignore"):
                t = (-b + np.sqrt(disc)) / a
            return np.where(a > 0, np.maximum(t, 0.0), np.inf)
        v = self.vertices
        e = np.roll(v, -1, axis=0) - v
        n = np.stack([e[:, 1], -e[:, 0]], axis=1)  # outward
        num = np.einsum("ij,ij->i", n, v)[None, :] - xs @ n.T
        den = dirs @ n.T
        with np.errstate(divide="ignore", invalid="ignore"):
            t = np.where(den > 0, num / den, np.inf)
        return np.maximum(t.min(axis=1), 0.0)

    def line_intervals(self, xs: np.ndarray, dirs: np.ndarray):
        """Parameters (t_in, t_out) where the lines x + t*dir meet the closed domain; t_in > t_out if they miss."""
        xs = np.asarray(xs, dtype=float).reshape(-1, 2)
        dirs = np.asarray(dirs, dtype=float).reshape(-1, 2)
        if self.kind == "disc":
            p = xs - np.asarray(self.center)
            a = np.einsum("ij,ij->i", dirs, dirs)
            b = np.einsum("ij,ij->i", p, dirs)
            cc = np.einsum("ij,ij->i", p, p) - self.radius ** 2
            disc = b * b - a * cc
            root = np.sqrt(np.maximum(disc, 0.0))
            with np.errstate(divide="ignore", invalid="ignore"):
                t0 = np.where(disc >= 0, (-b - root) / a, np.inf)
                t1 = np.where(disc >= 0, (-b + root) / a, -np.inf)
            return t0, t1
        v = self.vertices
        e = np.roll(v, -1, axis=0) - v
        n = np.stack([e[:, 1], -e[:, 0]], axis=1)  # outward
        num = np.einsum("ij,ij->i", n, v)[None, :] - xs @ n.T
        den = dirs @ n.T
        with np.errstate(divide="ignore", invalid="ignore"):
            r = num / den
        t1 = np.where(den > 0, r, np.inf).min(axis=1)
        t0 = np.where(den < 0, r, -np.inf).max(axis=1)
        miss = ((den == 0) & (num < 0)).any(axis=1)
        t0 = np.where(miss, np.inf, t0)
        return t0, t1

    def outward_normals(self, pts: np.ndarray) -> np.ndarray:
        """Unit outward normal of the nearest boundary piece."""
        pts = np.asarray(pts, dtype=float).reshape(-1, 2)
        if self.kind == "disc":
            d = pts - np.asarray(self.center)
            return d / np.maximum(np.linalg.norm(d, axis=1, keepdims=True), 1e-300)
        v = self.vertices
        e = np.roll(v, -1, axis=0) - v
        n = np.stack([e[:, 1], -e[:, 0]], axis=1)
        n /= np.linalg.norm(n, axis=1, keepdims=True)
        off = np.abs(pts @ n.T - np.einsum("ij,ij->i", n, v)[None, :])
        return n[np.argmin(off, axis=1)]

    def sample_uniform(self, n: int, rng: np.random.Generator) -> np.ndarray:
        if self.kind == "disc":
            r = self.radius * np.sqrt(rng.random(n))
            th = 2 * np.pi * rng.random(n)
            return np.asarray(self.center) + np.stack([r * np.cos(th), r * np.sin(th)], axis=1)
        # fan triangulation from vertex 0, pick triangle by area
        v = self.vertices
        a, b, c = v[0], v[1:-1], v[2:]
        areas = 0.5 * np.abs((b[:, 0] - a[0]) * (c[:, 1] - a[1]) - (b[:, 1] - a[1]) * (c[:, 0] - a[0]))
        idx = rng.choice(len(areas), size=n, p=areas / areas.sum())
        u, w = rng.random(n), rng.random(n)
        flip = u + w > 1
        u, w = np.where(flip, 1 - u, u), np.where(flip, 1 - w, w)
        return a + u[:, None] * (b[idx] - a) + w[:, None] * (c[idx] - a)

    def inner_parallel(self, level: float) -> "ConvexDomain":
        """The convex set {x : d(x) > level}."""
        if level <= 0:
            raise DomainError("level must be positive")
        if self.kind == "disc":
            if level >= self.radius:
                raise ConstructionError("inner parallel set is empty")
            return make_domain({"disc": {"center": list(self.center), "radius": self.radius - level}})
        v = self.vertices
        e = np.roll(v, -1, axis=0) - v
        n = np.stack([e[:, 1], -e[:, 0]], axis=1)
        n /= np.linalg.norm(n, axis=1)[:, None]
        # n is the outward normal; intersect the half-planes shifted inward by level
        q = v - level * n
        big = 4 * (self.diameter + 1)
        poly = self.shape
        for i in range(len(v)):
            d = e[i] / np.linalg.norm(e[i])
            half = Polygon([q[i] - big * d, q[i] + big * d, q[i] + big * d - big * n[i], q[i] - big * d - big * n[i]])
            poly = poly.intersection(half)
        if poly.is_empty or poly.area <= 0:
            raise ConstructionError("inner parallel set is empty")
        pts = np.asarray(shapely.remove_repeated_points(shapely.simplify(poly, 0.0)).exterior.coords)[:-1]
        return make_domain({"polygon": pts.tolist()})

    def translated(self, shift) -> "ConvexDomain":
        s = np.asarray(shift, dtype=float)
        if self.kind == "disc":
            return make_domain({"disc": {"center": (np.asarray(self.center) + s).tolist(), "radius": self.radius}})
        return make_domain({"polygon": (self.vertices + s).tolist()})

    def boundary_points(self, k: int = 512) -> np.ndarray:
        if self.kind == "disc":
            ang = 2 * np.pi * np.arange(k) / k
            return np.asarray(self.center) + self.radius * np.stack([np.cos(ang), np.sin(ang)], axis=1)
        return self.vertices.copy()

    def to_dict(self) -> dict:
        if self.kind == "disc":
            return {"disc": {"center": list(self.center), "radius": self.radius}}
        return {"polygon": self.vertices.tolist()}


def make_domain(spec) -> ConvexDomain:
    """Build a domain from ``{"disc": {"center": [x, y], "radius": r}}`` or ``{"polygon": [[x, y], ...]}``.

    A bare number is read as the radius of a disc centred at the origin.
    """
    if isinstance(spec, ConvexDomain):
        return spec
    if isinstance(spec, (int, float)):
        spec = {"disc": {"center": [0.0, 0.0], "radius": float(spec)}}
    if "disc" in spec:
        d = spec["disc"]
        if isinstance(d, (int, float)):
            d = {"radius": d}
        r = float(d["radius"])
        if not r > 0 or not math.isfinite(r):
            raise ConstructionError(f"disc radius must be positive, got {r}")
        c = tuple(float(t) for t in d.get("center", (0.0, 0.0)))
        return ConvexDomain("disc", center=c, radius=r)
    if "polygon" in spec:
        v = np.asarray(spec["polygon"], dtype=float)
        if v.ndim != 2 or v.shape[1] != 2 or len(v) < 3:
            raise ConstructionError("polygon needs at least 3 vertices")
        if np.allclose(v[0], v[-1]) and len(v) > 3:
            v = v[:-1]
        if _polygon_area(v) < 0:
            v = v[::-1].copy()
        e = np.roll(v, -1, axis=0) - v
        if np.any(np.linalg.norm(e, axis=1) == 0):
            raise ConstructionError("polygon has repeated vertices")
        f = np.roll(e, -1, axis=0)
        cross = e[:, 0] * f[:, 1] - e[:, 1] * f[:, 0]
        scale = np.linalg.norm(e, axis=1) * np.linalg.norm(f, axis=1)
        if np.any(cross <= 1e-12 * scale):
            raise ConstructionError("polygon is not strictly convex")
        # winding number 1: total turning 2*pi
        turn = np.arctan2(cross, np.einsum("ij,ij->i", e, f)).sum()
        if abs(turn - 2 * math.pi) > 1e-9:
            raise ConstructionError("polygon is self-intersecting")
        return ConvexDomain("polygon", vertices=v)
    raise ConstructionError(f"unrecognised domain spec: {spec!r}")


def boundary_distance(domain: ConvexDomain, x) -> float:
    return domain.distance(x)


# ---------------------------------------------------------------------------
# lattice cover


@dataclass(frozen=True)
class CoverCell:
    q_center: tuple
    qt_center: tuple

    def q_box(self, delta):
        cx, cy = self.q_center
        return (cx - delta / 2, cy - delta / 2, cx + delta / 2, cy + delta / 2)

    def qt_box(self, delta):
        cx, cy = self.qt_center
        return (cx - delta, cy - delta, cx + delta, cy + delta)


@dataclass(frozen=True, eq=False)
class CoverPlan:
    delta: float
    epsilon: float
    cells: list
    worst_margin: float = 0.0

    def __len__(self):
        return len(self.cells)

    @property
    def q_centers(self) -> np.ndarray:
        return np.array([c.q_center for c in self.cells])

    @property
    def qt_centers(self) -> np.ndarray:
        return np.array([c.qt_center for c in self.cells])


def _grid3(centers: np.ndarray, half: float) -> np.ndarray:
    off = np.array([-half, 0.0, half])
    ox, oy = np.meshgrid(off, off, indexing="ij")
    o = np.stack([ox.ravel(), oy.ravel()], axis=1)
    return centers[:, None, :] + o[None, :, :]


def _squares_meeting(domain: ConvexDomain, centers: np.ndarray, side: float) -> np.ndarray:
    """Mask of closed axis-aligned squares that meet the open domain.

    Squares that only touch the boundary (up to roundoff) do not count, which keeps the cover
    exactly equivariant under lattice translations.
    """
    if domain.kind == "disc":
        c = np.asarray(domain.center)
        h = side / 2
        dx = np.maximum(np.abs(centers[:, 0] - c[0]) - h, 0.0)
        dy = np.maximum(np.abs(centers[:, 1] - c[1]) - h, 0.0)
        return np.hypot(dx, dy) < domain.radius * (1 - 1e-12)
    boxes = shapely.box(centers[:, 0] - side / 2, centers[:, 1] - side / 2,
                        centers[:, 0] + side / 2, centers[:, 1] + side / 2)
    return shapely.area(shapely.intersection(boxes, domain.shape)) > 1e-12 * side * side


def lattice_cover(domain: ConvexDomain, epsilon: float, delta: float | None = None,
                  safety: float = 0.0) -> CoverPlan:
    """Cover the domain by lattice squares Q of side delta, each paired with the nearest
    exterior square of side 2*delta on the doubled lattice.

    The pairing inequality |x - x~| < d(x)+ + epsilon/2 - safety is certified on 3x3 grids
    of both squares; a violation raises CoverError carrying the offending cell.
    """
    if not epsilon > 0:
        raise DomainError("epsilon must be positive")
    if delta is None:
        delta = epsilon / 10
    x0, y0, x1, y1 = domain.bbox
    i0, i1 = math.floor(x0 / delta) - 1, math.ceil(x1 / delta) + 1
    j0, j1 = math.floor(y0 / delta) - 1, math.ceil(y1 / delta) + 1
    gi, gj = np.meshgrid(np.arange(i0, i1), np.arange(j0, j1), indexing="ij")
    qc = np.stack([(gi.ravel() + 0.5) * delta, (gj.ravel() + 0.5) * delta], axis=1)
    qc = qc[_squares_meeting(domain, qc, delta)]
    # sort lexicographically for deterministic numbering
    qc = qc[np.lexsort((qc[:, 1], qc[:, 0]))]

    big = 2 * delta
    pad = 3
    k0, k1 = math.floor(x0 / big) - pad, math.ceil(x1 / big) + pad
    l0, l1 = math.floor(y0 / big) - pad, math.ceil(y1 / big) + pad
    gk, gl = np.meshgrid(np.arange(k0, k1), np.arange(l0, l1), indexing="ij")
    tc = np.stack([(gk.ravel() + 0.5) * big, (gl.ravel() + 0.5) * big], axis=1)
    tc = tc[~_squares_meeting(domain, tc, big)]
    tree = cKDTree(tc)
    kq = min(8, len(tc))
    dist, idx = tree.query(qc, k=kq)
    cells = []
    for row in range(len(qc)):
        dmin = dist[row, 0]
        tied = [idx[row, j] for j in range(kq) if dist[row, j] <= dmin * (1 + 1e-12) + 1e-15]
        best = min(tied, key=lambda t: (tc[t, 0], tc[t, 1]))
        cells.append(CoverCell(tuple(qc[row]), tuple(tc[best])))

    plan = CoverPlan(delta=delta, epsilon=epsilon, cells=cells)
    margin = verify_cover(domain, plan, safety=safety)
    return CoverPlan(delta=delta, epsilon=epsilon, cells=cells, worst_margin=margin)


def verify_cover(domain: ConvexDomain, plan: CoverPlan, safety: float = 0.0) -> float:
    """Check the pairing inequality on 3x3 grids; returns the worst (smallest) slack."""
    delta = plan.delta
    qc, tc = plan.q_centers, plan.qt_centers
    xq = _grid3(qc, delta / 2)  # (N,9,2)
    xt = _grid3(tc, delta)
    dq = np.maximum(domain.distance_many(xq.reshape(-1, 2)).reshape(len(qc), 9), 0.0)
    far = np.linalg.norm(xq[:, :, None, :] - xt[:, None, :, :], axis=3).max(axis=2)
    slack = dq + plan.epsilon / 2 - safety - far
    worst = float(slack.min()) if len(slack) else math.inf
    if worst <= 0:
        bad = int(np.argmin(slack.min(axis=1)))
        raise CoverError(f"pairing inequality fails at cell {bad} (slack {worst:.3g}); lattice too coarse",
                         cell=plan.cells[bad])
    # every doubled square must be disjoint from the domain
    if np.any(_squares_meeting(domain, tc, 2 * delta)):
        raise CoverError("an exterior square meets the domain")
    return worst
