"""Elementary mirror/valley pairs and their paraboloid height functions."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .errors import ConstructionError, DomainError

OUTSIDE, VALLEY, MIRROR, EDGE, FLAT = 0, 1, 2, 3, 4
REGION_NAMES = {OUTSIDE: "Outside", VALLEY: "Valley", MIRROR: "Mirror", EDGE: "Edge", FLAT: "Flat"}


def focal_parameter(d: float, h: float) -> float:
    """Positive root p of h = (d^2 - p^2) / (2p)."""
    if not (d > 0 and h > 0):
        raise DomainError(f"focal_parameter needs d > 0 and h > 0, got d={d}, h={h}")
    # d^2 / (sqrt(d^2+h^2) + h) avoids cancellation when h >> d
    return d * d / (math.hypot(d, h) + h)


def focal_parameters(d: np.ndarray, h) -> np.ndarray:
    d = np.asarray(d, dtype=float)
    return d * d / (np.hypot(d, h) + h)


def nonnegativity_bound(d, h):
    """Sufficient ratio bound for a nonnegative elementary h-function."""
    return 1.0 / (1.0 + np.sqrt(1.0 + (np.asarray(d) / h) ** 2))


def _cross(a, b):
    return a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0]


def _seg_dist(p, a, b):
    ab = b - a
    t = np.clip(np.sum((p - a) * ab, axis=-1) / np.sum(ab * ab, axis=-1), 0.0, 1.0)
    return np.linalg.norm(p - (a + t[..., None] * ab), axis=-1)


def trapezoid_distance(o, a, m, n, b):
    """Distance from o to the closed trapezoid AMNB; arrays broadcast over a leading axis."""
    return np.minimum.reduce([_seg_dist(o, a, m), _seg_dist(o, m, n), _seg_dist(o, n, b), _seg_dist(o, b, a)])


@dataclass(frozen=True, eq=False)
class ElementaryPair:
    """Valley triangle MON plus mirror trapezoid AMNB; O is the focus."""

    O: np.ndarray
    A: np.ndarray
    B: np.ndarray
    Mpt: np.ndarray
    Npt: np.ndarray
    id: int = 0

    @cached_property
    def d(self) -> float:
        return float(max(np.linalg.norm(self.A - self.O), np.linalg.norm(self.B - self.O)))

    @cached_property
    def d0(self) -> float:
        return float(trapezoid_distance(self.O, self.A, self.Mpt, self.Npt, self.B))

    @property
    def kappa(self) -> float:
        return (self.d - self.d0) / self.d

    @property
    def valley_area(self) -> float:
        return 0.5 * abs(float(_cross(self.Mpt - self.O, self.Npt - self.O)))

    @property
    def mirror_area(self) -> float:
        return 0.5 * abs(float(_cross(self.A - self.O, self.B - self.O))) - self.valley_area

    def transformed(self, lin: np.ndarray, shift: np.ndarray, new_id: int | None = None) -> "ElementaryPair":
        f = lambda p: lin @ p + shift  # noqa: E731
        return ElementaryPair(f(self.O), f(self.A), f(self.B), f(self.Mpt), f(self.Npt),
                              self.id if new_id is None else new_id)


def make_elementary_pair(O, A, B, inner_fraction: float, id: int = 0) -> ElementaryPair:
    """Truncate triangle AOB by the line parallel to AB through O + inner_fraction*(A - O)."""
    O, A, B = (np.asarray(p, dtype=float) for p in (O, A, B))
    if not 0 < inner_fraction < 1:
        raise DomainError("inner_fraction must lie in (0, 1)")
    scale = max(np.linalg.norm(A - O), np.linalg.norm(B - O), np.linalg.norm(B - A))
    if scale == 0 or abs(float(_cross(A - O, B - O))) <= 1e-12 * scale * scale:
        raise ConstructionError("focus and base corners are collinear")
    M = O + inner_fraction * (A - O)
    N = O + inner_fraction * (B - O)
    return ElementaryPair(O, A, B, M, N, id)


class PairArrays:
    """Struct-of-arrays view of many pairs; rows are pairs, columns x/y."""

    def __init__(self, O, A, B, Mpt, Npt):
        self.O = np.ascontiguousarray(O, dtype=float)
        self.A = np.ascontiguousarray(A, dtype=float)
        self.B = np.ascontiguousarray(B, dtype=float)
        self.M = np.ascontiguousarray(Mpt, dtype=float)
        self.N = np.ascontiguousarray(Npt, dtype=float)

    def __len__(self):
        return len(self.O)

    @classmethod
    def from_pairs(cls, pairs):
        return cls(*(np.array([getattr(p, k) for p in pairs]) for k in ("O", "A", "B", "Mpt", "Npt")))

    @classmethod
    def concat(cls, parts):
        parts = [p for p in parts if len(p)]
        if not parts:
            z = np.zeros((0, 2))
            return cls(z, z, z, z, z)
        return cls(*(np.concatenate([getattr(p, k) for p in parts]) for k in ("O", "A", "B", "M", "N")))

    def take(self, idx):
        return PairArrays(self.O[idx], self.A[idx], self.B[idx], self.M[idx], self.N[idx])

    def affine(self, lin, shift):
        f = lambda p: p @ np.asarray(lin).T + shift  # noqa: E731
        return PairArrays(f(self.O), f(self.A), f(self.B), f(self.M), f(self.N))

    def translated(self, shift):
        s = np.asarray(shift, dtype=float)
        return PairArrays(self.O + s, self.A + s, self.B + s, self.M + s, self.N + s)

    def pair(self, i, id=None) -> ElementaryPair:
        return ElementaryPair(self.O[i].copy(), self.A[i].copy(), self.B[i].copy(), self.M[i].copy(),
                              self.N[i].copy(), i if id is None else id)

    @property
    def d(self):
        return np.maximum(np.linalg.norm(self.A - self.O, axis=1), np.linalg.norm(self.B - self.O, axis=1))

    @property
    def d0(self):
        return trapezoid_distance(self.O, self.A, self.M, self.N, self.B)

    @property
    def kappa(self):
        d = self.d
        return (d - self.d0) / d

    @property
    def valley_areas(self):
        return 0.5 * np.abs(_cross(self.M - self.O, self.N - self.O))

    @property
    def closure_areas(self):
        return 0.5 * np.abs(_cross(self.A - self.O, self.B - self.O))

    @property
    def mirror_areas(self):
        return self.closure_areas - self.valley_areas

    def triangles(self):
        """Valley triangles as (K,3,2)."""
        return np.stack([self.M, self.O, self.N], axis=1)

    def trapezoids(self):
        return np.stack([self.A, self.M, self.N, self.B], axis=1)

    def closures(self):
        return np.stack([self.A, self.O, self.B], axis=1)


@dataclass(frozen=True, eq=False)
class ElementaryFunction:
    """The elementary h-function of a pair: 0 on the valley, (r^2 - p^2)/(2p) on the mirror."""

    pair: ElementaryPair
    h: float
    p: float = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "p", focal_parameter(self.pair.d, self.h))

    @property
    def nonnegative(self) -> bool:
        """Exact test: the paraboloid is >= 0 on the trapezoid iff d0 >= p."""
        return self.pair.d0 >= self.p * (1 - 1e-12)

    @property
    def kappa_condition(self) -> bool:
        """Sufficient condition on the ratio used in the construction."""
        return self.pair.kappa <= float(nonnegativity_bound(self.pair.d, self.h))

    def eval(self, x) -> "SurfaceSample":
        u, g, r = self.eval_many(np.asarray(x, dtype=float)[None, :])
        return SurfaceSample(np.asarray(x, dtype=float), float(u[0]), g[0], REGION_NAMES[int(r[0])], self.pair.id)

    def eval_many(self, pts):
        pr = self.pair
        return eval_pairs_at(pts, pr.O[None], pr.A[None], pr.B[None], pr.Mpt[None], pr.Npt[None],
                             np.array([self.p]), np.zeros(len(pts), dtype=int))


@dataclass(frozen=True)
class SurfaceSample:
    x: np.ndarray
    u: float
    grad: np.ndarray
    region: str
    pair_id: int | None = None


def _tri_sign(p, a, b, c):
    """Barycentric-style edge functions of p against ccw-normalised triangle abc."""
    s = np.sign(_cross(b - a, c - a))
    e0 = _cross(b - a, p - a) * s
    e1 = _cross(c - b, p - b) * s
    e2 = _cross(a - c, p - c) * s
    return e0, e1, e2


def eval_pairs_at(pts, O, A, B, M, N, p, which, rel_tol=1e-12):
    """Evaluate pair ``which[k]`` at ``pts[k]`` (pair k when ``which`` is None).

    Returns (u, grad, region) with region in {OUTSIDE, VALLEY, MIRROR, EDGE}.
    """
    pts = np.asarray(pts, dtype=float)
    if which is None:
        which = slice(None)
    o, a, b, m, n = O[which], A[which], B[which], M[which], N[which]
    scale = np.maximum(np.linalg.norm(a - o, axis=1), np.linalg.norm(b - o, axis=1))
    tol = rel_tol * scale
    # closure triangle AOB; the valley is MON, the mirror is the rest
    e0, e1, e2 = _tri_sign(pts, a, o, b)
    len0 = np.linalg.norm(o - a, axis=1)
    len1 = np.linalg.norm(b - o, axis=1)
    len2 = np.linalg.norm(a - b, axis=1)
    d0, d1, d2 = e0 / len0, e1 / len1, e2 / len2
    inside_closed = (d0 >= -tol) & (d1 >= -tol) & (d2 >= -tol)
    on_outer = inside_closed & ((np.abs(d0) <= tol) | (np.abs(d1) <= tol) | (np.abs(d2) <= tol))
    # signed distance to MN, positive on the focus side
    mn = n - m
    s_mn = _cross(mn, pts - m) / np.linalg.norm(mn, axis=1)
    s_o = _cross(mn, o - m)
    s_mn = np.where(s_o >= 0, s_mn, -s_mn)
    valley = inside_closed & (s_mn > tol) & ~on_outer
    mirror = inside_closed & (s_mn < -tol) & ~on_outer
    edge = inside_closed & ~valley & ~mirror
    region = np.full(len(pts), OUTSIDE, dtype=np.int8)
    region[valley] = VALLEY
    region[mirror] = MIRROR
    region[edge] = EDGE
    pp = p[which]
    rel = pts - o
    r2 = np.einsum("ij,ij->i", rel, rel)
    u = np.where(mirror, (r2 - pp * pp) / (2 * pp), 0.0)
    grad = np.where(mirror[:, None], rel / pp[:, None], 0.0)
    u = np.where(region == OUTSIDE, np.nan, u)
    return u, grad, region


@dataclass(frozen=True)
class Lemma1Bounds:
    height_low: float
    height_high: float
    factor_low: float
    factor_high: float


def lemma1_envelope(f: ElementaryFunction) -> Lemma1Bounds:
    """Closed-form bounds on u and on 1/(1+|grad u|^2) over the open mirror."""
    d, h, k = f.pair.d, f.h, f.pair.kappa
    s = math.hypot(d, h)
    base = 0.5 * (1 - h / s)
    return Lemma1Bounds(h - k * (s + h), h, base, base / (1 - k) ** 2)


@dataclass
class SicReport:
    n_points: int
    n_checked: int
    violations: int
    worst_margin: float
    worst_point: np.ndarray | None = None
    worst_t: float | None = None

    @property
    def ok(self) -> bool:
        return self.violations == 0


def sic_sample_check(surface, domain, n_points: int, n_t: int, seed: int, M: float | None = None,
                     chunk: int = 4096) -> SicReport:
    """Sample the single impact inequality
    (u(x - t grad u) - u(x)) / t <= (1 - |grad u|^2) / 2
    at random regular points x and a geometric grid of t ending at the domain exit.

    ``surface`` must provide ``eval_many(points) -> (u, grad, region)``.
    """
    if M is None:
        M = float(getattr(surface, "M", 1.0))
    tol = 1e-9 * (1 + M)
    rng = np.random.default_rng(seed)
    xs = domain.sample_uniform(n_points, rng)
    violations, checked = 0, 0
    worst, worst_x, worst_t = math.inf, None, None
    ratios = 2.0 ** -np.arange(n_t - 1, -1, -1, dtype=float)
    for lo in range(0, n_points, chunk):
        x = xs[lo:lo + chunk]
        u, g, reg = surface.eval_many(x)[:3]
        keep = ((reg == MIRROR) | (reg == VALLEY) | (reg == FLAT)) & np.isfinite(u)
        gn2 = np.einsum("ij,ij->i", g, g)
        moving = keep & (gn2 > 0)
        checked += int(keep.sum())
        x, u, g, gn2 = x[moving], u[moving], g[moving], gn2[moving]
        if len(x) == 0:
            continue
        tmax = domain.clip_rays(x, -g)
        t = tmax[:, None] * ratios[None, :]
        y = x[:, None, :] - t[:, :, None] * g[:, None, :]
        uy = surface.eval_many(y.reshape(-1, 2))[0]
        uy = uy.reshape(t.shape)
        lhs = (uy - u[:, None]) / t
        rhs = 0.5 * (1 - gn2)[:, None]
        margin = rhs - lhs
        margin = np.where(np.isfinite(margin), margin, np.inf)
        bad = margin < -tol
        violations += int(bad.any(axis=1).sum())
        k = np.unravel_index(np.argmin(margin), margin.shape)
        if margin[k] < worst:
            worst, worst_x, worst_t = float(margin[k]), x[k[0]].copy(), float(t[k])
    return SicReport(n_points, checked, violations, worst, worst_x, worst_t)


class FunctionSurface:
    """Adapter exposing eval_many for an analytic height function (u, grad) over a domain."""

    def __init__(self, func, grad, domain, M=1.0):
        self.func, self.grad, self.domain, self.M = func, grad, domain, M

    def eval_many(self, pts):
        pts = np.asarray(pts, dtype=float)
        u = self.func(pts)
        g = self.grad(pts)
        reg = np.where(self.domain.contains_many(pts, tol=1e-12), MIRROR, OUTSIDE).astype(np.int8)
        return u, g, reg
