"""Small vectorized planar predicates and a uniform-grid bounding-box index."""
from __future__ import annotations

import numpy as np


def cross2(a, b):
    return a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0]


def points_in_triangles(p, tri, tol=0.0):
    """Closed point-in-triangle test, elementwise over a leading axis.

    ``p`` is (K,2), ``tri`` is (K,3,2). ``tol`` is an absolute distance slack.
    """
    a, b, c = tri[:, 0], tri[:, 1], tri[:, 2]
    s = np.sign(cross2(b - a, c - a))
    out = np.ones(len(p), dtype=bool)
    for u, v in ((a, b), (b, c), (c, a)):
        e = v - u
        dist = cross2(e, p - u) * s / np.maximum(np.linalg.norm(e, axis=1), 1e-300)
        out &= dist >= -tol
    return out


def convex_contains(poly, pts, tol=0.0):
    """Closed containment of points in one convex polygon (any orientation)."""
    poly = np.asarray(poly, dtype=float)
    pts = np.atleast_2d(np.asarray(pts, dtype=float))
    area2 = np.sum(cross2(poly, np.roll(poly, -1, axis=0)))
    s = 1.0 if area2 > 0 else -1.0
    ok = np.ones(len(pts), dtype=bool)
    for i in range(len(poly)):
        u, v = poly[i], poly[(i + 1) % len(poly)]
        e = v - u
        ok &= s * cross2(e, pts - u) / np.linalg.norm(e) >= -tol
    return ok


def triangles_meet_box(tri, box):
    """Separating-axis test of closed triangles (K,3,2) against one closed box (x0,y0,x1,y1)."""
    x0, y0, x1, y1 = box
    hit = (tri[:, :, 0].max(1) >= x0) & (tri[:, :, 0].min(1) <= x1)
    hit &= (tri[:, :, 1].max(1) >= y0) & (tri[:, :, 1].min(1) <= y1)
    corners = np.array([[x0, y0], [x1, y0], [x1, y1], [x0, y1]])
    for i in range(3):
        e = tri[:, (i + 1) % 3] - tri[:, i]
        n = np.stack([-e[:, 1], e[:, 0]], axis=1)
        tproj = np.einsum("kij,kj->ki", tri, n)
        bproj = corners @ n.T  # (4,K)
        hit &= (tproj.max(1) >= bproj.min(0)) & (tproj.min(1) <= bproj.max(0))
    return hit


def incircle(tri):
    """Incenter and inradius of a triangle given as (3,2)."""
    a, b, c = np.asarray(tri, dtype=float)
    la, lb, lc = np.linalg.norm(b - c), np.linalg.norm(c - a), np.linalg.norm(a - b)
    center = (la * a + lb * b + lc * c) / (la + lb + lc)
    area = 0.5 * abs(cross2(b - a, c - a))
    return center, 2 * area / (la + lb + lc)


class GridIndex:
    """Uniform grid over item bounding boxes; answers point -> candidate items queries."""

    def __init__(self, bboxes, cell=None, max_cells=4_000_000):
        bboxes = np.asarray(bboxes, dtype=float).reshape(-1, 4)
        self.n_items = len(bboxes)
        if self.n_items == 0:
            self.lo = np.zeros(2)
            self.cell = 1.0
            self.shape = (1, 1)
            self.start = np.zeros(2, dtype=np.int64)
            self.items = np.zeros(0, dtype=np.int64)
            return
        lo = bboxes[:, :2].min(0)
        hi = bboxes[:, 2:].max(0)
        span = np.maximum(hi - lo, 1e-300)
        if cell is None:
            ext = np.maximum(bboxes[:, 2:] - bboxes[:, :2], 0)
            cell = float(np.median(ext.max(1))) or float(span.max()) / 64
        nx, ny = (np.ceil(span / cell).astype(int) + 1)
        while nx * ny > max_cells:
            cell *= 2
            nx, ny = (np.ceil(span / cell).astype(int) + 1)
        self.lo, self.cell, self.shape = lo, cell, (int(nx), int(ny))
        i0 = np.clip(((bboxes[:, :2] - lo) // cell).astype(np.int64), 0, [nx - 1, ny - 1])
        i1 = np.clip(((bboxes[:, 2:] - lo) // cell).astype(np.int64), 0, [nx - 1, ny - 1])
        cx = i1[:, 0] - i0[:, 0] + 1
        cy = i1[:, 1] - i0[:, 1] + 1
        counts = cx * cy
        item = np.repeat(np.arange(self.n_items), counts)
        off = np.arange(counts.sum()) - np.repeat(np.cumsum(counts) - counts, counts)
        gx = i0[item, 0] + off % cx[item]
        gy = i0[item, 1] + off // cx[item]
        key = gx * ny + gy
        order = np.argsort(key, kind="stable")
        self.items = item[order]
        self.start = np.searchsorted(key[order], np.arange(nx * ny + 1))

    def cells_of(self, pts):
        nx, ny = self.shape
        g = np.floor((np.asarray(pts) - self.lo) / self.cell).astype(np.int64)
        inside = (g[:, 0] >= 0) & (g[:, 0] < nx) & (g[:, 1] >= 0) & (g[:, 1] < ny)
        return np.where(inside, g[:, 0] * ny + g[:, 1], -1)

    def candidates(self, pts):
        """Return (point_index, item_index) arrays of all candidate pairs."""
        key = self.cells_of(pts)
        valid = key >= 0
        k = np.where(valid, key, 0)
        s = np.where(valid, self.start[k], 0)
        e = np.where(valid, self.start[k + 1], 0)
        n = e - s
        pidx = np.repeat(np.arange(len(key)), n)
        off = np.arange(n.sum()) - np.repeat(np.cumsum(n) - n, n)
        return pidx, self.items[np.repeat(s, n) + off]


def convex_polys_meet(polys, other):
    """Separating-axis test of many closed convex polygons (K,V,2) against one convex polygon (W,2)."""
    polys = np.asarray(polys, dtype=float)
    other = np.asarray(other, dtype=float)
    hit = np.ones(len(polys), dtype=bool)
    V = polys.shape[1]
    for i in range(V):
        e = polys[:, (i + 1) % V] - polys[:, i]
        n = np.stack([-e[:, 1], e[:, 0]], axis=1)
        a = np.einsum("kvj,kj->kv", polys, n)
        b = other @ n.T
        hit &= (a.max(1) >= b.min(0)) & (a.min(1) <= b.max(0))
    W = len(other)
    for i in range(W):
        e = other[(i + 1) % W] - other[i]
        n = np.array([-e[1], e[0]])
        a = polys @ n
        b = other @ n
        hit &= (a.max(1) >= b.min()) & (a.min(1) <= b.max())
    return hit


def raster_triangles(tris, lo, cell, shape):
    """Exact cell cover of closed triangles on a uniform grid.

    Returns (triangle_index, cell_key) pairs for every grid cell whose closed square meets
    the triangle; key = ix * ny + iy. Cells outside ``shape`` are dropped.
    """
    tris = np.asarray(tris, dtype=float).reshape(-1, 3, 2)
    nx, ny = shape
    if len(tris) == 0:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    g = (tris - lo) / cell
    y0 = np.floor(g[:, :, 1].min(1)).astype(np.int64)
    y1 = np.floor(g[:, :, 1].max(1)).astype(np.int64)
    nrow = y1 - y0 + 1
    tri = np.repeat(np.arange(len(tris)), nrow)
    row = y0[tri] + (np.arange(nrow.sum()) - np.repeat(np.cumsum(nrow) - nrow, nrow))
    blo = row.astype(float)
    bhi = blo + 1.0
    xmin = np.full(len(row), np.inf)
    xmax = np.full(len(row), -np.inf)
    G = g[tri]
    for i in range(3):
        P, Q = G[:, i], G[:, (i + 1) % 3]
        ey0 = np.minimum(P[:, 1], Q[:, 1])
        ey1 = np.maximum(P[:, 1], Q[:, 1])
        a = np.maximum(blo, ey0)
        b = np.minimum(bhi, ey1)
        ok = a <= b
        dy = Q[:, 1] - P[:, 1]
        flat = np.abs(dy) < 1e-300
        safe = np.where(flat, 1.0, dy)
        xa = np.where(flat, np.minimum(P[:, 0], Q[:, 0]), P[:, 0] + (a - P[:, 1]) / safe * (Q[:, 0] - P[:, 0]))
        xb = np.where(flat, np.maximum(P[:, 0], Q[:, 0]), P[:, 0] + (b - P[:, 1]) / safe * (Q[:, 0] - P[:, 0]))
        xmin = np.where(ok, np.minimum(xmin, np.minimum(xa, xb)), xmin)
        xmax = np.where(ok, np.maximum(xmax, np.maximum(xa, xb)), xmax)
    good = np.isfinite(xmin)
    tri, row, xmin, xmax = tri[good], row[good], xmin[good], xmax[good]
    c0 = np.floor(xmin).astype(np.int64)
    c1 = np.floor(xmax).astype(np.int64)
    ncol = c1 - c0 + 1
    t2 = np.repeat(tri, ncol)
    r2 = np.repeat(row, ncol)
    col = np.repeat(c0, ncol) + (np.arange(ncol.sum()) - np.repeat(np.cumsum(ncol) - ncol, ncol))
    keep = (col >= 0) & (col < nx) & (r2 >= 0) & (r2 < ny)
    return t2[keep], col[keep] * ny + r2[keep]


class TriangleIndex:
    """Exact-raster grid index of triangles: a point's cell lists every triangle that can contain it."""

    def __init__(self, tris, cell, bounds=None, pad=1e-9):
        tris = np.asarray(tris, dtype=float).reshape(-1, 3, 2)
        if bounds is None:
            lo = tris.reshape(-1, 2).min(0) if len(tris) else np.zeros(2)
            hi = tris.reshape(-1, 2).max(0) if len(tris) else np.ones(2)
        else:
            lo, hi = np.asarray(bounds[:2], float), np.asarray(bounds[2:], float)
        span = hi - lo
        lo = lo - pad * (1 + np.abs(span).max())
        self.lo, self.cell = lo, float(cell)
        self.shape = tuple(int(v) for v in np.ceil((hi - lo) / cell + 1e-9).astype(int) + 1)
        tri, key = raster_triangles(tris, lo, cell, self.shape)
        order = np.argsort(key, kind="stable")
        self.items = tri[order].astype(np.int64)
        self.start = np.searchsorted(key[order], np.arange(self.shape[0] * self.shape[1] + 1))
        self.n_items = len(tris)

    def keys(self, pts):
        nx, ny = self.shape
        g = np.floor((np.asarray(pts, dtype=float).reshape(-1, 2) - self.lo) / self.cell).astype(np.int64)
        inside = (g[:, 0] >= 0) & (g[:, 0] < nx) & (g[:, 1] >= 0) & (g[:, 1] < ny)
        return np.where(inside, g[:, 0] * ny + g[:, 1], -1)

    def candidates(self, pts):
        """(point_index, item_index) pairs whose cell matches."""
        key = self.keys(pts)
        valid = key >= 0
        k = np.where(valid, key, 0)
        s = np.where(valid, self.start[k], 0)
        e = np.where(valid, self.start[k + 1], 0)
        n = e - s
        pidx = np.repeat(np.arange(len(key)), n)
        off = np.arange(n.sum()) - np.repeat(np.cumsum(n) - n, n)
        return pidx, self.items[np.repeat(s, n) + off]

    def items_in_keys(self, keys):
        keys = np.unique(np.asarray(keys, dtype=np.int64))
        keys = keys[(keys >= 0) & (keys < len(self.start) - 1)]
        if len(keys) == 0:
            return np.zeros(0, dtype=np.int64)
        s, e = self.start[keys], self.start[keys + 1]
        n = e - s
        off = np.arange(n.sum()) - np.repeat(np.cumsum(n) - n, n)
        return np.unique(self.items[np.repeat(s, n) + off])

    def segment_items(self, a, b):
        """Items whose cells meet the closed segment ab."""
        tri = np.array([[a, b, b]], dtype=float)
        _, key = raster_triangles(tri, self.lo, self.cell, self.shape)
        return self.items_in_keys(key)
