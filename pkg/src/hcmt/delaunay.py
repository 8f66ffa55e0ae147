"""Incremental Delaunay triangulation (Bowyer-Watson) with robust predicates.

Predicates use a floating-point filter with Shewchuk's static error bounds
and fall back to exact rational arithmetic when the filter cannot decide.
Exact cocircular ties are resolved by symbolic perturbation of the lifted
heights: points earlier in lexicographic ``(x, y)`` order are lowered by
larger infinitesimals. The perturbed triangulation is unique, so the output
does not depend on input order.

The hull is closed with ghost triangles ``(a, b, GHOST)`` whose real edge
``a -> b`` has the exterior on its left.
"""

from __future__ import annotations

from fractions import Fraction

import numpy as np

__all__ = [
    "DegenerateGeometryError",
    "orient2d",
    "incircle",
    "delaunay_triangulate",
    "empty_circumcircle_violations",
]

GHOST = -1
_EPS = 2.0**-53
_CCW_BOUND = (3.0 + 16.0 * _EPS) * _EPS
_ICC_BOUND = (10.0 + 96.0 * _EPS) * _EPS


class DegenerateGeometryError(ValueError):
    """All points are collinear (or fewer than three distinct points)."""


def _orient_exact(ax, ay, bx, by, cx, cy) -> int:
    ax, ay, bx, by, cx, cy = map(Fraction, (ax, ay, bx, by, cx, cy))
    det = (bx - ax) * (cy - ay) - (by - ay) * (cx - ax)
    return (det > 0) - (det < 0)


def orient2d(ax, ay, bx, by, cx, cy) -> int:
    """Sign of the signed area of ``abc``: +1 counter-clockwise, -1 clockwise, 0 collinear."""
    left = (bx - ax) * (cy - ay)
    right = (by - ay) * (cx - ax)
    det = left - right
    bound = _CCW_BOUND * (abs(left) + abs(right))
    if det > bound:
        return 1
    if -det > bound:
        return -1
    return _orient_exact(ax, ay, bx, by, cx, cy)


def _incircle_exact(ax, ay, bx, by, cx, cy, dx, dy) -> int:
    ax, ay, bx, by, cx, cy, dx, dy = map(Fraction, (ax, ay, bx, by, cx, cy, dx, dy))
    adx, ady = ax - dx, ay - dy
    bdx, bdy = bx - dx, by - dy
    cdx, cdy = cx - dx, cy - dy
    det = (
        (adx * adx + ady * ady) * (bdx * cdy - cdx * bdy)
        + (bdx * bdx + bdy * bdy) * (cdx * ady - adx * cdy)
        + (cdx * cdx + cdy * cdy) * (adx * bdy - bdx * ady)
    )
    return (det > 0) - (det < 0)


def incircle(ax, ay, bx, by, cx, cy, dx, dy) -> int:
    """+1 if ``d`` is strictly inside the circle through CCW ``abc``, -1 outside, 0 on it."""
    adx, ady = ax - dx, ay - dy
    bdx, bdy = bx - dx, by - dy
    cdx, cdy = cx - dx, cy - dy
    bdxcdy, cdxbdy = bdx * cdy, cdx * bdy
    cdxady, adxcdy = cdx * ady, adx * cdy
    adxbdy, bdxady = adx * bdy, bdx * ady
    alift = adx * adx + ady * ady
    blift = bdx * bdx + bdy * bdy
    clift = cdx * cdx + cdy * cdy
    det = alift * (bdxcdy - cdxbdy) + blift * (cdxady - adxcdy) + clift * (adxbdy - bdxady)
    permanent = (
        (abs(bdxcdy) + abs(cdxbdy)) * alift
        + (abs(cdxady) + abs(adxcdy)) * blift
        + (abs(adxbdy) + abs(bdxady)) * clift
    )
    bound = _ICC_BOUND * permanent
    if det > bound:
        return 1
    if -det > bound:
        return -1
    return _incircle_exact(ax, ay, bx, by, cx, cy, dx, dy)


class _Triangulator:
    """Mutable triangle soup with adjacency; vertex ids are lexicographic ranks."""

    def __init__(self, xs: list[float], ys: list[float]):
        self.xs = xs
        self.ys = ys
        self.verts: list[list[int]] = []
        self.nbrs: list[list[int]] = []
        self.alive: list[bool] = []
        self.free: list[int] = []
        self.last = 0

    def _new(self, a: int, b: int, c: int) -> int:
        if self.free:
            t = self.free.pop()
            self.verts[t] = [a, b, c]
            self.nbrs[t] = [-1, -1, -1]
            self.alive[t] = True
        else:
            t = len(self.verts)
            self.verts.append([a, b, c])
            self.nbrs.append([-1, -1, -1])
            self.alive.append(True)
        return t

    def _orient(self, a: int, b: int, c: int) -> int:
        xs, ys = self.xs, self.ys
        return orient2d(xs[a], ys[a], xs[b], ys[b], xs[c], ys[c])

    def _between(self, a: int, b: int, p: int) -> bool:
        """``p`` strictly inside segment ``ab``; assumes collinearity."""
        xs, ys = self.xs, self.ys
        if xs[a] != xs[b]:
            return min(xs[a], xs[b]) < xs[p] < max(xs[a], xs[b])
        return min(ys[a], ys[b]) < ys[p] < max(ys[a], ys[b])

    def conflicts(self, t: int, p: int) -> bool:
        a, b, c = self.verts[t]
        if c == GHOST or a == GHOST or b == GHOST:
            # rotate so the ghost is last
            while self.verts[t][2] != GHOST:
                a, b, c = b, c, a
                self.verts[t] = [a, b, c]
                n = self.nbrs[t]
                self.nbrs[t] = [n[1], n[2], n[0]]
            a, b, _ = self.verts[t]
            o = self._orient(a, b, p)
            return o > 0 or (o == 0 and self._between(a, b, p))
        xs, ys = self.xs, self.ys
        s = incircle(xs[a], ys[a], xs[b], ys[b], xs[c], ys[c], xs[p], ys[p])
        if s != 0:
            return s > 0
        # Cocircular: p sits on the arc opposite exactly one vertex. The
        # perturbed test is decided by the lowest-ranked of the four points.
        if self._orient(b, c, p) < 0:
            opposite, others = a, (b, c)
        elif self._orient(c, a, p) < 0:
            opposite, others = b, (c, a)
        else:
            opposite, others = c, (a, b)
        return min(p, opposite) < min(others)

    def locate(self, p: int) -> int:
        t = self.last
        if not self.alive[t]:
            t = next(i for i, alive in enumerate(self.alive) if alive)
        if GHOST in self.verts[t]:
            if self.conflicts(t, p):
                return t
            t = self.nbrs[t][self.verts[t].index(GHOST)]
        for _ in range(4 * len(self.verts) + 16):
            a, b, c = self.verts[t]
            for k, (u, w) in enumerate(((b, c), (c, a), (a, b))):
                if self._orient(u, w, p) < 0:
                    t = self.nbrs[t][k]
                    break
            else:
                return t
            if GHOST in self.verts[t]:
                return t
        # Visibility walks terminate on Delaunay triangulations; scan as a guard.
        for t, alive in enumerate(self.alive):
            if alive and self.conflicts(t, p):
                return t
        raise RuntimeError("point location failed")

    def insert(self, p: int) -> None:
        start = self.locate(p)
        if not self.conflicts(start, p):
            raise RuntimeError("located triangle is not in conflict")
        cavity = {start}
        stack = [start]
        boundary = []
        while stack:
            t = stack.pop()
            verts, nbrs = self.verts[t], self.nbrs[t]
            for k in range(3):
                n = nbrs[k]
                if n in cavity:
                    continue
                if self.conflicts(n, p):
                    cavity.add(n)
                    stack.append(n)
        for t in cavity:
            verts, nbrs = self.verts[t], self.nbrs[t]
            for k in range(3):
                n = nbrs[k]
                if n not in cavity:
                    slot = self.nbrs[n].index(t)
                    boundary.append((verts[(k + 1) % 3], verts[(k + 2) % 3], n, slot))
        for t in cavity:
            self.alive[t] = False
            self.free.append(t)
        by_start: dict[int, int] = {}
        by_end: dict[int, int] = {}
        created = []
        for u, w, outside, slot in boundary:
            t = self._new(u, w, p)
            self.nbrs[t][2] = outside
            self.nbrs[outside][slot] = t
            by_start[u] = t
            by_end[w] = t
            created.append(t)
        for t in created:
            u, w, _ = self.verts[t]
            self.nbrs[t][0] = by_start[w]  # across (w, p)
            self.nbrs[t][1] = by_end[u]  # across (p, u)
        self.last = created[-1]

    def triangles(self) -> list[tuple[int, int, int]]:
        out = []
        for verts, alive in zip(self.verts, self.alive):
            if alive and GHOST not in verts:
                out.append(tuple(verts))
        return out


def delaunay_triangulate(points: np.ndarray) -> np.ndarray:
    """Delaunay triangles (counter-clockwise, ``(T, 3)`` indices into ``points``).

    Output rows are canonical: each triangle starts at its smallest index
    and rows are sorted, so equal point sets give equal arrays.
    Raises :class:`DegenerateGeometryError` if the points are collinear.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise ValueError("points must be (N, 2)")
    if not np.all(np.isfinite(pts)):
        raise ValueError("points must be finite")
    n = pts.shape[0]
    if n < 3:
        raise DegenerateGeometryError(f"need at least 3 points, got {n}")
    order = np.lexsort((pts[:, 1], pts[:, 0]))
    sp = pts[order]
    if np.any(np.all(sp[1:] == sp[:-1], axis=1)):
        raise ValueError("duplicate points")
    xs = sp[:, 0].tolist()
    ys = sp[:, 1].tolist()
    tri = _Triangulator(xs, ys)

    k = 2
    while k < n and tri._orient(0, 1, k) == 0:
        k += 1
    if k == n:
        raise DegenerateGeometryError("all points are collinear")
    a, b, c = (0, 1, k) if tri._orient(0, 1, k) > 0 else (1, 0, k)
    t0 = tri._new(a, b, c)
    g_ab = tri._new(b, a, GHOST)
    g_bc = tri._new(c, b, GHOST)
    g_ca = tri._new(a, c, GHOST)
    tri.nbrs[t0] = [g_bc, g_ca, g_ab]
    # ghost (u, w, G): nbr[2] is the real triangle, nbr[0] across (w, G), nbr[1] across (G, u)
    tri.nbrs[g_ab] = [g_ca, g_bc, t0]
    tri.nbrs[g_bc] = [g_ab, g_ca, t0]
    tri.nbrs[g_ca] = [g_bc, g_ab, t0]
    tri.last = t0

    for p in range(2, n):
        if p != k:
            tri.insert(p)

    tris = np.asarray(tri.triangles(), dtype=np.int64).reshape(-1, 3)
    tris = order[tris]
    # canonical rotation: smallest index first, orientation preserved
    shift = np.argmin(tris, axis=1)
    idx = (shift[:, None] + np.arange(3)[None, :]) % 3
    tris = np.take_along_axis(tris, idx, axis=1)
    tris = tris[np.lexsort((tris[:, 2], tris[:, 1], tris[:, 0]))]
    return tris


def empty_circumcircle_violations(
    points: np.ndarray, triangles: np.ndarray, tol: float = 1e-9
) -> int:
    """Count (point, triangle) pairs with a point strictly inside a circumcircle.

    Brute force over all pairs in plain floating point, independent of the
    predicates used for construction: a point counts when
    ``(r^2 - |p - centre|^2) / r^2 > tol``.
    """
    pts = np.asarray(points, dtype=np.float64)
    tris = np.asarray(triangles, dtype=np.int64)
    if tris.size == 0:
        return 0
    a, b, c = pts[tris[:, 0]], pts[tris[:, 1]], pts[tris[:, 2]]
    area2 = (b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1]) - (b[:, 1] - a[:, 1]) * (c[:, 0] - a[:, 0])
    d = 2.0 * area2
    asq, bsq, csq = (a**2).sum(1), (b**2).sum(1), (c**2).sum(1)
    ux = (asq * (b[:, 1] - c[:, 1]) + bsq * (c[:, 1] - a[:, 1]) + csq * (a[:, 1] - b[:, 1])) / d
    uy = (asq * (c[:, 0] - b[:, 0]) + bsq * (a[:, 0] - c[:, 0]) + csq * (b[:, 0] - a[:, 0])) / d
    r2 = (a[:, 0] - ux) ** 2 + (a[:, 1] - uy) ** 2
    violations = 0
    for start in range(0, len(tris), 512):
        sl = slice(start, start + 512)
        dist2 = (pts[None, :, 0] - ux[sl, None]) ** 2 + (pts[None, :, 1] - uy[sl, None]) ** 2
        inside = (r2[sl, None] - dist2) / r2[sl, None] > tol
        inside[np.arange(inside.shape[0])[:, None], tris[sl]] = False
        violations += int(inside.sum())
    return violations
