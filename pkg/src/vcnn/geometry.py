"""Convex polytopes in H-representation, with exact vertex enumeration and
volume for dimensions 1 through 4.

Every polytope is stored as ``A x <= b`` with unit-norm rows.  Vertices are
found by solving every d-subset of boundary hyperplanes, which is cheap for
the small facet counts that Voronoi cells, boxes and the lifted coupling
polytopes have.  Volumes are computed by coning from the vertex centroid over
the facets, recursing down to polygons which are handled by the shoelace
formula.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from functools import lru_cache
from typing import Iterable, Sequence

import numpy as np

from .errors import (
    DimensionMismatch,
    DimensionTooHigh,
    EmptyPolytope,
    GeometryError,
    UnboundedRegion,
)

EPS = 1e-9
MAX_DIM = 4

# Volumes below this fraction of diameter**d are vertex-enumeration noise.
ZERO_VOLUME_REL = 1e-14
_RAY_TOL = 1e-10
_DET_TOL = 1e-12


@dataclass(frozen=True, eq=False)
class Halfspace:
    """The closed halfspace ``{x : normal . x <= offset}``."""

    normal: np.ndarray
    offset: float

    def __post_init__(self):
        normal = np.asarray(self.normal, dtype=float).reshape(-1)
        if not np.all(np.isfinite(normal)) or np.linalg.norm(normal) <= 1e-12:
            raise GeometryError("halfspace normal must be finite and non-zero")
        object.__setattr__(self, "normal", normal)
        object.__setattr__(self, "offset", float(self.offset))

    @property
    def dim(self) -> int:
        return self.normal.shape[0]


@dataclass(frozen=True, eq=False)
class Box:
    """Axis-aligned box ``lo <= x <= hi``."""

    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.lo, dtype=float).reshape(-1)
        hi = np.asarray(self.hi, dtype=float).reshape(-1)
        if lo.shape != hi.shape:
            raise DimensionMismatch("box corners differ in dimension")
        if not np.all(lo < hi):
            raise GeometryError(f"degenerate box lo={lo.tolist()} hi={hi.tolist()}")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @property
    def dim(self) -> int:
        return self.lo.shape[0]

    @property
    def volume(self) -> float:
        return float(np.prod(self.hi - self.lo))

    def constraints(self):
        """Return ``(A, b)`` for the 2d box faces."""
        d = self.dim
        eye = np.eye(d)
        A = np.vstack([eye, -eye])
        b = np.concatenate([self.hi, -self.lo])
        return A, b

    def halfspaces(self) -> list[Halfspace]:
        A, b = self.constraints()
        return [Halfspace(a, o) for a, o in zip(A, b)]

    def contains(self, x, tol: float = EPS) -> bool:
        x = np.asarray(x, dtype=float)
        return bool(np.all(x >= self.lo - tol) and np.all(x <= self.hi + tol))

    def intersects(self, other: "Box", tol: float = 0.0) -> bool:
        return bool(np.all(self.lo <= other.hi + tol) and np.all(other.lo <= self.hi + tol))

    def __eq__(self, other):
        if not isinstance(other, Box):
            return NotImplemented
        return np.array_equal(self.lo, other.lo) and np.array_equal(self.hi, other.hi)

    def __hash__(self):
        return hash((tuple(self.lo), tuple(self.hi)))

    @classmethod
    def unit(cls, dim: int) -> "Box":
        return cls(np.zeros(dim), np.ones(dim))


class ConvexPolytope:
    """Convex polytope ``{x : A x <= b}``.

    Instances built by :func:`intersect_halfspaces` carry enumerated vertices,
    the vertex/constraint incidence matrix and an irredundant H-representation.
    A polytope constructed directly from halfspaces (e.g. a half-plane) is
    allowed to be unbounded until it is clipped.
    """

    __slots__ = ("dim", "A", "b", "_vertices", "empty_flag", "_active", "_volume")

    def __init__(self, dim, A, b, vertices=None, empty=False, active=None):
        self.dim = int(dim)
        self.A = np.asarray(A, dtype=float).reshape(-1, self.dim)
        self.b = np.asarray(b, dtype=float).reshape(-1)
        self._vertices = vertices
        self.empty_flag = bool(empty)
        self._active = active
        self._volume = None

    @classmethod
    def from_halfspaces(cls, halfspaces: Iterable[Halfspace], dim: int) -> "ConvexPolytope":
        hs = list(halfspaces)
        A = np.array([h.normal for h in hs], dtype=float).reshape(-1, dim)
        b = np.array([h.offset for h in hs], dtype=float)
        return cls(dim, A, b)

    @property
    def halfspaces(self) -> list[Halfspace]:
        return [Halfspace(a, o) for a, o in zip(self.A, self.b)]

    @property
    def enumerated(self) -> bool:
        return self._vertices is not None or self.empty_flag

    @property
    def vertices(self) -> np.ndarray:
        if not self.enumerated:
            raise GeometryError("polytope vertices have not been enumerated")
        if self.empty_flag:
            return np.empty((0, self.dim))
        return self._vertices

    def translated(self, t) -> "ConvexPolytope":
        t = np.asarray(t, dtype=float)
        return _intersect_arrays(self.A, self.b + self.A @ t, self.dim)

    def scaled(self, s: float) -> "ConvexPolytope":
        if s <= 0:
            raise GeometryError("scale factor must be positive")
        return _intersect_arrays(self.A, self.b * s, self.dim)

    def __repr__(self):
        state = "empty" if self.empty_flag else f"{0 if self._vertices is None else len(self._vertices)} vertices"
        return f"ConvexPolytope(dim={self.dim}, halfspaces={len(self.b)}, {state})"


def empty_polytope(dim: int, A=None, b=None) -> ConvexPolytope:
    if A is None:
        A, b = np.empty((0, dim)), np.empty(0)
    return ConvexPolytope(dim, A, b, empty=True)


@lru_cache(maxsize=None)
def _combinations(n: int, k: int) -> np.ndarray:
    if k == 0 or n < k:
        return np.empty((0, k), dtype=np.intp)
    return np.array(list(itertools.combinations(range(n), k)), dtype=np.intp)


def _normalize(A, b):
    norms = np.linalg.norm(A, axis=1)
    if np.any(norms <= 1e-12):
        raise GeometryError("halfspace normal must be non-zero")
    return A / norms[:, None], b / norms


def _tolerance(b) -> float:
    scale = np.abs(b).max() if len(b) else 1.0
    return EPS * max(1.0, float(scale))


def _enumerate_vertices(A, b, dim, tol):
    """All feasible intersections of ``dim`` boundary hyperplanes, deduplicated."""
    combos = _combinations(len(b), dim)
    if len(combos) == 0:
        return np.empty((0, dim))
    M = A[combos]
    rhs = b[combos]
    if dim == 1:
        coef = M[:, 0, 0]
        ok = np.abs(coef) > _DET_TOL
        sol = (rhs[ok, 0] / coef[ok])[:, None]
    else:
        ok = np.abs(np.linalg.det(M)) > _DET_TOL
        if not np.any(ok):
            return np.empty((0, dim))
        sol = np.linalg.solve(M[ok], rhs[ok][..., None])[..., 0]
    feasible = np.all(sol @ A.T - b <= tol, axis=1)
    cand = sol[feasible]
    if len(cand) == 0:
        return cand
    dist = np.abs(cand[:, None, :] - cand[None, :, :]).max(axis=2)
    dup = np.triu(dist <= 10 * tol, k=1).any(axis=0)
    verts = cand[~dup]
    order = np.lexsort(verts.T[::-1])
    return verts[order]


def _affine_rank(points, tol) -> int:
    if len(points) <= 1:
        return 0
    s = np.linalg.svd(points - points.mean(axis=0), compute_uv=False)
    return int(np.sum(s > tol))


def _has_recession_direction(A) -> bool:
    """True if some unit direction r satisfies ``A r <= 0`` (the set is unbounded)."""
    dim = A.shape[1]
    if len(A) == 0 or np.linalg.matrix_rank(A, tol=1e-10) < dim:
        return True
    if dim == 1:
        col = A[:, 0]
        return bool(np.all(col <= _RAY_TOL) or np.all(col >= -_RAY_TOL))
    combos = _combinations(len(A), dim - 1)
    sub = A[combos]
    _, s, vt = np.linalg.svd(sub)
    rays = vt[:, -1, :]
    proper = s[:, -1] > 1e-10 if s.shape[1] == dim else np.ones(len(sub), bool)
    rays = rays[proper]
    if len(rays) == 0:
        return False
    prods = rays @ A.T
    return bool(np.any(np.all(prods <= _RAY_TOL, axis=1)) or np.any(np.all(prods >= -_RAY_TOL, axis=1)))


def _lp_feasible(A, b) -> bool:
    from scipy.optimize import linprog

    res = linprog(np.zeros(A.shape[1]), A_ub=A, b_ub=b, bounds=[(None, None)] * A.shape[1], method="highs")
    return res.status != 2


def _facet_rows(V, active, dim, tol):
    """Indices of constraints supporting a (dim-1)-face, one per distinct facet."""
    rows = []
    seen = set()
    for j in range(active.shape[1]):
        mask = active[:, j]
        if mask.sum() < dim:
            continue
        key = mask.tobytes()
        if key in seen:
            continue
        if _affine_rank(V[mask], tol) == dim - 1:
            seen.add(key)
            rows.append(j)
    return np.array(rows, dtype=np.intp)


def _intersect_arrays(A, b, dim, check_bounded=True, prune=True) -> ConvexPolytope:
    if dim > MAX_DIM:
        raise DimensionTooHigh(f"dimension {dim} exceeds {MAX_DIM}")
    if dim < 1:
        raise GeometryError("dimension must be positive")
    A = np.asarray(A, dtype=float).reshape(-1, dim)
    b = np.asarray(b, dtype=float).reshape(-1)
    if len(b) == 0:
        raise UnboundedRegion("no halfspaces given")
    A, b = _normalize(A, b)
    tol = _tolerance(b)
    V = _enumerate_vertices(A, b, dim, tol)
    if check_bounded and _has_recession_direction(A):
        if len(V) > 0 or _lp_feasible(A, b):
            raise UnboundedRegion("halfspace intersection is unbounded")
        return empty_polytope(dim, A, b)
    if len(V) < dim + 1 or _affine_rank(V, tol) < dim:
        return empty_polytope(dim, A, b)
    active = np.abs(V @ A.T - b) <= 10 * tol
    if prune:
        rows = _facet_rows(V, active, dim, tol)
        A, b, active = A[rows], b[rows], active[:, rows]
    return ConvexPolytope(dim, A, b, vertices=V, active=active)


def intersect_halfspaces(halfspaces: Sequence[Halfspace], dim: int) -> ConvexPolytope:
    """Intersect closed halfspaces and enumerate the resulting polytope.

    Sets with empty interior come back with ``empty_flag`` set.  Redundant
    halfspaces are dropped from the stored representation.

    Raises
    ------
    UnboundedRegion
        If the intersection is non-empty and unbounded.
    DimensionTooHigh
        If ``dim > 4``.
    """
    if dim > MAX_DIM:
        raise DimensionTooHigh(f"dimension {dim} exceeds {MAX_DIM}")
    hs = list(halfspaces)
    if not hs:
        raise UnboundedRegion("no halfspaces given")
    for h in hs:
        if h.dim != dim:
            raise DimensionMismatch(f"halfspace of dimension {h.dim} in a {dim}-dimensional intersection")
    A = np.array([h.normal for h in hs])
    b = np.array([h.offset for h in hs])
    return _intersect_arrays(A, b, dim)


def _ensure_enumerated(p: ConvexPolytope) -> ConvexPolytope:
    if p.enumerated:
        return p
    return _intersect_arrays(p.A, p.b, p.dim)


def _polygon_area(P) -> float:
    """Area of a convex polygon given by unordered points in R^2..R^4."""
    if len(P) < 3:
        return 0.0
    X = P - P.mean(axis=0)
    if P.shape[1] == 2:
        px, py = X[:, 0], X[:, 1]
    else:
        sq = np.einsum("ij,ij->i", X, X)
        e1 = X[np.argmax(sq)]
        e1 = e1 / np.sqrt(sq.max())
        px = X @ e1
        R = X - px[:, None] * e1
        rn = np.einsum("ij,ij->i", R, R)
        k = np.argmax(rn)
        if rn[k] <= 0.0:
            return 0.0
        py = R @ (R[k] / np.sqrt(rn[k]))
    order = np.argsort(np.arctan2(py, px), kind="stable")
    x, y = px[order], py[order]
    return 0.5 * abs(float(x[:-1] @ y[1:] - y[:-1] @ x[1:] + x[-1] * y[0] - y[-1] * x[0]))


def _volume_of(V, A, b, active, dim, tol) -> float:
    """Cone decomposition from the vertex centroid over the facets.

    Facets of a 4-polytope are decomposed again from their own centroid over
    their 2-faces; 2-face areas are memoized since each is shared by two
    facets.  In-facet heights come from the constraint normals.
    """
    if dim == 1:
        vol = float(V.max() - V.min())
    elif dim == 2:
        vol = _polygon_area(V)
    else:
        areas = {}

        def area(mask):
            key = mask.tobytes()
            r = areas.get(key)
            if r is None:
                r = areas[key] = _polygon_area(V[mask])
            return r

        def facet_volume(mask, j):
            P = V[mask]
            cF = P.mean(axis=0)
            aj = A[j]
            sub = active & mask[:, None]
            counts = sub.sum(axis=0)
            total = 0.0
            seen = set()
            for i in np.flatnonzero((counts >= 3) & (counts < len(P))):
                gmask = sub[:, i]
                key = gmask.tobytes()
                if key in seen:
                    continue
                seen.add(key)
                ar = area(gmask)
                if ar <= 0.0:
                    continue
                proj = A[i] - (A[i] @ aj) * aj
                nn = np.sqrt(proj @ proj)
                if nn < 1e-12:
                    continue
                total += (b[i] - A[i] @ cF) / nn * ar / 3.0
            return total

        c = V.mean(axis=0)
        vol = 0.0
        heights = b - A @ c
        seen = set()
        for j in np.flatnonzero(active.sum(axis=0) >= dim):
            mask = active[:, j]
            key = mask.tobytes()
            if key in seen:
                continue
            seen.add(key)
            if _affine_rank(V[mask], tol) != dim - 1:
                continue
            fvol = area(mask) if dim == 3 else facet_volume(mask, j)
            vol += heights[j] * fvol / dim
    diam = float(np.max(V.max(axis=0) - V.min(axis=0)))
    if vol < ZERO_VOLUME_REL * diam**dim:
        return 0.0
    return vol


def volume(p: ConvexPolytope) -> float:
    """Lebesgue volume of ``p``; 0 for empty or lower-dimensional sets."""
    if p._volume is not None:
        return p._volume
    q = _ensure_enumerated(p)
    if q.empty_flag:
        vol = 0.0
    else:
        vol = _volume_of(q._vertices, q.A, q.b, q._active, q.dim, _tolerance(q.b))
    p._volume = q._volume = vol
    return vol


def coupling_polytope(U: ConvexPolytope, V: ConvexPolytope, W: ConvexPolytope) -> ConvexPolytope:
    """Lift the kernel/input/output cells to one polytope in R^{2a}.

    Coordinates are ``(x, y)`` with ``x`` constrained to ``V``, ``y`` to ``U``
    and ``x + y`` to ``W``; the volume of the result is the coupling weight
    linking the three cells.
    """
    a = U.dim
    if V.dim != a or W.dim != a:
        raise DimensionMismatch("coupling cells must share one dimension")
    if 2 * a > MAX_DIM:
        raise DimensionTooHigh(f"coupling in dimension {a} lifts to {2 * a} > {MAX_DIM}")
    for cell in (U, V, W):
        if cell.enumerated and cell.empty_flag:
            return empty_polytope(2 * a)
    zU = np.zeros_like(U.A)
    zV = np.zeros_like(V.A)
    A = np.vstack([np.hstack([V.A, zV]), np.hstack([zU, U.A]), np.hstack([W.A, W.A])])
    b = np.concatenate([V.b, U.b, W.b])
    # bounded whenever U and V are; pruning is skipped since only the volume is needed
    bounded_inputs = U.enumerated and V.enumerated
    return _intersect_arrays(A, b, 2 * a, check_bounded=not bounded_inputs, prune=False)


def clip(p: ConvexPolytope, box: Box) -> ConvexPolytope:
    """Intersect ``p`` with ``box`` and re-enumerate."""
    if p.dim != box.dim:
        raise DimensionMismatch("polytope and box dimensions differ")
    if p.enumerated and p.empty_flag:
        return empty_polytope(p.dim)
    bA, bb = box.constraints()
    return _intersect_arrays(np.vstack([p.A, bA]), np.concatenate([p.b, bb]), p.dim)


def bounding_box(p: ConvexPolytope) -> Box:
    q = _ensure_enumerated(p)
    if q.empty_flag:
        raise EmptyPolytope("empty polytope has no bounding box")
    V = q._vertices
    return Box(V.min(axis=0), V.max(axis=0))


def contains(p: ConvexPolytope, x) -> bool:
    """Closed-set membership test with tolerance ``EPS``."""
    x = np.asarray(x, dtype=float).reshape(-1)
    if x.shape[0] != p.dim:
        raise DimensionMismatch("point and polytope dimensions differ")
    if p.enumerated and p.empty_flag:
        return False
    norms = np.linalg.norm(p.A, axis=1)
    return bool(np.all(p.A @ x - p.b <= EPS * norms))


def contains_many(p: ConvexPolytope, X) -> np.ndarray:
    """Vectorized :func:`contains` over the rows of ``X``."""
    X = np.asarray(X, dtype=float).reshape(-1, p.dim)
    if p.enumerated and p.empty_flag:
        return np.zeros(len(X), dtype=bool)
    norms = np.linalg.norm(p.A, axis=1)
    return np.all(X @ p.A.T - p.b <= EPS * norms, axis=1)


def box_polytope(box: Box) -> ConvexPolytope:
    """Polytope of an axis-aligned box, built without vertex enumeration."""
    A, b = box.constraints()
    d = box.dim
    corners = np.array(list(itertools.product(*zip(box.lo, box.hi))), dtype=float)
    active = np.hstack([corners == box.hi, corners == box.lo])
    return ConvexPolytope(d, A, b, vertices=corners, active=active)


def clip_polygon(poly, normal, offset):
    """Clip a convex polygon (ordered vertex array) to ``normal . x <= offset``."""
    n = len(poly)
    if n == 0:
        return poly
    s = poly @ normal - offset
    inside = s <= 0
    if inside.all():
        return poly
    if not inside.any():
        return poly[:0]
    out = []
    for i in range(n):
        j = (i + 1) % n
        if inside[i]:
            out.append(poly[i])
        if inside[i] != inside[j]:
            t = s[i] / (s[i] - s[j])
            out.append(poly[i] + t * (poly[j] - poly[i]))
    return np.array(out)


def polygon_area(poly) -> float:
    """Shoelace area of an ordered polygon."""
    if len(poly) < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))


def ordered_polygon(p: ConvexPolytope) -> np.ndarray:
    """Vertices of a 2D polytope in counter-clockwise order."""
    if p.dim != 2:
        raise DimensionMismatch("ordered_polygon needs a 2D polytope")
    V = _ensure_enumerated(p).vertices
    if len(V) == 0:
        return V
    c = V.mean(axis=0)
    return V[np.argsort(np.arctan2(V[:, 1] - c[1], V[:, 0] - c[0]), kind="stable")]


def simplex_polytope(points) -> ConvexPolytope:
    """H-representation of the simplex spanned by ``d + 1`` affinely independent points."""
    P = np.asarray(points, dtype=float)
    d = P.shape[1]
    if P.shape[0] != d + 1:
        raise GeometryError("a d-simplex needs exactly d + 1 points")
    A, b = [], []
    for i in range(d + 1):
        face = np.delete(P, i, axis=0)
        if d == 1:
            n = np.ones(1)
        else:
            _, _, vt = np.linalg.svd(face[1:] - face[0])
            n = vt[-1]
        off = n @ face[0]
        if n @ P[i] > off:
            n, off = -n, -off
        A.append(n)
        b.append(off)
    return _intersect_arrays(np.array(A), np.array(b), d)
