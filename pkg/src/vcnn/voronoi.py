"""Partitions of a domain box into convex cells: Voronoi diagrams and grids."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .errors import DimensionMismatch, DuplicateSites, PointOutsideDomain, SiteOutsideDomain
from .geometry import (
    EPS,
    Box,
    ConvexPolytope,
    _intersect_arrays,
    box_polytope,
    clip_polygon,
    contains_many,
    volume,
)

VORONOI = "voronoi"
GRID = "grid"
CELLS = "cells"


@dataclass(eq=False)
class Partition:
    """A finite list of interior-disjoint convex cells tiling ``domain``.

    ``sites`` is present for Voronoi and grid partitions (grid sites are the
    cell centers); ``counts`` only for grids.
    """

    dim: int
    domain: Box
    cells: list
    sites: Optional[np.ndarray] = None
    kind: str = CELLS
    counts: Optional[tuple] = None
    _volumes: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def cell_count(self) -> int:
        return len(self.cells)

    def __len__(self):
        return len(self.cells)

    @property
    def volumes(self) -> np.ndarray:
        if self._volumes is None:
            self._volumes = np.array([volume(c) for c in self.cells], dtype=float)
        return self._volumes

    def permuted(self, order) -> "Partition":
        """Same partition with cells reordered as ``cells[order]``."""
        order = np.asarray(order)
        sites = None if self.sites is None else self.sites[order]
        # a reordered grid loses index arithmetic, so locate falls back to sites
        kind = VORONOI if self.kind == GRID else self.kind
        return Partition(self.dim, self.domain, [self.cells[i] for i in order], sites, kind)


def _check_sites(sites: np.ndarray, domain: Box):
    for i, s in enumerate(sites):
        if not domain.contains(s):
            raise SiteOutsideDomain(i)
    if len(sites) > 1:
        pairs = cKDTree(sites).query_pairs(EPS, output_type="ndarray")
        if len(pairs):
            pairs = np.sort(pairs, axis=1)
            i = np.lexsort((pairs[:, 0], pairs[:, 1]))[0]
            raise DuplicateSites(int(pairs[i, 1]), int(pairs[i, 0]))


def _voronoi_cell(i, sites, order, domain: Box, box_A, box_b):
    """Cell of site ``i``: the domain box cut by every bisector that reaches it."""
    p = sites[i]
    dim = len(p)
    if dim == 1:
        region = np.array([domain.lo[0], domain.hi[0]])
    else:
        lo, hi = domain.lo, domain.hi
        region = np.array([[lo[0], lo[1]], [hi[0], lo[1]], [hi[0], hi[1]], [lo[0], hi[1]]])
    rows, offs = [], []
    for j in order:
        if j == i:
            continue
        q = sites[j]
        gap = np.linalg.norm(q - p)
        if dim == 1:
            reach = np.abs(region - p[0]).max()
        else:
            if len(region) == 0:
                break
            reach = np.linalg.norm(region - p, axis=1).max()
        if gap > 2 * reach + EPS:
            break
        n = 2.0 * (q - p)
        off = float(q @ q - p @ p)
        rows.append(n)
        offs.append(off)
        if dim == 1:
            bound = off / n[0]
            if n[0] > 0:
                region[1] = min(region[1], bound)
            else:
                region[0] = max(region[0], bound)
        else:
            region = clip_polygon(region, n, off)
    A = np.vstack([box_A] + [np.atleast_2d(r) for r in rows]) if rows else box_A
    b = np.concatenate([box_b, offs]) if rows else box_b
    return _intersect_arrays(A, b, dim)


def voronoi_partition(sites: Sequence, domain: Optional[Box] = None) -> Partition:
    """Voronoi cells of ``sites`` clipped to ``domain`` (default the unit box).

    Each cell keeps only the bisectors that support one of its facets.
    Cells are ordered like the sites.
    """
    sites = np.asarray(sites, dtype=float)
    if sites.ndim == 1:
        sites = sites[:, None]
    dim = sites.shape[1]
    if dim not in (1, 2):
        raise DimensionMismatch(f"Voronoi partitions support dimension 1 or 2, got {dim}")
    if len(sites) == 0:
        raise ValueError("at least one site is required")
    domain = domain if domain is not None else Box.unit(dim)
    if domain.dim != dim:
        raise DimensionMismatch("site and domain dimensions differ")
    _check_sites(sites, domain)
    box_A, box_b = domain.constraints()
    tree = cKDTree(sites)
    _, neighbor_order = tree.query(sites, k=len(sites))
    neighbor_order = np.asarray(neighbor_order).reshape(len(sites), -1)
    cells = [
        _voronoi_cell(i, sites, neighbor_order[i], domain, box_A, box_b) for i in range(len(sites))
    ]
    return Partition(dim, domain, cells, sites=sites, kind=VORONOI)


def grid_partition(counts: Sequence[int], domain: Optional[Box] = None) -> Partition:
    """Axis-aligned grid with ``counts[i]`` cells along axis ``i``, in row-major order."""
    counts = tuple(int(c) for c in counts)
    dim = len(counts)
    if any(c < 1 for c in counts):
        raise ValueError("grid counts must be positive")
    domain = domain if domain is not None else Box.unit(dim)
    if domain.dim != dim:
        raise DimensionMismatch("grid counts and domain dimensions differ")
    step = (domain.hi - domain.lo) / np.array(counts)
    cells, centers = [], []
    for idx in np.ndindex(*counts):
        idx = np.array(idx)
        lo = domain.lo + idx * step
        hi = np.where(idx + 1 == np.array(counts), domain.hi, domain.lo + (idx + 1) * step)
        cells.append(box_polytope(Box(lo, hi)))
        centers.append((lo + hi) / 2)
    return Partition(dim, domain, cells, sites=np.array(centers), kind=GRID, counts=counts)


def cells_partition(cells: Sequence[ConvexPolytope], domain: Box) -> Partition:
    """Wrap an arbitrary list of cells; ``locate`` then tests containment."""
    cells = list(cells)
    for c in cells:
        if c.dim != domain.dim:
            raise DimensionMismatch("cell and domain dimensions differ")
    return Partition(domain.dim, domain, cells, kind=CELLS)


def locate_many(partition: Partition, X) -> np.ndarray:
    """Vectorized :func:`locate`."""
    X = np.asarray(X, dtype=float).reshape(-1, partition.dim)
    dom = partition.domain
    outside = np.any((X < dom.lo - EPS) | (X > dom.hi + EPS), axis=1)
    if outside.any():
        raise PointOutsideDomain(f"point {X[np.argmax(outside)].tolist()} lies outside the domain")
    if partition.kind == GRID:
        counts = np.array(partition.counts)
        step = (dom.hi - dom.lo) / counts
        idx = np.clip(np.floor((X - dom.lo) / step).astype(np.int64), 0, counts - 1)
        return np.ravel_multi_index(tuple(idx.T), partition.counts)
    if partition.kind == VORONOI:
        out = np.empty(len(X), dtype=np.int64)
        sites = partition.sites
        sq = (sites**2).sum(axis=1)
        chunk = max(1, 2_000_000 // max(1, len(sites)))
        for s in range(0, len(X), chunk):
            Y = X[s : s + chunk]
            # |x - p|^2 up to the per-point constant |x|^2
            d2 = sq[None, :] - 2.0 * Y @ sites.T
            out[s : s + chunk] = np.argmin(d2, axis=1)
        return out
    out = np.full(len(X), -1, dtype=np.int64)
    for k, cell in enumerate(partition.cells):
        free = out < 0
        if not free.any():
            break
        hit = contains_many(cell, X[free])
        out[np.flatnonzero(free)[hit]] = k
    if np.any(out < 0):
        raise PointOutsideDomain("point not covered by any cell")
    return out


def locate(partition: Partition, x) -> int:
    """Index of the cell holding ``x``; Voronoi ties go to the lowest index."""
    return int(locate_many(partition, np.asarray(x, dtype=float).reshape(1, -1))[0])
