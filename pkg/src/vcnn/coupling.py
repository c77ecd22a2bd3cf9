"""Sparse coupling tensors K[u, v, w] and pooling overlaps |V_v ∩ W_w|.

``K[u, v, w]`` is the volume of ``{(x, y) : x in V_v, y in U_u, x + y in W_w}``,
i.e. how much input cell ``u`` contributes to output cell ``w`` through
kernel cell ``v``.  Triples whose bounding boxes cannot meet are skipped
before any exact geometry is done.
"""
from __future__ import annotations

import hashlib
import os
import struct
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import DimensionMismatch, FormatError, UnboundedRegion
from .geometry import (
    Box,
    ConvexPolytope,
    _intersect_arrays,
    bounding_box,
    contains_many,
    coupling_polytope,
    volume,
)
from .voronoi import Partition

# Entries at or below this absolute volume are sliver noise and not stored.
DROP_THRESHOLD = 1e-14

MAGIC = b"VCNK"
VERSION = 1
_HEADER = struct.Struct("<4sIIIIIQ32s32s32s")
RECORD_DTYPE = np.dtype([("u", "<u4"), ("v", "<u4"), ("w", "<u4"), ("value", "<f8")])


@dataclass(eq=False)
class CouplingTensor:
    """COO storage of K, sorted by (w, v, u); zeros are never stored."""

    dim: int
    u_count: int
    v_count: int
    w_count: int
    u: np.ndarray
    v: np.ndarray
    w: np.ndarray
    values: np.ndarray
    hashes: tuple = (b"\0" * 32,) * 3

    @property
    def nnz(self) -> int:
        return len(self.values)

    @property
    def density(self) -> float:
        total = self.u_count * self.v_count * self.w_count
        return self.nnz / total if total else 0.0

    def get(self, u, v, w) -> float:
        hit = (self.u == u) & (self.v == v) & (self.w == w)
        return float(self.values[hit][0]) if hit.any() else 0.0

    def as_dict(self) -> dict:
        return {(int(a), int(b), int(c)): float(x) for a, b, c, x in zip(self.u, self.v, self.w, self.values)}

    def dense(self) -> np.ndarray:
        out = np.zeros((self.u_count, self.v_count, self.w_count))
        out[self.u, self.v, self.w] = self.values
        return out


@dataclass(eq=False)
class OverlapMatrix:
    """Sparse |V_v ∩ W_w| for input cells v (rows) and output cells w (cols)."""

    rows: int
    cols: int
    v: np.ndarray
    w: np.ndarray
    values: np.ndarray

    def dense(self) -> np.ndarray:
        out = np.zeros((self.rows, self.cols))
        out[self.v, self.w] = self.values
        return out


def _sorted_tensor(dim, counts, u, v, w, vals, hashes=None) -> CouplingTensor:
    u = np.asarray(u, dtype=np.int64)
    v = np.asarray(v, dtype=np.int64)
    w = np.asarray(w, dtype=np.int64)
    vals = np.asarray(vals, dtype=float)
    order = np.lexsort((u, v, w))
    K = CouplingTensor(dim, *counts, u[order], v[order], w[order], vals[order])
    if hashes is not None:
        K.hashes = tuple(hashes)
    return K


def prefilter(U_box: Box, V_box: Box, W_box: Box) -> bool:
    """False only when ``U_box + V_box`` misses ``W_box``, so K is provably zero."""
    if not (U_box.dim == V_box.dim == W_box.dim):
        raise DimensionMismatch("prefilter boxes differ in dimension")
    lo = U_box.lo + V_box.lo
    hi = U_box.hi + V_box.hi
    return bool(np.all(lo <= W_box.hi) and np.all(W_box.lo <= hi))


def _box_arrays(cells):
    """Bounding-box corners per cell; empty cells get an inverted (never matching) box."""
    d = cells[0].dim
    lo = np.full((len(cells), d), np.inf)
    hi = np.full((len(cells), d), -np.inf)
    for i, c in enumerate(cells):
        if volume(c) > 0:
            bb = bounding_box(c)
            lo[i], hi[i] = bb.lo, bb.hi
    return lo, hi


def _coupling_chunk(args):
    U_cells, V_cells, W_cells, w_indices, boxes = args
    (ulo, uhi), (vlo, vhi), (wlo, whi) = boxes
    out_u, out_v, out_w, out_val = [], [], [], []
    for w in w_indices:
        W = W_cells[w]
        for v, V in enumerate(V_cells):
            # U must meet the box W_box - V_box
            lo = wlo[w] - vhi[v]
            hi = whi[w] - vlo[v]
            cand = np.flatnonzero(np.all(ulo <= hi, axis=1) & np.all(uhi >= lo, axis=1))
            for u in cand:
                vol = volume(coupling_polytope(U_cells[u], V, W))
                if vol > DROP_THRESHOLD:
                    out_u.append(u)
                    out_v.append(v)
                    out_w.append(w)
                    out_val.append(vol)
    return out_u, out_v, out_w, out_val


def compute_coupling(
    inp: Partition,
    kernel_cells: Sequence[ConvexPolytope],
    out: Partition,
    workers: int = 1,
) -> CouplingTensor:
    """Exact sparse coupling tensor between an input partition, kernel cells and an output partition.

    Parameters
    ----------
    inp, out : Partition
        Input cells U and output cells W.
    kernel_cells : sequence of ConvexPolytope
        Kernel support cells V; any finite list of bounded cells.
    workers : int
        Process count for the triple loop.  The result does not depend on it.
    """
    kernel_cells = list(kernel_cells)
    a = inp.dim
    if out.dim != a or any(c.dim != a for c in kernel_cells):
        raise DimensionMismatch("input, kernel and output cells must share one dimension")
    for c in kernel_cells:
        if not c.enumerated:
            raise UnboundedRegion("kernel cells must be enumerated bounded polytopes")
    counts = (len(inp.cells), len(kernel_cells), len(out.cells))
    hashes = (partition_hash(inp), cells_hash(kernel_cells, a), partition_hash(out))
    if not kernel_cells or not inp.cells or not out.cells:
        return _sorted_tensor(a, counts, [], [], [], [], hashes)
    boxes = (_box_arrays(inp.cells), _box_arrays(kernel_cells), _box_arrays(out.cells))
    w_all = np.arange(len(out.cells))
    if workers <= 1:
        chunks = [_coupling_chunk((inp.cells, kernel_cells, out.cells, w_all, boxes))]
    else:
        parts = np.array_split(w_all, workers * 4)
        jobs = [(inp.cells, kernel_cells, out.cells, p, boxes) for p in parts if len(p)]
        with ProcessPoolExecutor(max_workers=workers) as ex:
            chunks = list(ex.map(_coupling_chunk, jobs))
    u, v, w, vals = ([x for c in chunks for x in c[i]] for i in range(4))
    return _sorted_tensor(a, counts, u, v, w, vals, hashes)


def compute_overlaps(inp: Partition, out: Partition) -> OverlapMatrix:
    """Sparse matrix of intersection volumes between input and output cells."""
    if inp.dim != out.dim:
        raise DimensionMismatch("pooling partitions differ in dimension")
    if inp is out or (inp.cell_count == out.cell_count and partition_hash(inp) == partition_hash(out)):
        # same geometry: the overlap of a cell with itself is its own volume
        idx = np.arange(out.cell_count, dtype=np.int64)
        vols = out.volumes.copy()
        keep = vols > DROP_THRESHOLD
        return OverlapMatrix(inp.cell_count, out.cell_count, idx[keep], idx[keep], vols[keep])
    ilo, ihi = _box_arrays(inp.cells)
    olo, ohi = _box_arrays(out.cells)
    rows_v, rows_w, vals = [], [], []
    for w, W in enumerate(out.cells):
        cand = np.flatnonzero(np.all(ilo <= ohi[w], axis=1) & np.all(ihi >= olo[w], axis=1))
        for v in cand:
            V = inp.cells[v]
            P = _intersect_arrays(np.vstack([V.A, W.A]), np.concatenate([V.b, W.b]), inp.dim, check_bounded=False, prune=False)
            vol = volume(P)
            if vol > DROP_THRESHOLD:
                rows_v.append(v)
                rows_w.append(w)
                vals.append(vol)
    v = np.asarray(rows_v, dtype=np.int64)
    w = np.asarray(rows_w, dtype=np.int64)
    order = np.lexsort((v, w))
    return OverlapMatrix(len(inp.cells), len(out.cells), v[order], w[order], np.asarray(vals, dtype=float)[order])


def monte_carlo_coupling_many(U, V, Ws, samples: int, seed: int, chunk: int = 1 << 17):
    """Monte Carlo estimates of the coupling volume for one (U, V) and several W.

    ``x`` is drawn uniformly from the bounding box of V and ``y`` from that of
    U; a sample hits when ``x in V``, ``y in U`` and ``x + y in W``.  All W
    share the same samples.  Returns ``(estimates, stderrs)`` arrays.
    """
    if samples < 1000:
        raise ValueError("Monte Carlo estimation needs at least 1000 samples")
    Ws = list(Ws)
    est = np.zeros(len(Ws))
    if volume(U) == 0 or volume(V) == 0:
        return est, np.zeros(len(Ws))
    ub, vb = bounding_box(U), bounding_box(V)
    box_volume = ub.volume * vb.volume
    rng = np.random.default_rng(seed)
    hits = np.zeros(len(Ws), dtype=np.int64)
    done = 0
    while done < samples:
        n = min(chunk, samples - done)
        x = rng.uniform(vb.lo, vb.hi, size=(n, V.dim))
        y = rng.uniform(ub.lo, ub.hi, size=(n, U.dim))
        base = contains_many(V, x) & contains_many(U, y)
        s = x[base] + y[base]
        for i, W in enumerate(Ws):
            hits[i] += int(np.count_nonzero(contains_many(W, s)))
        done += n
    p = hits / samples
    est = box_volume * p
    stderr = box_volume * np.sqrt(p * (1 - p) / samples)
    return est, stderr


def null_stderr(exact, U, V, samples: int):
    """Standard error of the Monte Carlo estimator if ``exact`` is the true volume.

    Unlike the plug-in error it does not collapse to zero when a tiny entry
    gets no hits, so ``|exact - estimate| / null_stderr`` is a proper z-score.
    """
    box_volume = bounding_box(U).volume * bounding_box(V).volume
    p0 = np.clip(np.asarray(exact, dtype=float) / box_volume, 0.0, 1.0)
    return box_volume * np.sqrt(p0 * (1 - p0) / samples)


def monte_carlo_coupling(U, V, W, samples: int, seed: int):
    """Seeded Monte Carlo estimate ``(estimate, stderr)`` of one coupling volume."""
    est, err = monte_carlo_coupling_many(U, V, [W], samples, seed)
    return float(est[0]), float(err[0])


# ---------------------------------------------------------------- hashing / cache


def _cell_digest(h, cell: ConvexPolytope):
    if cell.enumerated and cell.empty_flag:
        h.update(b"E")
        return
    rows = np.hstack([cell.A, cell.b[:, None]])
    q = np.round(rows * 1e12).astype(np.int64)
    q = q[np.lexsort(q.T[::-1])]
    h.update(b"C")
    h.update(struct.pack("<I", len(q)))
    h.update(q.astype("<i8").tobytes())


def cells_hash(cells: Sequence[ConvexPolytope], dim: int) -> bytes:
    """SHA-256 over the cells' halfspace coefficients rounded to 1e-12."""
    h = hashlib.sha256()
    h.update(struct.pack("<II", dim, len(cells)))
    for c in cells:
        _cell_digest(h, c)
    return h.digest()


def partition_hash(partition: Partition) -> bytes:
    return cells_hash(partition.cells, partition.dim)


def write_coupling(path, K: CouplingTensor) -> None:
    """Write ``K`` in the little-endian VCNK format (atomic replace)."""
    path = Path(path)
    header = _HEADER.pack(MAGIC, VERSION, K.dim, K.u_count, K.v_count, K.w_count, K.nnz, *K.hashes)
    rec = np.empty(K.nnz, dtype=RECORD_DTYPE)
    rec["u"], rec["v"], rec["w"], rec["value"] = K.u, K.v, K.w, K.values
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".vcnk-")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(header)
            f.write(rec.tobytes())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_coupling(path) -> CouplingTensor:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise FormatError(f"{path}: truncated coupling header")
    magic, version, dim, uc, vc, wc, nnz, h1, h2, h3 = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    body = data[_HEADER.size :]
    if len(body) != nnz * RECORD_DTYPE.itemsize:
        raise FormatError(f"{path}: expected {nnz} records")
    rec = np.frombuffer(body, dtype=RECORD_DTYPE)
    return CouplingTensor(
        dim, uc, vc, wc,
        rec["u"].astype(np.int64), rec["v"].astype(np.int64), rec["w"].astype(np.int64),
        rec["value"].astype(float), (h1, h2, h3),
    )


def cache_key(hashes) -> str:
    return hashlib.sha256(b"".join(hashes)).hexdigest()[:32]


def cached_coupling(inp: Partition, kernel_cells, out: Partition, cache_dir, workers: int = 1):
    """Load K from ``cache_dir`` or compute and store it.

    Returns ``(K, path, hit)``.
    """
    hashes = (partition_hash(inp), cells_hash(list(kernel_cells), inp.dim), partition_hash(out))
    path = Path(cache_dir) / f"{cache_key(hashes)}.vcnk"
    if path.exists():
        try:
            K = read_coupling(path)
            if K.hashes == hashes:
                return K, path, True
        except FormatError:
            pass
    K = compute_coupling(inp, kernel_cells, out, workers=workers)
    write_coupling(path, K)
    return K, path, False
