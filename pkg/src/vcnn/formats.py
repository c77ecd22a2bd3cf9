"""On-disk formats: VCNT tensor blobs, partition JSON and network spec JSON.

VCNT layout (little-endian)::

    b"VCNT"  u32 rank  u64 dims[rank]  f64 data[prod(dims)]   (C order)
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError, ShapeMismatch
from .geometry import Box, _intersect_arrays, box_polytope
from .network import (
    ACTIVATION,
    CONCAT,
    CONV,
    MIXUP,
    POOL,
    KernelSpec,
    LayerSpec,
    NetworkSpec,
)
from .voronoi import CELLS, GRID, VORONOI, Partition, cells_partition, grid_partition, voronoi_partition

TENSOR_MAGIC = b"VCNT"
PARTITION_FORMAT = "vcnn-partition"


# ------------------------------------------------------------------ tensors


def tensor_bytes(array) -> bytes:
    a = np.ascontiguousarray(array, dtype="<f8")
    head = TENSOR_MAGIC + struct.pack("<I", a.ndim) + struct.pack(f"<{a.ndim}Q", *a.shape)
    return head + a.tobytes()


def write_tensor(path, array) -> None:
    Path(path).write_bytes(tensor_bytes(array))


def read_tensor(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:4] != TENSOR_MAGIC:
        raise FormatError(f"{path}: not a VCNT tensor")
    (rank,) = struct.unpack_from("<I", data, 4)
    dims = struct.unpack_from(f"<{rank}Q", data, 8)
    offset = 8 + 8 * rank
    count = int(np.prod(dims)) if rank else 1
    if len(data) - offset != 8 * count:
        raise FormatError(f"{path}: payload size does not match shape {dims}")
    return np.frombuffer(data, dtype="<f8", offset=offset).reshape(dims).astype(float)


# ------------------------------------------------------------------ boxes / domains


def parse_domain(text: str) -> Box:
    """``"x0,y0,x1,y1"`` (or ``"x0,x1"`` in 1D) to a Box."""
    try:
        vals = [float(t) for t in text.split(",")]
    except ValueError:
        raise FormatError(f"bad domain {text!r}") from None
    if len(vals) % 2 or not vals:
        raise FormatError(f"domain needs an even number of values, got {text!r}")
    d = len(vals) // 2
    return Box(vals[:d], vals[d:])


def box_to_json(box: Box) -> dict:
    return {"lo": box.lo.tolist(), "hi": box.hi.tolist()}


def box_from_json(doc) -> Box:
    if isinstance(doc, str):
        return parse_domain(doc)
    if isinstance(doc, (list, tuple)):
        return parse_domain(",".join(str(x) for x in doc))
    return Box(doc["lo"], doc["hi"])


# ------------------------------------------------------------------ partitions


def partition_to_json(p: Partition) -> dict:
    cells = []
    for cell, vol in zip(p.cells, p.volumes):
        rows = np.hstack([cell.A, cell.b[:, None]]).tolist()
        cells.append({"halfspaces": rows, "volume": float(vol)})
    doc = {
        "format": PARTITION_FORMAT,
        "dim": p.dim,
        "kind": p.kind,
        "domain": box_to_json(p.domain),
    }
    if p.sites is not None:
        doc["sites"] = p.sites.tolist()
    if p.counts is not None:
        doc["counts"] = list(p.counts)
    doc["cells"] = cells
    doc["total_volume"] = float(p.volumes.sum())
    return doc


def partition_from_json(doc: dict) -> Partition:
    if doc.get("format") != PARTITION_FORMAT:
        raise FormatError("not a vcnn partition document")
    dim = int(doc["dim"])
    domain = box_from_json(doc["domain"])
    kind = doc.get("kind", CELLS)
    if kind == GRID:
        return grid_partition(doc["counts"], domain)
    cells = []
    for c in doc["cells"]:
        rows = np.asarray(c["halfspaces"], dtype=float).reshape(-1, dim + 1)
        cells.append(_intersect_arrays(rows[:, :dim], rows[:, dim], dim))
    if kind == VORONOI:
        return Partition(dim, domain, cells, sites=np.asarray(doc["sites"], dtype=float).reshape(-1, dim), kind=VORONOI)
    return cells_partition(cells, domain)


def save_partition(path, p: Partition) -> None:
    Path(path).write_text(json.dumps(partition_to_json(p), indent=1) + "\n")


def load_partition(path) -> Partition:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    return partition_from_json(doc)


def load_sites(path):
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    if isinstance(doc, dict):
        doc = doc.get("sites")
    sites = np.asarray(doc, dtype=float)
    if sites.ndim == 1:
        sites = sites[:, None]
    if sites.ndim != 2 or len(sites) == 0:
        raise FormatError(f"{path}: expected a non-empty list of points")
    return sites


# ------------------------------------------------------------------ networks


def _partition_ref(doc: dict, prefix: str, domain: Box, base: Path):
    """Partition described by ``<prefix>_sites``, ``<prefix>_grid`` or ``<prefix>_partition``."""
    if f"{prefix}_sites" in doc:
        sites = doc[f"{prefix}_sites"]
        if isinstance(sites, str):
            sites = load_sites(base / sites)
        return voronoi_partition(sites, domain)
    if f"{prefix}_grid" in doc:
        return grid_partition(doc[f"{prefix}_grid"], domain)
    if f"{prefix}_partition" in doc:
        return load_partition(base / doc[f"{prefix}_partition"])
    return None


def _kernel_cells(doc, dim: int, base: Path):
    if "grid" in doc:
        return grid_partition(doc["grid"], box_from_json(doc)).cells
    if "boxes" in doc:
        return [box_polytope(box_from_json(b)) for b in doc["boxes"]]
    if "partition" in doc:
        return load_partition(base / doc["partition"]).cells
    if "cells" in doc:
        out = []
        for c in doc["cells"]:
            rows = np.asarray(c, dtype=float).reshape(-1, dim + 1)
            out.append(_intersect_arrays(rows[:, :dim], rows[:, dim], dim))
        return out
    raise FormatError("kernel needs one of 'grid', 'boxes', 'partition' or 'cells'")


def _weights(doc, base: Path, shape, rng):
    if "weights_file" in doc:
        return read_tensor(base / doc["weights_file"])
    if "weights" in doc:
        return np.asarray(doc["weights"], dtype=float)
    if "matrix" in doc:
        return np.asarray(doc["matrix"], dtype=float)
    fan_in = int(np.prod(shape[:-1]))
    return rng.standard_normal(shape) / np.sqrt(max(1, fan_in))


def network_from_json(doc: dict, base=".", in_channels=None, seed: int = 0) -> NetworkSpec:
    """Build a NetworkSpec; missing weights are drawn from a generator seeded by ``(seed, layer)``.

    ``in_channels`` (or the document's ``channels``) is needed only when some
    layer has no explicit weights.
    """
    base = Path(base)
    if "domain" not in doc:
        raise FormatError("network document needs a 'domain'")
    domain = box_from_json(doc["domain"])
    inp = _partition_ref(doc, "input", domain, base)
    if inp is None:
        raise FormatError("network document needs input_sites, input_grid or input_partition")
    channels = doc.get("channels", in_channels)
    layers = []
    stage_channels = [channels]
    for i, ld in enumerate(doc.get("layers", [])):
        kind = ld.get("kind")
        current = stage_channels[-1]
        rng = np.random.default_rng([seed, i])
        try:
            if kind == CONV:
                cells = _kernel_cells(ld["kernel"], domain.dim, base)
                shape = (len(cells), current or 1, int(ld.get("out_channels", 1)))
                layer = LayerSpec(
                    CONV,
                    kernel=KernelSpec(cells, _weights(ld, base, shape, rng)),
                    output=_partition_ref(ld, "output", domain, base),
                    normalize=bool(ld.get("normalize", True)),
                )
                current = layer.kernel.out_channels
            elif kind == POOL:
                out = _partition_ref(ld, "output", domain, base)
                if out is None:
                    raise FormatError(f"layer {i}: pool layer needs an output partition")
                layer = LayerSpec(POOL, output=out, normalize=bool(ld.get("normalize", True)))
            elif kind == MIXUP:
                M = _weights(ld, base, (current or 1, int(ld.get("out_channels", 1))), rng)
                if M.ndim != 2:
                    raise ShapeMismatch(f"mixup matrix must be 2-D, got shape {M.shape}", layer=i)
                layer = LayerSpec(MIXUP, matrix=M)
                current = M.shape[1]
            elif kind == CONCAT:
                partner = int(ld["partner"])
                if not 0 <= partner <= i:
                    raise ShapeMismatch(f"concat partner {partner} is not an earlier stage", layer=i)
                layer = LayerSpec(CONCAT, partner=partner)
                other = stage_channels[partner]
                current = current + other if current is not None and other is not None else None
            elif kind == ACTIVATION:
                layer = LayerSpec(ACTIVATION, activation=ld.get("name", ld.get("activation", "relu")))
            else:
                raise FormatError(f"layer {i}: unknown kind {kind!r}")
        except KeyError as exc:
            raise FormatError(f"layer {i}: missing field {exc.args[0]!r}") from None
        except ShapeMismatch as exc:
            if exc.layer is None:
                raise ShapeMismatch(str(exc), layer=i) from None
            raise
        layers.append(layer)
        stage_channels.append(current)
    net = NetworkSpec(domain, inp, layers)
    if channels is not None:
        net.channels(channels)
    return net


def load_network(path, in_channels=None, seed: int = 0) -> NetworkSpec:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    return network_from_json(doc, base=path.parent, in_channels=in_channels, seed=seed)
