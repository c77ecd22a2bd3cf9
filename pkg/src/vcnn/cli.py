"""Command-line interface.

Exit codes: 0 ok, 1 usage, 2 partition, 3 geometry, 4 shape, 5 verification,
6 gradient.
"""
from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import coupling, formats, network, raster
from .errors import (
    DomainMismatch,
    FormatError,
    GeometryError,
    PartitionError,
    PartitionMismatch,
    ShapeMismatch,
    VCNNError,
)
from .geometry import Box

EXIT_OK, EXIT_USAGE, EXIT_PARTITION, EXIT_GEOMETRY, EXIT_SHAPE, EXIT_VERIFY, EXIT_GRADIENT = range(7)
DEFAULT_CACHE = ".vcnn-cache"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _resolution(text: str):
    try:
        w, h = (int(t) for t in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"resolution must look like 256x256, got {text!r}") from None
    if w < 1 or h < 1:
        raise argparse.ArgumentTypeError("resolution must be positive")
    return w, h


def _counts(text: str):
    try:
        return [int(t) for t in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"grid counts must look like 8,8, got {text!r}") from None


def _say(msg=""):
    print(msg, flush=True)


# ------------------------------------------------------------------ partition


def cmd_partition(args) -> int:
    from .voronoi import grid_partition, voronoi_partition

    if (args.sites is None) == (args.grid is None):
        raise UsageError("give exactly one of --sites or --grid")
    if args.sites is not None:
        sites = formats.load_sites(args.sites)
        domain = formats.parse_domain(args.domain) if args.domain else Box.unit(sites.shape[1])
        part = voronoi_partition(sites, domain)
    else:
        domain = formats.parse_domain(args.domain) if args.domain else Box.unit(len(args.grid))
        part = grid_partition(args.grid, domain)
    formats.save_partition(args.out, part)
    _say(f"cells: {part.cell_count}")
    _say(f"total volume: {part.volumes.sum():.12g} (domain {domain.volume:.12g})")
    if args.figure:
        from .plotting import plot_partition

        plot_partition(part, args.figure)
        _say(f"figure: {args.figure}")
    return EXIT_OK


# ------------------------------------------------------------------ ktensor


def cmd_ktensor(args) -> int:
    inp = formats.load_partition(args.input)
    ker = formats.load_partition(args.kernel)
    out = formats.load_partition(args.output)
    t0 = time.perf_counter()
    K, path, hit = coupling.cached_coupling(inp, ker.cells, out, args.cache_dir, workers=args.workers)
    dt = time.perf_counter() - t0
    _say("cache hit" if hit else "cache miss: computed")
    _say(f"entries: {K.nnz}")
    _say(f"sparsity: {1.0 - K.density:.6f} ({K.nnz} of {K.u_count * K.v_count * K.w_count} triples nonzero)")
    _say(f"wall time: {dt:.3f} s")
    _say(f"cache file: {path}")
    if K.nnz == 0:
        print("warning: coupling tensor is empty; kernel cells never connect input and output cells", file=sys.stderr)
    return EXIT_OK


# ------------------------------------------------------------------ infer


def _load_input(args, net):
    if args.cellfn:
        values = formats.read_tensor(args.cellfn)
        if values.ndim == 1:
            values = values[:, None]
        if values.ndim != 2:
            raise FormatError(f"{args.cellfn}: cell function blob must be (cells, channels)")
        return network.CellFunction(net.input_partition, values)
    path = Path(args.image)
    if path.suffix.lower() == ".png":
        img = raster.load_png(path, domain=net.domain)
    else:
        vals = formats.read_tensor(path)
        img = raster.GridImage(vals, net.domain)
    return raster.discretize(img, net.input_partition)


def _input_channels(args):
    if args.cellfn:
        arr = formats.read_tensor(args.cellfn)
        return 1 if arr.ndim == 1 else arr.shape[-1]
    path = Path(args.image)
    if path.suffix.lower() == ".png":
        return raster.load_png(path).channels
    arr = formats.read_tensor(path)
    return 1 if arr.ndim == 2 else arr.shape[-1]


def _apply_normalize(net, flag):
    if flag is None:
        return
    for layer in net.layers:
        if layer.kind in (network.CONV, network.POOL):
            layer.normalize = flag


def _render(f, prefix: str, resolution):
    if f.partition.dim != 2 or f.channels == 0:
        return None
    img = raster.rasterize(f, *resolution)
    if img.channels > 4:
        img = raster.GridImage(img.values[:, :, :3], img.domain)
    path = f"{prefix}.png"
    raster.save_png(img, path)
    return path


def _stage_row(k, kind, f):
    v = f.values
    stats = (v.min(), v.max(), v.mean()) if v.size else (0.0, 0.0, 0.0)
    return (k, kind, f.partition.cell_count, f.channels, *(f"{s:.12g}" for s in stats))


def cmd_infer(args) -> int:
    if (args.image is None) == (args.cellfn is None):
        raise UsageError("give exactly one of --image or --cellfn")
    net = formats.load_network(args.network, in_channels=_input_channels(args), seed=args.seed)
    _apply_normalize(net, args.normalize)
    x = _load_input(args, net)
    t0 = time.perf_counter()
    tensors = network.prepare_tensors(net, cache_dir=args.cache_dir, workers=args.workers, log=_say)
    _say(f"tensors ready in {time.perf_counter() - t0:.3f} s")
    net.channels(x.channels)
    parts = net.partitions()
    stages = [network._as_network_input(net, x)]
    # timings go to stdout only so the CSV stays byte-identical across runs
    rows = [("stage", "kind", "cells", "channels", "min", "max", "mean")]
    _say(f"input: {x.partition.cell_count} cells x {x.channels} channels")
    rows.append(_stage_row(0, "input", x))
    for i, layer in enumerate(net.layers):
        t = time.perf_counter()
        try:
            y = network._apply(layer, i, stages[-1], stages, tensors, parts[i + 1])
        except ShapeMismatch as exc:
            if exc.layer is None:
                raise ShapeMismatch(str(exc), layer=i) from exc
            raise
        except PartitionMismatch as exc:
            raise ShapeMismatch(str(exc), layer=i) from exc
        dt = time.perf_counter() - t
        stages.append(y)
        _say(f"layer {i} ({layer.kind}): {y.partition.cell_count} cells x {y.channels} channels, {dt * 1e3:.2f} ms")
        rows.append(_stage_row(i + 1, layer.kind, y))
    prefix = args.out_prefix
    Path(prefix).parent.mkdir(parents=True, exist_ok=True)
    formats.write_tensor(f"{prefix}.vcnt", stages[-1].values)
    _say(f"output: {prefix}.vcnt")
    if args.dump_intermediates:
        for k, s in enumerate(stages):
            formats.write_tensor(f"{prefix}.stage{k}.vcnt", s.values)
    png = _render(stages[-1], prefix, args.resolution)
    if png:
        _say(f"render: {png}")
    if args.report:
        with open(f"{prefix}.layers.csv", "w", newline="") as fh:
            csv.writer(fh).writerows(rows)
        from .plotting import plot_cell_function

        for k, s in enumerate(stages):
            plot_cell_function(s, f"{prefix}.stage{k}.fig.png", title=f"stage {k}")
        _say(f"report: {prefix}.layers.csv")
    return EXIT_OK


# ------------------------------------------------------------------ rasterize


def cmd_rasterize(args) -> int:
    part = formats.load_partition(args.partition)
    values = formats.read_tensor(args.cellfn)
    f = network.CellFunction(part, values)
    img = raster.rasterize(f, *args.resolution)
    if str(args.out).endswith(".vcnt"):
        formats.write_tensor(args.out, img.values)
    else:
        raster.save_png(img, args.out)
    _say(f"wrote {args.out} ({img.width}x{img.height}, {img.channels} channels)")
    return EXIT_OK


# ------------------------------------------------------------------ verify


def verify_entries(inp, ker_cells, out, K, samples, seed, subset):
    """Monte Carlo re-estimation of (a subset of) the stored entries.

    Each z-score uses the estimator's standard error at the stored value, see
    ``coupling.null_stderr``.  Returns ``(rows, max_z)`` where each row is ``(u, v, w, exact, estimate, stderr, z)``.
    """
    rng = np.random.default_rng(seed)
    idx = np.arange(K.nnz)
    if subset and subset < K.nnz:
        idx = np.sort(rng.choice(K.nnz, size=subset, replace=False))
    groups = {}
    for k in idx:
        groups.setdefault((int(K.u[k]), int(K.v[k])), []).append(int(k))
    rows = []
    for (u, v), ks in sorted(groups.items()):
        Ws = [out.cells[int(K.w[k])] for k in ks]
        est, _ = coupling.monte_carlo_coupling_many(inp.cells[u], ker_cells[v], Ws, samples, seed=[seed, u, v])
        exact = K.values[ks]
        err = coupling.null_stderr(exact, inp.cells[u], ker_cells[v], samples)
        for k, x, e, s in zip(ks, exact, est, err):
            if s > 0:
                z = abs(x - e) / s
            else:
                z = 0.0 if x == e else float("inf")
            rows.append((u, v, int(K.w[k]), float(x), float(e), float(s), float(z)))
    rows.sort(key=lambda r: (r[2], r[1], r[0]))
    max_z = max((r[6] for r in rows), default=0.0)
    return rows, max_z


def cmd_verify(args) -> int:
    if args.samples < 1000:
        raise UsageError("--samples must be at least 1000")
    inp = formats.load_partition(args.input)
    ker = formats.load_partition(args.kernel)
    out = formats.load_partition(args.output)
    hashes = (coupling.partition_hash(inp), coupling.partition_hash(ker), coupling.partition_hash(out))
    path = Path(args.cache) if args.cache else Path(args.cache_dir) / f"{coupling.cache_key(hashes)}.vcnk"
    if not path.exists():
        raise UsageError(f"coupling cache {path} does not exist; run ktensor first")
    K = coupling.read_coupling(path)
    if K.hashes != hashes:
        _say("FAIL: cache does not belong to the given partitions")
        return EXIT_VERIFY
    subset = 0 if args.all else args.subset
    t0 = time.perf_counter()
    rows, max_z = verify_entries(inp, ker.cells, out, K, args.samples, args.seed, subset)
    ok = max_z <= args.threshold
    _say(f"checked {len(rows)} of {K.nnz} entries with {args.samples} samples each ({time.perf_counter() - t0:.2f} s)")
    _say(f"max |exact - estimate| / stderr: {max_z:.3f}")
    _say(f"{'PASS' if ok else 'FAIL'} at {args.threshold:g} sigma")
    if args.report:
        prefix = args.report
        with open(f"{prefix}.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(("u", "v", "w", "exact", "estimate", "stderr", "z"))
            w.writerows(rows)
        from .plotting import plot_verification

        arr = np.array([r[3:6] for r in rows]).reshape(-1, 3)
        plot_verification(arr[:, 0], arr[:, 1], arr[:, 2], f"{prefix}.png", threshold=args.threshold)
        _say(f"report: {prefix}.csv, {prefix}.png")
    return EXIT_OK if ok else EXIT_VERIFY


# ------------------------------------------------------------------ grad-check


def cmd_gradcheck(args) -> int:
    from .gradcheck import check_network

    doc_path = Path(args.network)
    try:
        doc = json.loads(doc_path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{doc_path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    channels = int(doc.get("channels", args.channels))
    net = formats.network_from_json(doc, base=doc_path.parent, in_channels=channels, seed=args.seed)
    _apply_normalize(net, args.normalize)
    net.channels(channels)
    rng = np.random.default_rng(args.seed)
    x = network.CellFunction(net.input_partition, rng.standard_normal((net.input_partition.cell_count, channels)))
    tensors = network.prepare_tensors(net, cache_dir=args.cache_dir)
    report = check_network(net, x, tensors, seed=args.seed, h=args.h)
    worst = 0.0
    for key, err in report.items():
        label = f"layer {key} ({net.layers[key].kind})" if key != "input" else "input"
        _say(f"{label}: max relative error {err:.3e}")
        worst = max(worst, err)
    ok = worst <= args.tolerance
    _say(f"max relative error: {worst:.3e} ({'PASS' if ok else 'FAIL'} at {args.tolerance:g})")
    return EXIT_OK if ok else EXIT_GRADIENT


# ------------------------------------------------------------------ main


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="vcnn", description="Voronoi convolutional networks")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p):
        p.add_argument("--seed", type=int, default=0)

    def normalize(p):
        p.add_argument("--normalize", dest="normalize", action="store_true", default=None,
                       help="force 1/|W| averaging on every conv and pool layer")
        p.add_argument("--no-normalize", dest="normalize", action="store_false")

    p = sub.add_parser("partition", help="build a Voronoi or grid partition")
    p.add_argument("--sites", help="JSON list of points")
    p.add_argument("--grid", type=_counts, help="grid counts, e.g. 8,8")
    p.add_argument("--domain", help='"x0,y0,x1,y1" (default unit box)')
    p.add_argument("--out", required=True)
    p.add_argument("--figure", help="also render the partition to this image file")
    common(p)
    p.set_defaults(func=cmd_partition)

    p = sub.add_parser("ktensor", help="precompute a coupling tensor into the cache")
    p.add_argument("--input", required=True)
    p.add_argument("--kernel", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--cache-dir", default=DEFAULT_CACHE)
    p.add_argument("--workers", type=int, default=1)
    common(p)
    p.set_defaults(func=cmd_ktensor)

    p = sub.add_parser("infer", help="run a network on an image or cell function")
    p.add_argument("--network", required=True)
    p.add_argument("--image")
    p.add_argument("--cellfn")
    p.add_argument("--out-prefix", required=True)
    p.add_argument("--dump-intermediates", action="store_true")
    p.add_argument("--resolution", type=_resolution, default=(256, 256))
    p.add_argument("--cache-dir", default=DEFAULT_CACHE)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--report", action="store_true", help="write a per-layer CSV and stage figures")
    normalize(p)
    common(p)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("rasterize", help="render a cell function to a grid image")
    p.add_argument("--partition", required=True)
    p.add_argument("--cellfn", required=True)
    p.add_argument("--resolution", type=_resolution, default=(256, 256))
    p.add_argument("--out", required=True, help=".png (with JSON sidecar) or .vcnt")
    common(p)
    p.set_defaults(func=cmd_rasterize)

    p = sub.add_parser("verify", help="Monte Carlo check of a cached coupling tensor")
    p.add_argument("--input", required=True)
    p.add_argument("--kernel", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--cache", help="explicit .vcnk file (default: looked up in --cache-dir)")
    p.add_argument("--cache-dir", default=DEFAULT_CACHE)
    p.add_argument("--samples", type=int, default=100_000)
    p.add_argument("--subset", type=int, default=64, help="entries to check (0 = all)")
    p.add_argument("--all", action="store_true")
    p.add_argument("--threshold", type=float, default=4.0)
    p.add_argument("--report", help="prefix for a CSV report and a figure")
    common(p)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("grad-check", help="analytic vs finite-difference gradients")
    p.add_argument("--network", required=True)
    p.add_argument("--channels", type=int, default=1, help="input channels if the network file omits them")
    p.add_argument("--h", type=float, default=1e-5)
    p.add_argument("--tolerance", type=float, default=1e-5)
    p.add_argument("--cache-dir", default=None)
    normalize(p)
    common(p)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"vcnn {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FormatError as exc:
        print(f"vcnn {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except PartitionError as exc:
        print(f"vcnn {args.command}: partition error: {exc}", file=sys.stderr)
        return EXIT_PARTITION
    except (ShapeMismatch, PartitionMismatch) as exc:
        print(f"vcnn {args.command}: shape error: {exc}", file=sys.stderr)
        return EXIT_SHAPE
    except (GeometryError, DomainMismatch) as exc:
        print(f"vcnn {args.command}: geometry error: {exc}", file=sys.stderr)
        return EXIT_GEOMETRY
    except VCNNError as exc:
        print(f"vcnn {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FileNotFoundError, IsADirectoryError) as exc:
        print(f"vcnn {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
