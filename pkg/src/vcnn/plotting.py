"""Matplotlib figures written next to the CLI's CSV reports."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib.collections import PolyCollection  # noqa: E402

from .geometry import ordered_polygon  # noqa: E402

# Fixed metadata keeps re-rendered PNGs byte-identical.
_SAVE_KW = {"dpi": 100, "metadata": {"Software": None}}


def _finish(fig, path):
    fig.tight_layout()
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)


def plot_cell_function(f, path, channel: int = 0, title: str | None = None, show_sites: bool = True):
    """Filled cells colored by one channel of ``f``; 1D functions become step plots."""
    p = f.partition
    fig, ax = plt.subplots(figsize=(5, 4.2))
    vals = f.values[:, channel] if f.channels else np.zeros(p.cell_count)
    if p.dim == 1:
        for cell, v in zip(p.cells, vals):
            x = cell.vertices[:, 0]
            ax.hlines(v, x.min(), x.max(), color="C0")
        ax.set_xlim(p.domain.lo[0], p.domain.hi[0])
        ax.set_xlabel("x")
        ax.set_ylabel(f"channel {channel}")
    else:
        polys = [ordered_polygon(c) for c in p.cells]
        coll = PolyCollection(polys, array=vals, cmap="viridis", edgecolors="k", linewidths=0.3)
        ax.add_collection(coll)
        fig.colorbar(coll, ax=ax, shrink=0.85)
        if show_sites and p.sites is not None and p.cell_count <= 400:
            ax.plot(p.sites[:, 0], p.sites[:, 1], "k.", ms=2)
        ax.set_xlim(p.domain.lo[0], p.domain.hi[0])
        ax.set_ylim(p.domain.lo[1], p.domain.hi[1])
        ax.set_aspect("equal")
    if title:
        ax.set_title(title)
    _finish(fig, path)


def plot_partition(p, path, title: str | None = None):
    from .network import CellFunction

    plot_cell_function(CellFunction(p, p.volumes[:, None]), path, title=title or "cell volumes")


def plot_verification(exact, estimate, stderr, path, threshold: float = 4.0):
    """Exact vs Monte Carlo scatter and the z-score histogram."""
    exact = np.asarray(exact)
    estimate = np.asarray(estimate)
    stderr = np.asarray(stderr)
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(stderr > 0, (exact - estimate) / stderr, np.where(exact == estimate, 0.0, np.inf))
    fig, (a1, a2) = plt.subplots(1, 2, figsize=(9, 4))
    a1.errorbar(exact, estimate, yerr=threshold * stderr, fmt=".", ms=3, elinewidth=0.5)
    if len(exact):
        hi = float(max(exact.max(), estimate.max()))
        a1.plot([0, hi], [0, hi], "k--", lw=0.8)
    a1.set_xlabel("exact volume")
    a1.set_ylabel("Monte Carlo estimate")
    finite = z[np.isfinite(z)]
    a2.hist(finite, bins=30, color="C1")
    a2.axvline(threshold, color="r", lw=0.8)
    a2.axvline(-threshold, color="r", lw=0.8)
    a2.set_xlabel("(exact - estimate) / stderr")
    _finish(fig, path)
