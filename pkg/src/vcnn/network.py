"""VCNN layers on cell functions, a sequential forward pass, and reverse-mode
parameter gradients for fixed partitions.

Channel convention: a cell value is a row vector of length m and a kernel
matrix has shape (m, n), so convolution maps ``f(U) -> kappa(V)^T f(U)``.
All coupling and overlap volumes are constants of the network.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy import sparse

from .coupling import CouplingTensor, OverlapMatrix, compute_coupling, compute_overlaps, cached_coupling
from .errors import MissingCouplingTensor, PartitionMismatch, ShapeMismatch, UnknownActivation
from .geometry import Box, ConvexPolytope
from .voronoi import Partition


@dataclass(eq=False)
class CellFunction:
    """Piecewise-constant function: one row of ``values`` per partition cell."""

    partition: Partition
    values: np.ndarray

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        if vals.ndim == 1:
            vals = vals[:, None]
        if vals.ndim != 2 or vals.shape[0] != self.partition.cell_count:
            raise ShapeMismatch(
                f"values of shape {vals.shape} do not match {self.partition.cell_count} cells"
            )
        if not np.all(np.isfinite(vals)):
            raise ValueError("cell values must be finite")
        self.values = vals

    @property
    def channels(self) -> int:
        return self.values.shape[1]


@dataclass(eq=False)
class KernelSpec:
    """Kernel cells V and one (m, n) matrix per cell."""

    cells: list
    weights: np.ndarray

    def __post_init__(self):
        self.cells = list(self.cells)
        w = np.asarray(self.weights, dtype=float)
        if w.ndim != 3 or w.shape[0] != len(self.cells) or len(self.cells) == 0:
            raise ShapeMismatch(f"kernel weights of shape {w.shape} for {len(self.cells)} cells")
        if not np.all(np.isfinite(w)):
            raise ValueError("kernel weights must be finite")
        self.weights = w

    @property
    def in_channels(self) -> int:
        return self.weights.shape[1]

    @property
    def out_channels(self) -> int:
        return self.weights.shape[2]


# ------------------------------------------------------------------ activations


def _relu(x):
    return np.maximum(x, 0.0)


def _relu_grad(x):
    return (x > 0).astype(float)


ACTIVATIONS: dict[str, tuple[Callable, Callable]] = {
    "relu": (_relu, _relu_grad),
    "identity": (lambda x: x.copy(), np.ones_like),
    "tanh": (np.tanh, lambda x: 1.0 - np.tanh(x) ** 2),
}


def register_activation(name: str, fn: Callable, grad: Callable) -> None:
    ACTIVATIONS[name] = (fn, grad)


def _activation_pair(name):
    try:
        return ACTIVATIONS[name]
    except KeyError:
        raise UnknownActivation(f"unknown activation {name!r}") from None


# ------------------------------------------------------------------ sparse helpers


def _coupling_slices(K: CouplingTensor):
    """One sparse (u_count, w_count) matrix per kernel cell."""
    cached = getattr(K, "_slices", None)
    if cached is not None:
        return cached
    out = []
    for v in range(K.v_count):
        sel = K.v == v
        out.append(
            sparse.csr_matrix((K.values[sel], (K.u[sel], K.w[sel])), shape=(K.u_count, K.w_count))
        )
    K._slices = out
    return out


def _overlap_matrix(O: OverlapMatrix, out_volumes=None):
    """CSR overlaps; with ``out_volumes`` each column is divided by |W| first.

    Dividing the weights rather than the pooled result makes identity pooling
    exact, since each weight is then exactly 1.
    """
    if out_volumes is None:
        cached = getattr(O, "_csr", None)
        if cached is None:
            cached = O._csr = sparse.csr_matrix((O.values, (O.v, O.w)), shape=(O.rows, O.cols))
        return cached
    cached = getattr(O, "_csr_avg", None)
    if cached is None:
        vals = O.values / np.asarray(out_volumes)[O.w]
        cached = O._csr_avg = sparse.csr_matrix((vals, (O.v, O.w)), shape=(O.rows, O.cols))
    return cached


def _check_coupling(f: CellFunction, kernel: KernelSpec, K: Optional[CouplingTensor], output: Partition):
    if K is None:
        raise MissingCouplingTensor("no coupling tensor supplied for this convolution")
    if (K.u_count, K.v_count, K.w_count) != (f.partition.cell_count, len(kernel.cells), output.cell_count):
        raise ShapeMismatch(
            f"coupling tensor {K.u_count}x{K.v_count}x{K.w_count} does not match "
            f"{f.partition.cell_count} inputs, {len(kernel.cells)} kernel cells, {output.cell_count} outputs"
        )
    if f.channels != kernel.in_channels:
        raise ShapeMismatch(f"input has {f.channels} channels, kernel expects {kernel.in_channels}")


# ------------------------------------------------------------------ layers


def conv_forward(f: CellFunction, kernel: KernelSpec, K: CouplingTensor, output: Partition, normalize: bool = True) -> CellFunction:
    """g(W_w) = sum_{u,v} K[u,v,w] kappa(V_v)^T f(U_u), divided by |W_w| if ``normalize``."""
    _check_coupling(f, kernel, K, output)
    g = np.zeros((output.cell_count, kernel.out_channels))
    for v, C in enumerate(_coupling_slices(K)):
        if C.nnz:
            g += C.T @ (f.values @ kernel.weights[v])
    if normalize:
        g /= output.volumes[:, None]
    return CellFunction(output, g)


def conv_backward(f: CellFunction, kernel: KernelSpec, K: CouplingTensor, output: Partition, grad_out, normalize: bool = True):
    """Return ``(grad_f, grad_weights)`` for upstream gradient ``grad_out``."""
    _check_coupling(f, kernel, K, output)
    G = np.asarray(grad_out, dtype=float)
    if normalize:
        G = G / output.volumes[:, None]
    grad_f = np.zeros_like(f.values)
    grad_w = np.zeros_like(kernel.weights)
    for v, C in enumerate(_coupling_slices(K)):
        if C.nnz:
            CG = C @ G
            grad_w[v] = f.values.T @ CG
            grad_f += CG @ kernel.weights[v].T
    return grad_f, grad_w


def activation(f: CellFunction, name: str) -> CellFunction:
    fn, _ = _activation_pair(name)
    return CellFunction(f.partition, fn(f.values))


def activation_backward(f: CellFunction, name: str, grad_out):
    _, grad = _activation_pair(name)
    return grad(f.values) * grad_out


def pool_forward(f: CellFunction, overlaps: OverlapMatrix, output: Partition, normalize: bool = True) -> CellFunction:
    """Average pooling g(W_w) = sum_v |V_v ∩ W_w| f(V_v), divided by |W_w| if ``normalize``."""
    if overlaps is None:
        raise MissingCouplingTensor("no overlap matrix supplied for this pooling layer")
    if (overlaps.rows, overlaps.cols) != (f.partition.cell_count, output.cell_count):
        raise ShapeMismatch("overlap matrix does not match the partitions")
    M = _overlap_matrix(overlaps, output.volumes if normalize else None)
    return CellFunction(output, np.asarray(M.T @ f.values))


def pool_backward(f: CellFunction, overlaps: OverlapMatrix, output: Partition, grad_out, normalize: bool = True):
    M = _overlap_matrix(overlaps, output.volumes if normalize else None)
    return np.asarray(M @ np.asarray(grad_out, dtype=float))


def mixup(f: CellFunction, M) -> CellFunction:
    """Per-cell ``M^T value``; the VCNN analogue of a 1x1 convolution."""
    M = np.asarray(M, dtype=float)
    if M.ndim != 2 or M.shape[0] != f.channels:
        raise ShapeMismatch(f"mixup matrix of shape {M.shape} for {f.channels} channels")
    return CellFunction(f.partition, f.values @ M)


def concat(f: CellFunction, g: CellFunction) -> CellFunction:
    if f.partition is not g.partition:
        raise PartitionMismatch("concat needs both functions on the same partition")
    return CellFunction(f.partition, np.hstack([f.values, g.values]))


# ------------------------------------------------------------------ networks

CONV, POOL, MIXUP, CONCAT, ACTIVATION = "conv", "pool", "mixup", "concat", "activation"


@dataclass(eq=False)
class LayerSpec:
    """One transition layer.

    ``partner`` for concat is a stage index: 0 is the network input and
    ``i`` is the output of layer ``i - 1`` (so layer ``l`` may reference
    stages ``0..l``).  ``output`` of None keeps the incoming partition.
    """

    kind: str
    kernel: Optional[KernelSpec] = None
    output: Optional[Partition] = None
    normalize: bool = True
    matrix: Optional[np.ndarray] = None
    partner: Optional[int] = None
    activation: Optional[str] = None


@dataclass(eq=False)
class NetworkSpec:
    domain: Box
    input_partition: Partition
    layers: list = field(default_factory=list)

    def partitions(self) -> list:
        """Partition of every stage (input first)."""
        parts = [self.input_partition]
        for layer in self.layers:
            if layer.kind in (CONV, POOL) and layer.output is not None:
                parts.append(layer.output)
            else:
                parts.append(parts[-1])
        return parts

    def channels(self, in_channels: int) -> list:
        """Channel count of every stage; raises ShapeMismatch naming the layer."""
        chans = [in_channels]
        for i, layer in enumerate(self.layers):
            m = chans[-1]
            if layer.kind == CONV:
                if layer.kernel.in_channels != m:
                    raise ShapeMismatch(f"kernel expects {layer.kernel.in_channels} channels, got {m}", layer=i)
                chans.append(layer.kernel.out_channels)
            elif layer.kind == MIXUP:
                if layer.matrix.shape[0] != m:
                    raise ShapeMismatch(f"mixup matrix expects {layer.matrix.shape[0]} channels, got {m}", layer=i)
                chans.append(layer.matrix.shape[1])
            elif layer.kind == CONCAT:
                if layer.partner is None or not 0 <= layer.partner <= i:
                    raise ShapeMismatch(f"concat partner {layer.partner} is not an earlier stage", layer=i)
                chans.append(m + chans[layer.partner])
            elif layer.kind in (POOL, ACTIVATION):
                chans.append(m)
            else:
                raise ShapeMismatch(f"unknown layer kind {layer.kind!r}", layer=i)
        return chans


def prepare_tensors(net: NetworkSpec, cache_dir=None, workers: int = 1, log=None) -> dict:
    """Coupling tensors / overlap matrices for every conv and pool layer, keyed by layer index."""
    parts = net.partitions()
    tensors = {}
    for i, layer in enumerate(net.layers):
        src, dst = parts[i], parts[i + 1]
        if layer.kind == CONV:
            if cache_dir is not None:
                K, _, hit = cached_coupling(src, layer.kernel.cells, dst, cache_dir, workers=workers)
                if log:
                    log(f"layer {i}: coupling tensor {'cache hit' if hit else 'computed'} ({K.nnz} entries)")
            else:
                K = compute_coupling(src, layer.kernel.cells, dst, workers=workers)
            tensors[i] = K
        elif layer.kind == POOL:
            tensors[i] = compute_overlaps(src, dst)
    return tensors


def _apply(layer: LayerSpec, i: int, x: CellFunction, stages, tensors, dst: Partition) -> CellFunction:
    if layer.kind == CONV:
        return conv_forward(x, layer.kernel, tensors.get(i), dst, layer.normalize)
    if layer.kind == POOL:
        return pool_forward(x, tensors.get(i), dst, layer.normalize)
    if layer.kind == MIXUP:
        return mixup(x, layer.matrix)
    if layer.kind == CONCAT:
        return concat(x, stages[layer.partner])
    if layer.kind == ACTIVATION:
        return activation(x, layer.activation)
    raise ShapeMismatch(f"unknown layer kind {layer.kind!r}", layer=i)


def _as_network_input(net: NetworkSpec, inp: CellFunction) -> CellFunction:
    if inp.partition is net.input_partition:
        return inp
    if inp.partition.cell_count != net.input_partition.cell_count:
        raise ShapeMismatch(
            f"input has {inp.partition.cell_count} cells, network expects {net.input_partition.cell_count}"
        )
    return CellFunction(net.input_partition, inp.values)


def forward(net: NetworkSpec, inp: CellFunction, tensors: Optional[dict] = None, keep_intermediates: bool = False):
    """Run the layer stack.  Returns the output, or all stages when ``keep_intermediates``."""
    if tensors is None:
        tensors = prepare_tensors(net)
    parts = net.partitions()
    stages = [_as_network_input(net, inp)]
    for i, layer in enumerate(net.layers):
        try:
            stages.append(_apply(layer, i, stages[-1], stages, tensors, parts[i + 1]))
        except ShapeMismatch as exc:
            if exc.layer is None:
                raise ShapeMismatch(str(exc), layer=i) from exc
            raise
    return stages if keep_intermediates else stages[-1]


@dataclass
class Gradients:
    """Parameter gradients keyed by layer index, plus the input gradient."""

    params: dict
    input: np.ndarray


def backward_params(net: NetworkSpec, inp: CellFunction, upstream, tensors: Optional[dict] = None, stages=None) -> Gradients:
    """Reverse-mode gradients of a scalar loss given ``upstream = dL/d(output)``.

    Conv layers yield (e, m, n) kernel gradients, mixup layers (m, n) matrix
    gradients.  ReLU uses subgradient 0 at 0.
    """
    if tensors is None:
        tensors = prepare_tensors(net)
    if stages is None:
        stages = forward(net, inp, tensors, keep_intermediates=True)
    parts = net.partitions()
    grads = [np.zeros_like(s.values) for s in stages]
    up = np.asarray(upstream, dtype=float)
    if up.shape != stages[-1].values.shape:
        raise ShapeMismatch(f"upstream gradient of shape {up.shape} for output {stages[-1].values.shape}")
    grads[-1] = grads[-1] + up
    params = {}
    for i in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[i]
        x = stages[i]
        G = grads[i + 1]
        if layer.kind == CONV:
            gx, gw = conv_backward(x, layer.kernel, tensors.get(i), parts[i + 1], G, layer.normalize)
            params[i] = gw
            grads[i] += gx
        elif layer.kind == POOL:
            grads[i] += pool_backward(x, tensors.get(i), parts[i + 1], G, layer.normalize)
        elif layer.kind == MIXUP:
            params[i] = x.values.T @ G
            grads[i] += G @ layer.matrix.T
        elif layer.kind == CONCAT:
            m = x.channels
            grads[i] += G[:, :m]
            grads[layer.partner] += G[:, m:]
        elif layer.kind == ACTIVATION:
            grads[i] += activation_backward(x, layer.activation, G)
    return Gradients(params, grads[0])


def parameter_arrays(net: NetworkSpec) -> dict:
    """The trainable arrays (views) keyed by layer index."""
    out = {}
    for i, layer in enumerate(net.layers):
        if layer.kind == CONV:
            out[i] = layer.kernel.weights
        elif layer.kind == MIXUP:
            out[i] = layer.matrix
    return out
