"""Convolutions and pooling on functions that are constant on the cells of convex partitions."""
from .coupling import CouplingTensor, cached_coupling, compute_coupling, compute_overlaps, monte_carlo_coupling
from .errors import VCNNError
from .geometry import Box, ConvexPolytope, Halfspace, coupling_polytope, intersect_halfspaces, volume
from .network import (
    CellFunction,
    KernelSpec,
    LayerSpec,
    NetworkSpec,
    activation,
    backward_params,
    concat,
    conv_backward,
    conv_forward,
    forward,
    mixup,
    pool_backward,
    pool_forward,
    prepare_tensors,
)
from .raster import GridImage, discretize, rasterize
from .voronoi import Partition, grid_partition, locate, voronoi_partition

__version__ = "0.1.0"
