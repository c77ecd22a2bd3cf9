import numpy as np
import pytest

from vcnn.geometry import Box, box_polytope
from vcnn.voronoi import grid_partition, voronoi_partition


def interval_partition(n, start=0.0):
    """Unit intervals [start + i, start + i + 1) for i < n."""
    return grid_partition([n], Box([start], [start + n]))


def one_d_kernel():
    return grid_partition([3], Box([0.0], [3.0])).cells


def random_box(rng, dim, lo=-1.0, span=1.0):
    a = rng.uniform(lo, lo + 2, size=dim)
    return box_polytope(Box(a, a + rng.uniform(0.2, span, size=dim)))


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(scope="session")
def voronoi20():
    return voronoi_partition(np.random.default_rng(0).random((20, 2)), Box.unit(2))


@pytest.fixture(scope="session")
def kernel2x2():
    return grid_partition([2, 2], Box([-0.2, -0.2], [0.2, 0.2])).cells
