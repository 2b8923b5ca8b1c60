import numpy as np
import pytest

from west.geometry import BBox, voronoi_partition


@pytest.fixture
def grid2x2():
    """Four unit squares tiling [0, 2]^2 (index order: BL, BR, TL, TR)."""
    return voronoi_partition([(0.5, 0.5), (1.5, 0.5), (0.5, 1.5), (1.5, 1.5)], BBox(0, 0, 2, 2))


@pytest.fixture
def six_regions():
    rng = np.random.default_rng(3)
    centers = rng.uniform(0.5, 9.5, size=(6, 2))
    return voronoi_partition(centers, BBox(0, 0, 10, 10))


@pytest.fixture
def path_adjacency():
    """Binary adjacency of a 5-node path graph."""
    a = np.zeros((5, 5))
    for i in range(4):
        a[i, i + 1] = a[i + 1, i] = 1.0
    return a
