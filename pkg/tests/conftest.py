import numpy as np
import pytest

from alevem.mesh import PolygonalMesh, generate_cvt, generate_disk_cvt
from alevem.vem_core import VemSpace


def unit_square():
    return PolygonalMesh([(0, 0), (1, 0), (1, 1), (0, 1)], [[0, 1, 2, 3]], domain_area=1.0)


def regular_hexagon(radius=1.0):
    th = np.arange(6) * np.pi / 3
    return PolygonalMesh(np.column_stack([radius * np.cos(th), radius * np.sin(th)]), [list(range(6))])


@pytest.fixture
def square_mesh():
    return unit_square()


@pytest.fixture(scope="session")
def cvt100():
    return generate_cvt(100, lloyd_iterations=50, rng_seed=0)


@pytest.fixture(scope="session")
def cvt_spaces(cvt100):
    return {k: VemSpace(cvt100, k) for k in (1, 2, 3)}


@pytest.fixture(scope="session")
def disk60():
    return generate_disk_cvt(60)
