import numpy as np
import pytest

from semfusion import geometry as geo
from semfusion.semantics_core import LabelSet
from semfusion.surfel_map import MapParams, SurfelMap


@pytest.fixture
def labels2():
    return LabelSet(("a", "b"))


@pytest.fixture
def nyu():
    return LabelSet.nyu13()


@pytest.fixture
def small_intr():
    """10x10 camera with the principal point on the central pixel corner."""
    return geo.Intrinsics(10.0, 10.0, 4.5, 4.5, 10, 10)


def plane_frame(intr, depth=2.0, colour=(100, 150, 200)):
    """Fronto-parallel plane filling the view."""
    d = np.full((intr.height, intr.width), depth)
    rgb = np.empty((intr.height, intr.width, 3), dtype=np.uint8)
    rgb[:] = colour
    return rgb, d


def random_map(rng, n, labels=3, spread=0.2, params=None):
    """Map of ``n`` surfels with random features and Dirichlet distributions."""
    smap = SurfelMap(LabelSet(tuple(f"c{i}" for i in range(labels))), params or MapParams())
    pos = rng.uniform(-spread, spread, (n, 3))
    nrm = rng.normal(size=(n, 3))
    nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
    col = rng.uniform(0, 255, (n, 3))
    probs = rng.dirichlet(np.ones(labels), n)
    smap.add_surfels(pos, nrm, col, 0.01, 0, probs=np.clip(probs, 1e-12, None) / np.clip(probs, 1e-12, None).sum(1, keepdims=True))
    return smap
