import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import settings

sys.path.insert(0, str(Path(__file__).parent))

from telab.net import Topology, TrafficMatrix, select_tunnels

settings.register_profile("suite", deadline=None, max_examples=50)
settings.load_profile("suite")


@pytest.fixture(scope="session")
def two_origin_topology() -> Topology:
    """Two origins sharing a relief path through a middle node; all
    capacities 1.  Each origin reaches D directly or via C."""
    return Topology(
        ["A", "B", "C", "D"],
        [("A", "D", 1.0), ("B", "D", 1.0), ("A", "C", 1.0), ("B", "C", 1.0), ("C", "D", 1.0)],
    )


@pytest.fixture(scope="session")
def two_origin_tunnels(two_origin_topology):
    return select_tunnels(two_origin_topology, 2)


@pytest.fixture(scope="session")
def two_origin_demands(two_origin_topology):
    """The two equally likely demand draws: (A, B) demand (5/3, 5/6) or
    swapped."""
    n = two_origin_topology.node_index

    def tm(da, db):
        m = np.zeros((4, 4))
        m[n["A"], n["D"]] = da
        m[n["B"], n["D"]] = db
        return TrafficMatrix(m)

    return [tm(5.0 / 3.0, 5.0 / 6.0), tm(5.0 / 6.0, 5.0 / 3.0)]
