from pathlib import Path

import numpy as np
import pytest

from network import DemandSpec, Link, Network, link_utilities, make_grid_network, toy_network

ROOT = Path(__file__).resolve().parent.parent
DATA_DIR = ROOT / "data"

# 예제 네트워크 기준 흐름 (링크 1-6)
TOY_BASE_FLOWS = [0.424, 0.576, 0.288, 0.288, 0.0, 0.0]
TOY_LINK4_FLOWS = [0.445, 0.555, 0.342, 0.214, 0.0, 0.0]
TOY_LINK4_RATIOS = [1.047, 0.965, 1.187, 0.743]
TOY_GEOMETRY_FLOWS = [0.381, 0.619, 0.310, 0.310]
TOY_MODIFIED_FLOWS = [0.38972, 0.52796, 0.26398, 0.26398, 0.0, 0.08232]
TOY_MNL_FLOWS = [0.3313, 0.6626, 0.3313, 0.3313, 0.0, 0.0061]
TOY_PSL_FLOWS = [0.4039, 0.5887, 0.2943, 0.2943, 0.0, 0.0074]


def parallel_network(costs, lengths=None) -> Network:
    """A → B 병렬 링크, 특성 cost (β = -1 이면 u = -cost)"""
    lengths = lengths or [1.0] * len(costs)
    links = [Link(id=f"p{k + 1}", tail="A", head="B", length=l, features=(c,))
             for k, (c, l) in enumerate(zip(costs, lengths))]
    return Network(links, feature_names=["cost"])


def chain_network(nodes, length=1.0) -> Network:
    links = [Link(id=f"{a}{b}", tail=a, head=b, length=length, features=(1.0,))
             for a, b in zip(nodes, nodes[1:])]
    return Network(links, feature_names=["cost"])


@pytest.fixture
def toy():
    return toy_network()


@pytest.fixture
def toy_modified():
    return toy_network(u6=-1.25)


@pytest.fixture
def toy_u(toy):
    return link_utilities(toy, [-1.0])


@pytest.fixture
def od_toy():
    return DemandSpec(origin="O", destination="D")


@pytest.fixture
def grid():
    return make_grid_network(5, 5, seed=11)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
