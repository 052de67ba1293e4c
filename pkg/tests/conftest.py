import sys
from pathlib import Path

import pytest

SRC = Path(__file__).resolve().parent.parent / "src"
sys.path.insert(0, str(SRC))

from core.grid_io import Branch, Bus, BusKind, GridCase, build_graph, load_case  # noqa: E402

CASES = SRC / "cases"


def graph_from_edges(n, edges):
    """GridGraph of an arbitrary edge list, through a throwaway case."""
    buses = tuple(Bus(i + 1, BusKind.SLACK if i == 0 else BusKind.PQ, 0.0, 0.0, 1.0 if i == 0 else None, 0.9, 1.1)
                  for i in range(n))
    branches = tuple(Branch(i + 1, j + 1, 0.0, 0.1, 0.0, 0.0) for i, j in edges)
    return build_graph(GridCase(100.0, buses, (), branches))


@pytest.fixture(scope="session")
def smib():
    return load_case(CASES / "smib.case")


@pytest.fixture(scope="session")
def three_bus():
    return load_case(CASES / "three_bus.case")


@pytest.fixture(scope="session")
def three_machine():
    return load_case(CASES / "three_machine.case")


@pytest.fixture(scope="session")
def ieee68():
    return load_case(CASES / "ieee68.case")


@pytest.fixture(scope="session")
def area140():
    return load_case(CASES / "area140.case")


@pytest.fixture
def cases_dir():
    return CASES
