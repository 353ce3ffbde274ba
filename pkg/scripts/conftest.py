"""
Shared pytest fixtures for the fevolve suites
"""

import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pytest

ROOT = Path(__file__).resolve().parent.parent
if str(ROOT) not in sys.path:
    sys.path.insert(0, str(ROOT))

from mesh_basis import GramMatrix, Projector, assemble_gram, build_projector, build_tensor_grid  # noqa: E402
from operator_factory import (  # noqa: E402
    DiscreteOperator,
    FactoredOperator,
    assemble_operator,
    build_difference_factor,
)


@dataclass
class Setup:
    proj: Projector
    mass: GramMatrix
    fo: FactoredOperator
    S: DiscreteOperator


def make_setup(bounds, h, bc="dirichlet") -> Setup:
    proj = build_projector(build_tensor_grid(bounds, h, bc))
    mass = assemble_gram(proj)
    fo = build_difference_factor(proj, mass)
    return Setup(proj=proj, mass=mass, fo=fo, S=assemble_operator(fo))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def line8():
    return make_setup((0.0, 1.0), 1 / 8)


@pytest.fixture(scope="session")
def line16():
    return make_setup((0.0, 1.0), 1 / 16)


@pytest.fixture(scope="session")
def square8():
    return make_setup([(0.0, 1.0), (0.0, 1.0)], 1 / 8)


@pytest.fixture
def setup_factory():
    return make_setup
