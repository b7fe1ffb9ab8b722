"""
Shared fixtures for the engine tests
"""
import os
import sys
import math

import pytest

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from costs import proportional_cost, quadratic_cost, zero_cost  # noqa: E402
from lattice import ModelParams, build_tree  # noqa: E402
from payoffs import call_payoff  # noqa: E402

LN2 = math.log(2)


@pytest.fixture
def ln2_params():
    """One-period binomial model with up factor 2 and down factor 1/2"""
    return ModelParams(s0=1.0, N=1, sigma_low=LN2, sigma_high=LN2)


@pytest.fixture
def ln2_tree(ln2_params):
    return build_tree(ln2_params)


@pytest.fixture
def band_params():
    return ModelParams(s0=1.0, N=2, sigma_low=0.1, sigma_high=0.2, k=1)


@pytest.fixture
def four_branch_tree(band_params):
    return build_tree(band_params)


@pytest.fixture
def call_atm():
    return call_payoff(1.0)


@pytest.fixture
def frictionless():
    return zero_cost()


@pytest.fixture
def proportional_10():
    return proportional_cost(0.1)


@pytest.fixture
def quadratic_1():
    return quadratic_cost(1.0)

