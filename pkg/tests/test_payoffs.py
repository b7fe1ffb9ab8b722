"""
Tests for payoffs.py
"""
import numpy as np
import pytest

from payoffs import (
    asian_payoff,
    call_payoff,
    check_continuity,
    check_nonnegative,
    constant_payoff,
    custom_payoff,
    lookback_payoff,
    payoff_from_dict,
    put_payoff,
)
from utils import ParameterError

PATHS = np.array([
    [1.0, 1.2, 0.9],
    [1.0, 0.8, 1.3],
])


def test_standard_payoffs():
    np.testing.assert_allclose(call_payoff(1.0)(PATHS), [0.0, 0.3])
    np.testing.assert_allclose(put_payoff(1.0)(PATHS), [0.1, 0.0])
    np.testing.assert_allclose(lookback_payoff()(PATHS), [1.2, 1.3])
    np.testing.assert_allclose(constant_payoff(2.0)(PATHS), [2.0, 2.0])


def test_asian_averages_dates_after_start():
    np.testing.assert_allclose(asian_payoff(1.0)(PATHS), [0.05, 0.05])


def test_terminal_only_flags():
    assert call_payoff(1.0).terminal_only
    assert constant_payoff(1.0).terminal_only
    assert not lookback_payoff().terminal_only
    assert not asian_payoff(1.0).terminal_only


def test_custom_payoff_shape_is_checked():
    bad = custom_payoff(lambda paths: paths)
    with pytest.raises(ParameterError):
        bad(PATHS)
    good = custom_payoff(lambda paths: paths[:, 1] * 2)
    np.testing.assert_allclose(good(PATHS), [2.4, 1.6])
    assert not good.convex_in_path


def test_negative_constant_rejected():
    with pytest.raises(ParameterError):
        constant_payoff(-1.0)


def test_from_dict():
    assert payoff_from_dict({'kind': 'call', 'strike': 1.1}).params['strike'] == 1.1
    assert payoff_from_dict({'kind': 'lookback_max'}).kind == 'lookback_max'
    with pytest.raises(ParameterError) as excinfo:
        payoff_from_dict({'kind': 'call', 'strike': 1.0, 'barrier': 2.0})
    assert excinfo.value.field == 'payoff.barrier'
    with pytest.raises(ParameterError):
        payoff_from_dict({'kind': 'digital'})
    with pytest.raises(ParameterError):
        payoff_from_dict({'kind': 'put'})


def test_checks():
    assert check_nonnegative(call_payoff(1.0), PATHS)
    assert not check_nonnegative(custom_payoff(lambda p: p[:, -1] - 1.0), PATHS)
    assert check_continuity(lookback_payoff(), PATHS)
    digital = custom_payoff(lambda p: (p[:, -1] >= 1.3).astype(float))
    at_strike = np.tile([1.0, 1.0, 1.3], (50, 1))
    assert not check_continuity(digital, at_strike, rng=np.random.default_rng(3))
