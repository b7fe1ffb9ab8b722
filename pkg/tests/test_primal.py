"""
Tests for primal.py: LP and holding-grid DP backends, ledgers and verification
"""
import math

import numpy as np
import pytest

from costs import proportional_cost, zero_cost
from lattice import ModelParams, binomial_tree, build_tree, prices_from_returns, sample_returns
from payoffs import call_payoff, constant_payoff, lookback_payoff, put_payoff
from primal import (
    GridConfig,
    Strategy,
    apriori_bound,
    binomial_price,
    build_holding_grid,
    solve_primal,
    solve_primal_dp,
    solve_primal_lp,
    terminal_wealth,
    verify_superreplication,
    wealth_ledger,
)
from utils import CapacityError, DomainError, ParameterError, ShapeError


class TestClosedForms:
    @pytest.mark.parametrize('backend', ['lp', 'dp'])
    def test_frictionless_binomial_call(self, ln2_tree, frictionless, call_atm, backend):
        solution = solve_primal(ln2_tree, frictionless, call_atm, backend)
        assert solution.value == pytest.approx(1 / 3, abs=1e-8)
        assert solution.strategy.holding(0, 0) == pytest.approx(2 / 3, abs=1e-6)

    @pytest.mark.parametrize('backend', ['lp', 'dp'])
    def test_proportional_binomial_call(self, ln2_tree, proportional_10, call_atm, backend):
        solution = solve_primal(ln2_tree, proportional_10, call_atm, backend)
        assert solution.value == pytest.approx(0.4, abs=1e-8)

    @pytest.mark.parametrize('backend', ['lp', 'dp'])
    def test_constant_payoff(self, four_branch_tree, proportional_10, backend):
        solution = solve_primal(four_branch_tree, proportional_10, constant_payoff(2.0), backend)
        assert solution.value == pytest.approx(2.0, abs=1e-9)

    def test_dp_report(self, ln2_tree, quadratic_1, call_atm):
        solution = solve_primal_dp(ln2_tree, quadratic_1, call_atm)
        report = solution.report.to_dict()
        assert report['backend'] == 'dp'
        assert report['leaves'] == 2
        assert report['grid_error_bound'] >= 0
        assert report['solver_iterations'] == 0

    def test_one_period_quadratic_optimum(self, ln2_tree, quadratic_1, call_atm):
        # y(gamma) = gamma^2 + max(1 - gamma, gamma / 2), minimised at gamma = 1/2
        solution = solve_primal_dp(ln2_tree, quadratic_1, call_atm)
        assert solution.value == pytest.approx(0.75, abs=1e-8)
        assert solution.strategy.holding(0, 0) == pytest.approx(0.5, abs=1e-5)


class TestBackendsAgree:
    @pytest.mark.parametrize('payoff', [call_payoff(1.0), put_payoff(1.0), lookback_payoff()])
    def test_dp_brackets_lp(self, four_branch_tree, payoff):
        cost = proportional_cost(0.05)
        lp = solve_primal_lp(four_branch_tree, cost, payoff)
        dp = solve_primal_dp(four_branch_tree, cost, payoff)
        assert dp.value >= lp.value - 1e-8
        assert dp.value <= lp.value + dp.report.grid_error_bound + 1e-8

    def test_frictionless_binomial_matches_closed_form(self):
        params = ModelParams(1.0, 3, 0.1, 0.1)
        tree = build_tree(params)
        for payoff in (call_payoff(1.0), put_payoff(1.05)):
            lp = solve_primal_lp(tree, zero_cost(), payoff)
            assert lp.value == pytest.approx(binomial_price(params, payoff), abs=1e-9)

    def test_refinement_does_not_increase_value(self, four_branch_tree, quadratic_1, call_atm):
        coarse = solve_primal_dp(four_branch_tree, quadratic_1, call_atm, GridConfig(step=0.01))
        fine = solve_primal_dp(four_branch_tree, quadratic_1, call_atm, GridConfig(step=0.005))
        assert fine.value <= coarse.value + 1e-8

    def test_lp_needs_piecewise_linear_cost(self, ln2_tree, quadratic_1, call_atm):
        with pytest.raises(ParameterError):
            solve_primal_lp(ln2_tree, quadratic_1, call_atm)

    def test_unknown_backend(self, ln2_tree, frictionless, call_atm):
        with pytest.raises(ParameterError):
            solve_primal(ln2_tree, frictionless, call_atm, 'simplex')


class TestLedger:
    def test_ledger_dominates_payoff(self, four_branch_tree, quadratic_1, call_atm):
        solution = solve_primal_dp(four_branch_tree, quadratic_1, call_atm)
        ledger = wealth_ledger(solution.strategy, four_branch_tree, quadratic_1)
        leaves = call_atm.evaluate(four_branch_tree.leaf_paths())
        assert np.min(ledger.terminal() - leaves) >= -1e-9

    def test_ledger_charges_cost_at_parent(self, ln2_tree, proportional_10):
        strategy = Strategy(1.0, [np.array([0.5])], 2)
        ledger = wealth_ledger(strategy, ln2_tree, proportional_10)
        # Y_1 = 1 - 0.1 * 0.5 + 0.5 * (S_1 - 1)
        np.testing.assert_allclose(ledger.terminal(), [0.95 - 0.25, 0.95 + 0.5])

    def test_terminal_wealth_matches_ledger(self, four_branch_tree, proportional_10):
        holdings = [np.array([0.3]), np.linspace(-0.5, 0.5, 4)]
        strategy = Strategy(0.2, holdings, 4)
        ledger = wealth_ledger(strategy, four_branch_tree, proportional_10)
        leaves = np.arange(16)
        per_path = np.column_stack([np.full(16, 0.3), holdings[1][leaves // 4]])
        wealth = terminal_wealth(0.2, per_path, four_branch_tree.leaf_paths(), proportional_10)
        np.testing.assert_allclose(wealth, ledger.terminal())

    def test_shape_mismatch(self, four_branch_tree, frictionless):
        with pytest.raises(ShapeError):
            wealth_ledger(Strategy(0.0, [np.zeros(1)], 2), four_branch_tree, frictionless)


class TestVerification:
    def test_on_grid_scenarios_are_covered(self, band_params, proportional_10, call_atm):
        tree = build_tree(band_params.refined(2))
        solution = solve_primal_lp(tree, proportional_10, call_atm)
        returns = np.log(tree.leaf_paths()[:, 1:] / tree.leaf_paths()[:, :-1])
        report = verify_superreplication(solution.strategy, proportional_10, call_atm, returns, tree, threads=2)
        assert report.violations == 0
        assert report.min_slack >= -1e-9
        assert report.scenarios == 36

    def test_rejects_out_of_band(self, four_branch_tree, frictionless, call_atm):
        solution = solve_primal_lp(four_branch_tree, frictionless, call_atm)
        with pytest.raises(DomainError):
            verify_superreplication(solution.strategy, frictionless, call_atm, np.array([[0.3, 0.1]]),
                                    four_branch_tree)

    def test_reports_every_sampled_scenario(self, band_params, proportional_10, call_atm):
        tree = build_tree(band_params)
        solution = solve_primal_lp(tree, proportional_10, call_atm)
        returns = sample_returns(band_params, 200, seed=5)
        report = verify_superreplication(solution.strategy, proportional_10, call_atm, returns, tree)
        assert report.scenarios == 200
        assert len(report.slacks) == 200
        prices = prices_from_returns(1.0, returns)
        assert prices.shape == (200, 3)


class TestGrid:
    def test_apriori_bound(self, band_params):
        bound = apriori_bound(band_params, 1.0)
        expected = (1 + math.exp(0.2)) ** 2 / ((1 - math.exp(-0.2)) * math.exp(-0.4))
        assert bound == pytest.approx(expected)
        with pytest.raises(ParameterError):
            apriori_bound(band_params, 0.0)
        with pytest.raises(ParameterError):
            apriori_bound(ModelParams(1.0, 1, 0.0, 0.0), 1.0)

    def test_refined_grid_is_nested(self, four_branch_tree, call_atm):
        coarse = build_holding_grid(four_branch_tree, call_atm, GridConfig(step=0.01))
        fine = build_holding_grid(four_branch_tree, call_atm, GridConfig(step=0.005))
        for point in coarse.points:
            assert np.min(np.abs(fine.points - point)) <= 1e-12 * max(1.0, abs(point))

    def test_grid_reaches_the_bound(self, four_branch_tree, call_atm):
        grid = build_holding_grid(four_branch_tree, call_atm, GridConfig())
        leaves = call_atm.evaluate(four_branch_tree.leaf_paths())
        bound = apriori_bound(four_branch_tree.params, float(leaves.max()) + 1.0)
        assert grid.points[-1] == pytest.approx(bound)
        assert grid.points[0] == pytest.approx(-bound)
        assert grid.points[grid.zero_index] == 0.0
        assert np.all(np.diff(grid.points) > 0)

    def test_small_extent_is_widened(self, four_branch_tree, call_atm):
        grid = build_holding_grid(four_branch_tree, call_atm, GridConfig(extent=1.0))
        assert grid.widened
        assert grid.extent > 1.0

    def test_core_capacity(self, four_branch_tree, call_atm):
        with pytest.raises(CapacityError):
            build_holding_grid(four_branch_tree, call_atm, GridConfig(step=1e-4, max_points=101))

    def test_invalid_grid(self):
        with pytest.raises(ParameterError):
            GridConfig(step=0.0).validate()
        with pytest.raises(ParameterError):
            GridConfig(growth=1.0).validate()


class TestBinomialPrice:
    def test_one_period(self, ln2_params, call_atm):
        assert binomial_price(ln2_params, call_atm) == pytest.approx(1 / 3)

    def test_needs_terminal_payoff(self, ln2_params):
        with pytest.raises(ParameterError):
            binomial_price(ln2_params, lookback_payoff())

    def test_binomial_tree_agrees(self):
        params = ModelParams(1.0, 4, 0.05, 0.1)
        tree = binomial_tree(params)
        lp = solve_primal_lp(tree, zero_cost(), call_payoff(1.0))
        assert lp.value == pytest.approx(binomial_price(params, call_payoff(1.0)), abs=1e-9)
