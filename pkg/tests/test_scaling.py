"""
Tests for scaling.py: sign-tree measures, the limit estimate and the convergence study
"""
import math

import numpy as np
import pytest

from costs import constant_curvature, limit_curvature_from_cost, proportional_cost, quadratic_cost, zero_cost
from lattice import ModelParams
from payoffs import call_payoff, custom_payoff, lookback_payoff, put_payoff
from primal import binomial_price
from scaling import (
    admissible_sigma_range,
    black_scholes_call,
    black_scholes_price,
    black_scholes_put,
    candidate_from_dict,
    constant_candidate,
    convergence_study,
    custom_candidate,
    default_constant_family,
    feedback_candidate,
    kusuoka_check,
    kusuoka_dual_value,
    kusuoka_measure,
    kusuoka_path_check,
    limit_value_estimate,
    penalty_path,
    piecewise_candidate,
    price_scaled_model,
    sample_kusuoka_paths,
    threshold_candidate,
)
from utils import CapacityError, ParameterError, PreconditionError

C = 2.0


def unit_model(N, sigma_low=0.1, sigma_high=0.2):
    return ModelParams(1.0, N, sigma_low, sigma_high, 1)


def feedback():
    return feedback_candidate(0.1, 0.15, 0.01)


class TestCandidates:
    def test_constant(self):
        candidate = constant_candidate(0.15)
        assert candidate.name == 'const:0.15'
        assert candidate.constant_value == 0.15
        np.testing.assert_allclose(candidate.evaluate(0.3, np.zeros((3, 2))), 0.15)
        with pytest.raises(ParameterError):
            constant_candidate(-0.1)

    def test_piecewise(self):
        candidate = piecewise_candidate([0.5], [0.2, 0.1])
        assert candidate.evaluate(0.25, np.zeros((1, 1)))[0] == 0.2
        assert candidate.evaluate(0.5, np.zeros((1, 1)))[0] == 0.1
        with pytest.raises(ParameterError):
            piecewise_candidate([0.5], [0.2])
        with pytest.raises(ParameterError):
            piecewise_candidate([0.6, 0.4], [0.1, 0.2, 0.1])

    def test_threshold_reads_running_maximum(self):
        candidate = threshold_candidate(0.5, 0.1, 0.2)
        prefix = np.array([[0.0, 0.6, 0.1], [0.0, 0.2, 0.4]])
        np.testing.assert_allclose(candidate.evaluate(0.5, prefix), [0.2, 0.1])

    def test_feedback_has_constant_tail(self):
        candidate = feedback()
        assert candidate.constant_tail
        prefix = np.array([[0.0, 3.0], [0.0, -3.0]])
        np.testing.assert_allclose(candidate.evaluate(0.995, prefix), 0.1)
        values = candidate.evaluate(0.0, prefix)
        assert np.all((values > 0.1) & (values < 0.25))
        with pytest.raises(ParameterError):
            feedback_candidate(0.1, 0.1, 0.0)

    def test_custom_functional(self):
        candidate = custom_candidate(lambda t, prefix: 0.1 + 0.05 * (prefix[:, -1] > 0), name='up-switch')
        np.testing.assert_allclose(candidate.evaluate(0.2, np.array([[0.0, 1.0], [0.0, -1.0]])), [0.15, 0.1])
        broken = custom_candidate(lambda t, prefix: -np.ones(prefix.shape[0]))
        with pytest.raises(ParameterError):
            broken.evaluate(0.0, np.zeros((2, 1)))

    def test_from_dict(self):
        assert candidate_from_dict({'kind': 'constant', 'sigma': 0.2}).constant_value == 0.2
        assert candidate_from_dict({'kind': 'feedback', 'base': 0.1, 'amplitude': 0.1,
                                    'delta': 0.05}).kind == 'feedback'
        with pytest.raises(ParameterError) as excinfo:
            candidate_from_dict({'kind': 'constant'})
        assert excinfo.value.field == 'candidate.sigma'
        with pytest.raises(ParameterError):
            candidate_from_dict({'kind': 'stochastic'})

    def test_admissible_range_and_family(self):
        low, high = admissible_sigma_range(0.1, 0.2, C)
        assert low == 0.0
        assert high == pytest.approx(math.sqrt(0.84))
        sigmas = [candidate.constant_value for candidate in default_constant_family(0.1, 0.2, C)]
        assert 0.1 in sigmas and 0.2 in sigmas
        assert sigmas == sorted(sigmas)
        assert sigmas[-1] == pytest.approx(high)


class TestSignTree:
    @pytest.mark.parametrize('candidate', [constant_candidate(0.1), constant_candidate(0.2), feedback()],
                             ids=['sigma_low', 'sigma_high', 'feedback'])
    def test_full_tree_checks(self, candidate):
        construction = kusuoka_measure(candidate, unit_model(16), C)
        check = kusuoka_check(construction)
        assert check.martingale_err_B <= 1e-10
        assert check.martingale_err_M <= 1e-10
        assert check.max_rel_MS <= C / 4
        assert 0 < check.q_min <= check.q_max < 1
        assert check.leaf_mass == pytest.approx(1.0, abs=1e-12)
        assert construction.tree.num_leaves == 2 ** 16
        if candidate.constant_tail:
            assert check.terminal_gap == pytest.approx(0.0, abs=1e-12)

    def test_constant_candidates_keep_M_equal_to_S(self):
        check = kusuoka_check(kusuoka_measure(constant_candidate(0.2), unit_model(8), C))
        assert check.max_rel_MS == pytest.approx(0.0, abs=1e-15)
        assert check.dQ_min == pytest.approx(0.04)
        assert check.dQ_max == pytest.approx(0.04)

    def test_high_volatility_moves_M_away_from_S(self):
        # sigma~ = 0.3 above sigma_high: kappa = 0.625 on every step
        check = kusuoka_check(kusuoka_measure(constant_candidate(0.3), unit_model(8), C))
        assert check.max_rel_MS == pytest.approx(math.exp(0.625 * 0.2 / math.sqrt(8)) - 1)
        assert check.max_rel_MS <= C / math.sqrt(8)
        assert check.terminal_gap > 0

    def test_sampled_paths(self):
        sample = sample_kusuoka_paths(feedback(), unit_model(64), C, paths=2048, seed=3)
        check = kusuoka_path_check(sample, unit_model(64), C)
        assert check.martingale_err_B <= 1e-10
        assert check.martingale_err_M <= 1e-10
        assert check.max_rel_MS <= C / 8
        assert math.isnan(check.leaf_mass)
        assert sample.B.shape == (2048, 65)

    def test_sampling_is_reproducible(self):
        first = sample_kusuoka_paths(feedback(), unit_model(32), C, paths=64, seed=9)
        second = sample_kusuoka_paths(feedback(), unit_model(32), C, paths=64, seed=9)
        np.testing.assert_array_equal(first.S, second.S)

    def test_frictionless_dual_value_is_the_binomial_price(self):
        construction = kusuoka_measure(constant_candidate(0.2), unit_model(8), C)
        value = kusuoka_dual_value(construction, zero_cost(), call_payoff(1.0))
        assert value == pytest.approx(binomial_price(unit_model(8).per_period(8), call_payoff(1.0)), abs=1e-10)

    def test_dual_value_is_below_the_price(self):
        h, payoff = quadratic_cost(1.0), call_payoff(1.0)
        construction = kusuoka_measure(feedback(), unit_model(8), C)
        U = kusuoka_dual_value(construction, h, payoff)
        V, method = price_scaled_model(h, C, payoff, unit_model(1), 8)
        assert method == 'binomial-reduction'
        assert U <= V + 1e-8

    def test_penalty_path_vanishes_inside_the_band(self):
        for sigma in (0.1, 0.15, 0.2):
            construction = kusuoka_measure(constant_candidate(sigma), unit_model(8), C)
            steps, totals = penalty_path(construction.state, 0.1, 0.2)
            assert steps.shape == (256, 8)
            np.testing.assert_allclose(totals, 0.0, atol=1e-12)

    def test_penalty_path_charges_high_volatility(self):
        sample = sample_kusuoka_paths(constant_candidate(0.3), unit_model(16), C, paths=32, seed=0)
        _, totals = penalty_path(sample, 0.1, 0.2)
        # N dQ is close to sigma~^2 = 0.09, so each step costs about a(0.3)^2
        assert np.all(totals > 0)
        np.testing.assert_allclose(totals, 0.125 ** 2, rtol=0.05)

    def test_too_few_periods(self):
        candidate = piecewise_candidate([0.5], [0.9, 0.1])
        with pytest.raises(ParameterError) as excinfo:
            kusuoka_measure(candidate, unit_model(4), C)
        assert excinfo.value.field == 'model.N'
        assert 'N too small' in str(excinfo.value)

    def test_band_edge_candidate_needs_more_periods(self):
        # sigma~^2 just inside sigma_high^2 + 2c sigma_high: |M - S|/S overshoots c/sqrt(16) on the first step
        candidate = constant_candidate(0.999 * math.sqrt(0.84))
        for build in (lambda: kusuoka_measure(candidate, unit_model(16), C),
                      lambda: sample_kusuoka_paths(candidate, unit_model(16), C, paths=64, seed=0)):
            with pytest.raises(ParameterError) as excinfo:
                build()
            assert excinfo.value.field == 'model.N'
            assert 'N too small' in str(excinfo.value)

    def test_constant_tail_closes_the_terminal_gap(self):
        # ceil(0.99 * 128) = 127 < 128, so the last step sits on the constant tail
        sample = sample_kusuoka_paths(feedback(), unit_model(128), C, paths=256, seed=5)
        check = kusuoka_path_check(sample, unit_model(128), C)
        assert check.terminal_gap == pytest.approx(0.0, abs=1e-12)
        np.testing.assert_allclose(sample.kappa[:, -1], 0.0, atol=1e-15)

    def test_candidate_outside_the_band(self):
        with pytest.raises(ParameterError) as excinfo:
            kusuoka_measure(constant_candidate(0.95), unit_model(4), C)
        assert excinfo.value.field == 'kusuoka.candidate'

    def test_capacity_and_preconditions(self):
        with pytest.raises(CapacityError):
            kusuoka_measure(constant_candidate(0.1), unit_model(21), C)
        with pytest.raises(CapacityError):
            kusuoka_measure(constant_candidate(0.1), unit_model(12), C, node_budget=1000)
        with pytest.raises(PreconditionError):
            kusuoka_measure(constant_candidate(0.1), unit_model(4, sigma_low=0.0), C)
        with pytest.raises(ParameterError):
            sample_kusuoka_paths(constant_candidate(0.1), unit_model(4), C, paths=1, seed=0)


class TestBlackScholes:
    def test_known_value(self):
        assert black_scholes_call(1.0, 1.0, 0.2) == pytest.approx(0.0796557, abs=1e-7)

    def test_put_call_parity(self):
        for strike in (0.8, 1.0, 1.3):
            call = black_scholes_call(1.0, strike, 0.25)
            put = black_scholes_put(1.0, strike, 0.25)
            assert call - put == pytest.approx(1.0 - strike)

    def test_price_dispatch(self):
        assert black_scholes_price(put_payoff(1.0), 1.0, 0.2) == pytest.approx(black_scholes_put(1.0, 1.0, 0.2))
        assert black_scholes_price(lookback_payoff(), 1.0, 0.2) is None
        assert black_scholes_call(1.0, 0.9, 0.0) == pytest.approx(0.1)


class TestLimitEstimate:
    def test_monte_carlo_matches_closed_form(self):
        candidate = constant_candidate(0.15)
        estimate = limit_value_estimate([candidate], call_payoff(1.0), constant_curvature(0.0), 1.0, 0.1, 0.2, C,
                                        paths=20_000, steps=16, seed=42)
        row = estimate.rows[0]
        assert abs(row['estimate'] - black_scholes_call(1.0, 1.0, 0.15)) <= 4 * row['se']
        assert estimate.lower_estimate and not estimate.two_sided

    def test_threads_do_not_change_the_estimate(self):
        args = ([feedback()], call_payoff(1.0), constant_curvature(0.25), 1.0, 0.1, 0.2, C)
        single = limit_value_estimate(*args, paths=3000, steps=8, seed=1)
        pooled = limit_value_estimate(*args, paths=3000, steps=8, seed=1, threads=3)
        assert single.best_value == pooled.best_value

    def test_rejections(self):
        candidates = [constant_candidate(0.3), constant_candidate(2.0), constant_candidate(0.15)]
        estimate = limit_value_estimate(candidates, call_payoff(1.0), limit_curvature_from_cost(zero_cost()),
                                        1.0, 0.1, 0.2, C, closed_form=True)
        reasons = [row['rejected'] for row in estimate.rows]
        assert reasons[0] == 'infinite penalty'
        assert reasons[1].startswith('a(sigma)=')
        assert reasons[2] == ''
        assert estimate.best_id == '2:const:0.15'
        assert estimate.best_value == pytest.approx(black_scholes_call(1.0, 1.0, 0.15))

    def test_penalised_closed_form(self):
        estimate = limit_value_estimate([constant_candidate(0.3)], call_payoff(1.0), constant_curvature(0.25),
                                        1.0, 0.1, 0.2, C, closed_form=True)
        expected = black_scholes_call(1.0, 1.0, 0.3) - 0.25 * 0.125 ** 2
        assert estimate.best_value == pytest.approx(expected)

    def test_every_candidate_rejected(self):
        with pytest.raises(ParameterError):
            limit_value_estimate([constant_candidate(2.0)], call_payoff(1.0), constant_curvature(0.1),
                                 1.0, 0.1, 0.2, C, closed_form=True)

    def test_needs_positive_sigma_low(self):
        with pytest.raises(PreconditionError):
            limit_value_estimate([constant_candidate(0.1)], call_payoff(1.0), constant_curvature(0.1),
                                 1.0, 0.0, 0.2, C)


class TestConvergenceStudy:
    def test_price_scaled_model_methods(self):
        model = unit_model(1)
        payoff = call_payoff(1.0)
        assert price_scaled_model(zero_cost(), C, payoff, model, 4)[1] == 'binomial-closed-form'
        assert price_scaled_model(proportional_cost(0.01), C, payoff, model, 4)[1] == 'binomial-reduction'
        digital = custom_payoff(lambda paths: (paths[:, -1] > 1.0).astype(float))
        assert price_scaled_model(proportional_cost(0.01), C, digital, model, 2)[1] == 'full-tree'

    def test_frictionless_prices_approach_black_scholes(self):
        report = convergence_study(zero_cost(), C, call_payoff(1.0), [4, 16, 64], unit_model(1, 0.2, 0.2))
        bs = black_scholes_call(1.0, 1.0, 0.2)
        errors = [abs(row['V_N'] - bs) for row in report.rows]
        assert errors[0] > errors[1] > errors[2]
        assert report.limit.best_value == pytest.approx(bs)
        assert report.rows[0]['best_candidate_id'].endswith('const:0.2')
        assert report.columns == ['N', 'V_N', 'lower_bound', 'lower_bound_se', 'best_limit_estimate',
                                  'best_candidate_id']

    def test_quadratic_cost_study(self):
        h, payoff = quadratic_cost(1.0), call_payoff(1.0)
        report = convergence_study(h, C, payoff, [4, 8], unit_model(1), kusuoka_candidate=feedback())
        assert [row['N'] for row in report.rows] == [4, 8]
        assert 'dual_lower_bound' in report.columns
        assert report.limit.best_value >= black_scholes_call(1.0, 1.0, 0.2) - 1e-12
        for row in report.rows:
            frictionless = binomial_price(unit_model(1).per_period(row['N']), payoff)
            assert row['V_N'] >= frictionless - 1e-9
            assert row['dual_lower_bound'] <= row['V_N'] + 1e-8

    @pytest.mark.slow
    def test_quadratic_cost_study_at_sixteen_periods(self):
        report = convergence_study(quadratic_cost(1.0), C, call_payoff(1.0), [16], unit_model(1))
        assert report.rows[0]['V_N'] >= binomial_price(unit_model(1).per_period(16), call_payoff(1.0)) - 1e-9

    def test_periods_must_increase(self):
        with pytest.raises(ParameterError):
            convergence_study(zero_cost(), C, call_payoff(1.0), [8, 4], unit_model(1))
