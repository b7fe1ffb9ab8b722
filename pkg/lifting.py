"""
Lifting binomial strategies to the whole path space

Every admissible one-period gross return is a convex combination of the two
extreme returns e^{+-sigma_high}. Products of these weights over binomial
words turn a strategy on the sigma_high-binomial tree into one that
super-replicates convex payoffs on every scenario when costs are
deterministic.
"""
import math
import logging
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence

import numpy as np

from costs import CostSpec
from lattice import (
    DEFAULT_NODE_BUDGET,
    LatticeModel,
    ModelParams,
    ScenarioPath,
    binomial_tree,
    build_tree,
    prices_from_returns,
    sample_returns,
)
from payoffs import PayoffSpec
from primal import GridConfig, Strategy, solve_primal, terminal_wealth, SUPERREPLICATION_TOL
from utils import (
    RETURN_TOL,
    CapacityError,
    DomainError,
    NumericalContractError,
    ParameterError,
    PreconditionError,
    ShapeError,
)

logger = logging.getLogger(__name__)

MAX_WORD_LEVEL = 20
MAX_WEIGHT_CELLS = 4_000_000
AGGREGATION_TOL = 1e-10


@dataclass
class LiftWeights:
    """Per-period weight of the up move: e^{x_n} = l+ e^{sh} + (1 - l+) e^{-sh}"""

    lambda_plus: np.ndarray
    sigma_high: float

    @property
    def lambda_minus(self) -> np.ndarray:
        return 1.0 - self.lambda_plus

    @property
    def N(self) -> int:
        return len(self.lambda_plus)

    def word_weights(self, n: int) -> np.ndarray:
        """
        Product weights of all 2^n words, indexed like level-n binomial nodes
        (first period most significant, down = 0, up = 1)
        """
        if n > MAX_WORD_LEVEL:
            raise CapacityError(f"word enumeration at level {n} exceeds 2^{MAX_WORD_LEVEL}")
        weights = np.ones(1)
        for m in range(n):
            pair = np.array([self.lambda_minus[m], self.lambda_plus[m]])
            weights = (weights[:, None] * pair).ravel()
        return weights

    def reconstruct_growth(self) -> np.ndarray:
        """l+ e^{sh} + l- e^{-sh} per period (equals e^{x_n})"""
        sh = self.sigma_high
        return self.lambda_plus * math.exp(sh) + self.lambda_minus * math.exp(-sh)


def _up_weights(returns: np.ndarray, sigma_high: float) -> np.ndarray:
    if not sigma_high > 0:
        raise ParameterError(f"sigma_high must be > 0, got {sigma_high}", 'model.sigma_high')
    returns = np.asarray(returns, dtype=float)
    if np.any(np.abs(returns) > sigma_high + RETURN_TOL):
        raise DomainError(f"log-return outside [-{sigma_high}, {sigma_high}]")
    up, down = math.exp(sigma_high), math.exp(-sigma_high)
    return np.clip((np.exp(returns) - down) / (up - down), 0.0, 1.0)


def compute_weights(path: ScenarioPath, sigma_high: float) -> LiftWeights:
    """
    Unique convex weights of the extreme moves for every period

    Raises:
        DomainError: if some |x_n| > sigma_high
    """
    return LiftWeights(_up_weights(path.returns, sigma_high), sigma_high)


def _check_binomial(strategy: Strategy, tree: LatticeModel):
    if tree.branching != 2 or strategy.branching != 2:
        raise ShapeError("lifting needs a strategy on the sigma_high-binomial tree")
    if strategy.N != tree.N:
        raise ShapeError(f"strategy has {strategy.N} periods, tree has {tree.N}")
    if tree.N > MAX_WORD_LEVEL:
        raise CapacityError(f"N={tree.N} exceeds the word enumeration limit {MAX_WORD_LEVEL}")


def lift_holdings(strategy: Strategy, returns: np.ndarray, tree: LatticeModel) -> np.ndarray:
    """
    Lifted holdings for a batch of scenarios

    gamma_n(w) S_n(w) = sum over words u of length n of (gamma_bar_n S_bar_n)(u) * lambda_n^u(w)

    Args:
        strategy: Strategy on the binomial tree
        returns: Matrix (paths, N) of scenario log-returns
        tree: The sigma_high-binomial tree the strategy lives on

    Returns:
        Matrix (paths, N) of holdings
    """
    _check_binomial(strategy, tree)
    returns = np.atleast_2d(returns)
    up = _up_weights(returns, tree.params.sigma_high)
    prices = prices_from_returns(tree.params.s0, returns)
    paths = returns.shape[0]
    holdings = np.empty((paths, tree.N))
    chunk = max(1, MAX_WEIGHT_CELLS // (2 ** max(tree.N - 1, 0)))
    for start in range(0, paths, chunk):
        rows = slice(start, min(paths, start + chunk))
        weights = np.ones((up[rows].shape[0], 1))
        for n in range(tree.N):
            value_held = strategy.holdings[n] * tree.stocks[n]
            holdings[rows, n] = weights @ value_held / prices[rows, n]
            pair = np.stack([1.0 - up[rows, n], up[rows, n]], axis=1)
            weights = (weights[:, :, None] * pair[:, None, :]).reshape(weights.shape[0], -1)
    return holdings


def lift_strategy(binomial_strategy: Strategy, path: ScenarioPath, tree: LatticeModel) -> np.ndarray:
    """Lifted holdings gamma_n(w), n = 0..N-1, along one scenario"""
    return lift_holdings(binomial_strategy, path.returns[None, :], tree)[0]


@dataclass
class AggregationCheck:
    """Per-period aggregated binomial gains/costs versus the lifted ones"""

    gains_aggregated: np.ndarray
    gains_lifted: np.ndarray
    costs_aggregated: np.ndarray
    costs_lifted: np.ndarray

    @property
    def gains_discrepancy(self) -> float:
        return float(np.max(np.abs(self.gains_aggregated - self.gains_lifted)))

    @property
    def cost_inequality_holds(self) -> bool:
        return bool(np.all(self.costs_lifted <= self.costs_aggregated + AGGREGATION_TOL))


def aggregation_check(strategy: Strategy, path: ScenarioPath, tree: LatticeModel,
                      cost: CostSpec) -> AggregationCheck:
    """
    Aggregate the binomial gains and costs with the terminal weights lambda_N
    and compare them with the lifted strategy's own gains and costs
    """
    _check_binomial(strategy, tree)
    weights = compute_weights(path, tree.params.sigma_high)
    terminal = weights.word_weights(tree.N)
    leaves = np.arange(tree.num_leaves)
    lifted = lift_strategy(strategy, path, tree)
    prices = path.prices
    N = tree.N
    gains_agg, gains_lift = np.zeros(N), np.zeros(N)
    costs_agg, costs_lift = np.zeros(N), np.zeros(N)
    previous_bar = np.zeros(tree.num_leaves)
    previous = 0.0
    for n in range(N):
        node = leaves // 2 ** (N - n)
        child = leaves // 2 ** (N - n - 1)
        gamma_bar = strategy.holdings[n][node]
        dS_bar = tree.stocks[n + 1][child] - tree.stocks[n][node]
        gains_agg[n] = np.dot(gamma_bar * dS_bar, terminal)
        gains_lift[n] = lifted[n] * (prices[n + 1] - prices[n])
        traded_bar = (gamma_bar - previous_bar) * tree.stocks[n][node]
        costs_agg[n] = np.dot(cost.evaluate(n, None, traded_bar), terminal)
        costs_lift[n] = float(cost.evaluate(n, None, np.array((lifted[n] - previous) * prices[n])))
        previous_bar = gamma_bar
        previous = lifted[n]
    return AggregationCheck(gains_agg, gains_lift, costs_agg, costs_lift)


@dataclass
class LiftReport:
    V_bar: float
    epsilon: float
    min_slack: float
    violations: int
    scenarios: int
    rows: List[Dict[str, Any]] = field(default_factory=list)
    grid_error_bar: float = 0.0
    within_tolerance: bool = True

    def to_dict(self) -> Dict[str, Any]:
        return {
            'V_bar': self.V_bar,
            'epsilon': self.epsilon,
            'min_slack': self.min_slack,
            'violations': self.violations,
            'scenarios': self.scenarios,
            'grid_error_bar': self.grid_error_bar,
            'within_tolerance': self.within_tolerance,
            'rows': self.rows,
        }


def binomial_reduction_experiment(params: ModelParams, cost: CostSpec, payoff: PayoffSpec,
                                  epsilon: Optional[float] = None, scenarios: int = 10_000, seed: int = 0,
                                  ks: Sequence[int] = (1, 2, 4), grid: Optional[GridConfig] = None,
                                  backend: str = 'auto', node_budget: int = DEFAULT_NODE_BUDGET,
                                  aggregation_samples: int = 16) -> LiftReport:
    """
    Check that a convex payoff under a deterministic cost costs the same in the
    band model as in the sigma_high-binomial model

    Args:
        params: Band model (per period)
        cost: Deterministic convex cost
        payoff: Payoff flagged convex in the path
        epsilon: Capital cushion for the lifted strategy (default 1e-6 * s0)
        scenarios: Number of sampled scenarios for pathwise verification
        seed: Scenario seed
        ks: Refinement levels for the band-model prices

    Returns:
        LiftReport with one row {k, V_k, V_bar, gap, min_slack, scenarios} per k
    """
    if cost.path_dependent:
        raise PreconditionError(
            "binomial reduction needs a deterministic cost: the cost may not depend on the price history"
        )
    if not payoff.convex_in_path:
        raise PreconditionError("binomial reduction needs a payoff that is convex in the price path")
    params.validate()
    epsilon = 1e-6 * params.s0 if epsilon is None else float(epsilon)
    if not epsilon > 0:
        raise ParameterError(f"epsilon must be > 0, got {epsilon}", 'lifting.epsilon')

    tree_bar = binomial_tree(params, node_budget)
    solution_bar = solve_primal(tree_bar, cost, payoff, backend, grid)
    V_bar = solution_bar.value
    logger.info(f"Binomial price V_bar={V_bar:.10g}")

    strategy = solution_bar.strategy.cushioned(epsilon)
    returns = sample_returns(params, scenarios, seed)
    holdings = lift_holdings(strategy, returns, tree_bar)
    prices = prices_from_returns(params.s0, returns)
    wealth = terminal_wealth(strategy.initial_capital, holdings, prices, cost)
    slack = wealth - payoff.evaluate(prices)
    violations = int(np.sum(slack < -SUPERREPLICATION_TOL))
    min_slack = float(slack.min())
    if violations:
        raise NumericalContractError(
            f"lifted strategy fails on {violations} of {scenarios} scenarios (min slack {min_slack:.3e})"
        )
    logger.info(f"✅ Lifted strategy super-replicates on {scenarios} scenarios (min slack {min_slack:.3e})")

    if tree_bar.N <= 12:
        for row in returns[:aggregation_samples]:
            check = aggregation_check(solution_bar.strategy, ScenarioPath.from_returns(params.s0, row),
                                      tree_bar, cost)
            if check.gains_discrepancy > AGGREGATION_TOL * (1 + params.s0):
                logger.warning(f"⚠️ Aggregated gains differ from lifted gains by {check.gains_discrepancy:.3e}")
            if not check.cost_inequality_holds:
                logger.warning("⚠️ Lifted cost exceeds the aggregated binomial cost on a sampled scenario")

    report = LiftReport(V_bar, epsilon, min_slack, violations, scenarios,
                        grid_error_bar=solution_bar.report.grid_error_bound)
    for k in ks:
        tree_k = build_tree(params.refined(k), node_budget)
        solution_k = solve_primal(tree_k, cost, payoff, backend, grid, with_strategy=False)
        gap = abs(solution_k.value - V_bar)
        tolerance = epsilon + solution_k.report.grid_error_bound + solution_bar.report.grid_error_bound
        if gap > tolerance + 1e-9:
            report.within_tolerance = False
            logger.warning(f"⚠️ k={k}: |V_k - V_bar| = {gap:.3e} exceeds {tolerance:.3e}")
        report.rows.append({'k': k, 'V_k': solution_k.value, 'V_bar': V_bar, 'gap': gap,
                            'min_slack': min_slack, 'scenarios': scenarios})
        logger.info(f"k={k}: V_k={solution_k.value:.10g}, gap={gap:.3e}")
    return report
