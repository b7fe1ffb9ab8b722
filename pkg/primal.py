"""
Super-replication prices and hedging strategies on scenario trees

Two backends:
- solve_primal_dp: backward induction over a holding grid, any convex cost
- solve_primal_lp: exact linear program for piecewise-linear costs (HiGHS),
  returning the leaf multipliers used by the dual module
"""
import math
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Union

import numpy as np
from scipy import sparse
from scipy.optimize import linprog
from scipy.stats import binom

from costs import CostSpec
from lattice import (
    LatticeModel,
    ModelParams,
    ScenarioPath,
    in_band,
    prices_from_returns,
    project_returns,
)
from payoffs import PayoffSpec
from utils import (
    CapacityError,
    DomainError,
    NumericalContractError,
    ParameterError,
    ShapeError,
    SolverError,
)

logger = logging.getLogger(__name__)

GOLDEN = (math.sqrt(5) - 1) / 2
SUPERREPLICATION_TOL = 1e-9
MAX_STORED_CELLS = 150_000_000
LP_TOLERANCE = 1e-10


@dataclass
class Strategy:
    """Initial capital y and holdings gamma_n per node (levels 0..N-1)"""

    initial_capital: float
    holdings: List[np.ndarray]
    branching: int

    def holding(self, n: int, node_id: int) -> float:
        return float(self.holdings[n][node_id])

    @property
    def N(self) -> int:
        return len(self.holdings)

    def cushioned(self, epsilon: float) -> 'Strategy':
        return Strategy(self.initial_capital + epsilon, self.holdings, self.branching)

    def to_dict(self) -> Dict[str, Any]:
        return {'initial_capital': self.initial_capital,
                'holdings': [level.tolist() for level in self.holdings]}


@dataclass
class WealthLedger:
    """Mark-to-market wealth Y_n per node (levels 0..N)"""

    values: List[np.ndarray]

    def terminal(self) -> np.ndarray:
        return self.values[-1]


@dataclass
class PriceReport:
    V: float
    backend: str
    grid_error_bound: float
    solver_iterations: int
    leaves: int
    widened: bool = False

    def to_dict(self) -> Dict[str, Any]:
        return {
            'V': self.V,
            'backend': self.backend,
            'grid_error_bound': self.grid_error_bound,
            'solver_iterations': self.solver_iterations,
            'leaves': self.leaves,
            'widened': self.widened,
        }


@dataclass
class PrimalSolution:
    value: float
    strategy: Optional[Strategy]
    ledger: Optional[WealthLedger]
    report: PriceReport
    certificate: Optional['LPCertificate'] = None


@dataclass
class LPCertificate:
    """Leaf-constraint multipliers (nonnegative, summing to one at optimum)"""

    leaf_multipliers: np.ndarray
    iterations: int
    value: float
    shape: tuple


@dataclass
class SuperReplicationReport:
    min_slack: float
    violations: int
    scenarios: int
    slacks: np.ndarray = field(repr=False, default_factory=lambda: np.zeros(0))

    def to_dict(self) -> Dict[str, Any]:
        return {'min_slack': self.min_slack, 'violations': self.violations, 'scenarios': self.scenarios}


@dataclass
class GridConfig:
    """
    Holding grid: uniform core [-core_radius, core_radius] with the given
    step, geometric tails out to the a-priori bound
    """

    step: float = 0.005
    core_radius: Optional[float] = None
    extent: Optional[float] = None
    growth: float = 1.5
    max_points: int = 4001
    refine_tol: float = 1e-12

    def validate(self) -> 'GridConfig':
        if not self.step > 0:
            raise ParameterError(f"grid step must be > 0, got {self.step}", 'grid.step')
        if self.core_radius is not None and not self.core_radius > 0:
            raise ParameterError(f"core radius must be > 0, got {self.core_radius}", 'grid.core_radius')
        if not self.growth > 1:
            raise ParameterError(f"tail growth must be > 1, got {self.growth}", 'grid.growth')
        if not self.refine_tol > 0:
            raise ParameterError(f"refine tolerance must be > 0, got {self.refine_tol}", 'grid.refine_tol')
        return self


@dataclass
class HoldingGrid:
    points: np.ndarray
    zero_index: int
    core_radius: float
    extent: float
    step: float
    widened: bool


# --- bounds and grids -------------------------------------------------------

def apriori_bound(params: ModelParams, A: float) -> float:
    """
    Uniform bound on holdings of strategies super-replicating with capital <= A:
    A (1 + e^sh)^N / ((1 - e^-sh) s0 e^(-sh N))
    """
    if not A > 0:
        raise ParameterError(f"capital bound must be > 0, got {A}", 'A')
    sh = params.sigma_high
    if sh <= 0:
        raise ParameterError("degenerate model: sigma_high = 0 gives no holding bound", 'model.sigma_high')
    return A * (1 + math.exp(sh)) ** params.N / ((1 - math.exp(-sh)) * params.s0 * math.exp(-sh * params.N))


def default_core_radius(tree: LatticeModel, leaf_values: np.ndarray) -> float:
    """Core radius from the payoff's one-period sensitivity at the last level"""
    children = tree.children_stock(tree.N - 1)
    values = leaf_values.reshape(children.shape)
    spread = children.max(axis=1) - children.min(axis=1)
    with np.errstate(divide='ignore', invalid='ignore'):
        slopes = np.where(spread > 0, (values.max(axis=1) - values.min(axis=1)) / spread, 0.0)
    radius = 1.5 * float(slopes.max()) + 0.25
    return math.ceil(radius / 0.25) * 0.25


def build_holding_grid(tree: LatticeModel, payoff: PayoffSpec, config: GridConfig) -> HoldingGrid:
    config.validate()
    leaf_values = payoff.evaluate(tree.leaf_paths())
    bound = apriori_bound(tree.params, float(leaf_values.max()) + 1.0)
    extent = config.extent
    widened = False
    if extent is None:
        extent = bound
    elif extent < bound:
        logger.warning(f"⚠️ Holding grid extent {extent:.6g} below the a-priori bound {bound:.6g}; widening")
        extent = bound
        widened = True

    radius = config.core_radius if config.core_radius is not None else default_core_radius(tree, leaf_values)
    radius = min(radius, extent)
    K = max(1, int(round(radius / config.step)))
    if 2 * K + 1 > config.max_points:
        raise CapacityError(
            f"holding grid core needs {2 * K + 1} points (radius {radius}, step {config.step}), "
            f"limit {config.max_points}"
        )
    core = config.step * np.arange(-K, K + 1)
    radius = K * config.step

    tail: List[float] = []
    point = radius
    while point * config.growth < extent:
        point *= config.growth
        tail.append(point)
    if extent > radius:
        tail.append(extent)
    tail_arr = np.array(tail)
    points = np.concatenate([-tail_arr[::-1], core, tail_arr])
    zero_index = len(tail_arr) + K
    logger.debug(f"Holding grid: {len(points)} points, core radius {radius}, extent {extent:.6g}")
    return HoldingGrid(points, zero_index, radius, extent, config.step, widened)


# --- ledgers ----------------------------------------------------------------

def wealth_ledger(strategy: Strategy, tree: LatticeModel, cost: CostSpec) -> WealthLedger:
    """
    Wealth per node: Y_{n+1} = Y_n + gamma_n (S_{n+1} - S_n) - g_n((gamma_n - gamma_{n-1}) S_n),
    the cost charged once at the parent node
    """
    if strategy.N != tree.N or strategy.branching != tree.branching:
        raise ShapeError("strategy was built for a different tree")
    b = tree.branching
    values = [np.array([strategy.initial_capital], dtype=float)]
    for n in range(tree.N):
        gamma = strategy.holdings[n]
        if n == 0:
            previous = np.zeros(1)
        else:
            previous = strategy.holdings[n - 1][np.arange(tree.level_size(n)) // b]
        stock = tree.stocks[n]
        history = tree.history(n) if cost.path_dependent else None
        charge = cost.evaluate_rows(n, history, ((gamma - previous) * stock)[:, None])[:, 0]
        dS = tree.children_stock(n) - stock[:, None]
        values.append(((values[-1] - charge)[:, None] + gamma[:, None] * dS).ravel())
    return WealthLedger(values)


def terminal_wealth(initial_capital: float, holdings: np.ndarray, prices: np.ndarray,
                    cost: CostSpec) -> np.ndarray:
    """
    Pathwise terminal wealth for holdings played along explicit price paths

    Args:
        initial_capital: y
        holdings: Matrix (paths, N) of gamma_n along each path
        prices: Matrix (paths, N+1) of true prices
        cost: Cost charged with the true price history

    Returns:
        Y_N per path
    """
    holdings = np.atleast_2d(holdings)
    prices = np.atleast_2d(prices)
    wealth = np.full(prices.shape[0], float(initial_capital))
    previous = np.zeros(prices.shape[0])
    for n in range(holdings.shape[1]):
        beta = (holdings[:, n] - previous) * prices[:, n]
        history = prices[:, :n + 1] if cost.path_dependent else None
        charge = cost.evaluate_rows(n, history, beta[:, None])[:, 0]
        wealth += holdings[:, n] * (prices[:, n + 1] - prices[:, n]) - charge
        previous = holdings[:, n]
    return wealth


# --- holding-grid dynamic programme ------------------------------------------

class _HoldingDP:
    """Backward induction on a holding grid with per-cell golden-section refinement"""

    def __init__(self, tree: LatticeModel, cost: CostSpec, payoff_values: np.ndarray,
                 grid: HoldingGrid, refine_tol: float):
        self.tree = tree
        self.cost = cost
        self.leaf_values = payoff_values
        self.G = grid.points
        self.m = len(grid.points)
        self.grid = grid
        self.refine_tol = refine_tol
        self.chunk_rows = max(1, int(2_000_000 // (self.m * tree.branching)))

    def _child_values(self, n: int, rows: np.ndarray, next_values: np.ndarray) -> np.ndarray:
        child_ids = rows[:, None] * self.tree.branching + np.arange(self.tree.branching)
        return next_values[child_ids]

    def _inner_on_grid(self, dS: np.ndarray, child: np.ndarray) -> np.ndarray:
        if child.ndim == 2:
            return np.max(-self.G[None, None, :] * dS[:, :, None] + child[:, :, None], axis=1)
        return np.max(-self.G[None, None, :] * dS[:, :, None] + child, axis=1)

    def _minimize(self, n: int, stock: np.ndarray, history: Optional[np.ndarray], dS: np.ndarray,
                  child: np.ndarray, gamma_prev: np.ndarray):
        """
        min over gamma of g_n((gamma - gamma_prev) S_n) + max_child[-gamma dS + C_{n+1}(child, gamma)]

        Args:
            gamma_prev: Matrix (rows, q) of previous holdings

        Returns:
            (values, minimisers), both (rows, q)
        """
        G, m = self.G, self.m
        inner_grid = self._inner_on_grid(dS, child)
        scale = stock[:, None]

        def charge(gamma):
            return self.cost.evaluate_rows(n, history, (gamma - gamma_prev) * scale)

        def on_grid(index):
            return charge(G[index]) + np.take_along_axis(inner_grid, index, axis=1)

        # discrete bisection on the forward difference (objective is convex in gamma)
        lo = np.zeros(gamma_prev.shape, dtype=np.int64)
        hi = np.full(gamma_prev.shape, m - 1, dtype=np.int64)
        for _ in range(int(math.ceil(math.log2(m))) + 1):
            mid = (lo + hi) // 2
            nxt = np.minimum(mid + 1, m - 1)
            right = on_grid(nxt) < on_grid(mid)
            lo = np.where(right, nxt, lo)
            hi = np.where(right, hi, mid)
        best = lo
        best_value = on_grid(best)

        i0 = np.maximum(best - 1, 0)
        i2 = np.minimum(best + 1, m - 1)
        g0, g1, g2 = G[i0], G[best], G[i2]
        if child.ndim == 3:
            child_t = np.transpose(child, (0, 2, 1))
            c0 = np.take_along_axis(child_t, i0[:, :, None], axis=1)
            c1 = np.take_along_axis(child_t, best[:, :, None], axis=1)
            c2 = np.take_along_axis(child_t, i2[:, :, None], axis=1)

        def inner_local(x):
            if child.ndim == 2:
                return np.max(-x[:, :, None] * dS[:, None, :] + child[:, None, :], axis=2)
            lower = x <= g1
            left = np.where(lower, g0, g1)
            span = np.where(lower, g1 - g0, g2 - g1)
            va = np.where(lower[:, :, None], c0, c1)
            vb = np.where(lower[:, :, None], c1, c2)
            with np.errstate(divide='ignore', invalid='ignore'):
                w = np.where(span > 0, (x - left) / span, 0.0)
            interp = va + w[:, :, None] * (vb - va)
            return np.max(-x[:, :, None] * dS[:, None, :] + interp, axis=2)

        def objective(x):
            return charge(x) + inner_local(x)

        a, b = g0.astype(float), g2.astype(float)
        width = float(np.max(b - a)) if b.size else 0.0
        if width > 0:
            iterations = min(80, int(math.ceil(math.log(width / self.refine_tol) / math.log(1 / GOLDEN))))
            x1 = b - GOLDEN * (b - a)
            x2 = a + GOLDEN * (b - a)
            f1, f2 = objective(x1), objective(x2)
            for _ in range(iterations):
                left = f1 < f2
                b = np.where(left, x2, b)
                a = np.where(left, a, x1)
                new_x = np.where(left, b - GOLDEN * (b - a), a + GOLDEN * (b - a))
                f_new = objective(new_x)
                x1, x2 = np.where(left, new_x, x2), np.where(left, x1, new_x)
                f1, f2 = np.where(left, f_new, f2), np.where(left, f1, f_new)
            x = (a + b) / 2
            fx = objective(x)
            improved = fx < best_value
            return np.where(improved, fx, best_value), np.where(improved, x, G[best])
        return best_value, G[best].astype(float)

    def _level(self, n: int, next_values: np.ndarray, gamma_prev_of, store_argmin: bool = False):
        tree = self.tree
        size = tree.level_size(n)
        stock_all = tree.stocks[n]
        children_all = tree.children_stock(n)
        history_all = tree.history(n) if self.cost.path_dependent else None
        values, minimisers = [], []
        for start in range(0, size, self.chunk_rows):
            rows = np.arange(start, min(size, start + self.chunk_rows))
            stock = stock_all[rows]
            dS = children_all[rows] - stock[:, None]
            child = self._child_values(n, rows, next_values)
            history = None if history_all is None else history_all[rows]
            value, gamma = self._minimize(n, stock, history, dS, child, gamma_prev_of(rows))
            values.append(value)
            minimisers.append(gamma)
        return np.concatenate(values, axis=0), np.concatenate(minimisers, axis=0)

    def backward(self, keep_levels: bool):
        tree = self.tree
        next_values = self.leaf_values
        stored: Dict[int, np.ndarray] = {}
        root_value = None
        for n in range(tree.N - 1, -1, -1):
            if n == 0:
                value, _ = self._level(0, next_values, lambda rows: np.zeros((len(rows), 1)))
                root_value = float(value[0, 0])
            else:
                value, _ = self._level(n, next_values,
                                       lambda rows: np.broadcast_to(self.G, (len(rows), self.m)))
                if keep_levels:
                    stored[n] = value
            next_values = value
            logger.debug(f"DP level {n} done ({tree.level_size(n)} nodes)")
        return root_value, stored

    def forward(self, stored: Dict[int, np.ndarray]) -> List[np.ndarray]:
        tree = self.tree
        holdings: List[np.ndarray] = []
        for n in range(tree.N):
            next_values = self.leaf_values if n == tree.N - 1 else stored[n + 1]
            if n == 0:
                previous = np.zeros(1)
            else:
                previous = holdings[-1][np.arange(tree.level_size(n)) // tree.branching]
            _, gamma = self._level(n, next_values, lambda rows: previous[rows][:, None])
            holdings.append(gamma[:, 0])
        return holdings


def _grid_error_bound(tree: LatticeModel, cost: CostSpec, grid: HoldingGrid,
                      holdings: Optional[List[np.ndarray]], refine_tol: float) -> float:
    """
    Lipschitz estimate of the interpolation error of the stored value functions:
    sum over levels 1..N-1 of L_g * S_max * h / 2, with h the largest grid cell
    around the holdings the strategy visits
    """
    bound = tree.N * refine_tol
    G = grid.points
    cells = np.diff(G)
    for n in range(1, tree.N):
        if holdings is not None:
            visited = holdings[n - 1]
            low, high = visited.min() - grid.step, visited.max() + grid.step
            reach = max(abs(low), abs(high))
            mask = (G[1:] >= low) & (G[:-1] <= high)
            h = float(cells[mask].max()) if mask.any() else grid.step
        else:
            reach = grid.core_radius
            h = grid.step
        s_max = float(tree.stocks[n].max())
        lipschitz = cost.lipschitz(2 * (reach + h) * s_max)
        bound += lipschitz * s_max * h / 2
    return bound


def solve_primal_dp(tree: LatticeModel, cost: CostSpec, payoff: PayoffSpec,
                    grid: Optional[GridConfig] = None, with_strategy: bool = True) -> PrimalSolution:
    """
    Super-replication price by backward induction over a holding grid

    Args:
        tree: Scenario tree
        cost: Convex cost
        payoff: Payoff
        grid: Holding-grid configuration
        with_strategy: Also extract the strategy and ledger (stores every level)

    Returns:
        PrimalSolution with V = C_0(root, 0), an upper bound on the tree value
    """
    grid_config = (grid or GridConfig()).validate()
    holding_grid = build_holding_grid(tree, payoff, grid_config)
    leaf_values = payoff.evaluate(tree.leaf_paths())
    if np.any(leaf_values < 0):
        raise ParameterError("payoff must be nonnegative on every leaf", 'payoff')

    if with_strategy:
        stored_cells = sum(tree.level_size(n) for n in range(1, tree.N)) * len(holding_grid.points)
        if stored_cells > MAX_STORED_CELLS:
            raise CapacityError(
                f"strategy extraction would store {stored_cells} value cells (limit {MAX_STORED_CELLS}); "
                f"use a coarser grid or skip the strategy"
            )

    dp = _HoldingDP(tree, cost, leaf_values, holding_grid, grid_config.refine_tol)
    value, stored = dp.backward(keep_levels=with_strategy)

    strategy, ledger, holdings = None, None, None
    if with_strategy:
        holdings = dp.forward(stored)
        strategy = Strategy(value, holdings, tree.branching)
        ledger = wealth_ledger(strategy, tree, cost)
        slack = ledger.terminal() - leaf_values
        if slack.min() < -SUPERREPLICATION_TOL:
            raise NumericalContractError(
                f"DP strategy fails to super-replicate: min terminal slack {slack.min():.3e}"
            )

    bound = _grid_error_bound(tree, cost, holding_grid, holdings, grid_config.refine_tol)
    report = PriceReport(value, 'dp', bound, 0, tree.num_leaves, holding_grid.widened)
    logger.info(f"✅ DP price V={value:.10g} (grid error <= {bound:.3g}, {len(holding_grid.points)} holdings)")
    return PrimalSolution(value, strategy, ledger, report)


# --- exact linear programme -------------------------------------------------

def solve_primal_lp(tree: LatticeModel, cost: CostSpec, payoff: PayoffSpec) -> PrimalSolution:
    """
    Exact LP for piecewise-linear costs

    Variables: y, gamma per internal node, one epigraph variable t per internal
    node (t >= each affine piece of the cost). One inequality per leaf:
    y + sum gamma dS - sum t >= F.
    """
    if not cost.is_piecewise_linear:
        raise ParameterError(f"LP backend needs a piecewise-linear cost, got '{cost.kind}'", 'cost.kind')
    b, N = tree.branching, tree.N
    offsets = np.cumsum([0] + [tree.level_size(n) for n in range(N)])
    internal = int(offsets[-1])
    leaves = tree.num_leaves
    slopes, intercepts = cost.affine_pieces()
    pieces = len(slopes)

    num_vars = 1 + 2 * internal

    def gamma_col(level: int, ids: np.ndarray) -> np.ndarray:
        return 1 + offsets[level] + ids

    def t_col(level: int, ids: np.ndarray) -> np.ndarray:
        return 1 + internal + offsets[level] + ids

    rows, cols, vals = [], [], []
    leaf_ids = np.arange(leaves)
    rows.append(leaf_ids)
    cols.append(np.zeros(leaves, dtype=np.int64))
    vals.append(-np.ones(leaves))
    for n in range(N):
        ancestor = leaf_ids // b ** (N - n)
        child = leaf_ids // b ** (N - n - 1)
        dS = tree.stocks[n + 1][child] - tree.stocks[n][ancestor]
        rows += [leaf_ids, leaf_ids]
        cols += [gamma_col(n, ancestor), t_col(n, ancestor)]
        vals += [-dS, np.ones(leaves)]
    leaf_values = payoff.evaluate(tree.leaf_paths())
    b_ub = [-leaf_values]

    row = leaves
    for n in range(N):
        ids = np.arange(tree.level_size(n))
        stock = tree.stocks[n]
        for i in range(pieces):
            block = row + ids
            rows += [block, block]
            cols += [gamma_col(n, ids), t_col(n, ids)]
            vals += [slopes[i] * stock, -np.ones(len(ids))]
            if n > 0:
                rows.append(block)
                cols.append(gamma_col(n - 1, ids // b))
                vals.append(-slopes[i] * stock)
            b_ub.append(np.full(len(ids), -intercepts[i]))
            row += len(ids)

    A_ub = sparse.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(row, num_vars)
    )
    c = np.zeros(num_vars)
    c[0] = 1.0
    bounds = [(None, None)] * (1 + internal) + [(0, None)] * internal
    res = linprog(c, A_ub=A_ub, b_ub=np.concatenate(b_ub), bounds=bounds, method='highs-ds',
                  options={'primal_feasibility_tolerance': LP_TOLERANCE,
                           'dual_feasibility_tolerance': LP_TOLERANCE})
    if res.status != 0:
        raise SolverError(f"LP did not reach optimality (status {res.status}): {res.message}")

    value = float(res.x[0])
    gammas = res.x[1:1 + internal]
    holdings = [gammas[offsets[n]:offsets[n + 1]].copy() for n in range(N)]
    strategy = Strategy(value, holdings, b)
    ledger = wealth_ledger(strategy, tree, cost)

    multipliers = np.maximum(-np.asarray(res.ineqlin.marginals[:leaves]), 0.0)
    iterations = int(getattr(res, 'nit', 0))
    certificate = LPCertificate(multipliers, iterations, value, tree.shape_key())
    report = PriceReport(value, 'lp', 0.0, iterations, leaves)
    logger.info(f"✅ LP price V={value:.10g} ({iterations} simplex iterations, {leaves} leaves)")
    return PrimalSolution(value, strategy, ledger, report, certificate)


def solve_primal(tree: LatticeModel, cost: CostSpec, payoff: PayoffSpec, backend: str = 'auto',
                 grid: Optional[GridConfig] = None, with_strategy: bool = True) -> PrimalSolution:
    """Dispatch: LP for piecewise-linear costs, holding-grid DP otherwise"""
    if backend == 'auto':
        backend = 'lp' if cost.is_piecewise_linear else 'dp'
    if backend == 'lp':
        return solve_primal_lp(tree, cost, payoff)
    if backend == 'dp':
        return solve_primal_dp(tree, cost, payoff, grid, with_strategy)
    raise ParameterError(f"unknown backend '{backend}'", 'backend')


def binomial_price(params: ModelParams, payoff: PayoffSpec) -> float:
    """
    Frictionless sigma_high-binomial price of a terminal payoff (complete market):
    risk-neutral expectation with q = (1 - e^-s)/(e^s - e^-s)
    """
    if not payoff.terminal_only:
        raise ParameterError("closed-form binomial price needs a payoff of S_N only", 'payoff.kind')
    s = params.sigma_high
    if s <= 0:
        raise ParameterError("degenerate model: sigma_high = 0", 'model.sigma_high')
    q = (1 - math.exp(-s)) / (math.exp(s) - math.exp(-s))
    ups = np.arange(params.N + 1)
    terminal = params.s0 * np.exp(s * (2 * ups - params.N))
    paths = np.column_stack([np.full(len(ups), params.s0), terminal])
    return float(np.dot(binom.pmf(ups, params.N, q), payoff.evaluate(paths)))


# --- robust verification ----------------------------------------------------

def scenario_returns(scenarios: Union[Sequence[ScenarioPath], np.ndarray]) -> np.ndarray:
    if isinstance(scenarios, np.ndarray):
        return np.atleast_2d(scenarios)
    return np.vstack([path.returns for path in scenarios])


def verify_superreplication(strategy: Strategy, cost: CostSpec, payoff: PayoffSpec,
                            scenarios: Union[Sequence[ScenarioPath], np.ndarray], tree: LatticeModel,
                            tol: float = SUPERREPLICATION_TOL, threads: int = 1) -> SuperReplicationReport:
    """
    Play a tree strategy on continuum scenarios: holdings are read at the
    projected node, wealth uses the true prices and true costs

    Returns:
        Report with min over scenarios of Y_N - F
    """
    if tree.branches is None:
        raise ShapeError("verification needs a tree with a global branch set")
    returns = scenario_returns(scenarios)
    params = tree.params
    if returns.shape[1] != tree.N:
        raise ShapeError(f"scenarios have {returns.shape[1]} periods, tree has {tree.N}")
    if not np.all(in_band(returns, params.sigma_low, params.sigma_high)):
        raise DomainError("scenario outside the admissible return band")

    def slacks_for(block: np.ndarray) -> np.ndarray:
        projected = project_returns(block, tree.branches)
        ids = tree.node_ids_along(projected)
        holdings = np.column_stack([strategy.holdings[n][ids[:, n]] for n in range(tree.N)])
        prices = prices_from_returns(params.s0, block)
        wealth = terminal_wealth(strategy.initial_capital, holdings, prices, cost)
        return wealth - payoff.evaluate(prices)

    blocks = np.array_split(returns, max(1, min(threads, len(returns))))
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            slacks = np.concatenate(list(pool.map(slacks_for, blocks)))
    else:
        slacks = np.concatenate([slacks_for(block) for block in blocks])

    violations = int(np.sum(slacks < -tol))
    report = SuperReplicationReport(float(slacks.min()), violations, len(slacks), slacks)
    if violations:
        logger.warning(f"⚠️ {violations} of {len(slacks)} scenarios not super-replicated "
                       f"(min slack {report.min_slack:.3e})")
    return report
