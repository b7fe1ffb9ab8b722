"""
Scenario trees for the robust pricing engine

Builds the full non-recombining multinomial tree over the admissible
one-period log-returns, indexes nodes mixed-radix by branch index (earliest
period most significant), and maps continuum scenarios onto the tree.
"""
import math
import logging
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Sequence

import numpy as np

from utils import (
    RETURN_TOL,
    CapacityError,
    DomainError,
    ParameterError,
    ShapeError,
    substream,
)

logger = logging.getLogger(__name__)

DEFAULT_NODE_BUDGET = 10_000_000


@dataclass(frozen=True)
class ModelParams:
    """Per-period model bounds: s0, N periods, sigma_low <= |log-return| <= sigma_high"""

    s0: float
    N: int
    sigma_low: float
    sigma_high: float
    k: int = 1

    def validate(self) -> 'ModelParams':
        if not (self.s0 > 0 and math.isfinite(self.s0)):
            raise ParameterError(f"s0 must be positive, got {self.s0}", 'model.s0')
        if int(self.N) != self.N or self.N < 1:
            raise ParameterError(f"N must be an integer >= 1, got {self.N}", 'model.N')
        if not (0 <= self.sigma_low):
            raise ParameterError(f"sigma_low must be >= 0, got {self.sigma_low}", 'model.sigma_low')
        if not (self.sigma_low <= self.sigma_high < math.inf):
            raise ParameterError(
                f"need sigma_low <= sigma_high < inf, got {self.sigma_low}, {self.sigma_high}",
                'model.sigma_high'
            )
        if int(self.k) != self.k or self.k < 1:
            raise ParameterError(f"k must be an integer >= 1, got {self.k}", 'model.k')
        return self

    def binomial(self) -> 'ModelParams':
        """Same model collapsed to the sigma_high-binomial case"""
        return ModelParams(self.s0, self.N, self.sigma_high, self.sigma_high, 1)

    def refined(self, k: int) -> 'ModelParams':
        return ModelParams(self.s0, self.N, self.sigma_low, self.sigma_high, k)

    def per_period(self, N: int) -> 'ModelParams':
        """Unit-time model with N periods: bounds scaled by 1/sqrt(N)"""
        root = math.sqrt(N)
        return ModelParams(self.s0, N, self.sigma_low / root, self.sigma_high / root, self.k)

    def to_dict(self) -> Dict[str, Any]:
        return {
            's0': self.s0,
            'N': self.N,
            'sigma_low': self.sigma_low,
            'sigma_high': self.sigma_high,
            'k': self.k,
        }


@dataclass(frozen=True)
class TreeNode:
    time: int
    node_id: int
    stock: float
    parent: Optional[int]
    branch_index: Optional[int]


@dataclass
class ScenarioPath:
    """
    One scenario: returns[m] is the log-return of period m+1 and
    prices[n] = s0 * exp(sum(returns[:n])), so prices has N+1 entries
    """

    returns: np.ndarray
    prices: np.ndarray

    @classmethod
    def from_returns(cls, s0: float, returns: Sequence[float]) -> 'ScenarioPath':
        returns = np.asarray(returns, dtype=float)
        log_prices = np.concatenate([[0.0], np.cumsum(returns)])
        return cls(returns=returns, prices=s0 * np.exp(log_prices))

    @property
    def N(self) -> int:
        return len(self.returns)


def branch_values(params: ModelParams) -> np.ndarray:
    """
    Admissible one-period log-returns of the refinement level k

    Args:
        params: Model parameters (validated)

    Returns:
        Strictly increasing array of {+-((j/k)*sigma_low + (1-j/k)*sigma_high)}
        with the duplicates from sigma_low = 0 or sigma_low = sigma_high removed
    """
    params.validate()
    magnitudes: List[float] = []
    for j in range(params.k + 1):
        value = (j / params.k) * params.sigma_low + (1 - j / params.k) * params.sigma_high
        if not any(abs(value - seen) <= 1e-15 for seen in magnitudes):
            magnitudes.append(value)

    values = set()
    for value in magnitudes:
        if value <= 1e-15:
            values.add(0.0)
        else:
            values.add(value)
            values.add(-value)
    return np.array(sorted(values))


def in_band(returns: np.ndarray, sigma_low: float, sigma_high: float, tol: float = RETURN_TOL) -> np.ndarray:
    """Elementwise membership of log-returns in [-sigma_high, -sigma_low] U [sigma_low, sigma_high]"""
    magnitude = np.abs(np.asarray(returns, dtype=float))
    return (magnitude >= sigma_low - tol) & (magnitude <= sigma_high + tol)


class LatticeModel:
    """
    Full non-recombining scenario tree

    Node i at level n has children i*b + j (j = branch index) and parent i // b.
    Stock prices are kept per level in flat arrays.
    """

    def __init__(self, params: ModelParams, branches: Optional[np.ndarray], stocks: List[np.ndarray],
                 branching: int):
        self.params = params
        self.branches = branches
        self.stocks = stocks
        self.branching = branching
        self.N = len(stocks) - 1

    @classmethod
    def from_levels(cls, params: ModelParams, stocks: List[np.ndarray], branching: int) -> 'LatticeModel':
        """Tree with node-dependent returns (e.g. sign trees with varying step sizes)"""
        for n, level in enumerate(stocks):
            if len(level) != branching ** n:
                raise ShapeError(f"level {n} has {len(level)} nodes, expected {branching ** n}")
        return cls(params, None, [np.asarray(level, dtype=float) for level in stocks], branching)

    # --- shape -------------------------------------------------------------

    def level_size(self, n: int) -> int:
        return self.branching ** n

    @property
    def num_leaves(self) -> int:
        return self.branching ** self.N

    @property
    def num_nodes(self) -> int:
        return sum(self.branching ** n for n in range(self.N + 1))

    def shape_key(self) -> tuple:
        return (self.N, self.branching)

    def same_shape(self, other: 'LatticeModel') -> bool:
        return self.shape_key() == other.shape_key()

    # --- navigation --------------------------------------------------------

    def node(self, n: int, node_id: int) -> TreeNode:
        if n == 0:
            return TreeNode(0, 0, float(self.stocks[0][0]), None, None)
        return TreeNode(n, node_id, float(self.stocks[n][node_id]),
                        node_id // self.branching, node_id % self.branching)

    def children_stock(self, n: int) -> np.ndarray:
        """Matrix (b^n, b) of child prices for every node of level n"""
        return self.stocks[n + 1].reshape(self.level_size(n), self.branching)

    def ancestors(self, n: int, m: int) -> np.ndarray:
        """Index at level m of the ancestor of every node of level n (m <= n)"""
        return np.arange(self.level_size(n)) // (self.branching ** (n - m))

    def history(self, n: int) -> np.ndarray:
        """Price paths up to level n: matrix (b^n, n+1)"""
        columns = [self.stocks[m][self.ancestors(n, m)] for m in range(n + 1)]
        return np.column_stack(columns)

    def leaf_paths(self) -> np.ndarray:
        return self.history(self.N)

    def node_id_from_branches(self, branch_indices: Sequence[int]) -> int:
        node_id = 0
        for j in branch_indices:
            node_id = node_id * self.branching + int(j)
        return node_id

    def branch_indices(self, returns: np.ndarray) -> np.ndarray:
        """Branch index of each on-tree log-return; raises if a value is not a grid point"""
        if self.branches is None:
            raise ShapeError("tree has node-dependent returns; no global branch set")
        returns = np.asarray(returns, dtype=float)
        distance = np.abs(returns[..., None] - self.branches)
        index = distance.argmin(axis=-1)
        if np.any(distance.min(axis=-1) > RETURN_TOL):
            raise DomainError("path is not on the tree's branch grid")
        return index

    def node_ids_along(self, returns: np.ndarray) -> np.ndarray:
        """
        Node ids visited by on-tree paths

        Args:
            returns: Matrix (paths, N) of on-tree log-returns

        Returns:
            Matrix (paths, N+1) of node ids per level
        """
        index = self.branch_indices(np.atleast_2d(returns))
        ids = np.zeros((index.shape[0], index.shape[1] + 1), dtype=np.int64)
        for n in range(index.shape[1]):
            ids[:, n + 1] = ids[:, n] * self.branching + index[:, n]
        return ids

    # --- serialisation -----------------------------------------------------

    def to_dict(self) -> Dict[str, Any]:
        """Debug form: levels -> nodes -> {stock, parent, branch_index}"""
        levels = []
        for n, level in enumerate(self.stocks):
            nodes = []
            for node_id, stock in enumerate(level):
                node = self.node(n, node_id)
                nodes.append({'stock': float(stock), 'parent': node.parent,
                              'branch_index': node.branch_index})
            levels.append(nodes)
        return {
            'params': self.params.to_dict(),
            'branches': None if self.branches is None else self.branches.tolist(),
            'branching': self.branching,
            'levels': levels,
        }


def build_tree(params: ModelParams, node_budget: int = DEFAULT_NODE_BUDGET) -> LatticeModel:
    """
    Build the full multinomial tree over the deduplicated branch set

    Args:
        params: Model parameters
        node_budget: Maximum number of leaves

    Returns:
        LatticeModel with |branches|^N leaves
    """
    params.validate()
    branches = branch_values(params)
    b = len(branches)
    leaves = b ** params.N
    if leaves > node_budget:
        raise CapacityError(
            f"tree with {b} branches and N={params.N} has {leaves} leaves, "
            f"exceeding the node budget {node_budget}"
        )

    log_levels = [np.zeros(1)]
    for _ in range(params.N):
        log_levels.append((log_levels[-1][:, None] + branches[None, :]).ravel())
    stocks = [params.s0 * np.exp(level) for level in log_levels]

    tree = LatticeModel(params, branches, stocks, b)
    logger.debug(f"Built tree: N={params.N}, branches={b}, leaves={leaves}")
    return tree


def binomial_tree(params: ModelParams, node_budget: int = DEFAULT_NODE_BUDGET) -> LatticeModel:
    """Tree of the sigma_high-binomial model with the same s0 and N"""
    return build_tree(params.binomial(), node_budget)


def project_scenario(path: ScenarioPath, tree: LatticeModel) -> ScenarioPath:
    """
    Map a scenario onto the tree: each return becomes the largest grid value <= it

    Args:
        path: Scenario in the continuum path space
        tree: Tree with a global branch set

    Returns:
        Projected scenario lying on the tree
    """
    if tree.branches is None:
        raise ShapeError("projection needs a tree with a global branch set")
    params = tree.params
    returns = np.asarray(path.returns, dtype=float)
    if len(returns) != tree.N:
        raise ShapeError(f"path has {len(returns)} periods, tree has {tree.N}")
    if not np.all(in_band(returns, params.sigma_low, params.sigma_high)):
        bad = returns[~in_band(returns, params.sigma_low, params.sigma_high)]
        raise DomainError(
            f"return {bad[0]} outside [-{params.sigma_high}, -{params.sigma_low}] U "
            f"[{params.sigma_low}, {params.sigma_high}]"
        )
    projected = project_returns(returns, tree.branches)
    return ScenarioPath.from_returns(params.s0, projected)


def project_returns(returns: np.ndarray, grid: np.ndarray) -> np.ndarray:
    """Vectorised floor onto a sorted grid (on-grid values within tolerance are kept)"""
    position = np.searchsorted(grid, np.asarray(returns) + RETURN_TOL, side='right') - 1
    position = np.clip(position, 0, len(grid) - 1)
    return grid[position]


def sample_returns(params: ModelParams, count: int, seed: int) -> np.ndarray:
    """
    Random scenarios in the continuum path space

    Returns:
        Matrix (count, N): random sign times magnitude uniform on [sigma_low, sigma_high]
    """
    params.validate()
    if count < 1:
        raise ParameterError(f"count must be >= 1, got {count}", 'count')
    rng = substream(seed, 'scenarios')
    signs = rng.integers(0, 2, size=(count, params.N)) * 2 - 1
    magnitudes = rng.uniform(params.sigma_low, params.sigma_high, size=(count, params.N))
    return signs * magnitudes


def sample_scenarios(params: ModelParams, count: int, seed: int) -> List[ScenarioPath]:
    """Deterministic scenario sample as ScenarioPath objects"""
    returns = sample_returns(params, count, seed)
    return [ScenarioPath.from_returns(params.s0, row) for row in returns]


def prices_from_returns(s0: float, returns: np.ndarray) -> np.ndarray:
    """Price matrix (paths, N+1) from a return matrix (paths, N)"""
    returns = np.atleast_2d(returns)
    log_prices = np.concatenate([np.zeros((returns.shape[0], 1)), np.cumsum(returns, axis=1)], axis=1)
    return s0 * np.exp(log_prices)
