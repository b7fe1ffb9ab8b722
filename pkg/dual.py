"""
Dual side: candidate measures on the tree and the penalised expectation

U(P) = E_P[F(S)] - sum_{n<N} E_P[G_n(alpha_n)],  alpha_n = (E_P[S_N | F_n] - S_n) / S_n
"""
import math
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from costs import CostSpec, conjugate_values
from lattice import LatticeModel
from payoffs import PayoffSpec
from primal import LPCertificate, Strategy, wealth_ledger, SUPERREPLICATION_TOL
from utils import ParameterError, PreconditionError, ShapeError, spawn_streams

logger = logging.getLogger(__name__)

NEG_INF = -math.inf
SUM_TOL = 1e-12
DEGENERATE_MASS = 1e-12
LEAF_NOISE = 1e-13
INITIAL_STEP = 0.25
MIN_STEP = 1e-6


@dataclass
class DualMeasure:
    """
    Nodewise transition probabilities: transitions[n] has shape (b^n, b),
    row i is the branch distribution at node i of level n
    """

    transitions: List[np.ndarray]
    degenerate: bool = False

    @property
    def N(self) -> int:
        return len(self.transitions)

    @property
    def branching(self) -> int:
        return self.transitions[0].shape[1]

    def shape_key(self) -> tuple:
        return (self.N, self.branching)

    def validate(self) -> 'DualMeasure':
        for n, level in enumerate(self.transitions):
            if level.shape != (self.branching ** n, self.branching):
                raise ShapeError(f"level {n} transitions have shape {level.shape}")
            if np.any(level < 0):
                raise ParameterError(f"negative transition probability at level {n}", 'measure')
            if np.any(np.abs(level.sum(axis=1) - 1) > SUM_TOL):
                raise ParameterError(f"transition rows at level {n} do not sum to 1", 'measure')
        return self

    def node_masses(self) -> List[np.ndarray]:
        """Probability of reaching each node, levels 0..N"""
        masses = [np.ones(1)]
        for level in self.transitions:
            masses.append((masses[-1][:, None] * level).ravel())
        return masses

    def path_probabilities(self) -> np.ndarray:
        return self.node_masses()[-1]

    def encoding(self) -> tuple:
        """Lexicographic key used to break ties between equally good measures"""
        return tuple(np.concatenate([level.ravel() for level in self.transitions]).round(15).tolist())

    def to_dict(self) -> Dict[str, Any]:
        return {
            'N': self.N,
            'branching': self.branching,
            'degenerate': self.degenerate,
            'levels': [{str(i): row.tolist() for i, row in enumerate(level)} for level in self.transitions],
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'DualMeasure':
        levels = []
        for level in data['levels']:
            rows = sorted(level.items(), key=lambda item: int(item[0]))
            levels.append(np.array([row for _, row in rows], dtype=float))
        return cls(levels, bool(data.get('degenerate', False))).validate()

    @classmethod
    def uniform(cls, tree: LatticeModel, degenerate: bool = False) -> 'DualMeasure':
        b = tree.branching
        return cls([np.full((tree.level_size(n), b), 1.0 / b) for n in range(tree.N)], degenerate)

    @classmethod
    def from_path_probabilities(cls, tree: LatticeModel, probabilities: np.ndarray) -> 'DualMeasure':
        """Nodewise transitions of a leaf distribution; unreached nodes get uniform rows"""
        probabilities = np.asarray(probabilities, dtype=float)
        if probabilities.shape != (tree.num_leaves,):
            raise ShapeError(f"expected {tree.num_leaves} leaf probabilities, got {probabilities.shape}")
        b = tree.branching
        transitions = []
        for n in range(tree.N):
            children = probabilities.reshape(tree.level_size(n + 1), -1).sum(axis=1).reshape(-1, b)
            mass = children.sum(axis=1)
            with np.errstate(divide='ignore', invalid='ignore'):
                rows = np.where(mass[:, None] > 0, children / mass[:, None], 1.0 / b)
            transitions.append(rows / rows.sum(axis=1, keepdims=True))
        return cls(transitions)


@dataclass
class MartingaleProjection:
    """M_n = E_P[S_N | F_n] per node (levels 0..N) and alpha_n = (M_n - S_n)/S_n"""

    M: List[np.ndarray]
    alpha: List[np.ndarray]


@dataclass
class DualSearchResult:
    value: float
    measure: DualMeasure
    evaluations: int
    budget_exhausted: bool
    restarts: int
    history: List[float] = field(default_factory=list)

    def to_dict(self) -> Dict[str, Any]:
        return {'U': self.value, 'evaluations': self.evaluations,
                'budget_exhausted': self.budget_exhausted, 'restarts': self.restarts}


def _check_shape(measure: DualMeasure, tree: LatticeModel):
    if measure.shape_key() != tree.shape_key():
        raise ShapeError(f"measure built for tree shape {measure.shape_key()}, got {tree.shape_key()}")


def martingale_projection(measure: DualMeasure, tree: LatticeModel) -> MartingaleProjection:
    """Backward recursion M_n(node) = sum_j P(j | node) M_{n+1}(child j), M_N = S_N"""
    _check_shape(measure, tree)
    M: List[np.ndarray] = [tree.stocks[-1].copy()]
    for n in range(tree.N - 1, -1, -1):
        M.insert(0, np.sum(measure.transitions[n] * M[0].reshape(-1, tree.branching), axis=1))
    alpha = [(M[n] - tree.stocks[n]) / tree.stocks[n] for n in range(tree.N + 1)]
    return MartingaleProjection(M, alpha)


def martingale_from_paths(measure: DualMeasure, tree: LatticeModel) -> List[np.ndarray]:
    """M_n from leaf sums of path probabilities (nodes of zero mass get nan)"""
    _check_shape(measure, tree)
    probabilities = measure.path_probabilities()
    weighted = probabilities * tree.stocks[-1]
    out = []
    for n in range(tree.N + 1):
        mass = probabilities.reshape(tree.level_size(n), -1).sum(axis=1)
        total = weighted.reshape(tree.level_size(n), -1).sum(axis=1)
        with np.errstate(divide='ignore', invalid='ignore'):
            out.append(np.where(mass > 0, total / mass, np.nan))
    return out


def penalty_terms(measure: DualMeasure, tree: LatticeModel, cost: CostSpec) -> np.ndarray:
    """E_P[G_n(alpha_n)] per level n < N (inf when a reached node has infinite conjugate)"""
    projection = martingale_projection(measure, tree)
    masses = measure.node_masses()
    terms = np.zeros(tree.N)
    for n in range(tree.N):
        reached = masses[n] > 0
        histories = tree.history(n)[reached] if cost.path_dependent else None
        values = conjugate_values(cost, n, histories, projection.alpha[n][reached])
        if np.any(np.isinf(values)):
            terms[n] = math.inf
        else:
            terms[n] = float(np.dot(masses[n][reached], values))
    return terms


def evaluate_dual(measure: DualMeasure, tree: LatticeModel, cost: CostSpec, payoff: PayoffSpec,
                  payoff_values: Optional[np.ndarray] = None) -> float:
    """
    Penalised expectation U(P) by exact tree recursion

    Returns:
        U(P), or -inf when a node of positive probability has an infinite penalty
    """
    _check_shape(measure, tree)
    if payoff_values is None:
        payoff_values = payoff.evaluate(tree.leaf_paths())
    penalty = penalty_terms(measure, tree, cost)
    if np.any(np.isinf(penalty)):
        return NEG_INF
    return float(np.dot(measure.path_probabilities(), payoff_values) - penalty.sum())


def weak_duality_check(measure: DualMeasure, strategy: Strategy, tree: LatticeModel, cost: CostSpec,
                       payoff: PayoffSpec) -> float:
    """
    Slack y - U(P) of a super-replicating strategy against a measure (nonnegative by weak duality)

    Raises:
        PreconditionError: if the strategy does not super-replicate on the tree
    """
    ledger = wealth_ledger(strategy, tree, cost)
    slack = ledger.terminal() - payoff.evaluate(tree.leaf_paths())
    if slack.min() < -SUPERREPLICATION_TOL:
        raise PreconditionError(f"strategy does not super-replicate (min slack {slack.min():.3e})")
    value = evaluate_dual(measure, tree, cost, payoff)
    return math.inf if value == NEG_INF else strategy.initial_capital - value


def conditional_drift_gap(measure: DualMeasure, tree: LatticeModel, cost: CostSpec) -> np.ndarray:
    """
    Per level n >= 1: E[G_n(alpha_n)] - E[G_n(E[alpha_n | F_{n-1}])], nonnegative
    for deterministic convex conjugates
    """
    if cost.path_dependent:
        raise ParameterError("conditional drift gap needs a deterministic cost", 'cost.path_dependent')
    projection = martingale_projection(measure, tree)
    masses = measure.node_masses()
    b = tree.branching
    gaps = np.zeros(max(tree.N - 1, 0))
    for n in range(1, tree.N):
        alpha = projection.alpha[n]
        averaged = np.sum(measure.transitions[n - 1] * alpha.reshape(-1, b), axis=1)
        reached = masses[n] > 0
        full = conjugate_values(cost, n, None, alpha[reached])
        parents_reached = masses[n - 1] > 0
        coarse = conjugate_values(cost, n, None, averaged[parents_reached])
        full_term = math.inf if np.any(np.isinf(full)) else float(np.dot(masses[n][reached], full))
        coarse_term = math.inf if np.any(np.isinf(coarse)) else float(np.dot(masses[n - 1][parents_reached], coarse))
        gaps[n - 1] = math.inf if math.isinf(full_term) else full_term - coarse_term
    return gaps


def extract_dual_from_lp(certificate: LPCertificate, tree: LatticeModel) -> DualMeasure:
    """
    Leaf multipliers of the LP -> path probabilities -> nodewise transitions

    Falls back to the uniform measure (flagged degenerate) when the multiplier
    mass vanishes.
    """
    if tuple(certificate.shape) != tree.shape_key():
        raise ShapeError(f"certificate built for tree shape {certificate.shape}, got {tree.shape_key()}")
    multipliers = np.asarray(certificate.leaf_multipliers, dtype=float)
    # solver noise on inactive leaves would create reached nodes with arbitrary rows
    multipliers = np.where(multipliers > LEAF_NOISE, multipliers, 0.0)
    total = multipliers.sum()
    if total < DEGENERATE_MASS:
        logger.warning("⚠️ LP multipliers have (near) zero mass; falling back to the uniform measure")
        return DualMeasure.uniform(tree, degenerate=True)
    if abs(total - 1) > 1e-6:
        logger.debug(f"Normalising LP multiplier mass {total:.9f}")
    return DualMeasure.from_path_probabilities(tree, multipliers / total)


# --- derivative-free search -------------------------------------------------

def project_simplex(v: np.ndarray) -> np.ndarray:
    """Euclidean projection onto the probability simplex"""
    u = np.sort(v)[::-1]
    cumulative = np.cumsum(u) - 1
    index = np.arange(1, len(v) + 1)
    positive = u - cumulative / index > 0
    rho = index[positive][-1]
    theta = cumulative[positive][-1] / rho
    return np.maximum(v - theta, 0.0)


def martingale_start(tree: LatticeModel) -> DualMeasure:
    """
    Martingale measure on each node's extreme children (alpha = 0 everywhere):
    weight on the highest child is (S - S_min)/(S_max - S_min)
    """
    b = tree.branching
    transitions = []
    for n in range(tree.N):
        children = tree.children_stock(n)
        stock = tree.stocks[n]
        low = children.argmin(axis=1)
        high = children.argmax(axis=1)
        spread = children.max(axis=1) - children.min(axis=1)
        rows = np.full((len(stock), b), 1.0 / b)
        ok = spread > 0
        weight = np.where(ok, (stock - children.min(axis=1)) / np.where(ok, spread, 1.0), 0.5)
        inside = ok & (weight >= 0) & (weight <= 1)
        idx = np.nonzero(inside)[0]
        rows[idx] = 0.0
        rows[idx, high[idx]] = weight[idx]
        rows[idx, low[idx]] = 1 - weight[idx]
        transitions.append(rows)
    return DualMeasure(transitions)


def _ascend(start: DualMeasure, tree: LatticeModel, cost: CostSpec, payoff: PayoffSpec,
            payoff_values: np.ndarray, budget: int) -> Tuple[float, DualMeasure, int, bool]:
    """Projected coordinate ascent over node transition rows; returns (U, P, evaluations, exhausted)"""
    transitions = [level.copy() for level in start.transitions]
    current = DualMeasure(transitions)
    best = evaluate_dual(current, tree, cost, payoff, payoff_values)
    evaluations = 1
    step = INITIAL_STEP
    b = tree.branching
    while step >= MIN_STEP:
        improved = False
        for n in range(tree.N):
            for node in range(tree.level_size(n)):
                for j in range(b):
                    for sign in (1.0, -1.0):
                        if evaluations >= budget:
                            return best, current, evaluations, True
                        row = transitions[n][node].copy()
                        trial = row.copy()
                        trial[j] += sign * step
                        trial = project_simplex(trial)
                        if np.allclose(trial, row, atol=1e-15):
                            continue
                        transitions[n][node] = trial
                        value = evaluate_dual(current, tree, cost, payoff, payoff_values)
                        evaluations += 1
                        if value > best:
                            best = value
                            improved = True
                        else:
                            transitions[n][node] = row
        if not improved:
            step /= 2
    return best, current, evaluations, False


def dual_search(tree: LatticeModel, cost: CostSpec, payoff: PayoffSpec, budget: int, seed: int,
                restarts: int = 4, threads: int = 1) -> DualSearchResult:
    """
    Multi-start projected coordinate ascent for sup_P U(P)

    Starts: the extreme-children martingale measure, the uniform measure, then
    Dirichlet draws from disjoint seed streams. The budget is split evenly.

    Returns:
        Best value and measure; ties broken by the lexicographic measure encoding
    """
    if budget < 1:
        raise ParameterError(f"budget must be >= 1, got {budget}", 'dual.budget')
    if restarts < 1:
        raise ParameterError(f"restarts must be >= 1, got {restarts}", 'dual.restarts')
    payoff_values = payoff.evaluate(tree.leaf_paths())
    streams = spawn_streams(seed, 'dual_search', restarts)
    starts = [martingale_start(tree), DualMeasure.uniform(tree)]
    for rng in streams[len(starts):]:
        starts.append(DualMeasure([rng.dirichlet(np.ones(tree.branching), size=tree.level_size(n))
                                   for n in range(tree.N)]))
    starts = starts[:restarts]
    share = max(1, budget // len(starts))

    def run(start: DualMeasure):
        return _ascend(start, tree, cost, payoff, payoff_values, share)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            outcomes = list(pool.map(run, starts))
    else:
        outcomes = [run(start) for start in starts]

    best_value, best_measure = NEG_INF, starts[0]
    for value, measure, _, _ in outcomes:
        if value > best_value or (value == best_value and measure.encoding() < best_measure.encoding()):
            best_value, best_measure = value, measure
    evaluations = sum(outcome[2] for outcome in outcomes)
    exhausted = any(outcome[3] for outcome in outcomes)
    if exhausted:
        logger.warning(f"⚠️ Dual search budget exhausted after {evaluations} evaluations; "
                       f"returning best-so-far U={best_value:.10g}")
    logger.info(f"✅ Dual search: U={best_value:.10g} over {len(starts)} restarts")
    return DualSearchResult(best_value, best_measure, evaluations, exhausted, len(starts),
                            [outcome[0] for outcome in outcomes])
