"""
Scaling limit experiments

- Kusuoka-type measures on sign trees built from a volatility candidate,
  with exact martingale checks
- Monte Carlo estimates of the limiting control value
  E[F(S^sigma) - int H_hat a(sigma_t)^2 dt] over candidate families
- V_N convergence studies on the sigma/sqrt(N) models with costs g^{N,c}
"""
import math
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.stats import norm

from costs import (
    CostSpec,
    LimitCurvature,
    limit_curvature_from_cost,
    penalty_a,
    penalty_b,
    scaled_cost_spec,
)
from dual import DualMeasure, evaluate_dual
from lattice import DEFAULT_NODE_BUDGET, LatticeModel, ModelParams, binomial_tree, build_tree
from payoffs import PayoffSpec
from primal import GridConfig, binomial_price, solve_primal
from utils import (
    CapacityError,
    NumericalContractError,
    ParameterError,
    PreconditionError,
    spawn_streams,
)

logger = logging.getLogger(__name__)

MAX_TREE_LEVEL = 20
MARTINGALE_TOL = 1e-10
BAND_TOL = 1e-12
MC_BLOCK = 1024
LP_LEAF_LIMIT = 4096
DEFAULT_MC_PATHS = 20_000
DEFAULT_MC_STEPS = 256


# --- volatility candidates --------------------------------------------------

@dataclass(frozen=True, eq=False)
class VolCandidate:
    """
    Volatility functional sigma~(t, driver prefix)

    Args:
        name: Identifier used in reports
        kind: constant / piecewise / threshold / feedback / custom
        evaluator: (t, prefix matrix (rows, n+1)) -> sigma~ per row
        lipschitz_const: Declared Lipschitz bound
        delta: Margin for the squared-volatility band and length of the constant tail
        constant_tail: sigma~ equals sigma_low on [1 - delta, 1]
    """

    name: str
    kind: str
    evaluator: Callable[[float, np.ndarray], np.ndarray]
    lipschitz_const: float = 0.0
    delta: float = 0.0
    constant_tail: bool = False
    params: Dict[str, Any] = field(default_factory=dict)

    def evaluate(self, t: float, prefix: np.ndarray) -> np.ndarray:
        prefix = np.atleast_2d(prefix)
        values = np.asarray(self.evaluator(t, prefix), dtype=float)
        values = np.broadcast_to(values, (prefix.shape[0],)).astype(float)
        if np.any(~np.isfinite(values)) or np.any(values < 0):
            raise ParameterError(f"candidate '{self.name}' returned an invalid volatility", 'kusuoka.candidate')
        return values

    @property
    def constant_value(self) -> Optional[float]:
        return self.params.get('sigma') if self.kind == 'constant' else None

    def to_dict(self) -> Dict[str, Any]:
        data = {'name': self.name, 'kind': self.kind, 'delta': self.delta,
                'constant_tail': self.constant_tail, 'lipschitz_const': self.lipschitz_const}
        data.update(self.params)
        return data


def constant_candidate(sigma: float, delta: float = 0.0) -> VolCandidate:
    if sigma < 0:
        raise ParameterError(f"volatility must be >= 0, got {sigma}", 'scaling.sigma')
    return VolCandidate(f"const:{sigma:.6g}", 'constant', lambda t, prefix: np.full(prefix.shape[0], sigma),
                        0.0, delta, False, {'sigma': float(sigma)})


def piecewise_candidate(times: Sequence[float], values: Sequence[float], delta: float = 0.0) -> VolCandidate:
    """Piecewise constant in time: values[i] on [times[i-1], times[i])"""
    times = np.asarray(times, dtype=float)
    values = np.asarray(values, dtype=float)
    if len(values) != len(times) + 1:
        raise ParameterError("need one more value than switching times", 'scaling.candidates')
    if np.any(np.diff(times) <= 0) or np.any((times <= 0) | (times >= 1)):
        raise ParameterError("switching times must be increasing inside (0, 1)", 'scaling.candidates')

    def evaluator(t, prefix):
        return np.full(prefix.shape[0], values[np.searchsorted(times, t, side='right')])

    name = 'piecewise:' + ','.join(f"{v:.4g}" for v in values)
    return VolCandidate(name, 'piecewise', evaluator, 0.0, delta, False,
                        {'times': times.tolist(), 'values': values.tolist()})


def threshold_candidate(level: float, low: float, high: float) -> VolCandidate:
    """high once the running maximum of the driver has reached level, low before"""
    def evaluator(t, prefix):
        return np.where(prefix.max(axis=1) >= level, high, low)

    return VolCandidate(f"threshold:{level:.4g}:{low:.4g}:{high:.4g}", 'threshold', evaluator, math.inf, 0.0,
                        False, {'level': level, 'low': low, 'high': high})


def feedback_candidate(base: float, amplitude: float, delta: float) -> VolCandidate:
    """
    base + w(t) * amplitude * (1 + tanh(B_last)) / 2 with w(t) = max(0, (1 - delta - t)/(1 - delta));
    Lipschitz in (t, path) and equal to base on [1 - delta, 1]
    """
    if not 0 < delta < 1:
        raise ParameterError(f"delta must lie in (0, 1), got {delta}", 'kusuoka.delta')

    def evaluator(t, prefix):
        weight = max(0.0, (1 - delta - t) / (1 - delta))
        return base + weight * amplitude * (1 + np.tanh(prefix[:, -1])) / 2

    lipschitz = amplitude / 2 + amplitude / (1 - delta)
    return VolCandidate(f"feedback:{base:.4g}:{amplitude:.4g}", 'feedback', evaluator, lipschitz, delta, True,
                        {'base': base, 'amplitude': amplitude})


def custom_candidate(fn: Callable[[float, np.ndarray], np.ndarray], name: str = 'custom',
                     lipschitz_const: float = math.inf, delta: float = 0.0,
                     constant_tail: bool = False) -> VolCandidate:
    return VolCandidate(name, 'custom', fn, lipschitz_const, delta, constant_tail)


def admissible_sigma_range(sigma_low: float, sigma_high: float, c: float) -> Tuple[float, float]:
    """{sigma >= 0 : a(sigma) <= c}"""
    low = math.sqrt(max(0.0, sigma_low ** 2 - 2 * c * sigma_low))
    high = math.sqrt(sigma_high ** 2 + 2 * c * sigma_high)
    return low, high


def default_constant_family(sigma_low: float, sigma_high: float, c: float, count: int = 9) -> List[VolCandidate]:
    """Constants on a grid covering the admissible range (band endpoints included)"""
    low, high = admissible_sigma_range(sigma_low, sigma_high, c)
    grid = np.unique(np.concatenate([np.linspace(low, high, count), [sigma_low, sigma_high]]))
    return [constant_candidate(float(s)) for s in grid]


def candidate_from_dict(data: Dict[str, Any]) -> VolCandidate:
    """Config block -> candidate (constant, piecewise, threshold, feedback)"""
    kind = data.get('kind')
    try:
        if kind == 'constant':
            return constant_candidate(float(data['sigma']), float(data.get('delta', 0.0)))
        if kind == 'piecewise':
            return piecewise_candidate(data['times'], data['values'], float(data.get('delta', 0.0)))
        if kind == 'threshold':
            return threshold_candidate(float(data['level']), float(data['low']), float(data['high']))
        if kind == 'feedback':
            return feedback_candidate(float(data['base']), float(data['amplitude']), float(data['delta']))
    except KeyError as e:
        raise ParameterError("missing parameter", f"candidate.{e.args[0]}")
    raise ParameterError(f"unknown candidate kind '{kind}'", 'candidate.kind')


def _check_scaling_band(sigma_low: float, sigma_high: float, c: float):
    if not sigma_low > 0:
        raise PreconditionError("the scaling limit needs sigma_low > 0")
    if not sigma_low <= sigma_high:
        raise ParameterError(f"need sigma_low <= sigma_high, got {sigma_low}, {sigma_high}", 'model.sigma_high')
    if not c > 0:
        raise ParameterError(f"truncation level c must be > 0, got {c}", 'scaling.c')


def _check_candidate_values(candidate: VolCandidate, tilde: np.ndarray, t: float,
                            sigma_low: float, sigma_high: float, c: float):
    floor = sigma_low * max(sigma_low - 2 * c, 0.0) + candidate.delta
    ceiling = sigma_high * (sigma_high + 2 * c) - candidate.delta
    squared = tilde ** 2
    if np.any(squared < floor - BAND_TOL) or np.any(squared > ceiling + BAND_TOL):
        raise ParameterError(
            f"candidate '{candidate.name}' leaves the band [{floor:.6g}, {ceiling:.6g}] for sigma~^2 at t={t:.4g}",
            'kusuoka.candidate'
        )
    if candidate.constant_tail and t >= 1 - candidate.delta - 1e-15:
        if np.any(np.abs(tilde - sigma_low) > BAND_TOL):
            raise ParameterError(f"candidate '{candidate.name}' is not sigma_low on its tail", 'kusuoka.candidate')


# --- Kusuoka construction ---------------------------------------------------

@dataclass
class KusuokaState:
    """
    Full-tree state. Per-parent arrays (levels 1..N, index n-1): sigma, kappa, q.
    Per-node arrays (levels 0..N): xi, X, B, S, M, Q.
    """

    N: int
    sigma: List[np.ndarray]
    kappa: List[np.ndarray]
    q: List[np.ndarray]
    xi: List[np.ndarray]
    X: List[np.ndarray]
    B: List[np.ndarray]
    S: List[np.ndarray]
    M: List[np.ndarray]
    Q: List[np.ndarray]

    def path_matrix(self, name: str) -> np.ndarray:
        """Per-leaf path matrix (2^N, N+1) of a per-node quantity"""
        levels = getattr(self, name)
        leaves = np.arange(2 ** self.N)
        return np.column_stack([levels[n][leaves // 2 ** (self.N - n)] for n in range(self.N + 1)])


@dataclass
class KusuokaConstruction:
    candidate: VolCandidate
    params: ModelParams
    c: float
    tree: LatticeModel
    measure: DualMeasure
    state: KusuokaState


@dataclass
class KusuokaPaths:
    """Sampled-path state under the constructed measure: matrices (paths, N+1) / (paths, N)"""

    N: int
    sigma: np.ndarray
    kappa: np.ndarray
    q: np.ndarray
    xi: np.ndarray
    X: np.ndarray
    B: np.ndarray
    S: np.ndarray
    M: np.ndarray
    Q: np.ndarray
    B_error: float
    M_error: float
    rel_ms_alternative: float


@dataclass
class KusuokaCheck:
    martingale_err_B: float
    martingale_err_M: float
    max_rel_MS: float
    q_min: float
    q_max: float
    leaf_mass: float
    dQ_min: float
    dQ_max: float
    terminal_gap: float
    B_tstat: float = 0.0
    M_tstat: float = 0.0

    def to_row(self, N: int, candidate: str, dual_value: float = math.nan) -> Dict[str, Any]:
        return {
            'N': N,
            'candidate': candidate,
            'martingale_err_B': self.martingale_err_B,
            'martingale_err_M': self.martingale_err_M,
            'max_rel_MS': self.max_rel_MS,
            'q_min': self.q_min,
            'q_max': self.q_max,
            'leaf_mass': self.leaf_mass,
            'dQ_min': self.dQ_min,
            'dQ_max': self.dQ_max,
            'dual_value': dual_value,
        }


def _q_weight(kappa_prev_x: np.ndarray, kappa: np.ndarray, sigma: np.ndarray, root: float) -> np.ndarray:
    step = (1 + kappa) * sigma / root
    return (np.exp(kappa_prev_x) - np.exp(-step)) / (np.exp(step) - np.exp(-step))


def _check_q(q: np.ndarray, n: int, N: int):
    bad = np.nonzero((q <= 0) | (q >= 1))[0]
    if len(bad):
        raise ParameterError(
            f"N too small: weight q at period {n}, node {int(bad[0])} is {q[bad[0]]:.6g}, outside (0, 1) "
            f"for N={N}", 'model.N'
        )


def _check_ratio(M: np.ndarray, S: np.ndarray, n: int, N: int, c: float):
    bound = c / math.sqrt(N)
    rel = np.abs(M - S) / S
    worst = float(np.max(rel))
    if worst > bound + BAND_TOL:
        raise ParameterError(
            f"N too small: |M - S|/S reaches {worst:.6g} at period {n}, above c/sqrt(N) = {bound:.6g} "
            f"for N={N}", 'model.N'
        )


def kusuoka_measure(candidate: VolCandidate, params: ModelParams, c: float,
                    node_budget: int = DEFAULT_NODE_BUDGET) -> KusuokaConstruction:
    """
    Build the measure on the N-period sign tree

    Args:
        candidate: Volatility candidate evaluated on the B prefix at (n-1)/N
        params: Unit-time model (s0, N, sigma_low, sigma_high); steps are sigma/sqrt(N)
        c: Truncation level

    Returns:
        Tree (child 0 = down sign, child 1 = up sign), measure and state
    """
    params.validate()
    _check_scaling_band(params.sigma_low, params.sigma_high, c)
    N = params.N
    if N > MAX_TREE_LEVEL or 2 ** N > node_budget:
        raise CapacityError(f"sign tree with N={N} has {2 ** N} leaves; use the sampled check")
    root = math.sqrt(N)
    lo, hi = params.sigma_low, params.sigma_high
    signs = np.array([-1.0, 1.0])

    S = [np.array([params.s0])]
    M = [np.array([params.s0])]
    B = [np.zeros(1)]
    X = [np.zeros(1)]
    Q = [np.zeros(1)]
    xi = [np.zeros(1)]
    kappa_node = [np.zeros(1)]
    sigmas, kappas, qs, transitions = [], [], [], []
    prefix = np.zeros((1, 1))

    for n in range(1, N + 1):
        t = (n - 1) / N
        tilde = candidate.evaluate(t, prefix)
        _check_candidate_values(candidate, tilde, t, lo, hi, c)
        sigma = np.clip(tilde, lo, hi)
        kappa = 0.5 * (tilde ** 2 / sigma ** 2 - 1)
        carried = kappa_node[-1] * X[-1]
        q = _q_weight(carried, kappa, sigma, root)
        _check_q(q, n, N)

        Xc = sigma[:, None] * signs / root
        Bc = B[-1][:, None] + (np.exp((1 + kappa)[:, None] * Xc - carried[:, None]) - 1) / \
            (np.sqrt(1 + 2 * kappa) * sigma)[:, None]
        Sc = S[-1][:, None] * np.exp(Xc)
        Mc = Sc * np.exp(kappa[:, None] * Xc)
        _check_ratio(Mc, Sc, n, N, c)
        Qc = Q[-1][:, None] + Xc ** 2 + 2 * ((Mc - Sc) / Sc) * Xc

        sigmas.append(sigma)
        kappas.append(kappa)
        qs.append(q)
        transitions.append(np.column_stack([1 - q, q]))
        S.append(Sc.ravel())
        M.append(Mc.ravel())
        B.append(Bc.ravel())
        X.append(Xc.ravel())
        Q.append(Qc.ravel())
        xi.append(np.tile(signs, len(q)))
        kappa_node.append(np.repeat(kappa, 2))
        prefix = np.column_stack([np.repeat(prefix, 2, axis=0), B[-1]])

    tree = LatticeModel.from_levels(params.per_period(N), S, 2)
    state = KusuokaState(N, sigmas, kappas, qs, xi, X, B, S, M, Q)
    logger.info(f"Built sign-tree measure for '{candidate.name}' with N={N} ({2 ** N} leaves)")
    return KusuokaConstruction(candidate, params, c, tree, DualMeasure(transitions), state)


def kusuoka_check(construction: KusuokaConstruction) -> KusuokaCheck:
    """
    Exact one-step checks on every node: B and M are martingales, |M - S|/S <= c/sqrt(N),
    q in (0, 1), leaf mass 1, N * dQ inside [sigma_low^2 - 2c sigma_high, sigma_high^2 + 2c sigma_high]
    """
    state = construction.state
    N, c = state.N, construction.c
    err_B = err_M = 0.0
    dQ_min, dQ_max = math.inf, -math.inf
    for n in range(N):
        q = state.q[n]
        B_children = state.B[n + 1].reshape(-1, 2)
        M_children = state.M[n + 1].reshape(-1, 2)
        err_B = max(err_B, float(np.max(np.abs((1 - q) * B_children[:, 0] + q * B_children[:, 1] - state.B[n]))))
        err_M = max(err_M, float(np.max(np.abs((1 - q) * M_children[:, 0] + q * M_children[:, 1] - state.M[n]))))
        dQ = N * (state.Q[n + 1].reshape(-1, 2) - state.Q[n][:, None])
        dQ_min, dQ_max = min(dQ_min, float(dQ.min())), max(dQ_max, float(dQ.max()))
    rel = max(float(np.max(np.abs(M - S) / S)) for M, S in zip(state.M, state.S))
    check = KusuokaCheck(
        martingale_err_B=err_B,
        martingale_err_M=err_M,
        max_rel_MS=rel,
        q_min=float(min(q.min() for q in state.q)),
        q_max=float(max(q.max() for q in state.q)),
        leaf_mass=float(construction.measure.path_probabilities().sum()),
        dQ_min=dQ_min,
        dQ_max=dQ_max,
        terminal_gap=float(np.max(np.abs(state.M[-1] - state.S[-1]))),
    )
    _enforce(check, construction.params, c, N)
    return check


def _enforce(check: KusuokaCheck, params: ModelParams, c: float, N: int):
    bound = c / math.sqrt(N)
    if check.max_rel_MS > bound + BAND_TOL:
        raise NumericalContractError(f"|M - S|/S reached {check.max_rel_MS:.6g} > c/sqrt(N) = {bound:.6g}")
    if max(check.martingale_err_B, check.martingale_err_M) > MARTINGALE_TOL:
        raise NumericalContractError(
            f"martingale identity failed (B err {check.martingale_err_B:.3e}, M err {check.martingale_err_M:.3e})"
        )
    low = params.sigma_low ** 2 - 2 * c * params.sigma_high
    high = params.sigma_high ** 2 + 2 * c * params.sigma_high
    if check.dQ_min < low - 1e-9 or check.dQ_max > high + 1e-9:
        raise NumericalContractError(f"N*dQ range [{check.dQ_min:.6g}, {check.dQ_max:.6g}] leaves [{low:.6g}, {high:.6g}]")


def sample_kusuoka_paths(candidate: VolCandidate, params: ModelParams, c: float, paths: int,
                         seed: int) -> KusuokaPaths:
    """
    Run the recursion along paths sampled from the constructed measure (for N
    beyond full enumeration). The one-step martingale identities are checked
    exactly on every visited node using both children.
    """
    params.validate()
    _check_scaling_band(params.sigma_low, params.sigma_high, c)
    if paths < 2:
        raise ParameterError(f"need at least 2 paths, got {paths}", 'kusuoka.paths')
    N = params.N
    root = math.sqrt(N)
    lo, hi = params.sigma_low, params.sigma_high
    streams = spawn_streams(seed, 'kusuoka', 1)
    uniforms = streams[0].uniform(size=(paths, N))

    shape = (paths, N + 1)
    S, M, B, X, Q, xi = (np.zeros(shape) for _ in range(6))
    S[:, 0] = M[:, 0] = params.s0
    sig_m, kap_m, q_m = (np.zeros((paths, N)) for _ in range(3))
    kappa_prev = np.zeros(paths)
    err_B = err_M = rel_alt = 0.0
    for n in range(1, N + 1):
        t = (n - 1) / N
        tilde = candidate.evaluate(t, B[:, :n])
        _check_candidate_values(candidate, tilde, t, lo, hi, c)
        sigma = np.clip(tilde, lo, hi)
        kappa = 0.5 * (tilde ** 2 / sigma ** 2 - 1)
        carried = kappa_prev * X[:, n - 1]
        q = _q_weight(carried, kappa, sigma, root)
        _check_q(q, n, N)

        both = sigma[:, None] * np.array([-1.0, 1.0]) / root
        B_both = B[:, n - 1][:, None] + (np.exp((1 + kappa)[:, None] * both - carried[:, None]) - 1) / \
            (np.sqrt(1 + 2 * kappa) * sigma)[:, None]
        S_both = S[:, n - 1][:, None] * np.exp(both)
        M_both = S_both * np.exp(kappa[:, None] * both)
        _check_ratio(M_both, S_both, n, N, c)
        err_B = max(err_B, float(np.max(np.abs((1 - q) * B_both[:, 0] + q * B_both[:, 1] - B[:, n - 1]))))
        err_M = max(err_M, float(np.max(np.abs((1 - q) * M_both[:, 0] + q * M_both[:, 1] - M[:, n - 1]))))
        rel_alt = max(rel_alt, float(np.max(np.abs(M_both - S_both) / S_both)))

        up = (uniforms[:, n - 1] < q).astype(int)
        rows = np.arange(paths)
        X[:, n] = both[rows, up]
        B[:, n] = B_both[rows, up]
        S[:, n] = S_both[rows, up]
        M[:, n] = M_both[rows, up]
        Q[:, n] = Q[:, n - 1] + X[:, n] ** 2 + 2 * ((M[:, n] - S[:, n]) / S[:, n]) * X[:, n]
        xi[:, n] = 2 * up - 1
        sig_m[:, n - 1], kap_m[:, n - 1], q_m[:, n - 1] = sigma, kappa, q
        kappa_prev = kappa
    return KusuokaPaths(N, sig_m, kap_m, q_m, xi, X, B, S, M, Q, err_B, err_M, rel_alt)


def kusuoka_path_check(sample: KusuokaPaths, params: ModelParams, c: float) -> KusuokaCheck:
    """Sampled counterpart of kusuoka_check; adds 3-sigma t-statistics for B_N and M_N"""
    N = sample.N
    dQ = N * np.diff(sample.Q, axis=1)
    paths = sample.B.shape[0]

    def tstat(values: np.ndarray, centre: float) -> float:
        spread = values.std(ddof=1)
        return 0.0 if spread == 0 else float((values.mean() - centre) / (spread / math.sqrt(paths)))

    check = KusuokaCheck(
        martingale_err_B=sample.B_error,
        martingale_err_M=sample.M_error,
        max_rel_MS=max(sample.rel_ms_alternative, float(np.max(np.abs(sample.M - sample.S) / sample.S))),
        q_min=float(sample.q.min()),
        q_max=float(sample.q.max()),
        leaf_mass=math.nan,
        dQ_min=float(dQ.min()),
        dQ_max=float(dQ.max()),
        terminal_gap=float(np.max(np.abs(sample.M[:, -1] - sample.S[:, -1]))),
        B_tstat=tstat(sample.B[:, -1], 0.0),
        M_tstat=tstat(sample.M[:, -1], params.s0),
    )
    _enforce(check, params, c, N)
    if abs(check.B_tstat) > 3 or abs(check.M_tstat) > 3:
        logger.warning(f"⚠️ Sampled martingale t-statistics B={check.B_tstat:.2f}, M={check.M_tstat:.2f} exceed 3")
    return check


def penalty_path(state: Union[KusuokaState, KusuokaPaths], sigma_low: float,
                 sigma_high: float) -> Tuple[np.ndarray, np.ndarray]:
    """
    Per-step b(N dQ_n) and the discretised penalty sum_n b(N dQ_n)/N along each path

    Args:
        state: Full-tree state (one row per leaf) or sampled paths

    Returns:
        (per-step matrix (paths, N), totals per path)
    """
    Q_paths = state.path_matrix('Q') if isinstance(state, KusuokaState) else state.Q
    N = state.N
    steps = np.atleast_2d(penalty_b(N * np.diff(Q_paths, axis=1), sigma_low, sigma_high))
    return steps, steps.sum(axis=1) / N


def kusuoka_dual_value(construction: KusuokaConstruction, h: CostSpec, payoff: PayoffSpec) -> float:
    """U of the constructed measure under g^{N,c}; a lower bound on V_N by weak duality"""
    cost = scaled_cost_spec(h, construction.c, construction.state.N)
    return evaluate_dual(construction.measure, construction.tree, cost, payoff)


# --- Black-Scholes oracle ---------------------------------------------------

def black_scholes_call(s0: float, strike: float, sigma: float, maturity: float = 1.0) -> float:
    if sigma <= 0 or maturity <= 0:
        return max(s0 - strike, 0.0)
    root = sigma * math.sqrt(maturity)
    d1 = (math.log(s0 / strike) + 0.5 * root ** 2) / root
    return float(s0 * norm.cdf(d1) - strike * norm.cdf(d1 - root))


def black_scholes_put(s0: float, strike: float, sigma: float, maturity: float = 1.0) -> float:
    return black_scholes_call(s0, strike, sigma, maturity) - s0 + strike


def black_scholes_price(payoff: PayoffSpec, s0: float, sigma: float) -> Optional[float]:
    """Closed form for call/put/constant payoffs, None otherwise"""
    if payoff.kind == 'call':
        return black_scholes_call(s0, payoff.params['strike'], sigma)
    if payoff.kind == 'put':
        return black_scholes_put(s0, payoff.params['strike'], sigma)
    if payoff.kind == 'constant':
        return float(payoff.params['value'])
    return None


# --- limit value ------------------------------------------------------------

@dataclass
class LimitEstimate:
    """Max over a candidate family: a lower estimate of the supremum, never two-sided"""

    best_value: float
    best_id: Optional[str]
    rows: List[Dict[str, Any]]
    lower_estimate: bool = True
    two_sided: bool = False


def _simulate_block(candidate: VolCandidate, payoff: PayoffSpec, curvature: LimitCurvature, s0: float,
                    sigma_low: float, sigma_high: float, steps: int, size: int,
                    rng: np.random.Generator) -> Tuple[np.ndarray, float]:
    """Per-path F(S) - penalty for one block of paths and the largest a(sigma) seen"""
    dt = 1.0 / steps
    dW = rng.standard_normal((size, steps)) * math.sqrt(dt)
    W = np.concatenate([np.zeros((size, 1)), np.cumsum(dW, axis=1)], axis=1)
    times = np.arange(steps + 1) * dt
    sigma_const = candidate.constant_value
    if sigma_const is not None:
        S = s0 * np.exp(sigma_const * W - 0.5 * sigma_const ** 2 * times)
        sigmas = np.full((size, steps), sigma_const)
    else:
        log_S = np.zeros((size, steps + 1))
        log_S[:, 0] = math.log(s0)
        sigmas = np.empty((size, steps))
        for k in range(steps):
            sigma = candidate.evaluate(k * dt, W[:, :k + 1])
            sigmas[:, k] = sigma
            log_S[:, k + 1] = log_S[:, k] + sigma * dW[:, k] - 0.5 * sigma ** 2 * dt
        S = np.exp(log_S)

    rates = np.asarray(penalty_a(sigmas, sigma_low, sigma_high)).reshape(size, steps)
    worst = float(rates.max())
    if curvature.is_infinite:
        penalty = np.where(rates.max(axis=1) > 0, math.inf, 0.0)
    elif curvature.kind == 'constant':
        penalty = curvature.value * (rates ** 2).sum(axis=1) * dt
    else:
        penalty = np.zeros(size)
        for k in range(steps):
            penalty += curvature.evaluate(k * dt, S[:, :k + 1]) * rates[:, k] ** 2 * dt
    return payoff.evaluate(S) - penalty, worst


def limit_value_estimate(candidates: Sequence[VolCandidate], payoff: PayoffSpec, curvature: LimitCurvature,
                         s0: float, sigma_low: float, sigma_high: float, c: float,
                         paths: int = DEFAULT_MC_PATHS, steps: int = DEFAULT_MC_STEPS, seed: int = 0,
                         closed_form: bool = False, threads: int = 1) -> LimitEstimate:
    """
    Estimate E[F(S^sigma) - int H_hat a(sigma_t)^2 dt] for each candidate

    Constant candidates are sampled exactly on the time grid, others by the
    log-Euler scheme. All candidates share the same Brownian increments.

    Returns:
        LimitEstimate whose best value is a lower estimate of the supremum
    """
    _check_scaling_band(sigma_low, sigma_high, c)
    if paths < 2 or steps < 1:
        raise ParameterError(f"need paths >= 2 and steps >= 1, got {paths}, {steps}", 'scaling.mc')
    blocks = [MC_BLOCK] * (paths // MC_BLOCK) + ([paths % MC_BLOCK] if paths % MC_BLOCK else [])
    rows: List[Dict[str, Any]] = []
    best_value, best_id = -math.inf, None

    for index, candidate in enumerate(candidates):
        cid = f"{index}:{candidate.name}"
        row: Dict[str, Any] = {'candidate_id': cid, 'estimate': math.nan, 'se': math.nan, 'rejected': ''}
        sigma_const = candidate.constant_value
        closed = None
        if closed_form and sigma_const is not None and curvature.kind != 'custom':
            closed = black_scholes_price(payoff, s0, sigma_const)

        if closed is not None:
            rate = penalty_a(sigma_const, sigma_low, sigma_high)
            if rate > c + BAND_TOL:
                row['rejected'] = f"a(sigma)={rate:.6g} exceeds c={c:g}"
            elif curvature.is_infinite and rate > 0:
                row['rejected'] = 'infinite penalty'
            else:
                weight = 0.0 if curvature.is_infinite else curvature.value
                row['estimate'], row['se'] = closed - weight * rate ** 2, 0.0
        else:
            run_steps = 1 if (sigma_const is not None and payoff.terminal_only
                              and curvature.kind != 'custom') else steps
            streams = spawn_streams(seed, 'mc', len(blocks))

            def run(job):
                size, rng = job
                return _simulate_block(candidate, payoff, curvature, s0, sigma_low, sigma_high,
                                       run_steps, size, rng)

            jobs = list(zip(blocks, streams))
            if threads > 1:
                with ThreadPoolExecutor(max_workers=threads) as pool:
                    outcomes = list(pool.map(run, jobs))
            else:
                outcomes = [run(job) for job in jobs]
            values = np.concatenate([outcome[0] for outcome in outcomes])
            worst = max(outcome[1] for outcome in outcomes)
            if worst > c + BAND_TOL:
                row['rejected'] = f"a(sigma)={worst:.6g} exceeds c={c:g}"
            elif np.any(np.isinf(values)):
                row['rejected'] = 'infinite penalty'
            else:
                row['estimate'] = float(values.mean())
                row['se'] = float(values.std(ddof=1) / math.sqrt(len(values)))

        if row['rejected']:
            logger.warning(f"⚠️ Candidate {cid} rejected: {row['rejected']}")
        elif row['estimate'] > best_value:
            best_value, best_id = row['estimate'], cid
        rows.append(row)

    if best_id is None:
        raise ParameterError("every candidate was rejected", 'scaling.candidates')
    logger.info(f"Limit lower estimate {best_value:.8g} from candidate {best_id}")
    return LimitEstimate(best_value, best_id, rows)


# --- convergence study ------------------------------------------------------

@dataclass
class StudyReport:
    rows: List[Dict[str, Any]]
    limit: LimitEstimate
    sandwich_holds: bool
    columns: List[str]


def price_scaled_model(h: CostSpec, c: float, payoff: PayoffSpec, params: ModelParams, N: int,
                       grid: Optional[GridConfig] = None,
                       node_budget: int = DEFAULT_NODE_BUDGET) -> Tuple[float, str]:
    """
    V_N on the sigma/sqrt(N) model with costs g^{N,c}

    Frictionless terminal payoffs use the closed-form binomial price; convex
    payoffs under deterministic costs are priced on the sigma_high-binomial
    tree; everything else on the full k=1 tree.

    Returns:
        (V_N, method)
    """
    model = ModelParams(params.s0, N, params.sigma_low / math.sqrt(N), params.sigma_high / math.sqrt(N), 1)
    cost = scaled_cost_spec(h, c, N)
    if cost.kind == 'zero' and payoff.terminal_only:
        return binomial_price(model, payoff), 'binomial-closed-form'
    if not cost.path_dependent and payoff.convex_in_path:
        tree, method = binomial_tree(model, node_budget), 'binomial-reduction'
    else:
        tree, method = build_tree(model, node_budget), 'full-tree'
    backend = 'lp' if cost.is_piecewise_linear and tree.num_leaves <= LP_LEAF_LIMIT else 'dp'
    solution = solve_primal(tree, cost, payoff, backend, grid, with_strategy=False)
    return solution.value, method


def g_expectation_bound(payoff: PayoffSpec, s0: float, sigma_low: float, sigma_high: float,
                        count: int = 5, paths: int = DEFAULT_MC_PATHS, steps: int = DEFAULT_MC_STEPS,
                        seed: int = 0) -> Tuple[float, float]:
    """Max over constant sigma in [sigma_low, sigma_high] of E[F(S^sigma)], with its standard error"""
    best, best_se = -math.inf, 0.0
    for sigma in np.linspace(sigma_low, sigma_high, count):
        closed = black_scholes_price(payoff, s0, float(sigma))
        if closed is not None:
            value, se = closed, 0.0
        else:
            estimate = limit_value_estimate([constant_candidate(float(sigma))], payoff, constant_curvature_zero(),
                                            s0, sigma_low, sigma_high, 1.0, paths, steps, seed)
            value, se = estimate.rows[0]['estimate'], estimate.rows[0]['se']
        if value > best:
            best, best_se = value, se
    return best, best_se


def constant_curvature_zero() -> LimitCurvature:
    return LimitCurvature('constant', 0.0)


def convergence_study(h: CostSpec, c: float, payoff: PayoffSpec, Ns: Sequence[int], params: ModelParams,
                      curvature: Optional[LimitCurvature] = None,
                      candidates: Optional[Sequence[VolCandidate]] = None,
                      grid: Optional[GridConfig] = None, mc_paths: int = DEFAULT_MC_PATHS,
                      mc_steps: int = DEFAULT_MC_STEPS, seed: int = 0,
                      node_budget: int = DEFAULT_NODE_BUDGET,
                      kusuoka_candidate: Optional[VolCandidate] = None, threads: int = 1) -> StudyReport:
    """
    V_N for each N next to the G-expectation lower bound and the best limit estimate

    Args:
        h: Limiting cost
        c: Truncation level
        payoff: Payoff
        Ns: Strictly increasing period counts
        params: Unit-time model (s0, sigma_low, sigma_high); params.N is ignored
        curvature: H_hat (estimated from h when omitted)
        candidates: Candidate family (default: constants over {a(sigma) <= c})
        kusuoka_candidate: Adds a dual_lower_bound column from the sign-tree measure

    Returns:
        StudyReport with rows {N, V_N, lower_bound, lower_bound_se, best_limit_estimate, best_candidate_id}
    """
    Ns = [int(N) for N in Ns]
    if not Ns or any(b <= a for a, b in zip(Ns, Ns[1:])) or Ns[0] < 1:
        raise ParameterError(f"N list must be strictly increasing and positive, got {Ns}", 'scaling.N')
    _check_scaling_band(params.sigma_low, params.sigma_high, c)
    grid = grid or GridConfig(step=0.01, refine_tol=1e-9)
    curvature = curvature or limit_curvature_from_cost(h)
    family = list(candidates) if candidates else default_constant_family(params.sigma_low, params.sigma_high, c)

    lower, lower_se = g_expectation_bound(payoff, params.s0, params.sigma_low, params.sigma_high,
                                          paths=mc_paths, steps=mc_steps, seed=seed)
    limit = limit_value_estimate(family, payoff, curvature, params.s0, params.sigma_low, params.sigma_high, c,
                                 mc_paths, mc_steps, seed, closed_form=True, threads=threads)

    columns = ['N', 'V_N', 'lower_bound', 'lower_bound_se', 'best_limit_estimate', 'best_candidate_id']
    if kusuoka_candidate is not None:
        columns.append('dual_lower_bound')
    rows = []
    sandwich = True
    for N in Ns:
        value, method = price_scaled_model(h, c, payoff, params, N, grid, node_budget)
        row = {'N': N, 'V_N': value, 'lower_bound': lower, 'lower_bound_se': lower_se,
               'best_limit_estimate': limit.best_value, 'best_candidate_id': limit.best_id}
        if kusuoka_candidate is not None:
            row['dual_lower_bound'] = _dual_lower_bound(kusuoka_candidate, h, c, payoff, params, N, node_budget)
        if value < lower - 3 * lower_se - 1e-9:
            sandwich = False
            logger.warning(f"⚠️ N={N}: V_N={value:.8g} below the G-expectation bound {lower:.8g}")
        logger.info(f"✅ N={N}: V_N={value:.10g} ({method})")
        rows.append(row)
    return StudyReport(rows, limit, sandwich, columns)


def _dual_lower_bound(candidate: VolCandidate, h: CostSpec, c: float, payoff: PayoffSpec,
                      params: ModelParams, N: int, node_budget: int) -> float:
    model = ModelParams(params.s0, N, params.sigma_low, params.sigma_high, 1)
    try:
        construction = kusuoka_measure(candidate, model, c, node_budget)
    except (CapacityError, ParameterError) as e:
        logger.warning(f"⚠️ No sign-tree dual bound at N={N}: {e}")
        return math.nan
    return kusuoka_dual_value(construction, h, payoff)
