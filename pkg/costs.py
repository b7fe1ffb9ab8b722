"""
Transaction cost functions and their convex conjugates

A cost g_n(history, beta) is convex and nonnegative in the traded value beta
with g_n(., 0) = 0. Kinds zero / proportional / quadratic / piecewise_linear
have closed forms; the custom kind wraps a user evaluator or a tabulated grid
and is conjugated numerically. Also houses the slope truncation h^c, the
N-period scaled costs, the limit curvature and the penalty functions a, b.
"""
import math
import logging
from dataclasses import dataclass, field, replace
from typing import Any, Callable, Dict, Optional, Tuple

import numpy as np
from scipy.optimize import brentq, minimize_scalar

from utils import DomainError, ParameterError

logger = logging.getLogger(__name__)

INF = math.inf

# Drift ratios within this distance of the conjugate's domain count as feasible
CONJUGATE_TOL = 1e-9

# Custom conjugate search
BRACKET_START = 1.0
MAX_DOUBLINGS = 60
SEARCH_TOL = 1e-9

KINDS = ('zero', 'proportional', 'quadratic', 'piecewise_linear', 'custom')
PIECEWISE_LINEAR_KINDS = ('zero', 'proportional', 'piecewise_linear')


def is_infinite(value: float) -> bool:
    return value == INF


@dataclass(frozen=True, eq=False)
class CostSpec:
    """
    Cost function g_n(history, beta)

    Args:
        kind: One of KINDS
        params: Kind parameters (rate / lam / breakpoints+slopes / beta+values)
        path_dependent: True when the evaluator reads the price history
        fn: Custom evaluator (n, history, beta_array) -> cost array; for a
            continuous-time cost h the first two arguments are (t, path)
        cap: Slope cap c of a truncated cost h^c, None when untruncated
        continuous: True when fn is in continuous-time form h_t(w, beta)
    """

    kind: str
    params: Dict[str, Any] = field(default_factory=dict)
    path_dependent: bool = False
    fn: Optional[Callable[..., Any]] = None
    cap: Optional[float] = None
    continuous: bool = False

    # --- evaluation --------------------------------------------------------

    def evaluate(self, n: Any, history: Optional[np.ndarray], beta: Any) -> np.ndarray:
        """Cost of trading beta (scalar or array) at period n after the given price history"""
        beta = np.asarray(beta, dtype=float)
        if self.kind == 'zero':
            return np.zeros_like(beta)
        if self.kind == 'proportional':
            return self.params['rate'] * np.abs(beta)
        if self.kind == 'quadratic':
            lam = self.params['lam']
            if self.cap is None:
                return lam * beta ** 2
            kink = self.cap / (2 * lam)
            return np.where(np.abs(beta) <= kink, lam * beta ** 2,
                            self.cap * np.abs(beta) - self.cap ** 2 / (4 * lam))
        if self.kind == 'piecewise_linear':
            slopes, intercepts = self.affine_pieces()
            return np.max(np.multiply.outer(beta, slopes) + intercepts, axis=-1)
        return self._evaluate_custom(n, history, beta)

    def __call__(self, n: Any, history: Optional[np.ndarray], beta: Any) -> np.ndarray:
        return self.evaluate(n, history, beta)

    def evaluate_rows(self, n: int, histories: Optional[np.ndarray], beta: np.ndarray) -> np.ndarray:
        """
        Row-wise evaluation for a batch of nodes

        Args:
            n: Period
            histories: Matrix (rows, n+1) of price prefixes, one per row of beta
            beta: Matrix (rows, m) of traded values

        Returns:
            Matrix (rows, m) of costs
        """
        if not self.path_dependent or histories is None:
            return self.evaluate(n, None, beta)
        out = np.empty_like(beta, dtype=float)
        for row in range(beta.shape[0]):
            out[row] = self.evaluate(n, histories[row], beta[row])
        return out

    def _evaluate_custom(self, n: Any, history: Optional[np.ndarray], beta: np.ndarray) -> np.ndarray:
        if self.fn is None:
            raise ParameterError("custom cost needs an evaluator or a tabulated grid", 'cost.fn')
        if self.cap is None:
            values = np.asarray(self.fn(n, history, beta), dtype=float)
            _check_custom_values(values)
            return values

        low, high = truncation_interval(self, n, history)
        inner = replace(self, cap=None)
        clipped = np.clip(beta, low if math.isfinite(low) else -np.inf, high)
        values = inner.evaluate(n, history, clipped)
        if math.isfinite(high):
            values = values + np.where(beta > high, self.cap * (beta - high), 0.0)
        if math.isfinite(low):
            values = values + np.where(beta < low, self.cap * (low - beta), 0.0)
        return values

    # --- structure ---------------------------------------------------------

    @property
    def is_piecewise_linear(self) -> bool:
        return self.kind in PIECEWISE_LINEAR_KINDS

    def slopes_and_breakpoints(self) -> Tuple[np.ndarray, np.ndarray]:
        """Nondecreasing slopes and the breakpoints between them (piecewise-linear kinds)"""
        if self.kind == 'zero':
            return np.zeros(1), np.zeros(0)
        if self.kind == 'proportional':
            rate = self.params['rate']
            return np.array([-rate, rate]), np.zeros(1)
        if self.kind == 'piecewise_linear':
            slopes = np.asarray(self.params['slopes'], dtype=float)
            breakpoints = np.asarray(self.params['breakpoints'], dtype=float)
            if self.cap is not None:
                slopes = np.clip(slopes, -self.cap, self.cap)
            return slopes, breakpoints
        raise ParameterError(f"cost kind '{self.kind}' is not piecewise linear", 'cost.kind')

    def affine_pieces(self) -> Tuple[np.ndarray, np.ndarray]:
        """
        Slopes s_i and intercepts a_i with g(beta) = max_i (s_i * beta + a_i)

        Intercepts follow from continuity at the breakpoints and g(0) = 0.
        """
        slopes, breakpoints = self.slopes_and_breakpoints()
        intercepts = np.zeros(len(slopes))
        # piece containing beta = 0 passes through the origin
        zero_piece = int(np.searchsorted(breakpoints, 0.0, side='right'))
        zero_piece = min(zero_piece, len(slopes) - 1)
        for i in range(zero_piece + 1, len(slopes)):
            b = breakpoints[i - 1]
            intercepts[i] = intercepts[i - 1] + (slopes[i - 1] - slopes[i]) * b
        for i in range(zero_piece - 1, -1, -1):
            b = breakpoints[i]
            intercepts[i] = intercepts[i + 1] + (slopes[i + 1] - slopes[i]) * b
        return slopes, intercepts

    def lipschitz(self, radius: float, n: int = 0, history: Optional[np.ndarray] = None) -> float:
        """Lipschitz constant of beta -> g on [-radius, radius]"""
        if self.kind == 'zero':
            return 0.0
        if self.kind == 'proportional':
            return float(self.params['rate'])
        if self.kind == 'quadratic':
            slope = 2 * self.params['lam'] * radius
            return slope if self.cap is None else min(slope, self.cap)
        if self.kind == 'piecewise_linear':
            slopes, _ = self.slopes_and_breakpoints()
            return float(np.max(np.abs(slopes)))
        probe = np.array([-radius, -radius * (1 - 1e-6), radius * (1 - 1e-6), radius])
        values = self.evaluate(n, history, probe)
        slope = max(abs(values[1] - values[0]), abs(values[3] - values[2])) / (radius * 1e-6)
        return float(slope if self.cap is None else min(slope, self.cap))

    def to_dict(self) -> Dict[str, Any]:
        data: Dict[str, Any] = {'kind': self.kind}
        data.update(self.params)
        if self.cap is not None:
            data['cap'] = self.cap
        if self.path_dependent:
            data['path_dependent'] = True
        return data


def _check_custom_values(values: np.ndarray):
    if np.any(np.isnan(values)):
        raise ParameterError("custom cost evaluator returned NaN", 'cost.fn')
    if np.any(values < -1e-12):
        raise ParameterError(f"custom cost evaluator returned negative cost {values.min()}", 'cost.fn')


# --- constructors -----------------------------------------------------------

def zero_cost() -> CostSpec:
    return CostSpec('zero')


def proportional_cost(rate: float) -> CostSpec:
    if rate < 0:
        raise ParameterError(f"rate must be >= 0, got {rate}", 'cost.rate')
    return CostSpec('proportional', {'rate': float(rate)})


def quadratic_cost(lam: float) -> CostSpec:
    if lam <= 0:
        raise ParameterError(f"lam must be > 0, got {lam}", 'cost.lam')
    return CostSpec('quadratic', {'lam': float(lam)})


def piecewise_linear_cost(breakpoints, slopes) -> CostSpec:
    """
    Convex piecewise-linear cost anchored at g(0) = 0

    Args:
        breakpoints: Increasing kink locations
        slopes: len(breakpoints)+1 nondecreasing slopes, left to right
    """
    breakpoints = [float(b) for b in breakpoints]
    slopes = [float(s) for s in slopes]
    if len(slopes) != len(breakpoints) + 1:
        raise ParameterError("need exactly one more slope than breakpoints", 'cost.slopes')
    if any(b2 <= b1 for b1, b2 in zip(breakpoints, breakpoints[1:])):
        raise ParameterError("breakpoints must be strictly increasing", 'cost.breakpoints')
    if any(s2 < s1 for s1, s2 in zip(slopes, slopes[1:])):
        raise ParameterError("slopes must be nondecreasing", 'cost.slopes')
    # 0 must be a minimiser so that g >= 0
    zero_piece = int(np.searchsorted(breakpoints, 0.0, side='right'))
    left_slope = slopes[zero_piece - 1] if zero_piece > 0 and breakpoints[zero_piece - 1] == 0.0 \
        else slopes[zero_piece]
    right_slope = slopes[zero_piece]
    if left_slope > 0 or right_slope < 0:
        raise ParameterError("cost must be minimised at beta = 0 (subgradient at 0 must contain 0)",
                             'cost.slopes')
    return CostSpec('piecewise_linear', {'breakpoints': breakpoints, 'slopes': slopes})


def custom_cost(fn: Callable[..., Any], path_dependent: bool = False, continuous: bool = False) -> CostSpec:
    return CostSpec('custom', {}, path_dependent=path_dependent, fn=fn, continuous=continuous)


def tabulated_cost(beta_grid, values) -> CostSpec:
    """
    Custom cost from a tabulated (beta, g(beta)) grid, linearly interpolated and
    extrapolated with the end slopes

    Raises:
        ParameterError: if the table is not convex, not zero at 0 or negative
    """
    beta_grid = np.asarray(beta_grid, dtype=float)
    values = np.asarray(values, dtype=float)
    if beta_grid.ndim != 1 or len(beta_grid) < 2 or len(beta_grid) != len(values):
        raise ParameterError("need matching beta/value grids with at least two points", 'cost.beta')
    if np.any(np.diff(beta_grid) <= 0):
        raise ParameterError("beta grid must be strictly increasing", 'cost.beta')
    slopes = np.diff(values) / np.diff(beta_grid)
    if np.any(np.diff(slopes) < -1e-12):
        raise ParameterError("tabulated cost is not convex (slopes decrease)", 'cost.values')
    if np.any(values < -1e-12):
        raise ParameterError("tabulated cost must be nonnegative", 'cost.values')
    at_zero = float(np.interp(0.0, beta_grid, values)) if beta_grid[0] <= 0 <= beta_grid[-1] else None
    if at_zero is None or abs(at_zero) > 1e-12:
        raise ParameterError("tabulated cost must cover beta = 0 with value 0", 'cost.values')

    def fn(n, history, beta):
        beta = np.asarray(beta, dtype=float)
        inside = np.interp(beta, beta_grid, values)
        left = values[0] + slopes[0] * (beta - beta_grid[0])
        right = values[-1] + slopes[-1] * (beta - beta_grid[-1])
        return np.where(beta < beta_grid[0], left, np.where(beta > beta_grid[-1], right, inside))

    return CostSpec('custom', {'beta': beta_grid.tolist(), 'values': values.tolist()}, fn=fn)


def cost_from_dict(data: Dict[str, Any]) -> CostSpec:
    """Build a cost from its config block"""
    kind = data.get('kind')
    allowed = {
        'zero': {'kind'},
        'proportional': {'kind', 'rate'},
        'quadratic': {'kind', 'lam'},
        'piecewise_linear': {'kind', 'breakpoints', 'slopes'},
        'custom': {'kind', 'beta', 'values'},
    }
    if kind not in allowed:
        raise ParameterError(f"unknown cost kind '{kind}', expected one of {KINDS}", 'cost.kind')
    unknown = set(data) - allowed[kind] - {'cap'}
    if unknown:
        raise ParameterError(f"unknown key(s) {sorted(unknown)}", f"cost.{sorted(unknown)[0]}")
    try:
        if kind == 'zero':
            cost = zero_cost()
        elif kind == 'proportional':
            cost = proportional_cost(float(data['rate']))
        elif kind == 'quadratic':
            cost = quadratic_cost(float(data['lam']))
        elif kind == 'piecewise_linear':
            cost = piecewise_linear_cost(data['breakpoints'], data['slopes'])
        else:
            cost = tabulated_cost(data['beta'], data['values'])
    except KeyError as e:
        raise ParameterError("missing parameter", f"cost.{e.args[0]}")
    if data.get('cap') is not None:
        cost = truncate(cost, float(data['cap']))
    return cost


def check_convexity(cost: CostSpec, n: int = 0, history: Optional[np.ndarray] = None,
                    rng: Optional[np.random.Generator] = None, samples: int = 200,
                    scale: float = 10.0) -> bool:
    """Midpoint convexity and nonnegativity spot-check on random triples"""
    rng = rng or np.random.default_rng(0)
    a = rng.uniform(-scale, scale, samples)
    b = rng.uniform(-scale, scale, samples)
    ga = cost.evaluate(n, history, a)
    gb = cost.evaluate(n, history, b)
    gm = cost.evaluate(n, history, (a + b) / 2)
    tolerance = 1e-9 * (1 + np.abs(ga) + np.abs(gb))
    g0 = float(cost.evaluate(n, history, np.array(0.0)))
    return bool(np.all(gm <= (ga + gb) / 2 + tolerance) and np.all(ga >= -1e-12) and abs(g0) <= 1e-12)


# --- conjugates -------------------------------------------------------------

def conjugate(cost: CostSpec, n: Any, history: Optional[np.ndarray], alpha: float) -> float:
    """
    Legendre-Fenchel transform G_n(alpha) = sup_beta {alpha*beta - g_n(beta)}

    Returns:
        Value in [0, INF]; INF marks an unbounded supremum
    """
    value, _ = conjugate_with_argmax(cost, n, history, alpha)
    return value


def conjugate_with_argmax(cost: CostSpec, n: Any, history: Optional[np.ndarray],
                          alpha: float) -> Tuple[float, float]:
    """Conjugate value plus the maximising beta (nan when the value is INF)"""
    alpha = float(alpha)
    if cost.kind == 'quadratic':
        lam = cost.params['lam']
        if cost.cap is not None and abs(alpha) > cost.cap + CONJUGATE_TOL:
            return INF, math.nan
        return alpha ** 2 / (4 * lam), alpha / (2 * lam)

    if cost.is_piecewise_linear:
        slopes, breakpoints = cost.slopes_and_breakpoints()
        if alpha < slopes[0] - CONJUGATE_TOL or alpha > slopes[-1] + CONJUGATE_TOL:
            return INF, math.nan
        if len(breakpoints) == 0:
            return 0.0, 0.0
        objective = alpha * breakpoints - cost.evaluate(n, history, breakpoints)
        best = int(np.argmax(objective))
        if objective[best] <= 0.0:
            return 0.0, 0.0
        return float(objective[best]), float(breakpoints[best])

    return _custom_conjugate(cost, n, history, alpha)


def _custom_conjugate(cost: CostSpec, n: Any, history: Optional[np.ndarray],
                      alpha: float) -> Tuple[float, float]:
    if cost.cap is not None and abs(alpha) > cost.cap + CONJUGATE_TOL:
        return INF, math.nan

    def objective(beta: float) -> float:
        return alpha * beta - float(cost.evaluate(n, history, np.array(beta)))

    high = _expand_bracket(objective, BRACKET_START)
    low = _expand_bracket(objective, -BRACKET_START)
    if high is None or low is None:
        return INF, math.nan

    result = minimize_scalar(lambda beta: -objective(beta), bounds=(low, high), method='bounded',
                             options={'xatol': SEARCH_TOL})
    beta_star = float(result.x)
    value = objective(beta_star)
    # the origin and bracket ends are always candidates
    for candidate in (0.0, low, high):
        if objective(candidate) > value:
            beta_star, value = candidate, objective(candidate)
    return max(value, 0.0), beta_star


def _expand_bracket(objective: Callable[[float], float], start: float) -> Optional[float]:
    """
    Double the bracket end while the concave objective still increases outwards

    Returns:
        An end beyond which the objective is nonincreasing, or None when the
        slope test still fails after MAX_DOUBLINGS doublings (unbounded)
    """
    end = start
    for _ in range(MAX_DOUBLINGS):
        if objective(2 * end) <= objective(end):
            return 2 * end
        end *= 2
    return None


def conjugate_values(cost: CostSpec, n: int, histories: Optional[np.ndarray], alphas: np.ndarray) -> np.ndarray:
    """
    Vectorised conjugate over a batch of nodes

    Args:
        cost: Cost spec
        n: Period
        histories: Matrix (rows, n+1) of price prefixes (only read for path-dependent costs)
        alphas: Drift ratios, one per row

    Returns:
        Array of conjugate values with INF where the supremum is unbounded
    """
    alphas = np.asarray(alphas, dtype=float)
    if cost.kind == 'quadratic':
        values = alphas ** 2 / (4 * cost.params['lam'])
        if cost.cap is not None:
            values = np.where(np.abs(alphas) > cost.cap + CONJUGATE_TOL, INF, values)
        return values
    if cost.is_piecewise_linear:
        slopes, breakpoints = cost.slopes_and_breakpoints()
        outside = (alphas < slopes[0] - CONJUGATE_TOL) | (alphas > slopes[-1] + CONJUGATE_TOL)
        if len(breakpoints) == 0:
            values = np.zeros_like(alphas)
        else:
            g_at = cost.evaluate(n, None, breakpoints)
            values = np.max(np.multiply.outer(alphas, breakpoints) - g_at, axis=-1)
            values = np.maximum(values, 0.0)
        return np.where(outside, INF, values)
    out = np.empty(len(alphas))
    for i, alpha in enumerate(alphas):
        history = None if histories is None else histories[i]
        out[i] = conjugate(cost, n, history, alpha)
    return out


def conjugate_spec(cost: CostSpec) -> CostSpec:
    """
    The conjugate G_n packaged as a custom cost (valid when G_n is finite
    everywhere); used for biconjugate round-trips
    """
    def fn(n, history, alpha):
        alpha = np.asarray(alpha, dtype=float)
        flat = [conjugate(cost, n, history, a) for a in np.atleast_1d(alpha).ravel()]
        return np.array(flat).reshape(alpha.shape)
    return custom_cost(fn, path_dependent=cost.path_dependent)


# --- truncation and scaling -------------------------------------------------

def truncate(h: CostSpec, c: float) -> CostSpec:
    """
    Slope-capped cost h^c: equal to h where |subgradient| <= c, extended
    linearly with slope +-c outside

    Raises:
        ParameterError: if c <= 0
    """
    if not c > 0:
        raise ParameterError(f"slope cap must be > 0, got {c}", 'cost.cap')
    cap = c if h.cap is None else min(c, h.cap)
    if h.kind == 'zero':
        return h
    if h.kind == 'proportional':
        return CostSpec('proportional', {'rate': min(h.params['rate'], cap)})
    if h.kind == 'piecewise_linear':
        slopes = np.clip(np.asarray(h.params['slopes'], dtype=float), -cap, cap)
        return CostSpec('piecewise_linear', {'breakpoints': list(h.params['breakpoints']),
                                             'slopes': slopes.tolist()})
    return replace(h, cap=cap)


def truncation_interval(cost: CostSpec, n: Any, history: Optional[np.ndarray]) -> Tuple[float, float]:
    """
    Interval I_c(h) where the subgradients of h stay within [-c, c]

    Returns:
        (low, high) with infinite ends when the slope never reaches c
    """
    inner = replace(cost, cap=None)
    c = cost.cap

    def slope(beta: float, direction: float) -> float:
        step = 1e-7 * max(1.0, abs(beta))
        g1 = float(inner.evaluate(n, history, np.array(beta)))
        g2 = float(inner.evaluate(n, history, np.array(beta + direction * step)))
        return (g2 - g1) / step

    ends = []
    for direction in (1.0, -1.0):
        end = 1.0
        found = False
        for _ in range(MAX_DOUBLINGS):
            if slope(direction * end, direction) > c:
                found = True
                break
            end *= 2
        if not found:
            ends.append(direction * INF)
            continue
        if slope(0.0, direction) > c:
            ends.append(0.0)
            continue
        root = brentq(lambda b: slope(direction * b, direction) - c, 0.0, end, xtol=1e-12)
        ends.append(direction * root)
    return ends[1], ends[0]


class InterpolatedPath:
    """Piecewise-linear interpolation of a discrete price path on the grid m/N"""

    def __init__(self, prices: np.ndarray, N: int):
        self.values = np.asarray(prices, dtype=float)
        self.times = np.arange(len(self.values)) / N

    def __call__(self, t):
        return np.interp(t, self.times, self.values)


def scaled_cost(h: CostSpec, c: float, N: int, n: int, prices: np.ndarray) -> Callable[[Any], np.ndarray]:
    """
    One-period cost of the N-period model: beta -> h^{c/sqrt(N)}_{n/N}(S_bar, beta)

    Args:
        h: Limiting cost (continuous-time form when h.continuous)
        c: Slope cap
        N: Number of periods
        n: Period, 0 <= n <= N
        prices: Discrete prices S_0..S_n (the interpolated path is built from them)
    """
    if N < 1:
        raise ParameterError(f"N must be >= 1, got {N}", 'N')
    if not 0 <= n <= N:
        raise ParameterError(f"period {n} outside 0..{N}", 'n')
    spec = scaled_cost_spec(h, c, N)
    history = np.asarray(prices, dtype=float)

    def one_period(beta):
        return spec.evaluate(n, history, beta)

    return one_period


def scaled_cost_spec(h: CostSpec, c: float, N: int) -> CostSpec:
    """Cost spec g^{N,c} of the N-period model built from the limiting cost h"""
    cap = c / math.sqrt(N)
    if not h.continuous:
        return truncate(h, cap)
    inner = h.fn

    def fn(n, history, beta):
        path = InterpolatedPath(history if history is not None else np.zeros(n + 1), N)
        return inner(n / N, path, beta)

    spec = CostSpec('custom', {'scaled_from': h.params, 'N': N}, path_dependent=h.path_dependent, fn=fn)
    return truncate(spec, cap)


# --- limit curvature --------------------------------------------------------

@dataclass(frozen=True, eq=False)
class LimitCurvature:
    """Limit curvature H_hat_t(w) of the conjugate: N * H(alpha/sqrt(N)) ~ H_hat * alpha^2"""

    kind: str  # constant, infinite, custom
    value: float = 0.0
    fn: Optional[Callable[[float, np.ndarray], np.ndarray]] = None

    def evaluate(self, t: float, paths: np.ndarray) -> np.ndarray:
        """Curvature at time t for each simulated path prefix (rows of paths)"""
        rows = np.atleast_2d(paths).shape[0]
        if self.kind == 'constant':
            return np.full(rows, self.value)
        if self.kind == 'infinite':
            return np.full(rows, INF)
        values = np.asarray(self.fn(t, paths), dtype=float)
        if np.any(values < 0):
            raise ParameterError("limit curvature must be nonnegative", 'scaling.curvature')
        return values

    @property
    def is_infinite(self) -> bool:
        return self.kind == 'infinite'


def constant_curvature(value: float) -> LimitCurvature:
    if value < 0:
        raise ParameterError(f"limit curvature must be >= 0, got {value}", 'scaling.curvature')
    if math.isinf(value):
        return LimitCurvature('infinite')
    return LimitCurvature('constant', float(value))


def limit_curvature_from_cost(h: CostSpec, probe_N: float = 1e8, alpha: float = 1.0) -> LimitCurvature:
    """
    Estimate H_hat as N * H(alpha/sqrt(N)) / alpha^2 at a large N

    Quadratic costs give 1/(4*lam); proportional costs give 0; the zero cost
    gives an infinite curvature.
    """
    if h.path_dependent or h.continuous:
        raise ParameterError("path- or time-dependent costs need an explicit curvature",
                             'scaling.curvature')
    if h.kind == 'zero':
        return LimitCurvature('infinite')
    if h.kind == 'quadratic':
        return constant_curvature(1.0 / (4 * h.params['lam']))
    scaled_alpha = alpha / math.sqrt(probe_N)
    value = conjugate(h, 0, None, scaled_alpha)
    if is_infinite(value):
        return LimitCurvature('infinite')
    estimate = probe_N * value / alpha ** 2
    logger.debug(f"Estimated limit curvature {estimate:.6g} at N={probe_N:g}")
    return constant_curvature(estimate)


# --- penalty functions ------------------------------------------------------

def _check_band(sigma_low: float, sigma_high: float):
    if not (0 < sigma_low <= sigma_high):
        raise ParameterError(f"need 0 < sigma_low <= sigma_high, got {sigma_low}, {sigma_high}",
                             'model.sigma_low')


def penalty_a(sigma, sigma_low: float, sigma_high: float):
    """
    Volatility penalty rate a(sigma)

    Returns:
        (sigma_low^2 - sigma^2)/(2 sigma_low) below the band, 0 inside,
        (sigma^2 - sigma_high^2)/(2 sigma_high) above; scalar in, scalar out
    """
    _check_band(sigma_low, sigma_high)
    sig = np.asarray(sigma, dtype=float)
    if np.any(sig < 0):
        raise DomainError(f"volatility must be >= 0, got {sig.min()}")
    below = (sigma_low ** 2 - sig ** 2) / (2 * sigma_low)
    above = (sig ** 2 - sigma_high ** 2) / (2 * sigma_high)
    values = np.where(sig < sigma_low, below, np.where(sig > sigma_high, above, 0.0))
    return float(values) if values.ndim == 0 else values


def penalty_b(u, sigma_low: float, sigma_high: float):
    """
    Convex function b(u): -u for u <= -sigma_low^2, (sigma_low^2 - u)^2/(4 sigma_low^2)
    on (-sigma_low^2, 0), a(sqrt(u))^2 for u >= 0
    """
    _check_band(sigma_low, sigma_high)
    u = np.asarray(u, dtype=float)
    s2 = sigma_low ** 2
    middle = (s2 - u) ** 2 / (4 * s2)
    root = np.sqrt(np.maximum(u, 0.0))
    upper = np.asarray(penalty_a(root, sigma_low, sigma_high)) ** 2
    values = np.where(u <= -s2, -u, np.where(u < 0, middle, upper))
    return float(values) if values.ndim == 0 else values


def penalty_inequality_check(x, y, sigma_low: float, sigma_high: float):
    """
    Elementary inequality b(x^2 + 2xy) <= y^2 for |x| in [sigma_low, sigma_high]

    Returns:
        bool (or boolean array for array input); always True
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    magnitude = np.abs(x)
    if np.any((magnitude < sigma_low - 1e-12) | (magnitude > sigma_high + 1e-12)):
        raise DomainError(f"|x| must lie in [{sigma_low}, {sigma_high}]")
    holds = np.asarray(penalty_b(x ** 2 + 2 * x * y, sigma_low, sigma_high)) <= y ** 2 + 1e-12
    return bool(holds) if holds.ndim == 0 else holds
