"""
Path-dependent European payoffs evaluated on matrices of price paths
"""
import logging
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, Optional

import numpy as np

from utils import ParameterError

logger = logging.getLogger(__name__)

PAYOFF_KINDS = ('constant', 'call', 'put', 'lookback_max', 'asian_average', 'custom')


@dataclass(frozen=True, eq=False)
class PayoffSpec:
    """
    Payoff F(S_0, ..., S_N)

    Args:
        kind: One of PAYOFF_KINDS
        params: strike / value
        convex_in_path: Declared convexity of F in the price vector
        fn: Custom functional on a (paths, N+1) price matrix
    """

    kind: str
    params: Dict[str, Any] = field(default_factory=dict)
    convex_in_path: bool = True
    fn: Optional[Callable[[np.ndarray], np.ndarray]] = None

    def evaluate(self, paths: np.ndarray) -> np.ndarray:
        """Payoff of every row of a (paths, N+1) price matrix"""
        paths = np.atleast_2d(np.asarray(paths, dtype=float))
        if self.kind == 'constant':
            return np.full(paths.shape[0], float(self.params['value']))
        if self.kind == 'call':
            return np.maximum(paths[:, -1] - self.params['strike'], 0.0)
        if self.kind == 'put':
            return np.maximum(self.params['strike'] - paths[:, -1], 0.0)
        if self.kind == 'lookback_max':
            return paths.max(axis=1)
        if self.kind == 'asian_average':
            # averaging dates 1..N
            return np.maximum(paths[:, 1:].mean(axis=1) - self.params['strike'], 0.0)
        values = np.asarray(self.fn(paths), dtype=float)
        if values.shape != (paths.shape[0],):
            raise ParameterError(f"custom payoff returned shape {values.shape}", 'payoff.fn')
        return values

    def __call__(self, paths: np.ndarray) -> np.ndarray:
        return self.evaluate(paths)

    @property
    def terminal_only(self) -> bool:
        """True when F depends on S_N alone"""
        return self.kind in ('constant', 'call', 'put')

    def to_dict(self) -> Dict[str, Any]:
        data: Dict[str, Any] = {'kind': self.kind}
        data.update(self.params)
        return data


def constant_payoff(value: float) -> PayoffSpec:
    if value < 0:
        raise ParameterError(f"payoff must be nonnegative, got constant {value}", 'payoff.value')
    return PayoffSpec('constant', {'value': float(value)})


def call_payoff(strike: float) -> PayoffSpec:
    return PayoffSpec('call', {'strike': float(strike)})


def put_payoff(strike: float) -> PayoffSpec:
    return PayoffSpec('put', {'strike': float(strike)})


def lookback_payoff() -> PayoffSpec:
    return PayoffSpec('lookback_max')


def asian_payoff(strike: float) -> PayoffSpec:
    return PayoffSpec('asian_average', {'strike': float(strike)})


def custom_payoff(fn: Callable[[np.ndarray], np.ndarray], convex_in_path: bool = False) -> PayoffSpec:
    return PayoffSpec('custom', {}, convex_in_path=convex_in_path, fn=fn)


def payoff_from_dict(data: Dict[str, Any]) -> PayoffSpec:
    """Build a payoff from its config block"""
    kind = data.get('kind')
    allowed = {
        'constant': {'kind', 'value'},
        'call': {'kind', 'strike'},
        'put': {'kind', 'strike'},
        'lookback_max': {'kind'},
        'asian_average': {'kind', 'strike'},
    }
    if kind == 'custom':
        raise ParameterError("custom payoffs are only available from Python", 'payoff.kind')
    if kind not in allowed:
        raise ParameterError(f"unknown payoff kind '{kind}', expected one of {PAYOFF_KINDS}", 'payoff.kind')
    unknown = set(data) - allowed[kind]
    if unknown:
        raise ParameterError(f"unknown key(s) {sorted(unknown)}", f"payoff.{sorted(unknown)[0]}")
    try:
        if kind == 'constant':
            return constant_payoff(float(data['value']))
        if kind == 'call':
            return call_payoff(float(data['strike']))
        if kind == 'put':
            return put_payoff(float(data['strike']))
        if kind == 'lookback_max':
            return lookback_payoff()
        return asian_payoff(float(data['strike']))
    except KeyError as e:
        raise ParameterError("missing parameter", f"payoff.{e.args[0]}")


def check_nonnegative(payoff: PayoffSpec, paths: np.ndarray) -> bool:
    return bool(np.all(payoff.evaluate(paths) >= 0))


def check_continuity(payoff: PayoffSpec, paths: np.ndarray, rng: Optional[np.random.Generator] = None,
                     rel: float = 1e-8) -> bool:
    """
    Spot-check declared continuity: a relative price perturbation of size rel
    must move the payoff by at most 1e-5 (relative to its scale)
    """
    rng = rng or np.random.default_rng(0)
    paths = np.atleast_2d(np.asarray(paths, dtype=float))
    bumped = paths * (1 + rel * rng.uniform(-1, 1, size=paths.shape))
    base = payoff.evaluate(paths)
    moved = payoff.evaluate(bumped)
    scale = 1.0 + np.max(np.abs(base))
    return bool(np.max(np.abs(moved - base)) <= 1e-5 * scale)
