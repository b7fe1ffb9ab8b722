"""
Utilities for logging, error types, random streams and result persistence
"""
import os
import json
import logging
from typing import Any, Dict, List, Optional

import numpy as np
import pandas as pd

logger = logging.getLogger(__name__)

LIBRARY_VERSION = '1.0.0'

# Absolute tolerance on log-returns for band membership tests
RETURN_TOL = 1e-12


class EngineError(Exception):
    """Base class for all engine failures"""


class ParameterError(EngineError, ValueError):
    """Invalid parameter or config field"""

    def __init__(self, message: str, field: Optional[str] = None):
        self.field = field
        if field:
            message = f"{field}: {message}"
        super().__init__(message)


class DomainError(EngineError, ValueError):
    """Value outside the model's admissible domain"""


class ShapeError(EngineError):
    """Object built for a different tree shape"""


class PreconditionError(EngineError):
    """Hypotheses of an experiment are not met"""


class CapacityError(EngineError):
    """Node budget or enumeration limit exceeded"""


class NumericalContractError(EngineError):
    """A checked numerical contract failed; this signals a bug"""


class SolverError(NumericalContractError):
    """LP solver did not reach optimality"""


# Exit codes used by run_engine
EXIT_CODES = {
    ParameterError: 2,
    DomainError: 2,
    ShapeError: 2,
    PreconditionError: 2,
    CapacityError: 3,
    NumericalContractError: 4,
}


def exit_code_for(error: BaseException) -> int:
    """Map an exception to the runner's exit status"""
    for error_type, code in EXIT_CODES.items():
        if isinstance(error, error_type):
            return code
    return 1


def setup_logging(log_level: str = 'INFO', log_file: Optional[str] = 'engine.log'):
    """Setup logging configuration"""
    handlers: List[logging.Handler] = [logging.StreamHandler()]
    if log_file:
        handlers.insert(0, logging.FileHandler(log_file))
    logging.basicConfig(
        level=getattr(logging, log_level.upper(), logging.INFO),
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        handlers=handlers,
        force=True
    )


def ensure_directory(directory: str):
    """Ensure directory exists"""
    os.makedirs(directory, exist_ok=True)


def substream(seed: int, name: str) -> np.random.Generator:
    """
    Named random substream derived from a master seed

    Args:
        seed: Master seed recorded in the run output
        name: Stream name such as 'scenarios', 'dual_search' or 'mc'

    Returns:
        Independent generator; the same (seed, name) always gives the same stream
    """
    key = [ord(ch) for ch in name]
    return np.random.default_rng(np.random.SeedSequence([int(seed)] + key))


def spawn_streams(seed: int, name: str, count: int) -> List[np.random.Generator]:
    """Disjoint counter-based streams for parallel work items"""
    key = [ord(ch) for ch in name]
    children = np.random.SeedSequence([int(seed)] + key).spawn(count)
    return [np.random.Generator(np.random.Philox(child)) for child in children]


def to_jsonable(value: Any) -> Any:
    """Convert numpy scalars/arrays and infinities into JSON-safe values"""
    if isinstance(value, dict):
        return {str(k): to_jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [to_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return [to_jsonable(v) for v in value.tolist()]
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (np.floating, float)):
        value = float(value)
        if np.isnan(value):
            return 'nan'
        if np.isinf(value):
            return 'inf' if value > 0 else '-inf'
        return value
    if isinstance(value, np.bool_):
        return bool(value)
    return value


def save_json(record: Dict[str, Any], filepath: str) -> str:
    """Write a result record as pretty JSON"""
    directory = os.path.dirname(filepath)
    if directory:
        ensure_directory(directory)
    with open(filepath, 'w', encoding='utf-8') as f:
        json.dump(to_jsonable(record), f, indent=2, sort_keys=True)
        f.write('\n')
    logger.info(f"Saved result record: {filepath}")
    return filepath


def save_csv(rows: List[Dict[str, Any]], filepath: str, columns: Optional[List[str]] = None) -> str:
    """Write table rows to CSV with a fixed float format"""
    directory = os.path.dirname(filepath)
    if directory:
        ensure_directory(directory)
    df = pd.DataFrame(rows, columns=columns)
    df.to_csv(filepath, index=False, float_format='%.12g')
    logger.info(f"Saved {len(df)} rows to {filepath}")
    return filepath
