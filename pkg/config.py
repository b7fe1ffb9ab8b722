"""
Configuration for the pricing engine

EngineSettings come from the environment (.env supported); ExperimentConfig
is the versioned JSON experiment document consumed by run_engine.
"""
import os
import json
import copy
import logging
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional

from dotenv import load_dotenv

from costs import CostSpec, cost_from_dict
from lattice import DEFAULT_NODE_BUDGET, ModelParams
from payoffs import PayoffSpec, payoff_from_dict
from primal import GridConfig
from scaling import VolCandidate, candidate_from_dict
from utils import ParameterError

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
MODES = ('price', 'dual', 'gap', 'lift-check', 'kusuoka-check', 'scaling-study')

TOP_LEVEL_KEYS = {'schema_version', 'mode', 'seed', 'output', 'model', 'cost', 'payoff', 'tolerances',
                  'price', 'grid', 'dual', 'lifting', 'kusuoka', 'scaling'}

# Per-block defaults; the key sets double as the allowed keys
BLOCK_DEFAULTS: Dict[str, Dict[str, Any]] = {
    'tolerances': {'superreplication': 1e-9, 'weak_duality': 1e-8},
    'price': {'backend': 'auto'},
    'grid': {'step': 0.005, 'core_radius': None, 'extent': None, 'growth': 1.5, 'max_points': 4001,
             'refine_tol': 1e-12},
    'dual': {'budget': 1000, 'restarts': 4},
    'lifting': {'epsilon': None, 'scenarios': 10_000, 'ks': [1, 2, 4], 'aggregation_samples': 16},
    'kusuoka': {'N': [16], 'c': 2.0, 'paths': 4096, 'candidates': [{'kind': 'constant', 'sigma': 0.2}]},
    'scaling': {'N': [4, 8, 16], 'c': 2.0, 'curvature': None, 'candidates': None, 'mc_paths': 20_000,
                'mc_steps': 256, 'kusuoka_candidate': None},
}
MODEL_KEYS = {'s0', 'N', 'sigma_low', 'sigma_high', 'k'}


def _env_int(name: str, default: int) -> int:
    raw = os.getenv(name)
    if raw is None or raw == '':
        return default
    try:
        return int(raw)
    except ValueError:
        raise ParameterError(f"expected an integer, got '{raw}'", f"env.{name}")


def _env_float(name: str, default: float) -> float:
    raw = os.getenv(name)
    if raw is None or raw == '':
        return default
    try:
        return float(raw)
    except ValueError:
        raise ParameterError(f"expected a number, got '{raw}'", f"env.{name}")


@dataclass
class EngineSettings:
    """Process-level settings with environment overrides"""

    log_level: str = 'INFO'
    log_file: str = 'engine.log'
    output_dir: str = './output'
    node_budget: int = DEFAULT_NODE_BUDGET
    threads: int = 1
    dual_search_budget: int = 1000
    mc_paths: int = 20_000
    mc_steps: int = 256
    grid_step: float = 0.005
    grid_points_max: int = 4001

    @classmethod
    def from_env(cls, dotenv_path: Optional[str] = None) -> 'EngineSettings':
        """Load .env (if present) and read the engine variables"""
        load_dotenv(dotenv_path)
        settings = cls(
            log_level=os.getenv('LOG_LEVEL', 'INFO'),
            log_file=os.getenv('LOG_FILE', 'engine.log'),
            output_dir=os.getenv('OUTPUT_DIR', './output'),
            node_budget=_env_int('NODE_BUDGET', DEFAULT_NODE_BUDGET),
            threads=_env_int('ENGINE_THREADS', 1),
            dual_search_budget=_env_int('DUAL_SEARCH_BUDGET', 1000),
            mc_paths=_env_int('MC_PATHS', 20_000),
            mc_steps=_env_int('MC_STEPS', 256),
            grid_step=_env_float('GRID_STEP', 0.005),
            grid_points_max=_env_int('GRID_POINTS_MAX', 4001),
        )
        if settings.threads < 1:
            raise ParameterError(f"must be >= 1, got {settings.threads}", 'env.ENGINE_THREADS')
        if settings.node_budget < 1:
            raise ParameterError(f"must be >= 1, got {settings.node_budget}", 'env.NODE_BUDGET')
        return settings


def block_defaults(settings: Optional[EngineSettings] = None) -> Dict[str, Dict[str, Any]]:
    """Block defaults with the environment-level numbers filled in"""
    defaults = copy.deepcopy(BLOCK_DEFAULTS)
    if settings is not None:
        defaults['grid'].update(step=settings.grid_step, max_points=settings.grid_points_max)
        defaults['dual']['budget'] = settings.dual_search_budget
        defaults['scaling'].update(mc_paths=settings.mc_paths, mc_steps=settings.mc_steps)
    return defaults


def _merge_block(name: str, data: Any, defaults: Dict[str, Any]) -> Dict[str, Any]:
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ParameterError("expected an object", name)
    unknown = sorted(set(data) - set(defaults))
    if unknown:
        raise ParameterError("unknown key", f"{name}.{unknown[0]}")
    merged = copy.deepcopy(defaults)
    merged.update(copy.deepcopy(data))
    return merged


def _parse_model(data: Any) -> ModelParams:
    if not isinstance(data, dict):
        raise ParameterError("expected an object", 'model')
    unknown = sorted(set(data) - MODEL_KEYS)
    if unknown:
        raise ParameterError("unknown key", f"model.{unknown[0]}")
    try:
        params = ModelParams(float(data['s0']), int(data['N']), float(data['sigma_low']),
                             float(data['sigma_high']), int(data.get('k', 1)))
    except KeyError as e:
        raise ParameterError("missing field", f"model.{e.args[0]}")
    except (TypeError, ValueError):
        raise ParameterError("model fields must be numbers", 'model')
    return params.validate()


def _int_list(values: Any, name: str) -> List[int]:
    if isinstance(values, int):
        values = [values]
    if not isinstance(values, list) or not values:
        raise ParameterError("expected a non-empty list of integers", name)
    try:
        return [int(v) for v in values]
    except (TypeError, ValueError):
        raise ParameterError("expected a list of integers", name)


@dataclass
class ExperimentConfig:
    """
    Parsed experiment document (schema version 1)

    Every referenced parameter is validated by its owning module while parsing,
    so a config that loads can be run.
    """

    mode: str
    seed: int
    output: str
    model: ModelParams
    cost: Dict[str, Any]
    payoff: Dict[str, Any]
    tolerances: Dict[str, Any] = field(default_factory=lambda: copy.deepcopy(BLOCK_DEFAULTS['tolerances']))
    price: Dict[str, Any] = field(default_factory=lambda: copy.deepcopy(BLOCK_DEFAULTS['price']))
    grid: Dict[str, Any] = field(default_factory=lambda: copy.deepcopy(BLOCK_DEFAULTS['grid']))
    dual: Dict[str, Any] = field(default_factory=lambda: copy.deepcopy(BLOCK_DEFAULTS['dual']))
    lifting: Dict[str, Any] = field(default_factory=lambda: copy.deepcopy(BLOCK_DEFAULTS['lifting']))
    kusuoka: Dict[str, Any] = field(default_factory=lambda: copy.deepcopy(BLOCK_DEFAULTS['kusuoka']))
    scaling: Dict[str, Any] = field(default_factory=lambda: copy.deepcopy(BLOCK_DEFAULTS['scaling']))
    schema_version: int = SCHEMA_VERSION

    @classmethod
    def from_dict(cls, data: Dict[str, Any], settings: Optional[EngineSettings] = None) -> 'ExperimentConfig':
        """Parse and validate; omitted block values fall back to the settings-aware defaults"""
        if not isinstance(data, dict):
            raise ParameterError("config must be an object", 'config')
        unknown = sorted(set(data) - TOP_LEVEL_KEYS)
        if unknown:
            raise ParameterError("unknown key", unknown[0])
        version = data.get('schema_version')
        if version != SCHEMA_VERSION:
            raise ParameterError(f"unsupported schema version {version!r}, expected {SCHEMA_VERSION}",
                                 'schema_version')
        mode = data.get('mode', 'price')
        if mode not in MODES:
            raise ParameterError(f"unknown mode '{mode}', expected one of {MODES}", 'mode')
        seed = data.get('seed', 0)
        if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
            raise ParameterError(f"seed must be a nonnegative integer, got {seed!r}", 'seed')
        output = data.get('output', './output')
        if not isinstance(output, str) or not output:
            raise ParameterError("output must be a path", 'output')
        for block in ('model', 'cost', 'payoff'):
            if block not in data:
                raise ParameterError("missing section", block)

        config = cls(
            mode=mode,
            seed=seed,
            output=output,
            model=_parse_model(data['model']),
            cost=copy.deepcopy(data['cost']),
            payoff=copy.deepcopy(data['payoff']),
            **{name: _merge_block(name, data.get(name), defaults) for name, defaults in block_defaults(settings).items()},
        )
        config.validate()
        return config

    @classmethod
    def load(cls, filepath: str, settings: Optional[EngineSettings] = None) -> 'ExperimentConfig':
        try:
            with open(filepath, 'r', encoding='utf-8') as f:
                data = json.load(f)
        except FileNotFoundError:
            raise ParameterError(f"config file not found: {filepath}", 'config')
        except json.JSONDecodeError as e:
            raise ParameterError(f"invalid JSON in {filepath}: {e}", 'config')
        return cls.from_dict(data, settings)

    def validate(self) -> 'ExperimentConfig':
        """Run every block through the module that owns it"""
        self.cost_spec()
        self.payoff_spec()
        self.grid_config()
        if self.price['backend'] not in ('auto', 'lp', 'dp'):
            raise ParameterError(f"unknown backend '{self.price['backend']}'", 'price.backend')
        for key in ('budget', 'restarts'):
            if not isinstance(self.dual[key], int) or self.dual[key] < 1:
                raise ParameterError("must be an integer >= 1", f"dual.{key}")
        for key, value in self.tolerances.items():
            if not isinstance(value, (int, float)) or value < 0:
                raise ParameterError("must be a nonnegative number", f"tolerances.{key}")
        self.lifting['ks'] = _int_list(self.lifting['ks'], 'lifting.ks')
        if self.lifting['epsilon'] is not None and not self.lifting['epsilon'] > 0:
            raise ParameterError("must be > 0", 'lifting.epsilon')
        self.kusuoka['N'] = _int_list(self.kusuoka['N'], 'kusuoka.N')
        self.scaling['N'] = _int_list(self.scaling['N'], 'scaling.N')
        for block in (self.kusuoka, self.scaling):
            if not float(block['c']) > 0:
                raise ParameterError("truncation level must be > 0", 'scaling.c')
        self.candidates('kusuoka')
        self.candidates('scaling')
        if self.scaling['kusuoka_candidate'] is not None:
            candidate_from_dict(self.scaling['kusuoka_candidate'])
        return self

    # --- built objects -----------------------------------------------------

    def cost_spec(self) -> CostSpec:
        return cost_from_dict(self.cost)

    def payoff_spec(self) -> PayoffSpec:
        return payoff_from_dict(self.payoff)

    def grid_config(self) -> GridConfig:
        try:
            return GridConfig(**self.grid).validate()
        except TypeError as e:
            raise ParameterError(str(e), 'grid')

    def candidates(self, block: str) -> Optional[List[VolCandidate]]:
        entries = getattr(self, block)['candidates']
        if entries is None:
            return None
        if not isinstance(entries, list) or not entries:
            raise ParameterError("expected a non-empty list", f"{block}.candidates")
        return [candidate_from_dict(entry) for entry in entries]

    def to_dict(self) -> Dict[str, Any]:
        """Echo that re-parses to an equal config"""
        data = {
            'schema_version': self.schema_version,
            'mode': self.mode,
            'seed': self.seed,
            'output': self.output,
            'model': self.model.to_dict(),
            'cost': copy.deepcopy(self.cost),
            'payoff': copy.deepcopy(self.payoff),
        }
        for name in BLOCK_DEFAULTS:
            data[name] = copy.deepcopy(getattr(self, name))
        return data
