#!/usr/bin/env python3
"""
Robust Super-Replication Engine - Main Runner
Runs one experiment config in one mode and writes its result record and CSV
"""
import os
import sys
import math
import time
import logging
import argparse
from datetime import datetime
from typing import Any, Dict, List, Optional, Tuple

from config import MODES, EngineSettings, ExperimentConfig
from costs import constant_curvature
from dual import dual_search, evaluate_dual, extract_dual_from_lp, weak_duality_check
from lattice import ModelParams, build_tree
from lifting import binomial_reduction_experiment
from primal import solve_primal
from scaling import (
    MAX_TREE_LEVEL,
    candidate_from_dict,
    convergence_study,
    kusuoka_check,
    kusuoka_dual_value,
    kusuoka_measure,
    kusuoka_path_check,
    penalty_path,
    sample_kusuoka_paths,
)
from utils import (
    LIBRARY_VERSION,
    NumericalContractError,
    ParameterError,
    ensure_directory,
    exit_code_for,
    save_csv,
    save_json,
    setup_logging,
)

logger = logging.getLogger(__name__)

CSV_COLUMNS = {
    'price': ['backend', 'V', 'grid_error_bound', 'solver_iterations', 'leaves'],
    'dual': ['U', 'evaluations', 'budget_exhausted', 'restarts'],
    'gap': ['V', 'U', 'gap', 'backend'],
    'lift-check': ['k', 'V_k', 'V_bar', 'gap', 'min_slack', 'scenarios'],
    'kusuoka-check': ['N', 'candidate', 'martingale_err_B', 'martingale_err_M', 'max_rel_MS', 'q_min', 'q_max',
                      'leaf_mass', 'dQ_min', 'dQ_max', 'dual_value'],
}

# named substreams of the master seed each mode may draw from
MODE_STREAMS = {
    'price': [],
    'dual': ['dual_search'],
    'gap': ['dual_search'],
    'lift-check': ['scenarios'],
    'kusuoka-check': ['kusuoka'],
    'scaling-study': ['mc'],
}

Outcome = Tuple[Dict[str, Any], List[Dict[str, Any]], Optional[List[str]]]


# --- modes ------------------------------------------------------------------

def run_price(config: ExperimentConfig, settings: EngineSettings, threads: int, budget: Optional[int]) -> Outcome:
    tree = build_tree(config.model, settings.node_budget)
    solution = solve_primal(tree, config.cost_spec(), config.payoff_spec(), config.price['backend'],
                            config.grid_config())
    report = solution.report.to_dict()
    outputs = dict(report)
    if solution.strategy is not None:
        outputs['initial_holding'] = float(solution.strategy.holdings[0][0])
    return outputs, [report], CSV_COLUMNS['price']


def run_dual(config: ExperimentConfig, settings: EngineSettings, threads: int, budget: Optional[int]) -> Outcome:
    tree = build_tree(config.model, settings.node_budget)
    result = dual_search(tree, config.cost_spec(), config.payoff_spec(), budget or config.dual['budget'],
                         config.seed, config.dual['restarts'], threads)
    outputs = result.to_dict()
    outputs['measure'] = result.measure.to_dict()
    return outputs, [result.to_dict()], CSV_COLUMNS['dual']


def run_gap(config: ExperimentConfig, settings: EngineSettings, threads: int, budget: Optional[int]) -> Outcome:
    """Primal value next to the best available dual value; U > V + tol is a contract breach"""
    tree = build_tree(config.model, settings.node_budget)
    cost, payoff = config.cost_spec(), config.payoff_spec()
    solution = solve_primal(tree, cost, payoff, config.price['backend'], config.grid_config())
    if solution.certificate is not None:
        measure = extract_dual_from_lp(solution.certificate, tree)
        U = evaluate_dual(measure, tree, cost, payoff)
        source = 'lp-multipliers'
    else:
        search = dual_search(tree, cost, payoff, budget or config.dual['budget'], config.seed,
                             config.dual['restarts'], threads)
        measure, U, source = search.measure, search.value, 'search'
    V = solution.value
    tol = config.tolerances['weak_duality']
    if U > V + tol:
        raise NumericalContractError(f"weak duality breached: U={U:.12g} > V={V:.12g} + {tol:g}")
    slack = weak_duality_check(measure, solution.strategy, tree, cost, payoff) if solution.strategy else math.nan
    row = {'V': V, 'U': U, 'gap': V - U, 'backend': solution.report.backend}
    outputs = dict(row, dual_source=source, strategy_slack=slack,
                   grid_error_bound=solution.report.grid_error_bound)
    return outputs, [row], CSV_COLUMNS['gap']


def run_lift_check(config: ExperimentConfig, settings: EngineSettings, threads: int,
                   budget: Optional[int]) -> Outcome:
    lifting = config.lifting
    report = binomial_reduction_experiment(
        config.model, config.cost_spec(), config.payoff_spec(),
        epsilon=lifting['epsilon'],
        scenarios=lifting['scenarios'],
        seed=config.seed,
        ks=lifting['ks'],
        grid=config.grid_config(),
        backend=config.price['backend'],
        node_budget=settings.node_budget,
        aggregation_samples=lifting['aggregation_samples'],
    )
    return report.to_dict(), report.rows, CSV_COLUMNS['lift-check']


def run_kusuoka_check(config: ExperimentConfig, settings: EngineSettings, threads: int,
                      budget: Optional[int]) -> Outcome:
    """Full sign tree where it fits the budget, sampled paths beyond"""
    block = config.kusuoka
    model = config.model
    c = float(block['c'])
    h, payoff = config.cost_spec(), config.payoff_spec()
    rows, penalties = [], []
    for N in block['N']:
        params = ModelParams(model.s0, N, model.sigma_low, model.sigma_high, 1)
        for candidate in config.candidates('kusuoka'):
            if N <= MAX_TREE_LEVEL and 2 ** N <= settings.node_budget:
                construction = kusuoka_measure(candidate, params, c, settings.node_budget)
                check = kusuoka_check(construction)
                dual_value = kusuoka_dual_value(construction, h, payoff)
                state = construction.state
            else:
                state = sample_kusuoka_paths(candidate, params, c, block['paths'], config.seed)
                check = kusuoka_path_check(state, params, c)
                dual_value = math.nan
            _, totals = penalty_path(state, model.sigma_low, model.sigma_high)
            rows.append(check.to_row(N, candidate.name, dual_value))
            penalties.append({'N': N, 'candidate': candidate.name, 'penalty_mean': float(totals.mean()),
                              'penalty_max': float(totals.max()), 'terminal_gap': check.terminal_gap,
                              'B_tstat': check.B_tstat, 'M_tstat': check.M_tstat})
            logger.info(f"✅ Kusuoka check N={N} '{candidate.name}': max |M-S|/S={check.max_rel_MS:.3e}")
    return {'rows': rows, 'penalty_path': penalties}, rows, CSV_COLUMNS['kusuoka-check']


def run_scaling_study(config: ExperimentConfig, settings: EngineSettings, threads: int,
                      budget: Optional[int]) -> Outcome:
    block = config.scaling
    curvature = None if block['curvature'] is None else constant_curvature(float(block['curvature']))
    kusuoka_candidate = (candidate_from_dict(block['kusuoka_candidate'])
                         if block['kusuoka_candidate'] is not None else None)
    report = convergence_study(
        config.cost_spec(), float(block['c']), config.payoff_spec(), block['N'], config.model,
        curvature=curvature,
        candidates=config.candidates('scaling'),
        grid=config.grid_config(),
        mc_paths=block['mc_paths'],
        mc_steps=block['mc_steps'],
        seed=config.seed,
        node_budget=settings.node_budget,
        kusuoka_candidate=kusuoka_candidate,
        threads=threads,
    )
    outputs = {'rows': report.rows, 'limit_candidates': report.limit.rows,
               'limit_is_lower_estimate': report.limit.lower_estimate, 'sandwich_holds': report.sandwich_holds}
    return outputs, report.rows, report.columns


MODE_RUNNERS = {
    'price': run_price,
    'dual': run_dual,
    'gap': run_gap,
    'lift-check': run_lift_check,
    'kusuoka-check': run_kusuoka_check,
    'scaling-study': run_scaling_study,
}


def run(config: ExperimentConfig, settings: EngineSettings, threads: int = 1,
        budget: Optional[int] = None) -> Dict[str, Any]:
    """
    Run one mode and persist its artifacts

    Returns:
        Result record {schema_version, mode, seed, wall_ms, library_version, streams, config, outputs, files}
    """
    try:
        ensure_directory(config.output)
    except OSError as e:
        raise ParameterError(f"output path is not writable: {e}", 'output')

    started = time.perf_counter()
    outputs, rows, columns = MODE_RUNNERS[config.mode](config, settings, threads, budget)
    wall_ms = (time.perf_counter() - started) * 1000.0

    csv_path = os.path.join(config.output, f"{config.mode}.csv")
    json_path = os.path.join(config.output, f"{config.mode}_result.json")
    record = {
        'schema_version': config.schema_version,
        'mode': config.mode,
        'seed': config.seed,
        'wall_ms': wall_ms,
        'library_version': LIBRARY_VERSION,
        'streams': MODE_STREAMS[config.mode],
        'config': config.to_dict(),
        'outputs': outputs,
    }
    save_csv(rows, csv_path, columns)
    save_json(record, json_path)
    record['files'] = [json_path, csv_path]
    return record


def parse_args(argv: Optional[List[str]] = None) -> argparse.Namespace:
    parser = argparse.ArgumentParser(description='Robust super-replication engine')
    parser.add_argument('--config', required=True, help='Experiment config (JSON, schema version 1)')
    parser.add_argument('--mode', choices=MODES, help='Override the config mode')
    parser.add_argument('--seed', type=int, help='Override the master seed')
    parser.add_argument('--out', help='Override the output directory')
    parser.add_argument('--threads', type=int, help='Worker threads')
    parser.add_argument('--budget', type=int, help='Dual search evaluation budget')
    parser.add_argument('--log-level', help='Logging level (default from LOG_LEVEL)')
    return parser.parse_args(argv)


def main(argv: Optional[List[str]] = None) -> int:
    """Run the engine from the command line"""
    args = parse_args(argv)
    try:
        settings = EngineSettings.from_env()
        setup_logging(args.log_level or settings.log_level, settings.log_file)

        config = ExperimentConfig.load(args.config, settings)
        overrides = {key: value for key, value in (('mode', args.mode), ('seed', args.seed),
                                                    ('output', args.out)) if value is not None}
        if overrides:
            config = ExperimentConfig.from_dict(dict(config.to_dict(), **overrides), settings)
        threads = args.threads if args.threads is not None else settings.threads
        if threads < 1:
            raise ParameterError(f"must be >= 1, got {threads}", 'threads')
        if args.budget is not None and args.budget < 1:
            raise ParameterError(f"must be >= 1, got {args.budget}", 'budget')
    except Exception as e:
        logging.error(f"Invalid configuration: {e}")
        print(f"❌ Error: {e}")
        return exit_code_for(e)

    print("📈 Robust Super-Replication Engine")
    print("=" * 50)
    print(f"🧮 Mode: {config.mode}")
    print(f"🎲 Seed: {config.seed}")
    print(f"💾 Output: {config.output}")
    print("=" * 50)

    start_time = datetime.now()
    try:
        record = run(config, settings, threads, args.budget)
    except Exception as e:
        code = exit_code_for(e)
        logger.error(f"Mode {config.mode} failed: {e}")
        print(f"❌ Error: {e}")
        return code

    duration = datetime.now() - start_time
    print("\n🎯 RUN COMPLETE!")
    print("=" * 50)
    for key, value in record['outputs'].items():
        if isinstance(value, (int, float, str, bool)):
            print(f"📊 {key}: {value}")
    print(f"⏱️ Duration: {duration}")
    for path in record['files']:
        print(f"🗂️ Saved: {path}")
    print("=" * 50)
    return 0


if __name__ == '__main__':
    sys.exit(main())
