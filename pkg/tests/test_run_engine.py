"""
Tests for run_engine.py: modes, artifacts and exit codes
"""
import json
import math

import pytest

import run_engine
from config import EngineSettings, ExperimentConfig
from utils import SolverError

LN2 = math.log(2)


@pytest.fixture(autouse=True)
def engine_env(monkeypatch, tmp_path):
    monkeypatch.setenv('LOG_FILE', str(tmp_path / 'engine.log'))
    monkeypatch.setenv('NODE_BUDGET', '1000000')
    return monkeypatch


def document(output, **overrides):
    data = {
        'schema_version': 1,
        'mode': 'gap',
        'seed': 0,
        'output': str(output),
        'model': {'s0': 1.0, 'N': 1, 'sigma_low': LN2, 'sigma_high': LN2},
        'cost': {'kind': 'proportional', 'rate': 0.1},
        'payoff': {'kind': 'call', 'strike': 1.0},
    }
    data.update(overrides)
    return data


def write_config(tmp_path, name='experiment.json', **overrides):
    path = tmp_path / name
    path.write_text(json.dumps(document(tmp_path / 'out', **overrides)))
    return str(path)


def read_result(tmp_path, mode):
    with open(tmp_path / 'out' / f"{mode}_result.json", encoding='utf-8') as f:
        return json.load(f)


class TestModes:
    def test_gap_on_the_binomial_call(self, tmp_path):
        assert run_engine.main(['--config', write_config(tmp_path)]) == 0
        record = read_result(tmp_path, 'gap')
        assert record['schema_version'] == 1
        assert record['mode'] == 'gap'
        assert record['outputs']['V'] == pytest.approx(0.4, abs=1e-8)
        assert record['outputs']['U'] == pytest.approx(0.4, abs=1e-7)
        assert record['outputs']['dual_source'] == 'lp-multipliers'
        assert (tmp_path / 'out' / 'gap.csv').read_text().splitlines()[0] == 'V,U,gap,backend'

    def test_price_of_a_constant_payoff(self, tmp_path):
        config = ExperimentConfig.from_dict(document(
            tmp_path / 'out', mode='price', payoff={'kind': 'constant', 'value': 2.0},
            model={'s0': 1.0, 'N': 2, 'sigma_low': 0.1, 'sigma_high': 0.2}))
        record = run_engine.run(config, EngineSettings())
        assert record['outputs']['V'] == pytest.approx(2.0, abs=1e-9)
        assert record['outputs']['initial_holding'] == pytest.approx(0.0, abs=1e-9)
        assert len(record['files']) == 2

    def test_dual_search_mode(self, tmp_path):
        config = ExperimentConfig.from_dict(document(tmp_path / 'out', mode='dual', dual={'budget': 400,
                                                                                         'restarts': 2}))
        record = run_engine.run(config, EngineSettings())
        assert record['outputs']['U'] == pytest.approx(0.4, abs=1e-4)
        assert 'levels' in record['outputs']['measure']
        assert record['streams'] == ['dual_search']
        with open(tmp_path / 'out' / 'dual_result.json', encoding='utf-8') as f:
            assert json.load(f)['streams'] == ['dual_search']

    def test_lift_check_mode(self, tmp_path):
        config = ExperimentConfig.from_dict(document(
            tmp_path / 'out', mode='lift-check', model={'s0': 1.0, 'N': 2, 'sigma_low': 0.1, 'sigma_high': 0.2},
            lifting={'scenarios': 200, 'ks': [1, 2]}))
        record = run_engine.run(config, EngineSettings())
        assert [row['k'] for row in record['outputs']['rows']] == [1, 2]
        assert record['outputs']['violations'] == 0
        assert record['streams'] == ['scenarios']

    def test_kusuoka_check_mode(self, tmp_path, engine_env):
        engine_env.setenv('NODE_BUDGET', '300')
        path = write_config(tmp_path, mode='kusuoka-check',
                            model={'s0': 1.0, 'N': 1, 'sigma_low': 0.1, 'sigma_high': 0.2},
                            cost={'kind': 'quadratic', 'lam': 1.0},
                            kusuoka={'N': [4, 12], 'paths': 256,
                                     'candidates': [{'kind': 'constant', 'sigma': 0.2},
                                                    {'kind': 'feedback', 'base': 0.1, 'amplitude': 0.15,
                                                     'delta': 0.01}]})
        assert run_engine.main(['--config', path]) == 0
        rows = read_result(tmp_path, 'kusuoka-check')['outputs']['rows']
        assert [(row['N'], row['candidate']) for row in rows][:2] == [(4, 'const:0.2'), (4, 'feedback:0.1:0.15')]
        # 2^12 leaves exceed the budget: sampled check without a dual value
        assert rows[2]['N'] == 12
        assert rows[2]['dual_value'] == 'nan'
        assert rows[0]['dual_value'] != 'nan'

    def test_scaling_study_mode(self, tmp_path):
        path = write_config(tmp_path, mode='scaling-study', cost={'kind': 'zero'},
                            model={'s0': 1.0, 'N': 1, 'sigma_low': 0.2, 'sigma_high': 0.2},
                            scaling={'N': [4, 16]})
        assert run_engine.main(['--config', path]) == 0
        header = (tmp_path / 'out' / 'scaling-study.csv').read_text().splitlines()[0]
        assert header == 'N,V_N,lower_bound,lower_bound_se,best_limit_estimate,best_candidate_id'

    def test_csv_is_reproducible(self, tmp_path):
        first = tmp_path / 'first'
        second = tmp_path / 'second'
        path = write_config(tmp_path, mode='dual', dual={'budget': 200, 'restarts': 3})
        assert run_engine.main(['--config', path, '--out', str(first)]) == 0
        assert run_engine.main(['--config', path, '--out', str(second)]) == 0
        assert (first / 'dual.csv').read_bytes() == (second / 'dual.csv').read_bytes()


class TestCommandLine:
    def test_overrides(self, tmp_path):
        path = write_config(tmp_path)
        assert run_engine.main(['--config', path, '--mode', 'price', '--seed', '3', '--threads', '2']) == 0
        record = read_result(tmp_path, 'price')
        assert record['seed'] == 3
        assert record['config']['mode'] == 'price'

    def test_unknown_key_exits_2(self, tmp_path):
        assert run_engine.main(['--config', write_config(tmp_path, grid={'foo': 1})]) == 2

    def test_missing_config_exits_2(self, tmp_path):
        assert run_engine.main(['--config', str(tmp_path / 'nowhere.json')]) == 2

    def test_bad_thread_count_exits_2(self, tmp_path):
        assert run_engine.main(['--config', write_config(tmp_path), '--threads', '0']) == 2

    def test_capacity_exits_3(self, tmp_path, engine_env):
        engine_env.setenv('NODE_BUDGET', '1000')
        path = write_config(tmp_path, mode='price', model={'s0': 1.0, 'N': 6, 'sigma_low': 0.1, 'sigma_high': 0.2})
        assert run_engine.main(['--config', path]) == 3

    def test_solver_failure_exits_4(self, tmp_path, mocker):
        mocker.patch('run_engine.solve_primal', side_effect=SolverError('LP did not reach optimality'))
        assert run_engine.main(['--config', write_config(tmp_path, mode='price')]) == 4

    def test_unexpected_failure_exits_1(self, tmp_path, mocker):
        mocker.patch('run_engine.solve_primal', side_effect=RuntimeError('boom'))
        assert run_engine.main(['--config', write_config(tmp_path, mode='price')]) == 1

    def test_weak_duality_breach_exits_4(self, tmp_path, mocker):
        mocker.patch('run_engine.evaluate_dual', return_value=1.0)
        assert run_engine.main(['--config', write_config(tmp_path)]) == 4
