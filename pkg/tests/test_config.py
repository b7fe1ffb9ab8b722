"""
Tests for config.py: experiment documents and environment settings
"""
import json

import pytest

from config import SCHEMA_VERSION, EngineSettings, ExperimentConfig, block_defaults
from utils import ParameterError

ENGINE_VARS = ('LOG_LEVEL', 'LOG_FILE', 'OUTPUT_DIR', 'NODE_BUDGET', 'ENGINE_THREADS', 'DUAL_SEARCH_BUDGET',
               'MC_PATHS', 'MC_STEPS', 'GRID_STEP', 'GRID_POINTS_MAX')


@pytest.fixture
def clean_env(monkeypatch):
    # registering each name lets monkeypatch undo whatever a .env file sets
    for name in ENGINE_VARS:
        monkeypatch.setenv(name, '')
        monkeypatch.delenv(name)
    return monkeypatch


def base_document(**overrides):
    data = {
        'schema_version': SCHEMA_VERSION,
        'mode': 'price',
        'seed': 7,
        'output': './output',
        'model': {'s0': 1.0, 'N': 2, 'sigma_low': 0.1, 'sigma_high': 0.2},
        'cost': {'kind': 'proportional', 'rate': 0.1},
        'payoff': {'kind': 'call', 'strike': 1.0},
    }
    data.update(overrides)
    return data


class TestExperimentConfig:
    def test_defaults_are_filled_in(self):
        config = ExperimentConfig.from_dict(base_document())
        assert config.model.k == 1
        assert config.grid['step'] == 0.005
        assert config.price['backend'] == 'auto'
        assert config.kusuoka['N'] == [16]
        assert config.cost_spec().kind == 'proportional'
        assert config.payoff_spec().params['strike'] == 1.0

    def test_round_trip(self):
        config = ExperimentConfig.from_dict(base_document(grid={'step': 0.01}, lifting={'ks': 2}))
        assert config.lifting['ks'] == [2]
        echoed = ExperimentConfig.from_dict(json.loads(json.dumps(config.to_dict())))
        assert echoed.to_dict() == config.to_dict()

    @pytest.mark.parametrize('overrides, field', [
        ({'grid': {'foo': 1}}, 'grid.foo'),
        ({'extra': {}}, 'extra'),
        ({'schema_version': 2}, 'schema_version'),
        ({'mode': 'hedge'}, 'mode'),
        ({'seed': -1}, 'seed'),
        ({'model': {'s0': 1.0, 'N': 2, 'sigma_low': 0.1}}, 'model.sigma_high'),
        ({'model': {'s0': 1.0, 'N': 2, 'sigma_low': 0.1, 'sigma_high': 0.2, 'mu': 0.0}}, 'model.mu'),
        ({'payoff': {'kind': 'call', 'strike': 1.0, 'cap': 2.0}}, 'payoff.cap'),
        ({'price': {'backend': 'simplex'}}, 'price.backend'),
        ({'dual': {'budget': 0}}, 'dual.budget'),
        ({'lifting': {'epsilon': 0.0}}, 'lifting.epsilon'),
        ({'kusuoka': {'N': []}}, 'kusuoka.N'),
        ({'kusuoka': {'candidates': [{'kind': 'constant'}]}}, 'candidate.sigma'),
        ({'grid': {'step': -0.1}}, 'grid.step'),
    ])
    def test_invalid_documents(self, overrides, field):
        with pytest.raises(ParameterError) as excinfo:
            ExperimentConfig.from_dict(base_document(**overrides))
        assert excinfo.value.field == field

    def test_missing_section(self):
        data = base_document()
        del data['payoff']
        with pytest.raises(ParameterError) as excinfo:
            ExperimentConfig.from_dict(data)
        assert excinfo.value.field == 'payoff'

    def test_invalid_cost_is_caught_while_parsing(self):
        with pytest.raises(ParameterError):
            ExperimentConfig.from_dict(base_document(cost={'kind': 'proportional', 'rate': -1.0}))

    def test_candidates(self):
        config = ExperimentConfig.from_dict(base_document(
            scaling={'candidates': [{'kind': 'constant', 'sigma': 0.15}],
                     'kusuoka_candidate': {'kind': 'feedback', 'base': 0.1, 'amplitude': 0.1, 'delta': 0.05}}))
        assert [c.name for c in config.candidates('scaling')] == ['const:0.15']
        assert config.candidates('kusuoka')[0].constant_value == 0.2

    def test_load(self, tmp_path):
        path = tmp_path / 'experiment.json'
        path.write_text(json.dumps(base_document(mode='gap')))
        assert ExperimentConfig.load(str(path)).mode == 'gap'

    def test_load_errors(self, tmp_path):
        with pytest.raises(ParameterError) as excinfo:
            ExperimentConfig.load(str(tmp_path / 'missing.json'))
        assert excinfo.value.field == 'config'
        broken = tmp_path / 'broken.json'
        broken.write_text('{"schema_version": 1,')
        with pytest.raises(ParameterError) as excinfo:
            ExperimentConfig.load(str(broken))
        assert excinfo.value.field == 'config'


class TestEngineSettings:
    def test_defaults(self, clean_env, tmp_path):
        settings = EngineSettings.from_env(str(tmp_path / 'absent.env'))
        assert settings.threads == 1
        assert settings.log_level == 'INFO'
        assert settings.grid_step == 0.005

    def test_environment_overrides(self, clean_env, tmp_path):
        clean_env.setenv('GRID_STEP', '0.01')
        clean_env.setenv('DUAL_SEARCH_BUDGET', '50')
        clean_env.setenv('ENGINE_THREADS', '4')
        settings = EngineSettings.from_env(str(tmp_path / 'absent.env'))
        assert settings.threads == 4
        config = ExperimentConfig.from_dict(base_document(), settings)
        assert config.grid['step'] == 0.01
        assert config.dual['budget'] == 50

    def test_config_wins_over_environment(self, clean_env, tmp_path):
        clean_env.setenv('GRID_STEP', '0.01')
        settings = EngineSettings.from_env(str(tmp_path / 'absent.env'))
        config = ExperimentConfig.from_dict(base_document(grid={'step': 0.002}), settings)
        assert config.grid['step'] == 0.002

    def test_dotenv_file(self, clean_env, tmp_path):
        env_file = tmp_path / '.env'
        env_file.write_text('MC_PATHS=123\nLOG_LEVEL=DEBUG\n')
        settings = EngineSettings.from_env(str(env_file))
        assert settings.mc_paths == 123
        assert settings.log_level == 'DEBUG'
        assert block_defaults(settings)['scaling']['mc_paths'] == 123

    @pytest.mark.parametrize('name, value', [('NODE_BUDGET', 'lots'), ('GRID_STEP', 'fine'),
                                             ('ENGINE_THREADS', '0')])
    def test_bad_values(self, clean_env, tmp_path, name, value):
        clean_env.setenv(name, value)
        with pytest.raises(ParameterError) as excinfo:
            EngineSettings.from_env(str(tmp_path / 'absent.env'))
        assert excinfo.value.field == f"env.{name}"
