import pytest

from config import DEFAULTS, Config, ConfigError
from runner import ExperimentConfig


@pytest.fixture(autouse=True)
def clean_environment(monkeypatch):
    for key in DEFAULTS:
        monkeypatch.delenv(key, raising=False)


def _write(tmp_path, text, name="run.env"):
    path = tmp_path / name
    path.write_text(text)
    return str(path)


def test_defaults_are_loaded_without_a_file():
    cfg = Config()
    assert cfg.get_str('RUN_ALGORITHM') == 'si'
    assert cfg.get_float('SI_NU') == 0.8
    assert cfg.get_ints('PPO_HIDDEN') == [64, 64]
    assert cfg.source('SI_NU') == ('default', None)


def test_file_values_with_comments_and_blank_lines(tmp_path):
    path = _write(tmp_path, "# experiment\n\nRUN_ALGORITHM = ppo  # baseline\nSI_NU=0.3\n")
    cfg = Config(path)
    assert cfg.get_str('RUN_ALGORITHM') == 'ppo'
    assert cfg.get_float('SI_NU') == 0.3
    assert cfg.source('SI_NU') == ('file', 4)


def test_unknown_key_reports_line(tmp_path):
    path = _write(tmp_path, "SI_NU=0.5\nSI_NUU=0.2\n")
    with pytest.raises(ConfigError) as err:
        Config(path)
    assert err.value.field == 'SI_NUU' and err.value.line == 2
    assert "SI_NUU (line 2)" in str(err.value)


def test_malformed_line_is_rejected(tmp_path):
    with pytest.raises(ConfigError) as err:
        Config(_write(tmp_path, "SI_NU 0.5\n"))
    assert err.value.line == 1


def test_schema_mismatch_is_rejected(tmp_path):
    with pytest.raises(ConfigError, match="schema"):
        Config(_write(tmp_path, "RUN_SCHEMA=2\n"))


def test_layering_defaults_file_env_flag(tmp_path, monkeypatch):
    path = _write(tmp_path, "SI_NU=0.1\nSI_CAPACITY=5\nPPO_LR=0.01\n")
    monkeypatch.setenv('SI_CAPACITY', '7')
    monkeypatch.setenv('PPO_LR', '0.02')
    monkeypatch.setenv('NOT_A_KEY', 'ignored')
    cfg = Config(path, overrides=['PPO_LR=0.03'])
    assert cfg.get_float('SI_NU') == 0.1
    assert cfg.get_int('SI_CAPACITY') == 7
    assert cfg.get_float('PPO_LR') == 0.03
    assert cfg.source('PPO_LR') == ('flag', None)
    assert cfg.get('NOT_A_KEY') is None


def test_override_of_unknown_key_fails():
    with pytest.raises(ConfigError):
        Config(overrides=['SVPG_AGENTZ=3'])
    with pytest.raises(ConfigError):
        Config(overrides=['SVPG_AGENTS'])


def test_typed_getter_error_names_key_and_line(tmp_path):
    cfg = Config(_write(tmp_path, "RUN_SEED=0\nSI_CAPACITY=ten\n"))
    with pytest.raises(ConfigError) as err:
        cfg.get_int('SI_CAPACITY')
    assert err.value.field == 'SI_CAPACITY' and err.value.line == 2
    with pytest.raises(ConfigError):
        Config(overrides=['RUN_DUMP_REPLAY=maybe']).get_bool('RUN_DUMP_REPLAY')


def test_groups_follow_key_prefixes():
    cfg = Config()
    assert set(cfg.get_all_groups()) == {'RUN', 'ENV', 'PPO', 'SI', 'SVPG', 'CEM'}
    assert all(k.startswith('SI_') for k in cfg.get_group('si'))
    assert set(Config(group='svpg').get_all()) == set(cfg.get_group('SVPG'))


def test_with_overrides_leaves_original_untouched():
    cfg = Config()
    clone = cfg.with_overrides({'SI_NU': 0.25})
    assert clone.get_float('SI_NU') == 0.25
    assert cfg.get_float('SI_NU') == 0.8


def test_dump_reloads_to_the_same_values(tmp_path):
    cfg = Config(overrides=['SI_NU=0.4', 'ENV_NAME=maze', 'SVPG_SEEDS=3,4'])
    reloaded = Config(_write(tmp_path, cfg.dump(), "dump.env"))
    assert reloaded.get_all() == cfg.get_all()


def test_reload_picks_up_file_changes(tmp_path):
    path = _write(tmp_path, "SI_NU=0.1\n")
    cfg = Config(path, overrides=['SI_CAPACITY=3'])
    _write(tmp_path, "SI_NU=0.9\n")
    cfg.reload()
    assert cfg.get_float('SI_NU') == 0.9
    assert cfg.get_int('SI_CAPACITY') == 3


def test_experiment_config_collects_every_problem():
    cfg = Config(overrides=['SI_NU=1.5', 'SI_CAPACITY=0', 'PPO_EPOCHS=many'])
    with pytest.raises(ConfigError) as err:
        ExperimentConfig.from_config(cfg)
    assert any('PPO_EPOCHS' in p for p in err.value.problems)
    # validation problems are reported once parsing succeeds
    cfg = Config(overrides=['SI_NU=1.5', 'SI_CAPACITY=0'])
    with pytest.raises(ConfigError) as err:
        ExperimentConfig.from_config(cfg)
    assert len(err.value.problems) == 2


def test_experiment_config_maps_algorithms():
    ppo = ExperimentConfig.from_config(Config(overrides=['RUN_ALGORITHM=ppo']))
    assert not ppo.ppo.self_imitation and not ppo.is_ensemble
    js = ExperimentConfig.from_config(Config(overrides=['RUN_ALGORITHM=si-interact-js', 'SVPG_AGENTS=3',
                                                        'ENV_HORIZON=30', 'ENV_NAME=maze']))
    assert js.is_ensemble and js.ensemble.kernel == 'js' and js.ensemble.n_agents == 3
    assert js.env.maze.horizon == 30
    assert js.ensemble.ppo is js.ppo


def test_output_root_prefixes_relative_output_dir(tmp_path):
    cfg = Config(overrides=[f'RUN_OUTPUT_ROOT={tmp_path}', 'RUN_OUTPUT_DIR=runs/a'])
    assert ExperimentConfig.from_config(cfg).output_dir == str(tmp_path / "runs" / "a")


@pytest.mark.parametrize("algorithm", ["si", "si-interact-js", "cem"])
def test_empty_hidden_layers_are_rejected(algorithm):
    cfg = Config(overrides=[f'RUN_ALGORITHM={algorithm}', 'PPO_HIDDEN='])
    with pytest.raises(ConfigError) as err:
        ExperimentConfig.from_config(cfg)
    assert any('PPO_HIDDEN' in p for p in err.value.problems)


def test_single_hidden_layer_is_accepted():
    experiment = ExperimentConfig.from_config(Config(overrides=['PPO_HIDDEN=16']))
    assert experiment.ppo.hidden == (16,)
