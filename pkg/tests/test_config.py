import pytest

from pcn.config import ExperimentConfig, dump_config, from_dict, load_config
from pcn.errors import ConfigError


def test_defaults_round_trip(tmp_path):
    cfg = ExperimentConfig()
    cfg.validate()
    p = tmp_path / "c.toml"
    p.write_text(dump_config(cfg))
    back = load_config(p)
    assert back == cfg and back.hash() == cfg.hash()
    assert len(cfg.hash()) == 16


def test_partial_file_and_overrides(tmp_path):
    p = tmp_path / "c.toml"
    p.write_text('seed = 7\n[dataset]\nn_train = 50\n[meta_training]\nvariant = "linear"\nd = 8\n'
                 '[evaluation]\nmodes = ["nsf", "oracle"]\n')
    cfg = load_config(p)
    assert cfg.seed == 7 and cfg.dataset.n_train == 50 and cfg.variant == "linear" and cfg.meta_training.d == 8
    assert cfg.evaluation.modes == ("nsf", "oracle")
    assert cfg.hash() != ExperimentConfig().hash()


def test_hash_ignores_dataset_location():
    a, b = ExperimentConfig(dataset_path="/x/dataset"), ExperimentConfig(dataset_path="/y/dataset")
    assert a.hash() == b.hash() == ExperimentConfig().hash()
    assert a.to_dict()["dataset"]["path"] == "/x/dataset"


@pytest.mark.parametrize(
    "raw",
    [
        {"seed": -1},
        {"seed": 1.5},
        {"version": 2},
        {"colour": 1},
        {"dataset": {"n_trian": 10}},
        {"dataset": 3},
        {"backbone": {"feature_tap": "layer9"}},
        {"backbone": {"input_size": 64}},
        {"meta_training": {"variant": "mlp"}},
        {"evaluation": {"modes": ["nsf", "magic"]}},
        {"evaluation": {"num_tasks": 0}},
    ],
)
def test_invalid_configs(raw):
    with pytest.raises(ConfigError):
        from_dict(raw)


def test_file_errors(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "nope.toml")
    bad = tmp_path / "bad.toml"
    bad.write_text("seed = = 3")
    with pytest.raises(ConfigError):
        load_config(bad)


def test_dataset_path_survives_round_trip(tmp_path):
    cfg = ExperimentConfig().replace(dataset_path="/data/x")
    p = tmp_path / "c.toml"
    p.write_text(dump_config(cfg))
    assert load_config(p).dataset_path == "/data/x"
