import pytest

from fedmoe.config import load_config
from fedmoe.errors import ConfigError


BASE = """
[run]
seed = 3
out_dir = {out}

[dataset]
source = synthetic
classes = 4
per_class = 30
test_per_class = 10

[model]
architecture = mlp
hidden_sizes = 16

[partition]
clients = 5
concentration = 0.5

[federation]
rounds = 2
participation = 0.5
"""


def write_config(tmp_path, body=None, extra=""):
    path = tmp_path / "exp.ini"
    path.write_text((body or BASE).format(out=tmp_path / "out") + extra)
    return path


def test_defaults_follow_reference_hyperparameters(tmp_path):
    cfg = load_config(write_config(tmp_path))
    assert cfg.federation.local_epochs == 5
    assert cfg.federation.local_batch == 10
    assert cfg.federation.sgd.learning_rate == pytest.approx(0.01)
    assert cfg.federation.sgd.momentum == pytest.approx(0.5)
    assert cfg.local_baseline.epochs == 300
    assert cfg.local_baseline.sgd.learning_rate == pytest.approx(0.1)
    assert cfg.local_baseline.sgd.momentum == pytest.approx(0.9)
    assert cfg.local_baseline.sgd.weight_decay == pytest.approx(0.0005)
    assert cfg.local_baseline.sgd.lr_decay_factor == pytest.approx(0.1)
    assert cfg.local_baseline.sgd.lr_decay_every == 100
    assert cfg.local_baseline.batch == 64
    pfl = cfg.personalization["pfl_mf"]
    assert pfl.epochs == 200
    assert pfl.adapt_lr == pytest.approx(0.001)
    assert pfl.gate_lr == pytest.approx(0.001)
    assert pfl.split_ratio == pytest.approx(0.8)


def test_overrides_and_seed_derivation(tmp_path):
    path = write_config(tmp_path)
    a = load_config(path)
    b = load_config(path, seed_override=99)
    assert a.seed == 3 and b.seed == 99
    assert a.partition.seed != b.partition.seed
    assert a.partition.seed != a.federation.seed
    # Same seed, same derivations.
    assert load_config(path).partition.seed == a.partition.seed


def test_per_algorithm_override_section(tmp_path):
    path = write_config(tmp_path, extra="\n[personalization.pfl_mfe]\nepochs = 7\n")
    cfg = load_config(path)
    assert cfg.personalization["pfl_mfe"].epochs == 7
    assert cfg.personalization["pfl_mf"].epochs == 200


def test_error_messages_carry_field_path(tmp_path):
    path = write_config(tmp_path, extra="\n[personalization]\nsplit_ratio = 1.5\n")
    with pytest.raises(ConfigError, match="split_ratio"):
        load_config(path)

    path2 = tmp_path / "bad2.ini"
    path2.write_text(BASE.format(out=tmp_path).replace("participation = 0.5", "participation = 0"))
    with pytest.raises(ConfigError, match="federation.participation"):
        load_config(path2)


def test_unknown_section_and_key_rejected(tmp_path):
    with pytest.raises(ConfigError, match="unknown section"):
        load_config(write_config(tmp_path, extra="\n[mystery]\nx = 1\n"))
    path = tmp_path / "bad3.ini"
    path.write_text(BASE.format(out=tmp_path).replace("rounds = 2", "rounds = 2\nlr_typo = 3"))
    with pytest.raises(ConfigError, match="unknown key"):
        load_config(path)


def test_duplicate_section_is_config_error(tmp_path):
    path = write_config(tmp_path, extra="\n[federation]\nrounds = 3\n")
    with pytest.raises(ConfigError, match="malformed"):
        load_config(path)


def test_idx_source_requires_paths(tmp_path):
    body = BASE.replace("source = synthetic", "source = idx")
    with pytest.raises(ConfigError, match="train_images"):
        load_config(write_config(tmp_path, body=body))


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "nope.ini")


def test_snapshot_round_trips_every_knob(tmp_path):
    cfg = load_config(write_config(tmp_path))
    snap = cfg.snapshot()
    assert snap["federation"]["rounds"] == 2
    assert snap["personalization"]["pfl_fb"]["adapt_lr"] == pytest.approx(0.001)
    assert snap["model"]["hidden_sizes"] == [16]
    import json

    json.dumps(snap)  # must be JSON-serializable as written
