import json

import pytest

from scrubkit.config import (
    DEFAULT_LAMBDA,
    EXPERIMENTS,
    builtin_config,
    load_config,
    parse_config,
)
from scrubkit.data import save_csv
from scrubkit.errors import ConfigError
from scrubkit.models import LogisticModel, MLPModel

from _fixtures import six_points

MINIMAL = {
    "dataset": {"clusters": [{"mean": [0, 0], "std": 0.5, "count": 10, "label": 0},
                             {"mean": [3, 3], "std": 0.5, "count": 10, "label": 1}]},
    "model": {"kind": "logistic", "d": 2, "K": 2},
    "split": {"kind": "whole_class", "k": 1},
}


def with_(**sections):
    raw = json.loads(json.dumps(MINIMAL))
    raw.update(sections)
    return raw


def key_of(raw):
    with pytest.raises(ConfigError) as info:
        parse_config(raw)
    return info.value.key


def test_defaults():
    cfg = parse_config(MINIMAL)
    assert cfg.scrub.method == "robust"
    assert cfg.scrub.lam == DEFAULT_LAMBDA == 5e-7
    assert cfg.scrub.sigma_h == 1.0 and cfg.scrub.exponent == -0.25
    assert cfg.seeds == [0]
    assert isinstance(cfg.model, LogisticModel)
    # the test set is a fresh draw from the same clusters
    assert cfg.test_dataset.n == cfg.dataset.n and cfg.test_dataset != cfg.dataset


def test_resolved_round_trip():
    cfg = parse_config(MINIMAL)
    res = cfg.resolved()
    assert res["scrub"]["lambda"] == 5e-7
    assert list(res["scrub"]["baseline"]) == ["learning_rate", "batch_size", "epochs"]
    again = parse_config(res)
    assert again.resolved() == res


@pytest.mark.parametrize(
    "raw, key",
    [
        (with_(bogus=1), "bogus"),
        (with_(train={"learning_rate": 0.1, "lr": 0.1}), "train.lr"),
        (with_(scrub={"variational": {"stepz": 3}}), "scrub.variational.stepz"),
        (with_(scrub={"method": "magic"}), "scrub.method"),
        (with_(scrub={"exponent": -1.0}), "scrub.exponent"),
        (with_(scrub={"lambda": -1.0}), "scrub"),
        (with_(train={"learning_rate": 0.0}), "train"),
        (with_(seeds=[]), "seeds"),
        (with_(seeds=[-1]), "seeds"),
        (with_(version=2), "version"),
        (with_(split={"kind": "whole_class", "k": 9}), "split"),
        (with_(sweep={"lambdas": []}), "sweep.lambdas"),
        (with_(sweep={"cohort_sizes": [0]}), "sweep.cohort_sizes"),
        (with_(relearn={"max_epochs": 0}), "relearn"),
        (with_(dataset={"seed": 1}), "dataset"),
        (with_(dataset={"clusters": [{"mean": [0], "std": -1, "count": 1, "label": 0}]}), "dataset.clusters[0]"),
    ],
)
def test_errors_name_the_key(raw, key):
    assert key_of(raw) == key


def test_missing_section():
    raw = dict(MINIMAL)
    del raw["split"]
    assert key_of(raw) == "split"


def test_hiding_needs_whole_class():
    assert key_of(with_(scrub={"method": "hiding"}, split={"kind": "count_from_class", "k": 1, "m": 3})) == "scrub.method"
    parse_config(with_(scrub={"method": "hiding"}))


def test_exact_hessian_methods_reject_mlp():
    raw = with_(model={"kind": "mlp", "d": 2, "hidden": [3], "K": 2})
    assert key_of(dict(raw, scrub={"method": "newton"})) == "scrub.method"
    cfg = parse_config(dict(raw, scrub={"method": "fisher"}))
    assert isinstance(cfg.model, MLPModel)


def test_with_seeds():
    cfg = parse_config(MINIMAL).with_seeds([3, 4])
    assert cfg.seeds == [3, 4]


def test_csv_dataset_relative_to_config(tmp_path):
    save_csv(six_points(), tmp_path / "six.csv")
    raw = with_(dataset={"path": "six.csv"}, split={"kind": "explicit", "indices": [0]})
    (tmp_path / "cfg.json").write_text(json.dumps(raw))
    cfg = load_config(tmp_path / "cfg.json")
    assert cfg.dataset == six_points()
    assert cfg.test_dataset == cfg.dataset
    assert cfg.resolved()["dataset"]["path"] == str((tmp_path / "six.csv").resolve())


def test_invalid_json(tmp_path):
    (tmp_path / "bad.json").write_text("{not json")
    with pytest.raises(ConfigError) as info:
        load_config(tmp_path / "bad.json")
    assert info.value.key == "<file>"


@pytest.mark.parametrize("name", EXPERIMENTS)
def test_builtin_configs_parse(name):
    cfg = parse_config(builtin_config(name))
    assert cfg.name == name
    assert cfg.seeds


def test_unknown_builtin():
    with pytest.raises(ConfigError):
        builtin_config("nope")
