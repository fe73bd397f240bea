"""Experiment configuration: JSON files with explicit, validated keys."""

from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Optional

from .data import (
    ClusterSpec,
    Dataset,
    ForgetSplit,
    gen_clusters,
    load_csv,
    make_split,
    rule_from_dict,
    rule_to_dict,
)
from .errors import ConfigError, ScrubError
from .infobound import RelearnConfig
from .models import MLPModel, Model, model_from_dict, model_to_dict
from .scrub import BASELINES, EXPONENTS, METHODS, ScrubConfig, VariationalConfig, check_baseline
from .training import TrainConfig

DEFAULT_LAMBDA = 5e-7
CONFIG_VERSION = 1
EXPERIMENTS = ("fig1_logistic", "lambda_sweep", "cohort_sweep", "interpolation", "relearn")

_ALLOWED = {
    "": {"version", "name", "dataset", "test_dataset", "model", "train", "split", "scrub",
         "relearn", "seeds", "sweep", "output_dir"},
    "dataset": {"clusters", "seed", "path", "name"},
    "test_dataset": {"clusters", "seed", "path", "name"},
    "model": {"kind", "A", "w_star", "d", "K", "bias", "hidden", "weight_decay"},
    "train": {"learning_rate", "batch_size", "epochs", "init", "init_scale", "early_stop_epochs"},
    "split": {"kind", "k", "m", "indices"},
    "scrub": {"method", "lambda", "sigma_h", "exponent", "t", "stabilize", "floor", "variational", "baseline"},
    "scrub.variational": {"steps", "draws", "step_size", "init_scale", "optimizer", "average_last"},
    "scrub.baseline": {"learning_rate", "batch_size", "epochs"},
    "relearn": {"learning_rate", "max_epochs", "threshold", "batch_size"},
    "sweep": {"lambdas", "cohort_sizes", "grid", "class", "baselines", "max_retain_gap"},
}


def _check_keys(d: Any, where: str) -> None:
    if not isinstance(d, dict):
        raise ConfigError(where or "<root>", "must be an object")
    allowed = _ALLOWED[where]
    for key in d:
        if key not in allowed:
            path = f"{where}.{key}" if where else key
            raise ConfigError(path, f"unknown key (allowed: {', '.join(sorted(allowed))})")


def _wrap(key: str, fn, *args, **kwargs):
    """Run a constructor, turning its validation error into a keyed ConfigError."""
    try:
        return fn(*args, **kwargs)
    except ConfigError:
        raise
    except (ScrubError, ValueError, TypeError, KeyError) as exc:
        raise ConfigError(key, str(exc)) from None


@dataclass
class ExperimentConfig:
    raw: dict
    name: str
    dataset: Dataset
    test_dataset: Dataset
    model: Model
    train: TrainConfig
    split: ForgetSplit
    scrub: ScrubConfig
    relearn: RelearnConfig
    seeds: list[int]
    sweep: dict = field(default_factory=dict)
    output_dir: Optional[str] = None
    base_dir: Optional[str] = None

    def with_seeds(self, seeds) -> "ExperimentConfig":
        raw = copy.deepcopy(self.raw)
        raw["seeds"] = list(seeds)
        return parse_config(raw, self.base_dir)

    def resolved(self) -> dict:
        """Every setting, defaults included, in the input format."""
        return resolved_config(self)


def _load_dataset(d: dict, key: str, base_dir: Optional[Path]) -> Dataset:
    _check_keys(d, key)
    if "path" in d:
        path = Path(d["path"])
        if base_dir is not None and not path.is_absolute():
            path = base_dir / path
        return _wrap(f"{key}.path", load_csv, path)
    if "clusters" not in d:
        raise ConfigError(key, "needs either 'clusters' or 'path'")
    clusters = [_wrap(f"{key}.clusters[{i}]", ClusterSpec.from_dict, c) for i, c in enumerate(d["clusters"])]
    return _wrap(f"{key}.clusters", gen_clusters, clusters, int(d.get("seed", 0)), d.get("name", "clusters"))


def parse_config(raw: dict, base_dir: Optional[Path] = None) -> ExperimentConfig:
    """Validate every section up front so no work starts on a bad config."""
    raw = copy.deepcopy(raw)
    _check_keys(raw, "")
    if raw.get("version", CONFIG_VERSION) != CONFIG_VERSION:
        raise ConfigError("version", f"must be {CONFIG_VERSION}")
    for required in ("dataset", "model", "split"):
        if required not in raw:
            raise ConfigError(required, "is required")

    dataset = _load_dataset(raw["dataset"], "dataset", base_dir)
    if "test_dataset" in raw:
        test = _load_dataset(raw["test_dataset"], "test_dataset", base_dir)
    elif "clusters" in raw["dataset"]:
        test_raw = dict(raw["dataset"], seed=int(raw["dataset"].get("seed", 0)) + 1)
        test = _load_dataset(test_raw, "dataset", base_dir)
    else:
        test = dataset

    _check_keys(raw["model"], "model")
    model = _wrap("model", model_from_dict, raw["model"])

    train_raw = raw.get("train", {})
    _check_keys(train_raw, "train")
    train = _wrap("train", TrainConfig, **train_raw)

    _check_keys(raw["split"], "split")
    rule = _wrap("split", rule_from_dict, raw["split"])
    split = _wrap("split", make_split, dataset, rule)

    scrub_raw = dict(raw.get("scrub", {}))
    _check_keys(scrub_raw, "scrub")
    method = scrub_raw.get("method", "robust")
    if method not in METHODS:
        raise ConfigError("scrub.method", f"must be one of {', '.join(METHODS)}")
    if method in BASELINES:
        _wrap("scrub.method", check_baseline, method, rule)
    exponent = float(scrub_raw.get("exponent", -0.25))
    if exponent not in EXPONENTS:
        raise ConfigError("scrub.exponent", f"must be one of {EXPONENTS}")
    var_raw = scrub_raw.get("variational", {})
    _check_keys(var_raw, "scrub.variational")
    base_raw = scrub_raw.get("baseline", {})
    _check_keys(base_raw, "scrub.baseline")
    baseline = _wrap("scrub.baseline", TrainConfig, **{"learning_rate": 0.01, "batch_size": 10, "epochs": 10, **base_raw})
    scrub = _wrap(
        "scrub",
        ScrubConfig,
        method=method,
        lam=float(scrub_raw.get("lambda", DEFAULT_LAMBDA)),
        sigma_h=float(scrub_raw.get("sigma_h", 1.0)),
        exponent=exponent,
        t=scrub_raw.get("t"),
        stabilize=bool(scrub_raw.get("stabilize", True)),
        floor=float(scrub_raw.get("floor", 1e-8)),
        variational=_wrap("scrub.variational", VariationalConfig, **var_raw),
        baseline=baseline,
    )
    if method in ("robust", "newton") and isinstance(model, MLPModel):
        raise ConfigError("scrub.method", f"{method} needs an exact Hessian; use fisher or variational for MLPs")

    relearn_raw = raw.get("relearn", {})
    _check_keys(relearn_raw, "relearn")
    relearn = _wrap("relearn", RelearnConfig, **relearn_raw)

    seeds = raw.get("seeds", [0])
    if not isinstance(seeds, list) or not seeds or not all(isinstance(s, int) and s >= 0 for s in seeds):
        raise ConfigError("seeds", "must be a non-empty list of non-negative integers")

    sweep = raw.get("sweep", {})
    _check_keys(sweep, "sweep")
    for key in ("lambdas", "cohort_sizes", "grid"):
        if key in sweep and (not isinstance(sweep[key], list) or not sweep[key]):
            raise ConfigError(f"sweep.{key}", "must be a non-empty list")
    if any(v < 0 for v in sweep.get("lambdas", [])):
        raise ConfigError("sweep.lambdas", "must be >= 0")
    if any(int(m) < 1 for m in sweep.get("cohort_sizes", [])):
        raise ConfigError("sweep.cohort_sizes", "must be >= 1")

    return ExperimentConfig(
        raw=raw,
        name=str(raw.get("name", "experiment")),
        dataset=dataset,
        test_dataset=test,
        model=model,
        train=train,
        split=split,
        scrub=scrub,
        relearn=relearn,
        seeds=list(seeds),
        sweep=sweep,
        output_dir=raw.get("output_dir"),
        base_dir=None if base_dir is None else str(base_dir),
    )


def _resolved_dataset(d: dict, base_dir: Optional[str]) -> dict:
    d = dict(d)
    if "path" in d:
        path = Path(d["path"])
        if base_dir is not None and not path.is_absolute():
            path = Path(base_dir) / path
        d["path"] = str(path.resolve())
    else:
        d.setdefault("seed", 0)
        d.setdefault("name", "clusters")
    return d


def resolved_config(cfg: ExperimentConfig) -> dict:
    raw = cfg.raw
    out: dict[str, Any] = {"version": CONFIG_VERSION, "name": cfg.name}
    out["dataset"] = _resolved_dataset(raw["dataset"], cfg.base_dir)
    if "test_dataset" in raw:
        out["test_dataset"] = _resolved_dataset(raw["test_dataset"], cfg.base_dir)
    out["model"] = model_to_dict(cfg.model)
    train = asdict(cfg.train)
    train.pop("seed")
    out["train"] = train
    out["split"] = rule_to_dict(cfg.split.rule)
    sc = cfg.scrub
    baseline = asdict(sc.baseline)
    out["scrub"] = {
        "method": sc.method,
        "lambda": sc.lam,
        "sigma_h": sc.sigma_h,
        "exponent": sc.exponent,
        "t": sc.t,
        "stabilize": sc.stabilize,
        "floor": sc.floor,
        "variational": asdict(sc.variational),
        "baseline": {k: baseline[k] for k in ("learning_rate", "batch_size", "epochs")},
    }
    relearn = asdict(cfg.relearn)
    relearn.pop("seed")
    out["relearn"] = relearn
    out["seeds"] = list(cfg.seeds)
    if cfg.sweep:
        out["sweep"] = copy.deepcopy(cfg.sweep)
    if cfg.output_dir is not None:
        out["output_dir"] = cfg.output_dir
    return out


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError("<file>", f"invalid JSON at line {exc.lineno}: {exc.msg}") from None
    return parse_config(raw, base_dir=path.parent.resolve())


def builtin_config(name: str) -> dict:
    """Raw JSON of a shipped experiment configuration."""
    if name not in EXPERIMENTS:
        raise ConfigError("experiment", f"must be one of {', '.join(EXPERIMENTS)}")
    text = resources.files("scrubkit").joinpath(f"configs/{name}.json").read_text(encoding="utf-8")
    return json.loads(text)
