"""Command-line front end.

    scrubkit gen-data   --config cfg.json --out out/
    scrubkit train      --config cfg.json --out out/ [--seeds 0,1,2] [--workers 4]
    scrubkit scrub      --config cfg.json --out out/
    scrubkit eval       --config cfg.json --out out/
    scrubkit bound      --config cfg.json --out out/
    scrubkit experiment fig1_logistic --out out/ [--config cfg.json]

Every command exits 0 on success. On failure it prints a JSON error record
to stderr, writes the same record to ``<out>/error.json`` and exits 2 for
configuration errors, 1 otherwise.
"""

from __future__ import annotations

import argparse
import dataclasses
import functools
import json
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .config import EXPERIMENTS, ExperimentConfig, builtin_config, load_config, parse_config
from .data import save_csv
from .errors import ConfigError, NoiselessMethod, ScrubError
from .experiments import SeedRunError, map_seeds, run_experiment, validate_experiment, write_atomic, write_json
from .infobound import InfoBoundReport, readout, seed_kl
from .models import Classifier, WeightVector, load_weights
from .scrub import ScrubResult, apply_scrub, noise_cov_from_sidecar
from .training import sgd_train

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2


def parse_seeds(text: str) -> list[int]:
    try:
        seeds = [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise ConfigError("--seeds", "must be a comma-separated list of integers") from None
    if not seeds or any(s < 0 for s in seeds):
        raise ConfigError("--seeds", "must list at least one non-negative integer")
    return seeds


def _model_id(cfg: ExperimentConfig, kind: str, seed: int) -> str:
    return f"{cfg.name}/{kind}/seed{seed}"


def _save_checkpoint(path: Path, w, model_id: str, sidecar: dict) -> None:
    write_atomic(path, WeightVector(w, model_id).to_bytes())
    write_json(path.with_suffix(path.suffix + ".json"), sidecar)


def _load_checkpoint(path: Path, spec) -> Optional[np.ndarray]:
    if not path.exists():
        return None
    return spec.check_w(load_weights(path).values)


# ---- per-seed jobs (module level so worker processes can import them) ----------


def _train_job(out: str, cfg: ExperimentConfig, seed: int) -> dict:
    out_dir = Path(out)
    tc = cfg.train.replace(seed=seed)
    result = {"seed": seed}
    for kind, retain_only in (("original", False), ("retrain", True)):
        trace = sgd_train(cfg.model, cfg.split, tc, retain_only=retain_only)
        side = {
            "seed": seed,
            "kind": kind,
            "epochs_run": trace.epochs_run,
            "losses": trace.losses,
            "flow_time": tc.flow_time,
            "config": cfg.resolved(),
        }
        _save_checkpoint(out_dir / f"{kind}_{seed}.w", trace.final_weights, _model_id(cfg, kind, seed), side)
        result[f"{kind}_final_loss"] = trace.losses[-1]
    return result


def _original_weights(out_dir: Path, cfg: ExperimentConfig, seed: int) -> np.ndarray:
    w = _load_checkpoint(out_dir / f"original_{seed}.w", cfg.model)
    if w is None:
        w = sgd_train(cfg.model, cfg.split, cfg.train.replace(seed=seed)).final_weights
    return w


def _scrub_job(out: str, cfg: ExperimentConfig, seed: int) -> dict:
    out_dir = Path(out)
    w = _original_weights(out_dir, cfg, seed)
    res = apply_scrub(cfg.model, w, cfg.split, cfg.scrub, seed=seed, flow_time=cfg.train.flow_time)
    side = dict(res.sidecar(), seed=seed, config=cfg.resolved())
    _save_checkpoint(out_dir / f"scrubbed_{seed}.w", res.weights, _model_id(cfg, "scrubbed", seed), side)
    return {"seed": seed, "method": res.method}


def _scrubbed_result(out_dir: Path, cfg: ExperimentConfig, seed: int) -> ScrubResult:
    path = out_dir / f"scrubbed_{seed}.w"
    side_path = path.with_suffix(".w.json")
    if path.exists() and side_path.exists():
        side = json.loads(side_path.read_text(encoding="utf-8"))
        w = _load_checkpoint(path, cfg.model)
        return ScrubResult(
            w,
            noise_cov_from_sidecar(side.get("noise_cov")),
            side["method"],
            masked_classes=tuple(side.get("masked_classes", ())),
        )
    w = _original_weights(out_dir, cfg, seed)
    return apply_scrub(cfg.model, w, cfg.split, cfg.scrub, seed=seed, flow_time=cfg.train.flow_time)


def _eval_job(out: str, cfg: ExperimentConfig, seed: int) -> dict:
    out_dir = Path(out)
    res = _scrubbed_result(out_dir, cfg, seed)
    relearn = dataclasses.replace(cfg.relearn, seed=seed)
    report = readout(cfg.model, res, cfg.split, cfg.test_dataset, relearn)
    record = dict(report.to_dict(), seed=seed, method=res.method, config=cfg.resolved())
    write_json(out_dir / f"eval_{seed}.json", record)
    header = "# config: " + json.dumps(cfg.resolved(), separators=(",", ":")) + "\n"
    write_atomic(out_dir / f"entropy_{seed}.csv", header + report.histogram_csv())
    return {k: v for k, v in record.items() if k != "config"}


def _bound_job(cfg: ExperimentConfig, seed: int) -> dict:
    tc = cfg.train.replace(seed=seed)
    w = sgd_train(cfg.model, cfg.split, tc).final_weights
    w_ref = sgd_train(cfg.model, cfg.split, tc, retain_only=True).final_weights
    return {"seed": seed, "nats": seed_kl(cfg.model, cfg.split, w, w_ref, cfg.scrub, seed, tc.flow_time)}


# ---- commands ------------------------------------------------------------------


def cmd_gen_data(cfg: ExperimentConfig, out_dir: Path, args) -> dict:
    comment = ["config: " + json.dumps(cfg.resolved(), separators=(",", ":"))]
    out_dir.mkdir(parents=True, exist_ok=True)
    save_csv(cfg.dataset, out_dir / "dataset.csv", comment)
    save_csv(cfg.test_dataset, out_dir / "test_dataset.csv", comment)
    return {"dataset": str(out_dir / "dataset.csv"), "n": cfg.dataset.n, "test_n": cfg.test_dataset.n}


def cmd_train(cfg: ExperimentConfig, out_dir: Path, args) -> dict:
    per_seed = map_seeds(functools.partial(_train_job, str(out_dir)), cfg, cfg.seeds, args.workers)
    return {"seeds": list(per_seed), "runs": list(per_seed.values())}


def cmd_scrub(cfg: ExperimentConfig, out_dir: Path, args) -> dict:
    per_seed = map_seeds(functools.partial(_scrub_job, str(out_dir)), cfg, cfg.seeds, args.workers)
    return {"seeds": list(per_seed), "method": cfg.scrub.method}


def cmd_eval(cfg: ExperimentConfig, out_dir: Path, args) -> dict:
    if not isinstance(cfg.model, Classifier):
        raise ConfigError("model.kind", "eval needs a classification model")
    per_seed = map_seeds(functools.partial(_eval_job, str(out_dir)), cfg, cfg.seeds, args.workers)
    merged = {"seeds": list(per_seed), "reports": list(per_seed.values()), "config": cfg.resolved()}
    write_json(out_dir / "eval.json", merged)
    return {"seeds": list(per_seed), "err_forget": [r["err_forget"] for r in per_seed.values()]}


def cmd_bound(cfg: ExperimentConfig, out_dir: Path, args) -> dict:
    if not cfg.scrub.noisy:
        raise NoiselessMethod(f"{cfg.scrub.method} adds no noise; the information bound is undefined")
    per_seed = map_seeds(_bound_job, cfg, cfg.seeds, args.workers, out_dir / "seeds", tag="bound")
    report = InfoBoundReport([r["nats"] for r in per_seed.values()], list(per_seed), cfg.scrub.method, cfg.scrub.lam)
    write_json(out_dir / "bound.json", dict(report.to_dict(), config=cfg.resolved()))
    return {"mean_nats": report.mean_nats, "per_seed_nats": report.per_seed_nats}


def cmd_experiment(cfg: ExperimentConfig, out_dir: Path, args) -> dict:
    result = run_experiment(args.name, cfg, out_dir, workers=args.workers)
    return {k: v for k, v in result.summary.items() if k != "config"}


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "scrub": cmd_scrub,
    "eval": cmd_eval,
    "bound": cmd_bound,
    "experiment": cmd_experiment,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="scrubkit", description="Forget a subset of training data from small models.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config_required=True):
        p.add_argument("--config", required=config_required, help="JSON experiment config")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seeds", type=str, default=None, help="comma-separated seeds, overrides the config")
        p.add_argument("--workers", type=int, default=1, help="worker processes for seed-level parallelism")

    for name, help_text in (
        ("gen-data", "write the dataset and test set as CSV"),
        ("train", "train original and retrain checkpoints per seed"),
        ("scrub", "scrub the original checkpoints"),
        ("eval", "readouts of the scrubbed models"),
        ("bound", "per-seed information bound"),
    ):
        common(sub.add_parser(name, help=help_text))
    exp = sub.add_parser("experiment", help="run a canned multi-seed experiment")
    exp.add_argument("name", choices=EXPERIMENTS)
    common(exp, config_required=False)
    return parser


def _error_record(exc: BaseException) -> dict:
    cause = exc.cause if isinstance(exc, SeedRunError) else exc
    record = {"error": getattr(cause, "code", type(cause).__name__), "message": str(cause)}
    if isinstance(exc, SeedRunError):
        record["seed"] = exc.seed
        record["completed_seeds"] = list(exc.completed)
    if isinstance(cause, ConfigError):
        record["key"] = cause.key
        record["constraint"] = cause.constraint
    return record


def _load(args) -> ExperimentConfig:
    if args.config is None:
        cfg = parse_config(builtin_config(args.name))
    else:
        cfg = load_config(args.config)
    if args.seeds is not None:
        cfg = cfg.with_seeds(parse_seeds(args.seeds))
    if args.workers < 1:
        raise ConfigError("--workers", "must be >= 1")
    if args.command == "experiment":
        validate_experiment(args.name, cfg)
    return cfg


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    out_dir = Path(args.out)
    try:
        cfg = _load(args)
        out_dir.mkdir(parents=True, exist_ok=True)
        result = COMMANDS[args.command](cfg, out_dir, args)
    except (ScrubError, OSError, json.JSONDecodeError) as exc:
        record = _error_record(exc)
        if isinstance(exc, OSError):
            record["error"] = "io_error"
        print(json.dumps(record), file=sys.stderr)
        try:
            write_json(out_dir / "error.json", record)
        except OSError:
            pass
        cause = exc.cause if isinstance(exc, SeedRunError) else exc
        return EXIT_CONFIG if isinstance(cause, ConfigError) else EXIT_FAILURE
    # an experiment that runs to completion but misses a threshold still exits 0;
    # the verdict is in the summary
    print(json.dumps(result, default=float))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
