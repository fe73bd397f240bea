"""How much information about the forget set is left after scrubbing.

Two estimators are provided. :func:`local_bound` averages, over training
seeds, the closed-form KL between the scrubbed original model and the
scrubbed reference model trained with the same seed; averaging per-seed KLs
upper-bounds the KL between the seed-marginal weight distributions.
:func:`empirical_weight_kl` estimates that marginal KL directly by fitting
Gaussians to populations of weights, which is only feasible for tiny models.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from typing import NamedTuple, Optional, Sequence

import numpy as np
from numpy.typing import NDArray

from . import linalgx
from .data import Dataset, ForgetSplit
from .errors import ConvergenceFailure, DegenerateFit, InvalidSpec, NoiselessMethod
from .models import Classifier, Model
from .scrub import ScrubConfig, ScrubResult, apply_reference_scrub, apply_scrub
from .training import TrainConfig, relearn_time, sgd_train


@dataclass
class InfoBoundReport:
    per_seed_nats: list[float]
    seeds: list[int]
    method: str
    lam: float
    mean_nats: float = field(init=False)

    def __post_init__(self):
        order = np.argsort(self.seeds, kind="stable")
        self.seeds = [int(self.seeds[i]) for i in order]
        self.per_seed_nats = [float(self.per_seed_nats[i]) for i in order]
        if any(v < 0 for v in self.per_seed_nats):
            raise ValueError("KL values must be non-negative")
        self.mean_nats = float(np.mean(self.per_seed_nats)) if self.per_seed_nats else float("nan")

    def to_dict(self) -> dict:
        return asdict(self)


# offset that keeps the reference population's noise independent of the original's
REFERENCE_SEED_OFFSET = 1_000_003


def _train_pair(spec, split, train_cfg: TrainConfig, seed: int):
    cfg = train_cfg.replace(seed=seed)
    w = sgd_train(spec, split, cfg).final_weights
    w_ref = sgd_train(spec, split, cfg, retain_only=True).final_weights
    return w, w_ref, cfg.flow_time


def seed_kl(spec, split, w, w_ref, scrub_cfg: ScrubConfig, seed: int, flow_time=None) -> float:
    """KL between the scrubbed original and scrubbed reference for one seed."""
    s_o = apply_scrub(spec, w, split, scrub_cfg, seed=seed, flow_time=flow_time)
    s_r = apply_reference_scrub(spec, w_ref, split, scrub_cfg, seed=seed)
    return linalgx.gaussian_kl(s_o.noise_gaussian(), s_r.noise_gaussian())


def local_bound(
    spec: Model,
    split: ForgetSplit,
    train_cfg: TrainConfig,
    scrub_cfg: ScrubConfig,
    seeds: Sequence[int],
) -> InfoBoundReport:
    if not scrub_cfg.noisy:
        raise NoiselessMethod(f"{scrub_cfg.method} adds no noise; the bound is undefined")
    if len(seeds) < 1:
        raise InvalidSpec("need at least one seed")
    values = []
    for seed in seeds:
        w, w_ref, t = _train_pair(spec, split, train_cfg, seed)
        values.append(seed_kl(spec, split, w, w_ref, scrub_cfg, seed, t))
    return InfoBoundReport(values, list(seeds), scrub_cfg.method, scrub_cfg.lam)


def fit_gaussian(W, shrinkage: float = 1e-4) -> linalgx.GaussianParams:
    """Full-covariance fit with ``delta = shrinkage * trace / p`` added to the diagonal."""
    W = np.asarray(W, dtype=float)
    if W.ndim != 2 or W.shape[0] < 2:
        raise DegenerateFit("need at least two samples to fit a Gaussian")
    p = W.shape[1]
    S = np.atleast_2d(np.cov(W, rowvar=False))
    delta = shrinkage * np.trace(S) / p
    if not delta > 0:
        raise DegenerateFit("sample covariance is zero")
    return linalgx.GaussianParams(W.mean(axis=0), S + delta * np.eye(p))


def population_kl(W_p, W_q, shrinkage: float = 1e-4) -> float:
    return linalgx.gaussian_kl(fit_gaussian(W_p, shrinkage), fit_gaussian(W_q, shrinkage))


@dataclass
class WeightPopulations:
    """Raw and scrubbed weights, one row per seed."""

    original: NDArray
    reference: NDArray
    scrubbed: NDArray
    scrubbed_reference: NDArray
    seeds: list[int]


def weight_populations(
    spec: Model,
    split: ForgetSplit,
    train_cfg: TrainConfig,
    scrub_cfg: Optional[ScrubConfig],
    seeds: Sequence[int],
) -> WeightPopulations:
    """Train on the full and retained data for every seed and scrub both.

    ``scrub_cfg=None`` means the identity scrub.
    """
    rows = []
    for seed in seeds:
        w, w_ref, t = _train_pair(spec, split, train_cfg, seed)
        if scrub_cfg is None:
            s, s_ref = w, w_ref
        else:
            s = apply_scrub(spec, w, split, scrub_cfg, seed=seed, flow_time=t).weights
            s_ref = apply_reference_scrub(spec, w_ref, split, scrub_cfg, seed=seed + REFERENCE_SEED_OFFSET).weights
        rows.append((w, w_ref, s, s_ref))
    cols = [np.array(c) for c in zip(*rows)]
    return WeightPopulations(*cols, seeds=list(seeds))


class WeightKL(NamedTuple):
    kl_before: float
    kl_after: float


def empirical_weight_kl(
    spec: Model,
    split: ForgetSplit,
    train_cfg: TrainConfig,
    scrub_cfg: Optional[ScrubConfig],
    n_seeds: int,
    base_seed: int = 0,
    shrinkage: float = 1e-4,
) -> WeightKL:
    if n_seeds < 20:
        raise InvalidSpec("empirical weight KL needs at least 20 seeds")
    if spec.n_params > 64:
        raise InvalidSpec("empirical weight KL is limited to models with at most 64 parameters")
    pops = weight_populations(spec, split, train_cfg, scrub_cfg, range(base_seed, base_seed + n_seeds))
    return WeightKL(
        population_kl(pops.original, pops.reference, shrinkage),
        population_kl(pops.scrubbed, pops.scrubbed_reference, shrinkage),
    )


def forgetting_lagrangian(
    spec: Model,
    retain: Optional[Dataset],
    result: ScrubResult,
    lam: float,
    kl_term: float,
    n_noise_draws: int = 100,
    seed: int = 0,
) -> float:
    """Expected retained loss under the scrub's noise plus ``lam * kl_term``."""
    if n_noise_draws < 1:
        raise InvalidSpec("n_noise_draws must be >= 1")
    center = np.asarray(result.center, dtype=float)
    cov = result.noise_cov
    if cov is None:
        expected = spec.loss(center, retain)
    else:
        rng = np.random.default_rng(seed)
        if cov.ndim == 1:
            draws = rng.standard_normal((n_noise_draws, center.size)) * np.sqrt(cov)
        else:
            vals, V = linalgx.sym_eig(cov)
            root = (V * np.sqrt(np.maximum(vals, 0.0))) @ V.T
            draws = rng.standard_normal((n_noise_draws, center.size)) @ root
        expected = float(np.mean([spec.loss(center + n, retain) for n in draws]))
    return expected + lam * kl_term


def optimal_noise_check(B, sigma_h: float, lam: float, tol: float = 1e-8) -> NDArray:
    """Optimal isotropic-error noise covariance ``sqrt(lam sigma_h^2) B^{-1/2}``.

    The result is checked against the stationarity condition
    ``Sigma B Sigma = lam sigma_h^2 I``.
    """
    B = linalgx.as_sym(B)
    vals, V = linalgx.sym_eig(B)
    if vals[0] <= 0:
        raise InvalidSpec("B must be positive definite")
    c = np.sqrt(lam * sigma_h**2)
    Sigma = c * (V * vals**-0.5) @ V.T
    Sigma = 0.5 * (Sigma + Sigma.T)
    target = lam * sigma_h**2
    residual = np.max(np.abs(Sigma @ B @ Sigma - target * np.eye(B.shape[0])))
    if residual > tol * max(1.0, target):
        raise ConvergenceFailure(f"Sigma B Sigma residual {residual:.3g} exceeds {tol:g}")
    return Sigma


def quadratic_lagrangian(B, Sigma, lam: float, sigma_h: float) -> float:
    """Noise-dependent part of the local Lagrangian, ``1/2 tr(B S) + lam/2 tr(S^-1 sigma_h^2)``."""
    Sigma = np.asarray(Sigma, dtype=float)
    if Sigma.ndim == 1:
        return 0.5 * float(np.diag(B) @ Sigma) + 0.5 * lam * sigma_h**2 * float(np.sum(1.0 / Sigma))
    return 0.5 * float(np.trace(B @ Sigma)) + 0.5 * lam * sigma_h**2 * float(np.trace(np.linalg.inv(Sigma)))


# ---- readouts -------------------------------------------------------------

N_ENTROPY_BINS = 30


@dataclass
class ReadoutReport:
    err_test: float
    err_forget: float
    err_retain: float
    relearn_epochs: Optional[int]
    bin_edges: list[float]
    entropy_histograms: dict[str, list[int]]
    info_bound: Optional[InfoBoundReport] = None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["relearn_epochs"] = "not_reached" if self.relearn_epochs is None else self.relearn_epochs
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def histogram_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["bin_left", "bin_right", "count_retain", "count_forget", "count_test"])
        h = self.entropy_histograms
        for i in range(len(self.bin_edges) - 1):
            writer.writerow([self.bin_edges[i], self.bin_edges[i + 1], h["retain"][i], h["forget"][i], h["test"][i]])
        return buf.getvalue()


def entropy_histogram(spec: Classifier, w, ds: Dataset, masked=(), bins: int = N_ENTROPY_BINS):
    edges = np.linspace(0.0, np.log(spec.K), bins + 1)
    h = np.clip(spec.entropy(w, ds.features, masked), 0.0, np.log(spec.K))
    counts, _ = np.histogram(h, bins=edges)
    return counts.tolist(), edges.tolist()


@dataclass(frozen=True)
class RelearnConfig:
    learning_rate: float = 0.01
    max_epochs: int = 50
    threshold: Optional[float] = None  # default: 0.1 * |D_f| * log K
    batch_size: int = 10
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise InvalidSpec("learning_rate must be > 0")
        if self.max_epochs < 1 or self.batch_size < 1:
            raise InvalidSpec("max_epochs and batch_size must be >= 1")
        if self.threshold is not None and not self.threshold >= 0:
            raise InvalidSpec("threshold must be >= 0")


def readout(
    spec: Classifier,
    result: ScrubResult,
    split: ForgetSplit,
    test_ds: Dataset,
    relearn_cfg: Optional[RelearnConfig] = RelearnConfig(),
    info_bound: Optional[InfoBoundReport] = None,
) -> ReadoutReport:
    w = result.weights
    masked = result.masked_classes
    hists = {}
    edges = None
    for name, ds in (("retain", split.retain), ("forget", split.forget), ("test", test_ds)):
        hists[name], edges = entropy_histogram(spec, w, ds, masked)
    relearn = None
    if relearn_cfg is not None:
        relearn = relearn_time(
            spec, w, split, relearn_cfg.learning_rate, relearn_cfg.max_epochs,
            relearn_cfg.threshold, relearn_cfg.batch_size, relearn_cfg.seed,
        )
    return ReadoutReport(
        err_test=spec.error(w, test_ds, masked),
        err_forget=spec.error(w, split.forget, masked),
        err_retain=spec.error(w, split.retain, masked),
        relearn_epochs=relearn,
        bin_edges=edges,
        entropy_histograms=hists,
        info_bound=info_bound,
    )


def monotone_within_tolerance(values: Sequence[float], increasing: bool, tol: float = 0.05, max_inversions: int = 1) -> bool:
    """True if ``values`` is monotone up to ``max_inversions`` adjacent inversions
    each no larger than ``tol`` relative to the larger of the two values."""
    v = np.asarray(values, dtype=float)
    if not increasing:
        v = -v
    inversions = 0
    for a, b in zip(v[:-1], v[1:]):
        if b < a:
            scale = max(abs(a), abs(b), 1e-12)
            if (a - b) / scale > tol:
                return False
            inversions += 1
    return inversions <= max_inversions
