"""Forgetting procedures.

Noise-based scrubs return the covariance they actually applied so the
remaining information can be bounded afterwards; the baselines return
``noise_cov=None``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from numpy.typing import NDArray

from . import linalgx
from .data import CountFromClass, Dataset, ForgetSplit, WholeClass
from .errors import (
    Diverged,
    HidingRequiresWholeClass,
    InvalidSpec,
    NoiselessMethod,
    NotAtMinimum,
    SingularB,
    UnsupportedModel,
)
from .linalgx import DEFAULT_FLOOR
from .models import Classifier, LogisticModel, Model, QuadraticModel, save_weights
from .training import TrainConfig, _sgd

EXPONENTS = (-0.25, -0.5)


@dataclass(frozen=True)
class QuadraticSurrogate:
    A: NDArray
    B: NDArray
    d: NDArray
    d_r: NDArray
    at_weights: NDArray

    def __post_init__(self):
        p = np.asarray(self.at_weights).shape[0]
        for name in ("A", "B"):
            M = linalgx.as_sym(getattr(self, name))
            if M.shape != (p, p):
                raise InvalidSpec(f"{name} has shape {M.shape}, expected {(p, p)}")
        for name in ("d", "d_r"):
            if np.shape(getattr(self, name)) != (p,):
                raise InvalidSpec(f"{name} must have length {p}")

    @property
    def newton_target(self) -> NDArray:
        return self.at_weights - self.d_r


@dataclass
class ScrubResult:
    weights: NDArray
    noise_cov: Optional[NDArray]  # 1-D diagonal, 2-D full, or None
    method: str
    lam: float = 0.0
    sigma_h: float = 0.0
    t: Optional[float] = None
    exponent: Optional[float] = None
    masked_classes: tuple[int, ...] = ()
    center: Optional[NDArray] = None  # weights before noise was added

    def __post_init__(self):
        if self.center is None:
            self.center = np.array(self.weights, dtype=float)

    def noise_gaussian(self) -> linalgx.GaussianParams:
        if self.noise_cov is None:
            raise NoiselessMethod(f"{self.method} adds no noise")
        return linalgx.GaussianParams(self.center, self.noise_cov)

    def sidecar(self) -> dict:
        cov = self.noise_cov
        if cov is None:
            noise = None
        elif cov.ndim == 1:
            noise = {"form": "diagonal", "values": cov.tolist()}
        else:
            vals, vecs = linalgx.sym_eig(cov)
            noise = {"form": "full", "eigenvalues": vals.tolist(), "eigenvectors": vecs.tolist()}
        return {
            "method": self.method,
            "lambda": self.lam,
            "sigma_h": self.sigma_h,
            "t": self.t,
            "exponent": self.exponent,
            "masked_classes": list(self.masked_classes),
            "noise_cov": noise,
        }

    def save(self, weights_path, model_id: str) -> Path:
        """Write the checkpoint and its JSON sidecar (``<path>.json``)."""
        weights_path = Path(weights_path)
        save_weights(weights_path, self.weights, model_id)
        side = weights_path.with_suffix(weights_path.suffix + ".json")
        side.write_text(json.dumps(self.sidecar(), indent=2), encoding="utf-8")
        return side


def noise_cov_from_sidecar(noise: Optional[dict]) -> Optional[NDArray]:
    if noise is None:
        return None
    if noise["form"] == "diagonal":
        return np.asarray(noise["values"], dtype=float)
    V = np.asarray(noise["eigenvectors"], dtype=float)
    out = (V * np.asarray(noise["eigenvalues"], dtype=float)) @ V.T
    return 0.5 * (out + out.T)


def _retain_terms(spec: Model, w, retain: Optional[Dataset]):
    return spec.grad(w, retain), spec.hessian(w, retain)


def _solve_floored(M, g, floor, err):
    vals, V = linalgx.sym_eig(M)
    if vals[0] < floor:
        raise err(f"smallest eigenvalue {vals[0]:.3g} is below the floor {floor:g}")
    return V @ ((V.T @ g) / vals)


def build_surrogate(spec: Model, w, split: ForgetSplit, floor: float = DEFAULT_FLOOR) -> QuadraticSurrogate:
    """Local quadratic model of the full and retained losses at ``w``."""
    w = spec.check_w(np.array(w, dtype=float))
    A = spec.hessian(w, split.dataset)
    B = spec.hessian(w, split.retain)
    d = _solve_floored(A, spec.grad(w, split.dataset), floor, SingularB)
    d_r = _solve_floored(B, spec.grad(w, split.retain), floor, SingularB)
    return QuadraticSurrogate(A, B, d, d_r, w)


def quadratic_scrub(sur: QuadraticSurrogate, t: float, stabilize: bool = False) -> NDArray:
    """Move weights trained for time ``t`` on the full loss to where training
    on the retained loss alone would have been at the same time.

    ``h(w) = w + e^{-Bt} e^{At} d + e^{-Bt} (d_r - d) - d_r``. With
    ``stabilize`` the product ``e^{-Bt} e^{At}`` is replaced by
    ``e^{clamp(A - B, 1/t) t}``, which stays bounded when the dynamics do not
    match the quadratic model; the two agree only when ``A`` and ``B``
    commute and the clamp is inactive.
    """
    if not t > 0:
        raise InvalidSpec(f"t must be > 0, got {t}")
    w = np.asarray(sur.at_weights, dtype=float)
    A = linalgx.as_sym(sur.A)
    B = linalgx.as_sym(sur.B)
    if np.isinf(t):
        return w - sur.d_r
    decay_B = linalgx.mat_exp(B, -t)
    if stabilize:
        M = linalgx.mat_exp(linalgx.clamp_eigs(A - B, 1.0 / t), t)
    else:
        M = decay_B @ linalgx.mat_exp(A, t)
    return w + M @ sur.d + decay_B @ (sur.d_r - sur.d) - sur.d_r


def _noise(rng, scale_matrix_or_diag, p):
    eps = rng.standard_normal(p)
    if scale_matrix_or_diag.ndim == 1:
        return scale_matrix_or_diag * eps
    return scale_matrix_or_diag @ eps


def _check_hparams(lam, sigma_h, exponent):
    if lam < 0:
        raise InvalidSpec("lambda must be >= 0")
    if not sigma_h > 0:
        raise InvalidSpec("sigma_h must be > 0")
    if exponent not in EXPONENTS:
        raise InvalidSpec(f"exponent must be one of {EXPONENTS}, got {exponent}")


def hessian_noise(B, lam, sigma_h, exponent=-0.25, floor=DEFAULT_FLOOR):
    """``(scale, cov)`` for noise ``(lam sigma_h^2)^{1/4} B^{exponent} n``."""
    amp = (lam * sigma_h**2) ** 0.25
    vals, V = linalgx.sym_eig(B)
    vals = np.maximum(vals, floor)
    scale = amp * (V * vals**exponent) @ V.T
    cov = amp**2 * (V * vals ** (2 * exponent)) @ V.T
    return 0.5 * (scale + scale.T), 0.5 * (cov + cov.T)


def newton_scrub(
    spec: Model,
    w,
    retain: Optional[Dataset],
    lam: float,
    sigma_h: float = 1.0,
    seed: int = 0,
    exponent: float = -0.25,
    floor: float = DEFAULT_FLOOR,
) -> ScrubResult:
    """Noisy Newton step on the retained loss.

    ``S(w) = w - B^{-1} grad L_r(w) + (lam sigma_h^2)^{1/4} B^{-1/4} n`` with
    ``B`` the exact retained Hessian, so the recorded covariance is
    ``sqrt(lam sigma_h^2) B^{-1/2}``.
    """
    if not isinstance(spec, (QuadraticModel, LogisticModel)):
        raise UnsupportedModel("newton_scrub needs an exact Hessian (quadratic or logistic)")
    _check_hparams(lam, sigma_h, exponent)
    w = spec.check_w(np.array(w, dtype=float))
    g, B = _retain_terms(spec, w, retain)
    target = w - _solve_floored(B, g, floor, SingularB)
    if lam == 0:
        return ScrubResult(target, None, "newton", lam, sigma_h, None, exponent)
    scale, cov = hessian_noise(B, lam, sigma_h, exponent, floor)
    rng = np.random.default_rng(seed)
    return ScrubResult(
        target + _noise(rng, scale, w.size), cov, "newton", lam, sigma_h, None, exponent, center=target
    )


def robust_scrub(
    spec: Model,
    w,
    split: ForgetSplit,
    t: float,
    lam: float,
    sigma_h: float = 1.0,
    seed: int = 0,
    stabilize: bool = True,
    exponent: float = -0.25,
    floor: float = DEFAULT_FLOOR,
) -> ScrubResult:
    """Time-dependent quadratic scrub plus Hessian-shaped noise.

    ``t`` is the gradient-flow time the weights were trained for (see
    :attr:`TrainConfig.flow_time`); ``t = inf`` falls back to the Newton step.
    """
    _check_hparams(lam, sigma_h, exponent)
    sur = build_surrogate(spec, w, split, floor)
    h = quadratic_scrub(sur, t, stabilize=stabilize)
    if lam == 0:
        return ScrubResult(h, None, "robust", lam, sigma_h, t, exponent)
    scale, cov = hessian_noise(sur.B, lam, sigma_h, exponent, floor)
    rng = np.random.default_rng(seed)
    return ScrubResult(h + _noise(rng, scale, h.size), cov, "robust", lam, sigma_h, t, exponent, center=h)


def noise_only_scrub(
    spec: Model,
    w,
    retain: Optional[Dataset],
    lam: float,
    sigma_h: float = 1.0,
    seed: int = 0,
    exponent: float = -0.25,
    floor: float = DEFAULT_FLOOR,
) -> ScrubResult:
    """``S0(w) = w + n`` with the same Hessian-shaped noise, for reference models."""
    _check_hparams(lam, sigma_h, exponent)
    w = spec.check_w(np.array(w, dtype=float))
    if lam == 0:
        return ScrubResult(w.copy(), None, "noise_only", lam, sigma_h, None, exponent)
    scale, cov = hessian_noise(spec.hessian(w, retain), lam, sigma_h, exponent, floor)
    rng = np.random.default_rng(seed)
    return ScrubResult(
        w + _noise(rng, scale, w.size), cov, "noise_only", lam, sigma_h, None, exponent, center=w
    )


def fisher_scrub(
    spec: Model,
    w,
    retain: Dataset,
    lam: float,
    sigma_h: float = 1.0,
    exponent: float = -0.25,
    seed: int = 0,
    floor: float = DEFAULT_FLOOR,
) -> ScrubResult:
    """Add noise shaped by the diagonal Fisher of the retained data; no Newton step.

    Per coordinate, stddev ``(lam sigma_h^2)^{1/4} max(F_ii, floor)^exponent``.
    """
    if not isinstance(spec, Classifier):
        raise UnsupportedModel("fisher_scrub needs a classification model")
    _check_hparams(lam, sigma_h, exponent)
    w = spec.check_w(np.array(w, dtype=float))
    if lam == 0:
        return ScrubResult(w.copy(), None, "fisher", lam, sigma_h, None, exponent)
    F = spec.fim(w, retain, "diagonal")
    std = (lam * sigma_h**2) ** 0.25 * linalgx.diag_frac_power(F, exponent, floor)
    rng = np.random.default_rng(seed)
    return ScrubResult(
        w + std * rng.standard_normal(w.size), std**2, "fisher", lam, sigma_h, None, exponent, center=w
    )


@dataclass(frozen=True)
class VariationalConfig:
    steps: int = 500
    draws: int = 4
    step_size: float = 0.01
    init_scale: float = 0.01  # initial stddev is init_scale * (1 + |w_i|)
    optimizer: str = "adam"  # "adam" | "sgd"
    average_last: float = 0.2  # fraction of final iterates averaged in log space

    def __post_init__(self):
        if self.steps < 1 or self.draws < 1:
            raise InvalidSpec("steps and draws must be >= 1")
        if not self.step_size > 0 or not self.init_scale > 0:
            raise InvalidSpec("step_size and init_scale must be > 0")
        if self.optimizer not in ("adam", "sgd"):
            raise InvalidSpec(f"optimizer must be 'adam' or 'sgd', got {self.optimizer!r}")
        if not 0 <= self.average_last < 1:
            raise InvalidSpec("average_last must be in [0, 1)")


def optimize_log_std(
    spec: Model,
    w,
    retain: Optional[Dataset],
    lam: float,
    cfg: VariationalConfig = VariationalConfig(),
    seed: int = 0,
    trace: Optional[list] = None,
) -> NDArray:
    """Minimise ``E_n[L_r(w + n)] - lam log|Sigma|`` over diagonal ``Sigma``.

    Uses the reparametrisation ``n = exp(s) * eps``; the gradient with respect
    to the log-stddev ``s`` is ``E[grad L_r(w + n) * n] - 2 lam``. Returns the
    optimised log-stddevs; if ``trace`` is given, the iterate after every
    step is appended to it.
    """
    if not lam > 0:
        raise InvalidSpec("variational forgetting needs lambda > 0")
    w = spec.check_w(np.array(w, dtype=float))
    rng = np.random.default_rng(seed)
    s = np.log(cfg.init_scale * (1.0 + np.abs(w)))
    m = np.zeros_like(s)
    v = np.zeros_like(s)
    b1, b2, eps_adam = 0.9, 0.999, 1e-8
    n_avg = int(round(cfg.average_last * cfg.steps))
    acc = np.zeros_like(s)
    for step in range(1, cfg.steps + 1):
        sigma = np.exp(s)
        eps = rng.standard_normal((cfg.draws, w.size))
        g = np.zeros_like(s)
        objective = 0.0
        for e in eps:
            n = sigma * e
            g += spec.grad(w + n, retain) * n
            objective += spec.loss(w + n, retain)
        g = g / cfg.draws - 2.0 * lam
        objective = objective / cfg.draws - 2.0 * lam * float(np.sum(s))
        if not np.isfinite(objective) or not np.all(np.isfinite(g)):
            raise Diverged(f"variational objective became non-finite at step {step}")
        if cfg.optimizer == "adam":
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            s = s - cfg.step_size * (m / (1 - b1**step)) / (np.sqrt(v / (1 - b2**step)) + eps_adam)
        else:
            s = s - cfg.step_size * g
        if trace is not None:
            trace.append(s.copy())
        if step > cfg.steps - n_avg:
            acc += s
    return acc / n_avg if n_avg else s


def variational_scrub(
    spec: Model,
    w,
    retain: Optional[Dataset],
    lam: float,
    cfg: VariationalConfig = VariationalConfig(),
    seed: int = 0,
) -> ScrubResult:
    w = spec.check_w(np.array(w, dtype=float))
    s = optimize_log_std(spec, w, retain, lam, cfg, seed)
    sigma = np.exp(s)
    # the final draw uses a stream independent of the optimisation noise
    rng = np.random.default_rng([seed, 1])
    return ScrubResult(w + sigma * rng.standard_normal(w.size), sigma**2, "variational", lam, center=w)


@dataclass(frozen=True)
class HessianCache:
    hessian_of_full_loss: NDArray  # 2-D full or 1-D diagonal
    at_weights: NDArray


def not_at_minimum_tol(w) -> float:
    return 1e-3 * (1.0 + float(np.max(np.abs(w))))


def subset_identities(grad_f, cache: HessianCache, hessian_f, full_grad, w=None):
    """Retained-loss gradient and Hessian from forget-set quantities only.

    At a minimum of the full loss, ``grad L_r = -grad L_f`` and
    ``hess L_r = hess L - hess L_f`` (cached full Hessian). ``full_grad`` is
    the caller's gradient of the full loss at the cached weights and is only
    used to check that the weights are (close to) a minimum.
    """
    at = np.asarray(cache.at_weights, dtype=float)
    if w is not None and not np.array_equal(np.asarray(w, dtype=float), at):
        raise InvalidSpec("Hessian cache was computed at different weights")
    full_grad = np.asarray(full_grad, dtype=float)
    tol = not_at_minimum_tol(at)
    gnorm = float(np.max(np.abs(full_grad))) if full_grad.size else 0.0
    if gnorm > tol:
        raise NotAtMinimum(f"|grad L|_inf = {gnorm:.3g} exceeds tolerance {tol:.3g}")
    H = np.asarray(cache.hessian_of_full_loss, dtype=float)
    Hf = np.asarray(hessian_f, dtype=float)
    if H.shape != Hf.shape:
        raise InvalidSpec(f"cached Hessian shape {H.shape} != forget Hessian shape {Hf.shape}")
    return -np.asarray(grad_f, dtype=float), H - Hf


BASELINES = ("finetune", "neggrad", "random_labels", "hiding")

# fine-tuning settings used for all three training baselines
DEFAULT_BASELINE_CFG = TrainConfig(seed=0, learning_rate=0.01, batch_size=10, epochs=10)


def neggrad_contributions(spec: Classifier, w, ds: Dataset, forget_mask) -> NDArray:
    """Per-sample objective of the negative-gradient baseline: ``l_i`` on
    retained samples and ``-min(l_i, log K)`` on forgotten ones."""
    losses = spec.per_sample_loss(w, ds)
    cap = np.log(ds.K)
    return np.where(forget_mask, -np.minimum(losses, cap), losses)


def relabel_forget(split: ForgetSplit, seed: int) -> Dataset:
    rng = np.random.default_rng([seed, 2])
    labels = np.array(split.dataset.labels)
    labels[split.forget_indices] = rng.integers(0, split.dataset.K, size=split.forget_indices.size)
    return split.dataset.with_labels(labels)


def check_baseline(kind: str, rule) -> None:
    if kind not in BASELINES:
        raise InvalidSpec(f"unknown baseline {kind!r}; expected one of {BASELINES}")
    if kind == "hiding" and not isinstance(rule, WholeClass):
        raise HidingRequiresWholeClass("hiding removes a whole output class; use a whole_class split")


def baseline_scrub(
    kind: str, spec: Classifier, w, split: ForgetSplit, cfg: TrainConfig = DEFAULT_BASELINE_CFG
) -> ScrubResult:
    check_baseline(kind, split.rule)
    w = spec.check_w(np.array(w, dtype=float))
    if kind == "hiding":
        return ScrubResult(w.copy(), None, "hiding", masked_classes=(split.rule.k,))
    rng = np.random.default_rng(cfg.seed)
    ds = split.dataset
    if kind == "finetune":
        trace = _sgd(spec, ds, cfg, w, rng, include=~split.forget_mask)
    elif kind == "neggrad":
        trace = _sgd(spec, ds, cfg, w, rng, flip=split.forget_mask, clamp=float(np.log(ds.K)))
    else:
        relabeled = relabel_forget(split, cfg.seed)
        trace = _sgd(spec, relabeled, cfg, w, rng)
    return ScrubResult(trace.final_weights, None, kind)


METHODS = ("robust", "newton", "fisher", "variational") + BASELINES
NOISY_METHODS = ("robust", "newton", "fisher", "variational")


@dataclass(frozen=True)
class ScrubConfig:
    """Method choice plus every hyperparameter a scrub may need.

    ``t=None`` for the robust scrub means "use the flow time of the training
    run that produced the weights".
    """

    method: str = "robust"
    lam: float = 5e-7
    sigma_h: float = 1.0
    exponent: float = -0.25
    t: Optional[float] = None
    stabilize: bool = True
    floor: float = DEFAULT_FLOOR
    variational: VariationalConfig = field(default_factory=VariationalConfig)
    baseline: TrainConfig = DEFAULT_BASELINE_CFG

    def __post_init__(self):
        if self.method not in METHODS:
            raise InvalidSpec(f"unknown scrub method {self.method!r}; expected one of {METHODS}")
        if self.method in NOISY_METHODS:
            _check_hparams(self.lam, self.sigma_h, self.exponent)

    @property
    def noisy(self) -> bool:
        return self.method in NOISY_METHODS


def apply_scrub(
    spec: Model,
    w,
    split: ForgetSplit,
    cfg: ScrubConfig,
    seed: int = 0,
    flow_time: Optional[float] = None,
) -> ScrubResult:
    """Scrub weights trained on the full data of ``split``."""
    m = cfg.method
    if m == "robust":
        t = cfg.t if cfg.t is not None else flow_time
        if t is None:
            raise InvalidSpec("robust scrub needs t (or the training flow time)")
        return robust_scrub(spec, w, split, t, cfg.lam, cfg.sigma_h, seed, cfg.stabilize, cfg.exponent, cfg.floor)
    if m == "newton":
        return newton_scrub(spec, w, split.retain, cfg.lam, cfg.sigma_h, seed, cfg.exponent, cfg.floor)
    if m == "fisher":
        return fisher_scrub(spec, w, split.retain, cfg.lam, cfg.sigma_h, cfg.exponent, seed, cfg.floor)
    if m == "variational":
        return variational_scrub(spec, w, split.retain, cfg.lam, cfg.variational, seed)
    return baseline_scrub(m, spec, w, split, cfg.baseline.replace(seed=seed))


def apply_reference_scrub(spec: Model, w, split: ForgetSplit, cfg: ScrubConfig, seed: int = 0) -> ScrubResult:
    """The matching procedure for weights that never saw the forget set.

    Noise-only scrubs and the Newton step only look at the retained data, so
    the same map is applied. The time-dependent robust scrub would correct
    for a forget set the reference never saw; its counterpart is plain
    Hessian-shaped noise.
    """
    m = cfg.method
    if m == "robust":
        return noise_only_scrub(spec, w, split.retain, cfg.lam, cfg.sigma_h, seed, cfg.exponent, cfg.floor)
    if m in NOISY_METHODS:
        return apply_scrub(spec, w, split, cfg, seed)
    raise NoiselessMethod(f"{m} adds no noise; the information bound is undefined")
