"""Seeded, deterministic training and training-path diagnostics."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np
from numpy.typing import NDArray

from . import linalgx
from .data import Dataset, ForgetSplit
from .errors import DimensionMismatch, Diverged, InvalidSpec, SingularA
from .models import Classifier, Model, QuadraticModel


@dataclass(frozen=True)
class TrainConfig:
    """SGD settings.

    ``learning_rate`` multiplies the batch-mean gradient, so one epoch over
    ``N`` samples moves the weights roughly like gradient flow on the summed
    loss for time ``learning_rate / batch_size``.
    """

    seed: int = 0
    learning_rate: float = 0.1
    batch_size: int = 10
    epochs: int = 10
    init: str = "uniform"  # "uniform" | "gaussian"
    init_scale: float = 1.0  # half-width for uniform, stddev for gaussian
    early_stop_epochs: Optional[int] = None

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise InvalidSpec("learning_rate must be > 0")
        if self.batch_size < 1 or self.epochs < 1:
            raise InvalidSpec("batch_size and epochs must be >= 1")
        if self.init not in ("uniform", "gaussian"):
            raise InvalidSpec(f"init must be 'uniform' or 'gaussian', got {self.init!r}")
        if not self.init_scale >= 0:
            raise InvalidSpec("init_scale must be >= 0")
        if self.early_stop_epochs is not None and self.early_stop_epochs < 1:
            raise InvalidSpec("early_stop_epochs must be >= 1")

    @property
    def epochs_to_run(self) -> int:
        if self.early_stop_epochs is None:
            return self.epochs
        return min(self.epochs, self.early_stop_epochs)

    @property
    def flow_time(self) -> float:
        """Gradient-flow time equivalent to the full run on the summed loss."""
        return self.epochs_to_run * self.learning_rate / self.batch_size

    def replace(self, **changes) -> "TrainConfig":
        return TrainConfig(**{**asdict(self), **changes})


@dataclass
class TrainTrace:
    final_weights: NDArray
    losses: list[float]
    epochs_run: int


def seed_stream(base_seed: int, run_index: int) -> int:
    """Independent, reproducible seed for the ``run_index``-th run."""
    return int(np.random.SeedSequence([base_seed, run_index]).generate_state(1)[0])


def init_weights(spec: Model, cfg: TrainConfig, rng: np.random.Generator) -> NDArray:
    if cfg.init == "uniform":
        return rng.uniform(-cfg.init_scale, cfg.init_scale, size=spec.n_params)
    return cfg.init_scale * rng.standard_normal(spec.n_params)


def _sgd(
    spec: Model,
    ds: Optional[Dataset],
    cfg: TrainConfig,
    w: NDArray,
    rng: np.random.Generator,
    include: Optional[NDArray] = None,
    flip: Optional[NDArray] = None,
    clamp: Optional[float] = None,
    on_epoch=None,
) -> TrainTrace:
    """Core loop shared by training, fine-tuning and the baselines.

    ``include`` masks samples out of the update without changing the
    permutation (retain-only training); ``flip`` marks samples whose gradient
    is negated, and whose loss is capped at ``clamp`` so their gradient
    vanishes once the cap is reached.
    """
    losses: list[float] = []
    lr_b = cfg.learning_rate / cfg.batch_size
    if ds is None:
        # data-free quadratic: one full-gradient step per epoch
        for epoch in range(cfg.epochs_to_run):
            w = w - cfg.learning_rate * spec.grad(w)
            value = spec.loss(w)
            if not np.isfinite(value) or not np.all(np.isfinite(w)):
                raise Diverged(f"loss became non-finite at epoch {epoch + 1}")
            losses.append(value)
            if on_epoch is not None and on_epoch(epoch + 1, w):
                break
        return TrainTrace(w, losses, len(losses))

    n = ds.n
    include = np.ones(n, dtype=bool) if include is None else include
    n_train = int(include.sum())
    train_ds = ds if n_train == n else ds.subset(np.flatnonzero(include))
    spec._check_data(ds)
    X, y = ds.features, ds.labels
    for epoch in range(cfg.epochs_to_run):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            batch = order[start : start + cfg.batch_size]
            batch = batch[include[batch]]
            if batch.size == 0:
                continue
            Xb, yb = X[batch], y[batch]
            G = spec._grads_xy(w, Xb, yb)
            if flip is not None and np.any(flip[batch]):
                sign = np.where(flip[batch], -1.0, 1.0)
                if clamp is not None:
                    capped = flip[batch] & (spec._losses_xy(w, Xb, yb) >= clamp)
                    sign[capped] = 0.0
                G = G * sign[:, None]
            g = G.sum(axis=0)
            if spec.weight_decay:
                g = g + (batch.size / n_train) * spec.weight_decay * w
            w = w - lr_b * g
        value = spec.loss(w, train_ds)
        if not np.isfinite(value) or not np.all(np.isfinite(w)):
            raise Diverged(f"loss became non-finite at epoch {epoch + 1}")
        losses.append(value)
        if on_epoch is not None and on_epoch(epoch + 1, w):
            break
    return TrainTrace(w, losses, len(losses))


def sgd_train(
    spec: Model,
    data: Dataset | ForgetSplit | None,
    cfg: TrainConfig,
    retain_only: bool = False,
    w0: Optional[NDArray] = None,
) -> TrainTrace:
    """Train from a seeded initialisation.

    Given a :class:`ForgetSplit` with ``retain_only=True`` the permutation is
    still drawn over all ``N`` indices and forgotten samples are skipped in
    place, so runs on the full and retained data share their initialisation
    and the relative order in which samples are visited.
    """
    rng = np.random.default_rng(cfg.seed)
    w = init_weights(spec, cfg, rng) if w0 is None else spec.check_w(np.array(w0, dtype=float))
    if isinstance(data, ForgetSplit):
        include = ~data.forget_mask if retain_only else None
        return _sgd(spec, data.dataset, cfg, w, rng, include=include)
    if retain_only:
        raise InvalidSpec("retain_only needs a ForgetSplit")
    return _sgd(spec, data, cfg, w, rng)


def gradient_flow(spec: QuadraticModel, w0, t: float, floor: Optional[float] = None) -> NDArray:
    """Exact gradient-flow point ``w0 - (I - e^{-Ht}) H^{-1} grad L(w0)``.

    ``H`` is the (constant) Hessian. Zero-curvature directions need ``floor``;
    without it a singular ``H`` raises :class:`SingularA`.
    """
    if not isinstance(spec, QuadraticModel):
        raise InvalidSpec("gradient_flow needs a quadratic model")
    w0 = spec.check_w(w0)
    if t == 0:
        return w0.copy()
    vals, V = linalgx.sym_eig(spec.hessian(w0))
    if floor is None:
        if vals[0] <= 0:
            raise SingularA("Hessian has a non-positive eigenvalue; pass a floor")
    else:
        vals = np.maximum(vals, floor)
    phi = -np.expm1(-vals * t) / vals
    return w0 - V @ (phi * (V.T @ spec.grad(w0)))


def default_relearn_threshold(n_forget: int, K: int) -> float:
    return 0.1 * n_forget * np.log(K)


def relearn_time(
    spec: Classifier,
    scrubbed_w,
    split: ForgetSplit,
    learning_rate: float = 0.01,
    max_epochs: int = 50,
    threshold: Optional[float] = None,
    batch_size: int = 10,
    seed: int = 0,
) -> Optional[int]:
    """First 1-based epoch of training on the full data after which the summed
    loss on the forget set is below ``threshold``; ``None`` if never reached."""
    if threshold is None:
        threshold = default_relearn_threshold(split.forget.n, split.dataset.K)
    if not threshold >= 0:
        raise InvalidSpec("threshold must be >= 0")
    forget = split.forget
    cfg = TrainConfig(seed=seed, learning_rate=learning_rate, batch_size=batch_size, epochs=max_epochs)
    hit: list[int] = []

    def check(epoch, w):
        if spec.loss(w, forget, decay=False) < threshold:
            hit.append(epoch)
            return True
        return False

    _sgd(spec, split.dataset, cfg, spec.check_w(np.array(scrubbed_w, dtype=float)),
         np.random.default_rng(seed), on_epoch=check)
    return hit[0] if hit else None


def loss_interpolation(
    spec: Model, w_a, w_b, ds: Optional[Dataset], grid: Sequence[float] | None = None
) -> list[tuple[float, float, float]]:
    """Loss and 0-1 error along ``(1 - t) w_a + t w_b``."""
    w_a = np.asarray(w_a, dtype=float)
    w_b = np.asarray(w_b, dtype=float)
    if w_a.shape != w_b.shape:
        raise DimensionMismatch(f"weight shapes differ: {w_a.shape} vs {w_b.shape}")
    spec.check_w(w_a)
    if grid is None:
        grid = np.linspace(-0.5, 2.5, 61)
    rows = []
    for t in grid:
        w = (1.0 - t) * w_a + t * w_b
        value = spec.loss(w, ds)
        err = spec.error(w, ds) if isinstance(spec, Classifier) else float("nan")
        rows.append((float(t), float(value), float(err)))
    return rows
