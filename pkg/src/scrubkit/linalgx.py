"""Dense symmetric-matrix kernels.

Everything here works on small dense ``float64`` matrices through a single
eigendecomposition; no iterative or sparse methods are involved.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .errors import (
    ConvergenceFailure,
    DimensionMismatch,
    InvalidFloor,
    NonFinite,
    Overflow,
    SingularCovariance,
)

DEFAULT_FLOOR = 1e-8
MAX_PROMOTE_DIM = 512
_EXP_LIMIT = 700.0


class EigenPair(NamedTuple):
    values: NDArray  # ascending
    vectors: NDArray  # columns are eigenvectors


def as_sym(M: ArrayLike) -> NDArray:
    """Validate ``M`` as a finite symmetric matrix and return it as float64."""
    M = np.asarray(M, dtype=float)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise DimensionMismatch(f"expected a square matrix, got shape {M.shape}")
    if not np.all(np.isfinite(M)):
        raise NonFinite("matrix contains NaN or Inf")
    tol = 1e-12 * np.maximum(1.0, np.abs(M))
    if np.any(np.abs(M - M.T) > tol):
        raise DimensionMismatch("matrix is not symmetric")
    return M


def _rebuild(vectors: NDArray, values: NDArray) -> NDArray:
    out = (vectors * values) @ vectors.T
    return 0.5 * (out + out.T)


def sym_eig(M: ArrayLike) -> EigenPair:
    M = as_sym(M)
    try:
        values, vectors = np.linalg.eigh(M)
    except np.linalg.LinAlgError as exc:
        raise ConvergenceFailure(str(exc)) from exc
    return EigenPair(values, vectors)


def mat_exp(M: ArrayLike, t: float = 1.0) -> NDArray:
    """Return ``exp(t * M)`` for symmetric ``M``."""
    values, vectors = sym_eig(M)
    scaled = values * t
    if np.any(scaled > _EXP_LIMIT):
        raise Overflow(f"eigenvalue*t = {scaled.max():.4g} exceeds {_EXP_LIMIT}")
    return _rebuild(vectors, np.exp(scaled))


def clamp_eigs(M: ArrayLike, cap: float) -> NDArray:
    """Replace every eigenvalue above ``cap`` by ``cap``, keeping eigenvectors."""
    values, vectors = sym_eig(M)
    if np.all(values <= cap):
        return np.array(M, dtype=float)
    return _rebuild(vectors, np.minimum(values, cap))


def inv_frac_power(M: ArrayLike, exponent: float, floor: float = DEFAULT_FLOOR) -> NDArray:
    """Raise the floored spectrum of ``M`` to a negative fractional ``exponent``.

    Eigenvalues are first replaced by ``max(lambda_i, floor)``, which keeps the
    result finite for rank-deficient Hessian and Fisher estimates.
    """
    if not floor > 0:
        raise InvalidFloor(f"floor must be > 0, got {floor}")
    values, vectors = sym_eig(M)
    return _rebuild(vectors, np.maximum(values, floor) ** exponent)


def diag_frac_power(d: ArrayLike, exponent: float, floor: float = DEFAULT_FLOOR) -> NDArray:
    """Elementwise counterpart of :func:`inv_frac_power` for diagonal matrices."""
    if not floor > 0:
        raise InvalidFloor(f"floor must be > 0, got {floor}")
    return np.maximum(np.asarray(d, dtype=float), floor) ** exponent


@dataclass(frozen=True)
class GaussianParams:
    """A Gaussian with diagonal (1-D ``cov``) or full (2-D ``cov``) covariance."""

    mean: NDArray
    cov: NDArray

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        cov = np.asarray(self.cov, dtype=float)
        if cov.ndim == 0:
            cov = np.full(mean.shape, float(cov))
        p = mean.shape[0]
        if cov.shape not in ((p,), (p, p)):
            raise DimensionMismatch(f"mean has length {p} but covariance has shape {cov.shape}")
        if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(cov))):
            raise NonFinite("Gaussian parameters contain NaN or Inf")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    @property
    def is_diagonal(self) -> bool:
        return self.cov.ndim == 1

    def full_cov(self) -> NDArray:
        return np.diag(self.cov) if self.is_diagonal else self.cov


def _diag_kl(mp, vp, mq, vq) -> float:
    if np.any(vp <= 0) or np.any(vq <= 0):
        raise SingularCovariance("diagonal covariance has non-positive entries")
    ratio = vp / vq
    return 0.5 * float(np.sum(ratio + (mq - mp) ** 2 / vq - 1.0 - np.log(ratio)))


def _chol(S: NDArray) -> NDArray:
    try:
        return np.linalg.cholesky(as_sym(S))
    except np.linalg.LinAlgError as exc:
        raise SingularCovariance("covariance is not positive definite") from exc


def gaussian_kl(p: GaussianParams, q: GaussianParams) -> float:
    """KL(p || q) in nats.

    ``1/2 (tr(Sq^-1 Sp) + (mq - mp)^T Sq^-1 (mq - mp) - k + log|Sq|/|Sp|)``.
    """
    if p.dim != q.dim:
        raise DimensionMismatch(f"dimensions differ: {p.dim} vs {q.dim}")
    if np.array_equal(p.mean, q.mean) and np.array_equal(p.full_cov(), q.full_cov()):
        # identical inputs: exactly zero, but still reject singular covariances
        if p.is_diagonal:
            _diag_kl(p.mean, p.cov, q.mean, q.cov)
        else:
            _chol(p.cov)
        return 0.0
    if p.is_diagonal and q.is_diagonal:
        return max(_diag_kl(p.mean, p.cov, q.mean, q.cov), 0.0)
    if p.dim > MAX_PROMOTE_DIM and (p.is_diagonal or q.is_diagonal):
        raise DimensionMismatch(
            f"mixed diagonal/full KL only supported up to dim {MAX_PROMOTE_DIM}"
        )
    k = p.dim
    Lp = _chol(p.full_cov())
    Lq = _chol(q.full_cov())
    # Sq^-1 Sp via triangular solves: tr = ||Lq^-1 Lp||_F^2
    M = np.linalg.solve(Lq, Lp)
    z = np.linalg.solve(Lq, q.mean - p.mean)
    logdet_ratio = 2.0 * (np.sum(np.log(np.diag(Lq))) - np.sum(np.log(np.diag(Lp))))
    kl = 0.5 * (np.sum(M * M) + z @ z - k + logdet_ratio)
    return max(float(kl), 0.0)
