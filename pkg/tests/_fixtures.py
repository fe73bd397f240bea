"""Problem generators and numerical oracles shared by the tests."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import integrate, stats

from scrubkit.data import ClusterSpec, Dataset, gen_clusters
from scrubkit.models import QuadraticModel
from scrubkit.scrub import QuadraticSurrogate
from scrubkit.training import gradient_flow


def random_orthogonal(rng, p):
    Q, R = np.linalg.qr(rng.standard_normal((p, p)))
    return Q * np.sign(np.diag(R))


def random_spd(rng, p, lo=0.5, hi=1.5):
    Q = random_orthogonal(rng, p)
    M = (Q * rng.uniform(lo, hi, p)) @ Q.T
    return 0.5 * (M + M.T)


def random_sym(rng, p, scale=1.0):
    M = scale * rng.standard_normal((p, p))
    return 0.5 * (M + M.T)


@dataclass
class QuadraticPair:
    """``L_D = L_r + L_f`` with ``L_r = 1/2 (w - r)^T B (w - r)`` and
    ``L_f = 1/2 (w - f)^T H_f (w - f)``."""

    B: np.ndarray
    H_f: np.ndarray
    r: np.ndarray
    f: np.ndarray

    @property
    def A(self):
        return self.B + self.H_f

    @property
    def full(self) -> QuadraticModel:
        w_star = np.linalg.solve(self.A, self.B @ self.r + self.H_f @ self.f)
        return QuadraticModel(self.A, w_star)

    @property
    def retain(self) -> QuadraticModel:
        return QuadraticModel(self.B, self.r)

    def grad_full(self, w):
        return self.B @ (w - self.r) + self.H_f @ (w - self.f)

    def grad_retain(self, w):
        return self.B @ (w - self.r)

    def surrogate(self, w) -> QuadraticSurrogate:
        A = self.A
        return QuadraticSurrogate(
            A, self.B, np.linalg.solve(A, self.grad_full(w)), np.linalg.solve(self.B, self.grad_retain(w)), w
        )

    def flow_full(self, w0, t):
        return gradient_flow(self.full, w0, t)

    def flow_retain(self, w0, t):
        return gradient_flow(self.retain, w0, t)


def quadratic_pair(rng, p) -> QuadraticPair:
    """Well-conditioned pair: eig(B) in [0.5, 1.5], eig(H_f) in [0, 0.5]."""
    B = random_spd(rng, p, 0.5, 1.5)
    H_f = random_spd(rng, p, 0.0, 0.5)
    return QuadraticPair(B, H_f, rng.standard_normal(p), rng.standard_normal(p))


def fd_grad(f, w, h=1e-5):
    g = np.zeros_like(w)
    for i in range(w.size):
        e = np.zeros_like(w)
        e[i] = h
        g[i] = (f(w + e) - f(w - e)) / (2 * h)
    return g


def fd_jacobian(g, w, h=1e-5):
    cols = []
    for i in range(w.size):
        e = np.zeros_like(w)
        e[i] = h
        cols.append((g(w + e) - g(w - e)) / (2 * h))
    return np.array(cols).T


def max_rel_err(approx, exact, atol=1e-8):
    approx, exact = np.asarray(approx), np.asarray(exact)
    return float(np.max(np.abs(approx - exact) / np.maximum(np.abs(exact), atol + np.abs(exact).max() * 1e-3)))


def gauss_kl_quadrature(m1, v1, m2, v2):
    """KL(N(m1, v1) || N(m2, v2)) by adaptive quadrature of p log(p/q)."""
    p, q = stats.norm(m1, np.sqrt(v1)), stats.norm(m2, np.sqrt(v2))
    s = np.sqrt(v1)
    value, _ = integrate.quad(
        lambda x: p.pdf(x) * (p.logpdf(x) - q.logpdf(x)), m1 - 20 * s, m1 + 20 * s,
        epsabs=1e-12, epsrel=1e-12, limit=500,
    )
    return value


def six_points() -> Dataset:
    spec = [ClusterSpec((0.0, 0.0), 0.0, 3, 0), ClusterSpec((5.0, 5.0), 0.0, 3, 1)]
    return gen_clusters(spec, seed=0, name="six")


def random_classification(rng, n, d, K) -> Dataset:
    X = rng.standard_normal((n, d))
    y = rng.integers(0, K, n)
    y[:K] = np.arange(K)
    return Dataset(X, y, K, "random")
