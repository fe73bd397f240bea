"""Small differentiable models with exact first and second-order objects.

All losses are *summed* over samples so that the loss on a dataset splits
exactly into the losses of any partition of it. The weight-decay term
``weight_decay * ||w||^2 / 2`` is added once per call when ``decay=True``;
callers that evaluate a forget/retain decomposition pass ``decay=False`` for
the forget part so the penalty is attributed to the retained data only.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from numpy.typing import NDArray

from .data import Dataset
from .errors import DimensionMismatch, InvalidSpec, NonFinite, ParseError, UnsupportedModel


def log_softmax(z: NDArray) -> NDArray:
    z = np.asarray(z, dtype=float)
    m = np.max(z, axis=-1, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    return z - m - np.log(np.sum(np.exp(z - m), axis=-1, keepdims=True))


def softmax(z: NDArray) -> NDArray:
    return np.exp(log_softmax(z))


def entropy_from_logits(z: NDArray) -> NDArray:
    logp = log_softmax(z)
    p = np.exp(logp)
    # masked classes have p == 0 and logp == -inf; their contribution is 0
    terms = np.where(p > 0, p * np.where(np.isfinite(logp), logp, 0.0), 0.0)
    return -np.sum(terms, axis=-1)


class Model:
    """Common interface. Subclasses define the parameter layout."""

    weight_decay: float = 0.0
    K: int = 0

    @property
    def n_params(self) -> int:
        raise NotImplementedError

    @property
    def model_id(self) -> str:
        raise NotImplementedError

    def check_w(self, w) -> NDArray:
        w = np.asarray(w, dtype=float)
        if w.shape != (self.n_params,):
            raise DimensionMismatch(f"{self.model_id} expects {self.n_params} weights, got shape {w.shape}")
        return w

    def _decay_loss(self, w, decay):
        return 0.5 * self.weight_decay * float(w @ w) if decay else 0.0

    def _decay_grad(self, w, decay):
        return self.weight_decay * w if decay else np.zeros_like(w)


@dataclass(frozen=True, eq=False)
class QuadraticModel(Model):
    """``L(w) = 1/2 (w - w*)^T A (w - w*)``; the data argument is ignored."""

    A: NDArray
    w_star: NDArray
    weight_decay: float = 0.0

    def __post_init__(self):
        A = np.asarray(self.A, dtype=float)
        w_star = np.asarray(self.w_star, dtype=float)
        if A.shape != (w_star.size, w_star.size):
            raise DimensionMismatch(f"A has shape {A.shape}, w* has length {w_star.size}")
        if not np.allclose(A, A.T, atol=1e-12):
            raise InvalidSpec("A must be symmetric")
        if np.linalg.eigvalsh(A)[0] < -1e-10 * max(1.0, np.abs(A).max()):
            raise InvalidSpec("A must be positive semidefinite")
        if self.weight_decay < 0:
            raise InvalidSpec("weight_decay must be >= 0")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "w_star", w_star)

    @property
    def n_params(self) -> int:
        return self.w_star.size

    @property
    def model_id(self) -> str:
        return f"quadratic:p={self.n_params}"

    def loss(self, w, ds=None, decay=True) -> float:
        w = self.check_w(w)
        r = w - self.w_star
        return 0.5 * float(r @ self.A @ r) + self._decay_loss(w, decay)

    def grad(self, w, ds=None, decay=True) -> NDArray:
        w = self.check_w(w)
        return self.A @ (w - self.w_star) + self._decay_grad(w, decay)

    def hessian(self, w, ds=None, decay=True) -> NDArray:
        self.check_w(w)
        H = self.A.copy()
        if decay:
            H += self.weight_decay * np.eye(self.n_params)
        return H


class Classifier(Model):
    """Softmax classifier; subclasses implement the forward/backward pass."""

    def _forward(self, w: NDArray, X: NDArray):
        """Return ``(logits, cache)``."""
        raise NotImplementedError

    def _backward(self, w: NDArray, cache, G: NDArray) -> NDArray:
        """Per-sample gradients (N, p) given d loss / d logits ``G`` (N, K)."""
        raise NotImplementedError

    def _check_data(self, ds: Dataset):
        if ds.d != self.d:
            raise DimensionMismatch(f"model expects {self.d} features, data has {ds.d}")
        if ds.K > self.K:
            raise DimensionMismatch(f"model has {self.K} classes, data declares {ds.K}")

    def logits(self, w, X) -> NDArray:
        w = self.check_w(w)
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if X.shape[1] != self.d:
            raise DimensionMismatch(f"model expects {self.d} features, got {X.shape[1]}")
        return self._forward(w, X)[0]

    def per_sample_loss(self, w, ds: Dataset) -> NDArray:
        self._check_data(ds)
        return self._losses_xy(self.check_w(w), ds.features, ds.labels)

    def per_sample_grads(self, w, ds: Dataset) -> NDArray:
        self._check_data(ds)
        return self._grads_xy(self.check_w(w), ds.features, ds.labels)

    # unchecked array versions used inside training loops
    def _losses_xy(self, w, X, y) -> NDArray:
        z = self._forward(w, X)[0]
        return -log_softmax(z)[np.arange(len(y)), y]

    def _grads_xy(self, w, X, y) -> NDArray:
        z, cache = self._forward(w, X)
        G = softmax(z)
        G[np.arange(len(y)), y] -= 1.0
        return self._backward(w, cache, G)

    def loss(self, w, ds: Dataset, decay=True) -> float:
        w = self.check_w(w)
        self._check_data(ds)
        return float(np.sum(self.per_sample_loss(w, ds))) + self._decay_loss(w, decay)

    def grad(self, w, ds: Dataset, decay=True) -> NDArray:
        w = self.check_w(w)
        return self.per_sample_grads(w, ds).sum(axis=0) + self._decay_grad(w, decay)

    def fim(self, w, ds: Dataset, form: str = "diagonal") -> NDArray:
        """Fisher information summed over samples, expectation over y exact."""
        w = self.check_w(w)
        self._check_data(ds)
        z, cache = self._forward(w, ds.features)
        P = softmax(z)
        p = self.n_params
        out = np.zeros(p) if form == "diagonal" else np.zeros((p, p))
        for y in range(self.K):
            G = P.copy()
            G[:, y] -= 1.0  # grad of -log p(y|x) w.r.t. logits
            J = self._backward(w, cache, G)
            weights = P[:, y]
            if form == "diagonal":
                out += weights @ (J * J)
            else:
                out += (J * weights[:, None]).T @ J
        if form != "diagonal":
            out = 0.5 * (out + out.T)
        return out

    def entropy(self, w, X, masked: Sequence[int] = ()) -> NDArray:
        return entropy_from_logits(mask_logits(self.logits(w, X), masked))

    def predict(self, w, X, masked: Sequence[int] = ()) -> NDArray:
        return np.argmax(mask_logits(self.logits(w, X), masked), axis=1)

    def error(self, w, ds: Dataset, masked: Sequence[int] = ()) -> float:
        """0-1 error in percent."""
        return 100.0 * float(np.mean(self.predict(w, ds.features, masked) != ds.labels))


def mask_logits(z: NDArray, masked: Sequence[int]) -> NDArray:
    if len(masked) == 0:
        return z
    z = np.array(z, dtype=float)
    z[:, list(masked)] = -np.inf
    return z


@dataclass(frozen=True, eq=False)
class LogisticModel(Classifier):
    """Linear softmax classifier.

    With ``K == 2`` the model is the usual sigmoid parametrisation: a single
    weight vector whose logit is attached to class 1 while class 0 has logit 0.
    Otherwise weights form a ``K x (d + bias)`` matrix stored row-major.
    """

    d: int
    K: int
    bias: bool = True
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.d < 1 or self.K < 2:
            raise InvalidSpec("logistic model needs d >= 1 and K >= 2")
        if self.weight_decay < 0:
            raise InvalidSpec("weight_decay must be >= 0")

    @property
    def _din(self) -> int:
        return self.d + int(self.bias)

    @property
    def binary(self) -> bool:
        return self.K == 2

    @property
    def n_params(self) -> int:
        return self._din if self.binary else self.K * self._din

    @property
    def model_id(self) -> str:
        return f"logistic:d={self.d}:K={self.K}:bias={int(self.bias)}"

    def _augment(self, X):
        return np.hstack([X, np.ones((X.shape[0], 1))]) if self.bias else X

    def _forward(self, w, X):
        Xa = self._augment(X)
        if self.binary:
            s = Xa @ w
            return np.column_stack([np.zeros_like(s), s]), Xa
        return Xa @ w.reshape(self.K, self._din).T, Xa

    def _backward(self, w, Xa, G):
        if self.binary:
            return G[:, 1:2] * Xa
        return (G[:, :, None] * Xa[:, None, :]).reshape(G.shape[0], -1)

    def hessian(self, w, ds: Dataset, decay=True) -> NDArray:
        w = self.check_w(w)
        self._check_data(ds)
        z, Xa = self._forward(w, ds.features)
        P = softmax(z)
        if self.binary:
            q = P[:, 1]
            H = (Xa * (q * (1 - q))[:, None]).T @ Xa
        else:
            # sum_i (diag(p_i) - p_i p_i^T) kron x_i x_i^T
            C = np.einsum("nk,kl->nkl", P, np.eye(self.K)) - np.einsum("nk,nl->nkl", P, P)
            H = np.einsum("nkl,na,nb->kalb", C, Xa, Xa).reshape(self.n_params, self.n_params)
        H = 0.5 * (H + H.T)
        if decay:
            H += self.weight_decay * np.eye(self.n_params)
        return H


@dataclass(frozen=True, eq=False)
class MLPModel(Classifier):
    """Fully connected tanh network ending in a linear softmax layer.

    Parameters are packed layer by layer as ``W`` (out x in, row-major)
    followed by ``b``.
    """

    d: int
    hidden: tuple[int, ...]
    K: int
    weight_decay: float = 0.0

    def __post_init__(self):
        hidden = tuple(int(h) for h in (self.hidden if np.iterable(self.hidden) else (self.hidden,)))
        if self.d < 1 or self.K < 2 or not hidden or min(hidden) < 1:
            raise InvalidSpec("MLP needs d >= 1, K >= 2 and hidden widths >= 1")
        if self.weight_decay < 0:
            raise InvalidSpec("weight_decay must be >= 0")
        object.__setattr__(self, "hidden", hidden)

    @property
    def _shapes(self) -> list[tuple[int, int]]:
        sizes = (self.d, *self.hidden, self.K)
        return [(sizes[i + 1], sizes[i]) for i in range(len(sizes) - 1)]

    @property
    def n_params(self) -> int:
        return sum(o * i + o for o, i in self._shapes)

    @property
    def model_id(self) -> str:
        return f"mlp:d={self.d}:hidden={'x'.join(map(str, self.hidden))}:K={self.K}"

    def _unpack(self, w):
        layers, pos = [], 0
        for o, i in self._shapes:
            W = w[pos : pos + o * i].reshape(o, i)
            pos += o * i
            b = w[pos : pos + o]
            pos += o
            layers.append((W, b))
        return layers

    def _forward(self, w, X):
        acts = [X]
        layers = self._unpack(w)
        h = X
        for W, b in layers[:-1]:
            h = np.tanh(h @ W.T + b)
            acts.append(h)
        W, b = layers[-1]
        return h @ W.T + b, (layers, acts)

    def _backward(self, w, cache, G):
        layers, acts = cache
        n = G.shape[0]
        parts = []
        delta = G
        for li in range(len(layers) - 1, -1, -1):
            W, _ = layers[li]
            a_in = acts[li]
            parts.append((delta, (delta[:, :, None] * a_in[:, None, :]).reshape(n, -1)))
            if li > 0:
                delta = (delta @ W) * (1.0 - a_in**2)
        out = []
        for db, dW in reversed(parts):
            out.extend([dW, db])
        return np.hstack(out)

    def hessian(self, w, ds=None, decay=True):
        raise UnsupportedModel("exact Hessian is only available for quadratic and logistic models")


def loss(spec: Model, w, ds=None, decay: bool = True) -> float:
    return spec.loss(w, ds, decay=decay)


def grad(spec: Model, w, ds=None, decay: bool = True) -> NDArray:
    return spec.grad(w, ds, decay=decay)


def hessian(spec: Model, w, ds=None, decay: bool = True) -> NDArray:
    return spec.hessian(w, ds, decay=decay)


@dataclass(frozen=True)
class FisherEstimate:
    form: str  # "diagonal" | "full"
    values: NDArray
    sample_count: int
    at_weights: NDArray


def fim(spec: Model, w, ds: Dataset, form: str = "diagonal") -> FisherEstimate:
    if form not in ("diagonal", "full"):
        raise ValueError(f"form must be 'diagonal' or 'full', got {form!r}")
    if not isinstance(spec, Classifier):
        raise UnsupportedModel("the Fisher matrix needs a classification model")
    values = spec.fim(w, ds, form)
    return FisherEstimate(form, values, ds.n, np.array(w, dtype=float))


def predict_logits(spec: Classifier, w, x) -> NDArray:
    z = spec.logits(w, x)
    return z[0] if np.ndim(x) == 1 else z


def output_entropy(spec: Classifier, w, x, masked: Sequence[int] = ()) -> NDArray | float:
    h = spec.entropy(w, x, masked)
    return float(h[0]) if np.ndim(x) == 1 else h


def split_losses(spec: Model, w, split) -> tuple[float, float]:
    """``(L_forget, L_retain)`` with weight decay attributed to the retain part."""
    return spec.loss(w, split.forget, decay=False), spec.loss(w, split.retain, decay=True)


# ---- model (de)serialisation -------------------------------------------------


def model_to_dict(spec: Model) -> dict:
    if isinstance(spec, QuadraticModel):
        return {"kind": "quadratic", "A": spec.A.tolist(), "w_star": spec.w_star.tolist(),
                "weight_decay": spec.weight_decay}
    if isinstance(spec, LogisticModel):
        return {"kind": "logistic", "d": spec.d, "K": spec.K, "bias": spec.bias,
                "weight_decay": spec.weight_decay}
    if isinstance(spec, MLPModel):
        return {"kind": "mlp", "d": spec.d, "hidden": list(spec.hidden), "K": spec.K,
                "weight_decay": spec.weight_decay}
    raise UnsupportedModel(f"cannot serialise {type(spec).__name__}")


def model_from_dict(d: dict) -> Model:
    kind = d.get("kind")
    wd = float(d.get("weight_decay", 0.0))
    if kind == "quadratic":
        return QuadraticModel(np.array(d["A"]), np.array(d["w_star"]), wd)
    if kind == "logistic":
        return LogisticModel(int(d["d"]), int(d["K"]), bool(d.get("bias", True)), wd)
    if kind == "mlp":
        return MLPModel(int(d["d"]), tuple(d["hidden"]), int(d["K"]), wd)
    raise InvalidSpec(f"unknown model kind {kind!r}")


_MAGIC = b"SCRUBW01"


@dataclass(frozen=True, eq=False)
class WeightVector:
    values: NDArray
    model_id: str

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim != 1:
            raise DimensionMismatch("weights must be a flat vector")
        if not np.all(np.isfinite(v)):
            raise NonFinite("weights contain NaN or Inf")
        object.__setattr__(self, "values", v)

    def to_bytes(self) -> bytes:
        mid = self.model_id.encode("utf-8")
        header = _MAGIC + struct.pack("<I", len(mid)) + mid + struct.pack("<Q", self.values.size)
        return header + self.values.astype("<f8").tobytes()

    @classmethod
    def from_bytes(cls, raw: bytes) -> "WeightVector":
        if raw[:8] != _MAGIC:
            raise ParseError("not a weight checkpoint (bad magic)")
        (n_id,) = struct.unpack_from("<I", raw, 8)
        mid = raw[12 : 12 + n_id].decode("utf-8")
        (p,) = struct.unpack_from("<Q", raw, 12 + n_id)
        body = raw[20 + n_id :]
        if len(body) != 8 * p:
            raise ParseError(f"checkpoint declares {p} weights but holds {len(body) // 8}")
        return cls(np.frombuffer(body, dtype="<f8").astype(float), mid)


def save_weights(path, w, model_id: str) -> None:
    Path(path).write_bytes(WeightVector(w, model_id).to_bytes())


def load_weights(path) -> WeightVector:
    return WeightVector.from_bytes(Path(path).read_bytes())
