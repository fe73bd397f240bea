"""Synthetic datasets, CSV I/O and forget/retain splits."""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence, Union

import numpy as np
from numpy.typing import NDArray

from .errors import (
    EmptyForget,
    EmptyRetain,
    InvalidSpec,
    LabelOutOfRange,
    NoSuchClass,
    NonFinite,
    ParseError,
)


def _frozen(a: NDArray) -> NDArray:
    a = np.array(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Dataset:
    features: NDArray
    labels: NDArray
    K: int
    name: str = "dataset"

    def __post_init__(self):
        X = np.asarray(self.features, dtype=float)
        y = np.asarray(self.labels)
        if X.ndim != 2:
            raise InvalidSpec(f"features must be N x d, got shape {X.shape}")
        if y.shape != (X.shape[0],):
            raise InvalidSpec(f"{X.shape[0]} feature rows but labels have shape {y.shape}")
        if X.shape[0] < 1:
            raise InvalidSpec("dataset is empty")
        if not np.all(np.isfinite(X)):
            raise NonFinite("features contain NaN or Inf")
        if y.dtype.kind not in "iu":
            if not np.all(np.mod(y, 1) == 0):
                raise InvalidSpec("labels must be integers")
        y = y.astype(np.int64)
        if np.any(y < 0) or np.any(y >= self.K):
            bad = int(y[(y < 0) | (y >= self.K)][0])
            raise LabelOutOfRange(f"label {bad} outside [0, {self.K})")
        object.__setattr__(self, "features", _frozen(X))
        object.__setattr__(self, "labels", _frozen(y))

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def d(self) -> int:
        return self.features.shape[1]

    def subset(self, indices: Sequence[int], name: str | None = None) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.features[idx], self.labels[idx], self.K, name or self.name)

    def with_labels(self, labels: NDArray) -> "Dataset":
        return Dataset(self.features, labels, self.K, self.name)

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.K == other.K
            and np.array_equal(self.features, other.features)
            and np.array_equal(self.labels, other.labels)
        )

    __hash__ = None


@dataclass(frozen=True)
class ClusterSpec:
    mean: tuple[float, ...]
    std: float
    count: int
    label: int

    def __post_init__(self):
        object.__setattr__(self, "mean", tuple(float(m) for m in self.mean))
        # zero spread is allowed: it pins every sample to the mean
        if not self.std >= 0:
            raise InvalidSpec(f"cluster std must be >= 0, got {self.std}")
        if self.count < 1:
            raise InvalidSpec(f"cluster count must be >= 1, got {self.count}")
        if self.label < 0:
            raise InvalidSpec(f"cluster label must be >= 0, got {self.label}")

    @classmethod
    def from_dict(cls, d: dict) -> "ClusterSpec":
        return cls(tuple(d["mean"]), float(d["std"]), int(d["count"]), int(d["label"]))

    def to_dict(self) -> dict:
        return {"mean": list(self.mean), "std": self.std, "count": self.count, "label": self.label}


# Two clusters for class 0, one for class 1. The forget cohort in the canned
# logistic experiment is the (0, 2) cluster.
DEFAULT_CLUSTERS = (
    ClusterSpec((-2.0, 0.0), 0.4, 100, 0),
    ClusterSpec((0.0, 2.0), 0.4, 100, 0),
    ClusterSpec((2.0, 0.0), 0.4, 100, 1),
)


def gen_clusters(spec: Sequence[ClusterSpec], seed: int, name: str = "clusters") -> Dataset:
    """Draw isotropic Gaussian clusters, concatenated in ``spec`` order."""
    spec = list(spec)
    if not spec:
        raise InvalidSpec("no clusters given")
    dims = {len(c.mean) for c in spec}
    if len(dims) != 1:
        raise InvalidSpec(f"clusters disagree on dimension: {sorted(dims)}")
    labels = {c.label for c in spec}
    if len(labels) < 2:
        raise InvalidSpec("need at least two distinct labels")
    rng = np.random.default_rng(seed)
    X, y = [], []
    for c in spec:
        X.append(np.asarray(c.mean) + c.std * rng.standard_normal((c.count, len(c.mean))))
        y.append(np.full(c.count, c.label, dtype=np.int64))
    return Dataset(np.vstack(X), np.concatenate(y), max(labels) + 1, name)


@dataclass(frozen=True)
class WholeClass:
    k: int


@dataclass(frozen=True)
class CountFromClass:
    k: int
    m: int


@dataclass(frozen=True)
class ExplicitIndices:
    indices: tuple[int, ...]


SplitRule = Union[WholeClass, CountFromClass, ExplicitIndices]


def rule_to_dict(rule: SplitRule) -> dict:
    if isinstance(rule, WholeClass):
        return {"kind": "whole_class", "k": rule.k}
    if isinstance(rule, CountFromClass):
        return {"kind": "count_from_class", "k": rule.k, "m": rule.m}
    return {"kind": "explicit", "indices": list(rule.indices)}


def rule_from_dict(d: dict) -> SplitRule:
    kind = d.get("kind")
    if kind == "whole_class":
        return WholeClass(int(d["k"]))
    if kind == "count_from_class":
        return CountFromClass(int(d["k"]), int(d["m"]))
    if kind == "explicit":
        return ExplicitIndices(tuple(int(i) for i in d["indices"]))
    raise InvalidSpec(f"unknown split rule kind {kind!r}")


@dataclass(frozen=True, eq=False)
class ForgetSplit:
    dataset: Dataset
    forget_indices: NDArray
    rule: SplitRule

    @property
    def retain_indices(self) -> NDArray:
        mask = np.ones(self.dataset.n, dtype=bool)
        mask[self.forget_indices] = False
        return np.flatnonzero(mask)

    @property
    def forget_mask(self) -> NDArray:
        mask = np.zeros(self.dataset.n, dtype=bool)
        mask[self.forget_indices] = True
        return mask

    @property
    def forget(self) -> Dataset:
        return self.dataset.subset(self.forget_indices, self.dataset.name + ":forget")

    @property
    def retain(self) -> Dataset:
        return self.dataset.subset(self.retain_indices, self.dataset.name + ":retain")


def make_split(ds: Dataset, rule: SplitRule) -> ForgetSplit:
    if isinstance(rule, WholeClass):
        if not 0 <= rule.k < ds.K:
            raise NoSuchClass(f"class {rule.k} not in [0, {ds.K})")
        idx = np.flatnonzero(ds.labels == rule.k)
    elif isinstance(rule, CountFromClass):
        if not 0 <= rule.k < ds.K:
            raise NoSuchClass(f"class {rule.k} not in [0, {ds.K})")
        if rule.m >= ds.n:
            raise EmptyRetain(f"cannot forget {rule.m} of {ds.n} samples")
        members = np.flatnonzero(ds.labels == rule.k)
        if rule.m > members.size:
            raise NoSuchClass(f"class {rule.k} has only {members.size} samples, asked for {rule.m}")
        idx = members[: rule.m]
    elif isinstance(rule, ExplicitIndices):
        idx = np.unique(np.asarray(rule.indices, dtype=np.int64))
        if idx.size and (idx[0] < 0 or idx[-1] >= ds.n):
            raise InvalidSpec(f"forget indices must lie in [0, {ds.n})")
    else:
        raise InvalidSpec(f"unknown split rule {rule!r}")
    if idx.size == 0:
        raise EmptyForget("split selects no samples")
    if idx.size >= ds.n:
        raise EmptyRetain("split selects every sample")
    return ForgetSplit(ds, _frozen(np.sort(idx)), rule)


_HEADER = re.compile(r"^#\s*d=(\d+)\s+K=(\d+)(?:\s+name=(\S+))?\s*$")


def save_csv(ds: Dataset, path, comments: Sequence[str] = ()) -> None:
    """Write ``ds``; each entry of ``comments`` becomes a ``#`` line after the header."""
    lines = [f"# d={ds.d} K={ds.K} name={ds.name}"]
    lines += [f"# {c}" for c in comments]
    for x, y in zip(ds.features, ds.labels):
        lines.append(",".join(repr(float(v)) for v in x) + f",{int(y)}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_csv(path) -> Dataset:
    text = Path(path).read_text(encoding="utf-8").splitlines()
    if not text:
        raise ParseError("empty file: missing header", line=1)
    m = _HEADER.match(text[0].strip())
    if not m:
        raise ParseError("expected header '# d=<d> K=<K>'", line=1)
    d, K = int(m.group(1)), int(m.group(2))
    name = m.group(3) or Path(path).stem
    X, y = [], []
    for lineno, raw in enumerate(text[1:], start=2):
        if not raw.strip() or raw.startswith("#"):
            continue
        parts = raw.split(",")
        if len(parts) != d + 1:
            raise ParseError(f"expected {d + 1} fields, got {len(parts)}", line=lineno)
        try:
            feats = [float(v) for v in parts[:d]]
            label = int(parts[d])
        except ValueError as exc:
            raise ParseError(str(exc), line=lineno) from None
        if not 0 <= label < K:
            raise LabelOutOfRange(f"line {lineno}: label {label} outside [0, {K})")
        X.append(feats)
        y.append(label)
    if not X:
        raise ParseError("empty: header without samples", line=len(text))
    return Dataset(np.array(X, dtype=float), np.array(y, dtype=np.int64), K, name)
