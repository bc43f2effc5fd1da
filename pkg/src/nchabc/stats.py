"""Numerical primitives shared by every other module.

Kernel weights, robust scaling, weighted quantiles, response transforms,
F-distribution tail probabilities and the seeded random-stream contract.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import special

from .errors import (
    DegenerateWeightsError,
    DomainError,
    EmptyDataError,
    InvalidBandwidthError,
    InvalidDfError,
    ShapeError,
)

# Relative slack when comparing cumulative weight against q * total, so that
# q = i/n with equal weights selects the i-th order statistic despite rounding.
_QUANTILE_RTOL = 1e-12

_MASK64 = (1 << 64) - 1


def _key_int(key) -> int:
    if isinstance(key, str):
        return zlib.crc32(key.encode("utf-8"))
    if isinstance(key, (bool, np.bool_)):
        return int(key)
    if isinstance(key, (int, np.integer)):
        return int(key) & _MASK64
    raise TypeError(f"stream key must be int or str, got {type(key).__name__}")


class Rng:
    """A reproducible random stream identified by ``(master_seed, stream_id)``.

    Streams are built on numpy's ``SeedSequence`` spawn keys, so distinct
    stream ids give statistically independent PCG64 generators and the same
    pair always reproduces the same draws. ``derive`` extends the key to get a
    child stream, which is how replicates, stages and workers get their own
    streams without sharing state.
    """

    __slots__ = ("master_seed", "key", "generator")

    def __init__(self, master_seed: int, stream_id=0):
        self.master_seed = _key_int(master_seed)
        if isinstance(stream_id, tuple):
            self.key = tuple(_key_int(k) for k in stream_id)
        else:
            self.key = (_key_int(stream_id),)
        seq = np.random.SeedSequence(self.master_seed, spawn_key=self.key)
        self.generator = np.random.Generator(np.random.PCG64(seq))

    @property
    def stream_id(self):
        return self.key[0] if len(self.key) == 1 else self.key

    def derive(self, *keys) -> "Rng":
        return Rng(self.master_seed, self.key + tuple(_key_int(k) for k in keys))

    def __repr__(self):
        return f"Rng(master_seed={self.master_seed}, key={self.key})"


def as_generator(rng) -> np.random.Generator:
    """Accept an ``Rng``, a numpy ``Generator`` or an int seed."""
    if isinstance(rng, Rng):
        return rng.generator
    if isinstance(rng, np.random.Generator):
        return rng
    if isinstance(rng, (int, np.integer)):
        return Rng(int(rng)).generator
    raise TypeError(f"cannot build a generator from {type(rng).__name__}")


def epanechnikov(t, delta: float):
    """Unnormalized Epanechnikov weight ``1 - (t/delta)**2`` on ``t < delta``.

    Works on scalars and arrays; returns the same kind it was given.
    """
    if not delta > 0:
        raise InvalidBandwidthError(f"bandwidth must be positive, got {delta!r}")
    t_arr = np.asarray(t, dtype=float)
    u = t_arr / delta
    w = np.where(u < 1.0, 1.0 - u * u, 0.0)
    if w.ndim == 0:
        return float(w)
    return w


def mad_scale(values) -> float:
    """Median absolute deviation from the median, without consistency constant."""
    x = np.asarray(values, dtype=float).ravel()
    if x.size == 0:
        raise EmptyDataError("median absolute deviation of an empty sample")
    return float(np.median(np.abs(x - np.median(x))))


def weighted_quantile(samples, weights, q):
    """Smallest sample ``x`` whose normalized cumulative weight reaches ``q``.

    ``q`` may be a scalar or a sequence; the return type follows it.
    Zero-weight samples are never returned unless they tie in value with a
    positively weighted one.
    """
    x = np.asarray(samples, dtype=float).ravel()
    w = np.asarray(weights, dtype=float).ravel()
    if x.shape != w.shape:
        raise ShapeError(f"samples ({x.size}) and weights ({w.size}) differ in length")
    if x.size == 0:
        raise EmptyDataError("weighted quantile of an empty sample")
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise DegenerateWeightsError("weights must be finite and nonnegative")
    total = w.sum()
    if not total > 0:
        raise DegenerateWeightsError("total weight is zero")
    order = np.argsort(x, kind="stable")
    xs = x[order]
    cw = np.cumsum(w[order])
    qs = np.atleast_1d(np.asarray(q, dtype=float))
    if np.any((qs < 0) | (qs > 1)):
        raise DomainError("quantile probabilities must lie in [0, 1]")
    target = qs * total * (1.0 - _QUANTILE_RTOL)
    idx = np.searchsorted(cw, target, side="left")
    # skip leading zero-weight samples when q is 0
    idx = np.maximum(idx, np.searchsorted(cw, 0.0, side="right"))
    idx = np.minimum(idx, xs.size - 1)
    out = xs[idx]
    if np.ndim(q) == 0:
        return float(out[0])
    return out


def equal_weight_quantile_index(n: int, q) -> np.ndarray:
    """Order-statistic index selected by ``weighted_quantile`` with equal weights."""
    qs = np.atleast_1d(np.asarray(q, dtype=float))
    target = qs * n * (1.0 - _QUANTILE_RTOL)
    idx = np.ceil(target).astype(int) - 1
    return np.clip(idx, 0, n - 1)


def weighted_mean_std(values, weights):
    x = np.asarray(values, dtype=float)
    w = np.asarray(weights, dtype=float)
    total = w.sum()
    if not total > 0:
        raise DegenerateWeightsError("total weight is zero")
    mean = (w[:, None] * x).sum(axis=0) / total if x.ndim == 2 else (w * x).sum() / total
    dev = x - mean
    var = (w[:, None] * dev * dev).sum(axis=0) / total if x.ndim == 2 else (w * dev * dev).sum() / total
    return mean, np.sqrt(var)


@dataclass(frozen=True)
class ResponseTransform:
    """Monotone reparametrization applied to a response before regression.

    ``kind`` is ``"identity"``, ``"log"`` (positive parameters) or ``"logit"``
    (parameters in the open interval ``(a, b)``).
    """

    kind: str = "identity"
    a: float | None = None
    b: float | None = None

    def __post_init__(self):
        if self.kind not in ("identity", "log", "logit"):
            raise DomainError(f"unknown transform kind {self.kind!r}")
        if self.kind == "logit":
            if self.a is None or self.b is None or not self.a < self.b:
                raise DomainError("logit transform needs bounds a < b")

    @classmethod
    def identity(cls):
        return cls("identity")

    @classmethod
    def log(cls):
        return cls("log")

    @classmethod
    def logit(cls, a: float, b: float):
        return cls("logit", float(a), float(b))

    def bounds(self) -> tuple[float, float]:
        if self.kind == "identity":
            return -np.inf, np.inf
        if self.kind == "log":
            return 0.0, np.inf
        return self.a, self.b

    def in_domain(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        lo, hi = self.bounds()
        if self.kind == "identity":
            return np.isfinite(x)
        return (x > lo) & (x < hi)

    def forward(self, x):
        arr = np.asarray(x, dtype=float)
        if not np.all(self.in_domain(arr)):
            raise DomainError(f"value outside the domain of the {self.kind} transform")
        if self.kind == "identity":
            out = arr.copy()
        elif self.kind == "log":
            out = np.log(arr)
        else:
            out = np.log(arr - self.a) - np.log(self.b - arr)
        return float(out) if out.ndim == 0 else out

    def inverse(self, y):
        arr = np.asarray(y, dtype=float)
        if self.kind == "identity":
            out = arr.copy()
        elif self.kind == "log":
            out = np.maximum(np.exp(arr), np.nextafter(0.0, 1.0))
        else:
            out = self.a + (self.b - self.a) * special.expit(arr)
            out = np.clip(out, np.nextafter(self.a, self.b), np.nextafter(self.b, self.a))
        return float(out) if out.ndim == 0 else out

    def clip_into(self, x, rel: float = 1e-12):
        """Pull boundary values strictly inside the domain before ``forward``."""
        arr = np.asarray(x, dtype=float)
        if self.kind == "log":
            return np.maximum(arr, np.finfo(float).tiny)
        if self.kind == "logit":
            eps = rel * (self.b - self.a)
            return np.clip(arr, self.a + eps, self.b - eps)
        return arr

    def to_dict(self) -> dict:
        return {"kind": self.kind, "a": self.a, "b": self.b}

    @classmethod
    def from_dict(cls, d: dict) -> "ResponseTransform":
        return cls(d["kind"], d.get("a"), d.get("b"))


def transform(x, t: ResponseTransform):
    return t.forward(x)


def inverse_transform(y, t: ResponseTransform):
    return t.inverse(y)


@dataclass(frozen=True)
class QuantileSet:
    probabilities: tuple[float, ...]
    values: tuple[float, ...]

    def __post_init__(self):
        if len(self.probabilities) != len(self.values):
            raise ShapeError("probabilities and values differ in length")

    def as_dict(self) -> dict:
        return {"probabilities": list(self.probabilities), "values": list(self.values)}


def quantile_set(samples, weights, probs: Sequence[float]) -> QuantileSet:
    vals = weighted_quantile(samples, weights, list(probs))
    return QuantileSet(tuple(float(p) for p in probs), tuple(float(v) for v in vals))


def f_tail_p(ratio: float, df1: int, df2: int) -> float:
    """Upper tail ``P(F(df1, df2) >= ratio)`` via the regularized incomplete beta."""
    if df1 <= 0 or df2 <= 0:
        raise InvalidDfError(f"degrees of freedom must be positive, got ({df1}, {df2})")
    if ratio <= 0:
        return 1.0
    if np.isinf(ratio):
        return 0.0
    x = df2 / (df2 + df1 * ratio)
    return float(special.betainc(df2 / 2.0, df1 / 2.0, x))
