"""Mergeable sample statistics and the few tests the estimators rely on."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import stats as _st


@dataclass
class Moments:
    """Running count / mean / centred cross-product matrix for vector samples.

    ``merge`` uses the pairwise (Chan et al.) update, so partial results from
    separate workers can be combined; merging in a fixed order gives
    bit-identical totals.
    """

    count: int
    mean: np.ndarray
    m2: np.ndarray  # sum of outer products of deviations

    @classmethod
    def empty(cls, dim: int) -> "Moments":
        return cls(0, np.zeros(dim), np.zeros((dim, dim)))

    @classmethod
    def from_samples(cls, x) -> "Moments":
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 1:
            x = x[:, None]
        mean = x.mean(axis=0)
        dev = x - mean
        return cls(len(x), mean, dev.T @ dev)

    def merge(self, other: "Moments") -> "Moments":
        if other.count == 0:
            return self
        if self.count == 0:
            return other
        n = self.count + other.count
        delta = other.mean - self.mean
        mean = self.mean + delta * (other.count / n)
        m2 = self.m2 + other.m2 + np.outer(delta, delta) * (self.count * other.count / n)
        return Moments(n, mean, m2)

    @property
    def covariance(self) -> np.ndarray:
        return self.m2 / (self.count - 1)

    @property
    def std_errs(self) -> np.ndarray:
        """Standard errors of the mean, componentwise."""
        return np.sqrt(np.diag(self.covariance) / self.count)

    @property
    def mean_covariance(self) -> np.ndarray:
        """Covariance matrix of the sample mean."""
        return self.covariance / self.count


def merge_all(parts) -> Moments:
    parts = list(parts)
    total = parts[0]
    for p in parts[1:]:
        total = total.merge(p)
    return total


def batch_means(increments, steps=None, n_batches: int = 30) -> tuple[np.ndarray, np.ndarray]:
    """Per-step growth rate and its covariance from contiguous batch means.

    ``increments`` is (n_blocks, d): the log growth accumulated over each
    block, which spans ``steps[i]`` time steps (1 when omitted).  Blocks are
    grouped into ``n_batches`` contiguous batches of near-equal length.
    """
    x = np.asarray(increments, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    w = np.ones(len(x)) if steps is None else np.asarray(steps, dtype=np.float64)
    if len(x) < n_batches:
        raise ValueError(f"need at least {n_batches} blocks for batch means, got {len(x)}")
    rates = np.array([xb.sum(axis=0) / wb.sum()
                      for xb, wb in zip(np.array_split(x, n_batches), np.array_split(w, n_batches))])
    cov = np.atleast_2d(np.cov(rates, rowvar=False)) / n_batches
    total = np.array([math.fsum(col) for col in x.T])
    return total / math.fsum(w), cov


def combined_se(*std_errs) -> np.ndarray:
    return np.sqrt(sum(np.square(s) for s in std_errs))


@dataclass(frozen=True)
class KSResult:
    statistic: float
    pvalue: float


def ks_two_sample(a, b) -> KSResult:
    """Two-sample Kolmogorov-Smirnov test with the asymptotic p-value."""
    res = _st.ks_2samp(np.asarray(a), np.asarray(b), method="asymp")
    return KSResult(float(res.statistic), float(res.pvalue))
